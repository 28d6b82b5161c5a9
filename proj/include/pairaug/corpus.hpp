#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pairaug/tensor.hpp"

namespace pairaug::corpus {

inline constexpr int kNumFindings = 6;
inline constexpr int kImageSize = 64;
inline constexpr int kMaxReportWords = 50;

enum class Finding : int {
  kEdema = 0,
  kConsolidation,
  kEffusion,
  kCardiomegaly,
  kPneumothorax,
  kAtelectasis,
};

const char* finding_name(Finding k);
Finding finding_from_name(const std::string& name);

struct FindingState {
  bool present = false;
  double severity = 0.0;  // in [0.35, 1] when present, 0 otherwise

  bool operator==(const FindingState&) const = default;
};

using FindingStates = std::array<FindingState, kNumFindings>;

struct CaseRecord {
  std::string case_id;
  std::string patient_id;
  std::string report;
  FindingStates findings{};
  std::array<int, kNumFindings> labels{};
  std::string provenance;  // "real", "interaug", "intraaug", ...
  std::string image_path;  // relative to the manifest directory
  std::map<std::string, double> scores;
  std::string source_case_id;  // lineage for derived records, empty otherwise

  bool operator==(const CaseRecord&) const = default;
};

struct Manifest {
  std::string name;
  std::string split;
  uint64_t seed = 0;
  int image_size = kImageSize;
  std::vector<CaseRecord> records;
};

// ---------------------------------------------------------------------------
// procedural renderer
// ---------------------------------------------------------------------------

/// Renders the 64x64 grayscale image for a finding configuration. The base
/// anatomy (body, lungs, rib texture, heart) is jittered and noised from
/// `render_seed`; finding overlays are anchored to fixed nominal geometry so
/// that the per-finding masks below are valid for every seed.
nn::Tensor<float> render_case(const FindingStates& st, uint64_t render_seed);

/// Maximum-extent support of one finding's image effect, dilated by two
/// pixels: for any fixed render seed and any severities, the difference
/// between renders that differ only in finding `k` is zero outside this
/// mask. 64x64 bytes, 1 = inside.
const std::vector<uint8_t>& finding_mask(Finding k);

/// Direction of the finding's effect on mean intensity inside its mask:
/// +1 brightens, -1 darkens.
int finding_sign(Finding k);

// ---------------------------------------------------------------------------
// report grammar
// ---------------------------------------------------------------------------

/// Writes a lowercase, period-tokenized report for the given states. Present
/// findings are described in enum order with a severity adjective; findings
/// listed in `forced_negations` are explicitly negated (they must be absent
/// in `st`); a seed-chosen handful of other absent findings may be negated
/// spontaneously. The result stays within kMaxReportWords words, dropping
/// the opening phrase and spontaneous negations first if space is short.
std::string write_report(const FindingStates& st, uint64_t text_seed,
                         const std::vector<Finding>& forced_negations = {});

/// Rule-based label extraction, the oracle inverse of write_report: per
/// finding, +1 asserted present, -1 asserted absent, 0 unmentioned. When a
/// finding is mentioned more than once the last sentence wins.
std::array<int, kNumFindings> parse_report(const std::string& report);

/// Number of words in a report, excluding "." tokens.
int word_count(const std::string& report);

/// Every word the grammar can emit (sorted, unique). The tokenizer builds
/// its vocabulary from this list.
std::vector<std::string> grammar_words();

struct PromptPair {
  std::string positive;
  std::string negative;
};

/// Fixed sentences used as zero-shot classification prompts for one
/// finding: the first positive template at moderate severity, and the
/// first negation template.
PromptPair prompt_pair(Finding k);

// ---------------------------------------------------------------------------
// sampling and persistence
// ---------------------------------------------------------------------------

struct SampleConfig {
  std::string name = "toy";
  std::string split = "train";
  int count = 100;
  uint64_t seed = 0;
  double healthy_frac = 0.30;     // cases with no findings
  double second_finding_frac = 0.35;  // diseased cases that get a second finding
};

/// Draws a corpus of paired cases. Records get case ids "<name>-<split>-NNNNNN"
/// and one patient per case; images are not rendered here (see
/// materialize_images).
Manifest sample_corpus(const SampleConfig& cfg);

/// Renders every record that has an empty image_path into
/// dir/images/<case_id>.patn and fills in the relative path.
void materialize_images(const std::filesystem::path& dir, Manifest& m);

/// JSONL manifest: one header line (schema, identity, count, checksum over
/// the record lines), then one record per line.
void save_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest load_manifest(const std::filesystem::path& path);

/// save_manifest with extra string fields appended to each record line
/// (extras[i] belongs to records[i]); the loader ignores unknown fields.
/// Keys must not collide with the standard record fields.
void save_manifest(const std::filesystem::path& path, const Manifest& m,
                   const std::vector<std::map<std::string, std::string>>& extras);

/// Loads the image of one record, resolving image_path against base_dir.
nn::Tensor<float> load_case_image(const std::filesystem::path& base_dir, const CaseRecord& rec);

/// Loads all images of a manifest in record order.
std::vector<nn::Tensor<float>> load_images(const std::filesystem::path& base_dir,
                                           const Manifest& m);

}  // namespace pairaug::corpus
