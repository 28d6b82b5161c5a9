#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pairaug/corpus.hpp"
#include "pairaug/diffusion.hpp"
#include "pairaug/editor.hpp"
#include "pairaug/vlp.hpp"

namespace pairaug::pipeline {

using nn::Tensor;

/// Which branches a run executes. Disabling a branch removes exactly its
/// provenance tag from every downstream manifest.
struct BranchFlags {
  bool interaug = true;
  bool intraaug = true;
  bool prune_a = true;
  bool prune_e = true;
  bool baseline_img = false;
  bool baseline_text = false;
};

/// Fully resolved run settings. Defaults follow the reference generation
/// setup: guidance w = 4, tau = 0.3, eps = 0.003, eta = 0.5.
struct PipelineConfig {
  // corpus
  std::string corpus_name = "toy";
  int corpus_count = 2000;
  int eval_count = 400;
  uint64_t corpus_seed = 0;
  double healthy_frac = 0.30;
  double second_finding_frac = 0.35;
  // report rewriting
  std::string textaug_mode = "flip";  // flip | external (external falls back per flag)
  int flips = 1;
  bool llm_fallback = true;
  std::string llm_host = "127.0.0.1";
  int llm_port = 0;
  std::string llm_path = "/rewrite";
  // diffusion model and sampler
  int64_t diff_base = 12;
  int64_t diff_groups = 6;
  int64_t diff_T = 1000;
  int diff_train_steps = 1500;
  int diff_batch = 8;
  double diff_lr = 2e-3;
  int64_t sample_steps = 50;
  int64_t sample_batch = 16;
  double guidance = 4.0;
  // edit and pruning
  double eta = 0.5;
  double tau = 0.3;
  double epsilon = 0.003;
  int mult_inter = 1;  // synthetic pairs per source record and branch
  int mult_intra = 1;
  // dual encoders (frozen scorer and the evaluated VLP share one shape)
  int64_t vlp_d_model = 64;
  int64_t vlp_embed_dim = 64;
  int64_t vlp_blocks = 2;
  int64_t vlp_patch = 8;
  int vlp_epochs = 10;
  int vlp_batch = 64;
  double vlp_lr = 1e-3;
  int scorer_epochs = 10;
  // evaluation
  int ablation_seeds = 3;
  int bootstrap = 200;
  // run
  BranchFlags branches;
  uint64_t seed = 1;
  std::string out_root = "runs/out";
  int workers = 1;
};

/// Parses a plain-text config: one dotted `key = value` per line, `#`
/// comments. Unknown keys or unparsable values raise SchemaError. Values
/// apply over the defaults above.
PipelineConfig parse_config(const std::string& text);
PipelineConfig parse_config_file(const std::filesystem::path& path);

/// Canonical resolved dump, one sorted `key = value` per line. Feeding the
/// dump back through parse_config reproduces the config exactly.
std::string dump_config(const PipelineConfig& cfg);

struct LedgerEntry {
  std::string stage;
  std::map<std::string, std::string> inputs;  // label -> content hash
  std::string output_hash;
  int64_t n_in = 0;
  int64_t n_out = 0;
  double wall_ms = 0.0;
  uint64_t seed = 0;
};

/// Append-only run accounting; one writer (the orchestrator thread).
struct RunLedger {
  std::vector<LedgerEntry> entries;
  const LedgerEntry* find(const std::string& stage) const;
  std::string to_json() const;
};

/// Separable Gaussian blur with reflected borders; sigma below 1e-6 returns
/// the input unchanged.
Tensor<float> gaussian_blur(const Tensor<float>& img, double sigma);

/// Seeded baseline image augmentation: random crop-and-resize, Gaussian
/// blur, and contrast compression toward the mean (the grayscale-domain
/// stand-in for desaturation).
Tensor<float> augment_image(const Tensor<float>& img, uint64_t seed);

struct EvalReport {
  double mean_auc = 0.0;
  std::array<double, corpus::kNumFindings> per_auc{};
  double mean_acc = 0.0;
  double mean_f1 = 0.0;
  double ci_lo = 0.0;  // bootstrap CI of the per-finding AUC mean
  double ci_hi = 0.0;
  int64_t n_train = 0;
  int64_t n_eval = 0;
  uint64_t seed = 0;
  std::string to_json() const;
};

struct AblationRow {
  std::string name;
  std::vector<double> aucs;  // one per evaluation seed
  double mean_auc = 0.0;
  double delta = 0.0;  // vs the base row
};

struct SweepRow {
  std::string param;  // "tau" | "eps"
  double value = 0.0;
  int64_t kept = 0;
  double mean_auc = 0.0;
};

struct RunSummary {
  EvalReport base;
  EvalReport pairaug;
  double delta = 0.0;
  int64_t n_inter_raw = 0;    // |omega_a|
  int64_t n_inter_kept = 0;   // |omega_a^|
  int64_t n_intra_raw = 0;    // |omega_e|
  int64_t n_intra_kept = 0;   // |omega_e'|
  int64_t n_synthetic = 0;    // |omega_s~|
};

/// Orchestrates the full augmentation pipeline under one output root.
/// Heavy stages (corpus, diffusion training, scorer training, candidate
/// generation) cache their outputs keyed by input hashes, so reruns and
/// threshold sweeps reuse them; pruning and evaluation always recompute.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg);
  ~Pipeline();

  const PipelineConfig& config() const { return cfg_; }
  const std::filesystem::path& root() const { return root_; }
  const RunLedger& ledger() const { return ledger_; }

  /// Stage accessors; each builds (or loads from cache) on first use.
  const corpus::Manifest& train_manifest();
  const corpus::Manifest& eval_manifest();
  const diffusion::DiffusionModel<float>& t2i();
  const vlp::DualEncoder<float>& scorer();

  /// InterAug: rewrite + generate per source, score, prune at tau (skipped
  /// when the prune_a branch is off). Returns the kept manifest; the raw
  /// candidate set is cached with its scores under synthetic/.
  corpus::Manifest run_interaug();

  /// IntraAug: flip rewrite + attention-swap edit per source, hybrid
  /// consistency scores against the generated reference pair, prune at
  /// eps (skipped when prune_e is off). Reference images are stored next
  /// to the edited ones as "<case_id>-ref.patn".
  corpus::Manifest run_intraaug();

  /// Concatenates the two kept sets; case ids must be disjoint.
  static corpus::Manifest merge_synthetic(const corpus::Manifest& inter,
                                          const corpus::Manifest& intra);

  /// Baseline augmentations over the training corpus: "aug-img",
  /// "aug-text", or "both".
  corpus::Manifest run_baseline(const std::string& kind);

  /// Trains a fresh VLP on the training corpus plus `extra` records (their
  /// images resolved against extra_dir) and evaluates zero-shot on the
  /// eval corpus.
  EvalReport train_and_eval(const std::vector<corpus::CaseRecord>& extra,
                            const std::filesystem::path& extra_dir, uint64_t run_seed);

  /// Six-row ablation at `ablation_seeds` fixed seeds per row:
  /// base, +InterAug, +InterAug+Pr_a, +IntraAug, +IntraAug+Pr_e, full.
  std::vector<AblationRow> run_ablation();

  /// Re-prunes the cached candidate sets at each threshold (no image
  /// regeneration), then trains + evaluates per row.
  std::vector<SweepRow> sweep_thresholds(const std::vector<double>& taus,
                                         const std::vector<double>& epses);

  /// Embeds sampled records (capped per provenance tag) with the scorer
  /// and writes principal-component 2-D coordinates as CSV rows
  /// {x, y, modality, provenance}.
  void emit_projection(const std::vector<std::filesystem::path>& manifest_paths,
                       int per_provenance, uint64_t seed, const std::filesystem::path& out_csv);

  /// Full Eq.-1 run: branches, merge, Base vs Base+PairAug evaluation.
  /// Writes manifests, eval JSON, the ledger, and the resolved config
  /// under the output root.
  RunSummary run_all();

  static std::string write_ablation_csv(const std::vector<AblationRow>& rows);
  static std::string write_sweep_csv(const std::vector<SweepRow>& rows);

 private:
  struct Candidates;  // raw branch outputs plus scores and image dirs

  const Candidates& interaug_candidates();
  const Candidates& intraaug_candidates();
  corpus::Manifest prune_interaug(const Candidates& cand, double tau, bool enabled);
  corpus::Manifest prune_intraaug(const Candidates& cand, double eps, bool enabled);
  std::string corpus_hash();
  void save_synthetic(const corpus::Manifest& m, const std::string& basename);

  PipelineConfig cfg_;
  std::filesystem::path root_;
  RunLedger ledger_;
  std::optional<corpus::Manifest> train_;
  std::optional<corpus::Manifest> eval_;
  std::optional<diffusion::DiffusionModel<float>> t2i_;
  std::optional<vlp::DualEncoder<float>> scorer_;
  std::unique_ptr<Candidates> inter_cand_;
  std::unique_ptr<Candidates> intra_cand_;
  std::string corpus_hash_;
  std::string t2i_hash_;
  std::string scorer_hash_;
};

}  // namespace pairaug::pipeline
