#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pairaug/corpus.hpp"

namespace pairaug::textaug {

/// Instruction sent along with rewrite requests to an external model.
inline constexpr const char* kRewriteInstruction =
    "generate one possible augmentation that is limited to 50 words while "
    "conveying partial opposite meanings";

struct FlipResult {
  corpus::CaseRecord record;
  std::vector<corpus::Finding> flipped;  // ascending by enum value
};

/// Rule-based rewriter: toggles exactly k of the six finding assertions and
/// writes a fresh report. Findings flipped off are explicitly negated;
/// findings flipped on get a seed-chosen severity in [0.5, 0.9]. The result
/// is a new-patient record (fresh case and patient ids, lineage in
/// source_case_id, provenance "interaug", no image). The label vector of
/// the result is at Hamming distance exactly k from the source.
FlipResult flip_findings(const corpus::CaseRecord& src, int k, uint64_t seed);

/// Label-preserving rewriter: regenerates the report from the same states
/// with different phrasing. The returned text always differs from
/// src.report.
std::string paraphrase(const corpus::CaseRecord& src, uint64_t seed);

// ---------------------------------------------------------------------------
// external rewriter client
// ---------------------------------------------------------------------------

struct LlmConfig {
  std::string host = "127.0.0.1";
  int port = 0;
  std::string path = "/rewrite";
  int timeout_ms = 3000;
  int max_retries = 2;  // additional attempts after the first failure
};

struct RewriteOutcome {
  bool accepted = false;
  std::string reject_reason;  // "empty" | "vocabulary" | "unchanged" when rejected
  corpus::CaseRecord record;  // populated only when accepted
  std::string sanitized;      // post-filter text, also set for rejections
  double oov_frac = 0.0;      // fraction of words dropped by the vocabulary filter
};

/// Cleans raw model output: lowercases, separates "." into its own token,
/// strips other punctuation, drops out-of-vocabulary words, and truncates to
/// the word cap at a sentence boundary.
std::string sanitize_rewrite(const std::string& raw, double* oov_frac = nullptr);

/// POSTs {"report", "instruction", "seed"} as JSON to the configured
/// endpoint and expects {"text": "..."} back. Transport failures and non-200
/// statuses are retried max_retries times, then raise IoError; a 200 with a
/// malformed body raises SchemaError. The reply is sanitized and accepted
/// only if it is non-empty, at most 30% of its words were out of vocabulary,
/// and its parsed labels differ from the source's.
RewriteOutcome external_rewrite(const corpus::CaseRecord& src, const LlmConfig& cfg,
                                uint64_t seed);

}  // namespace pairaug::textaug
