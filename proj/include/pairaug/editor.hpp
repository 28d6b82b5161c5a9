#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pairaug/corpus.hpp"
#include "pairaug/diffusion.hpp"

namespace pairaug::editor {

using nn::Tensor;

/// Attention swap window. While the normalized diffusion time t / T is at or
/// above eta (the high-noise phase) the edited trajectory reuses the
/// reference trajectory's cross-attention maps, which pins the spatial
/// layout; below eta it switches to its own maps so the rewritten finding
/// can take shape.
struct SwapSchedule {
  double eta = 0.5;
};

/// Picks the map the edited pass should use at diffusion time t of a T-step
/// schedule: `modified` when t / T < eta, `original` otherwise. Returns one
/// of the two inputs by reference and never mutates either.
const Tensor<float>& swap_rule(const Tensor<float>& original, const Tensor<float>& modified,
                               int64_t t, int64_t T, const SwapSchedule& schedule);

struct EditResult {
  Tensor<float> edited;     // [1,H,W] image sampled for the edited report
  Tensor<float> reference;  // [1,H,W] image sampled for the source report
  diffusion::AttentionTrace ref_trace;   // maps recorded on the reference pass
  diffusion::AttentionTrace edit_trace;  // post-swap maps the edited pass used
};

/// Attention-swap edit. Samples a reference image from `report`, then replays
/// the identical starting noise for `edited_report` while substituting the
/// recorded reference maps per `swap_rule`. Both passes run the exact
/// computation `diffusion::sample` runs, so eta = 1 reproduces plain
/// sampling bit for bit. Reports longer than the token budget are rejected
/// rather than silently truncated.
EditResult edit(const diffusion::DiffusionModel<float>& model, const std::string& report,
                const std::string& edited_report, uint64_t seed, const SwapSchedule& schedule,
                int64_t steps, double guidance);

struct IntraAugConfig {
  int flips = 1;  // finding assertions toggled per variant
  SwapSchedule schedule{};
  int64_t steps = 50;
  double guidance = 4.0;
  uint64_t seed = 1;
  int workers = 1;  // records edited in parallel; output is order-stable
};

struct IntraAugItem {
  corpus::CaseRecord record;  // same patient as the source, provenance "intraaug"
  Tensor<float> edited;       // candidate image for the rewritten report
  Tensor<float> reference;    // paired image from the same noise and source report
};

/// Produces one same-patient variant per source case: a flip rewrite of the
/// report plus an attention-swap edit of the image. Item i depends only on
/// sources[i] and (seed, i), never on the rest of the batch.
std::vector<IntraAugItem> run_intraaug_batch(const diffusion::DiffusionModel<float>& model,
                                             const std::vector<corpus::CaseRecord>& sources,
                                             const IntraAugConfig& cfg);

}  // namespace pairaug::editor
