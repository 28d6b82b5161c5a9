#include "pairaug/editor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include "pairaug/common.hpp"
#include "pairaug/rng.hpp"
#include "pairaug/textaug.hpp"
#include "pairaug/tokenizer.hpp"

namespace pairaug::editor {
namespace {

int64_t word_count(const std::string& text) {
  std::istringstream in(text);
  std::string word;
  int64_t n = 0;
  while (in >> word) ++n;
  return n;
}

void check_eta(double eta) {
  PAIRAUG_VALIDATE(std::isfinite(eta) && eta >= 0.0 && eta <= 1.0, "eta must lie in [0, 1], got ",
                   eta);
}

}  // namespace

const Tensor<float>& swap_rule(const Tensor<float>& original, const Tensor<float>& modified,
                               int64_t t, int64_t T, const SwapSchedule& schedule) {
  PAIRAUG_VALIDATE(T > 0 && t >= 0 && t < T, "swap_rule needs 0 <= t < T, got t=", t, " T=", T);
  check_eta(schedule.eta);
  PAIRAUG_VALIDATE(original.same_shape(modified), "swap_rule maps must share a shape");
  const double frac = static_cast<double>(t) / static_cast<double>(T);
  return frac < schedule.eta ? modified : original;
}

EditResult edit(const diffusion::DiffusionModel<float>& model, const std::string& report,
                const std::string& edited_report, uint64_t seed, const SwapSchedule& schedule,
                int64_t steps, double guidance) {
  PAIRAUG_CHECK(model.trained, StateError, "edit requires a trained checkpoint");
  PAIRAUG_VALIDATE(std::isfinite(guidance), "guidance must be finite");
  check_eta(schedule.eta);
  for (const std::string* r : {&report, &edited_report})
    PAIRAUG_VALIDATE(word_count(*r) <= model.cfg.max_tokens, "report of ", word_count(*r),
                     " words exceeds the ", model.cfg.max_tokens,
                     "-token budget; refusing to truncate an edit");

  const int layers = model.attn_layer_count();
  const auto grid = model.sched.inference_grid(steps);
  const int64_t T = model.sched.T;

  const auto ids_ref = diffusion::encode_report(model.cfg, report);
  const auto valid_ref = text::Tokenizer::valid_mask(ids_ref);
  const auto ids_edit = diffusion::encode_report(model.cfg, edited_report);
  const auto valid_edit = text::Tokenizer::valid_mask(ids_edit);

  EditResult res;
  res.ref_trace.steps = steps;
  res.ref_trace.layers = layers;
  res.edit_trace.steps = steps;
  res.edit_trace.layers = layers;

  diffusion::MapHook<float> record = [&](int layer, int64_t, Tensor<float>& probs) {
    const size_t step = res.ref_trace.maps.size() / static_cast<size_t>(layers);
    PAIRAUG_CHECK(step < grid.size(), StateError, "reference attention trace overflow");
    diffusion::CrossAttentionMap m;
    m.layer = layer;
    m.t = grid[step];
    m.probs = probs;
    m.key_valid = valid_ref;
    res.ref_trace.maps.push_back(std::move(m));
  };
  Tensor<float> x_ref =
      diffusion::guided_trajectory(model, ids_ref, valid_ref, 1, steps, guidance,
                                   diffusion::initial_noise(model.cfg, seed, 1), &record);
  PAIRAUG_CHECK(res.ref_trace.maps.size() == static_cast<size_t>(steps * layers), StateError,
                "incomplete reference attention trace");

  diffusion::MapHook<float> swap = [&](int layer, int64_t, Tensor<float>& probs) {
    const size_t idx = res.edit_trace.maps.size();
    const size_t step = idx / static_cast<size_t>(layers);
    PAIRAUG_CHECK(step < grid.size() && layer == static_cast<int>(idx % static_cast<size_t>(layers)),
                  StateError, "edited pass diverged from the reference attention order");
    const int64_t t = grid[step];
    const Tensor<float>& chosen = swap_rule(res.ref_trace.maps[idx].probs, probs, t, T, schedule);
    const bool injected = &chosen != &probs;
    if (injected) probs = chosen;
    diffusion::CrossAttentionMap m;
    m.layer = layer;
    m.t = t;
    m.probs = probs;
    // An injected map's zero columns follow the mask that shaped it.
    m.key_valid = injected ? valid_ref : valid_edit;
    res.edit_trace.maps.push_back(std::move(m));
  };
  Tensor<float> x_edit =
      diffusion::guided_trajectory(model, ids_edit, valid_edit, 1, steps, guidance,
                                   diffusion::initial_noise(model.cfg, seed, 1), &swap);
  PAIRAUG_CHECK(res.edit_trace.maps.size() == static_cast<size_t>(steps * layers), StateError,
                "incomplete edited attention trace");

  res.reference = diffusion::to_image(x_ref, 0);
  res.edited = diffusion::to_image(x_edit, 0);
  return res;
}

std::vector<IntraAugItem> run_intraaug_batch(const diffusion::DiffusionModel<float>& model,
                                             const std::vector<corpus::CaseRecord>& sources,
                                             const IntraAugConfig& cfg) {
  PAIRAUG_CHECK(model.trained, StateError, "intraaug requires a trained checkpoint");
  std::vector<IntraAugItem> out(sources.size());
  parallel_for(static_cast<int64_t>(sources.size()), cfg.workers, [&](int64_t i) {
    const auto& src = sources[static_cast<size_t>(i)];
    auto flip =
        textaug::flip_findings(src, cfg.flips, derive_seed(cfg.seed, "flip", static_cast<uint64_t>(i)));

    IntraAugItem item;
    item.record = std::move(flip.record);
    item.record.provenance = "intraaug";
    item.record.patient_id = src.patient_id;  // same-patient variant, unlike flip's default
    item.record.source_case_id = src.case_id;
    item.record.image_path.clear();
    item.record.scores.clear();

    auto edited = edit(model, src.report, item.record.report,
                       derive_seed(cfg.seed, "edit", static_cast<uint64_t>(i)), cfg.schedule,
                       cfg.steps, cfg.guidance);
    item.edited = std::move(edited.edited);
    item.reference = std::move(edited.reference);
    out[static_cast<size_t>(i)] = std::move(item);
  });
  return out;
}

}  // namespace pairaug::editor
