#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <doctest.h>

#include "pairaug/corpus.hpp"
#include "pairaug/diffusion.hpp"
#include "pairaug/editor.hpp"
#include "pairaug/rng.hpp"
#include "pairaug/tokenizer.hpp"

using namespace pairaug;
using nn::Tensor;

namespace {

diffusion::DenoiserConfig tiny_config() {
  diffusion::DenoiserConfig cfg;
  cfg.base = 4;
  cfg.mults = {1, 2};
  cfg.attn_levels = {1};
  cfg.norm_groups = 2;
  cfg.temb_dim = 8;
  cfg.txt_dim = 8;
  cfg.image_size = corpus::kImageSize;
  cfg.vocab_size = diffusion::default_tokenizer().vocab_size();
  cfg.param_seed = 7;
  return cfg;
}

corpus::Manifest tiny_manifest(int count, uint64_t seed) {
  corpus::SampleConfig sc;
  sc.name = "edit";
  sc.count = count;
  sc.seed = seed;
  return corpus::sample_corpus(sc);
}

/// Shared model trained once on a small paired corpus.
diffusion::DiffusionModel<float>& trained_tiny() {
  static diffusion::DiffusionModel<float> model = [] {
    diffusion::DiffusionModel<float> m(tiny_config(),
                                       diffusion::NoiseSchedule::linear(100, 1e-4, 0.04, 10));
    auto man = tiny_manifest(24, 31);
    std::vector<Tensor<float>> images;
    std::vector<std::string> reports;
    for (size_t i = 0; i < man.records.size(); ++i) {
      images.push_back(corpus::render_case(man.records[i].findings, derive_seed(31, "img", i)));
      reports.push_back(man.records[i].report);
    }
    diffusion::TrainDiffusionConfig tc;
    tc.steps = 120;
    tc.batch = 8;
    tc.seed = 17;
    diffusion::train_diffusion(m, images, reports, tc);
    return m;
  }();
  return model;
}

/// Two reports over different findings, from the shared manifest.
std::pair<std::string, std::string> report_pair() {
  static const auto man = tiny_manifest(2, 77);
  return {man.records[0].report, man.records[1].report};
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  return a.same_shape(b) && a.data == b.data;
}

}  // namespace

TEST_CASE("swap_rule: boundary selection, purity, validation") {
  Tensor<float> orig({2, 3});
  Tensor<float> mod({2, 3});
  for (int i = 0; i < 6; ++i) {
    orig.data[static_cast<size_t>(i)] = static_cast<float>(i);
    mod.data[static_cast<size_t>(i)] = static_cast<float>(10 + i);
  }
  const auto orig_copy = orig.data;
  const auto mod_copy = mod.data;

  // eta = 1: t / T < 1 holds for every valid t, so the modified map always wins.
  for (int64_t t : {int64_t{0}, int64_t{50}, int64_t{99}})
    CHECK(&editor::swap_rule(orig, mod, t, 100, {1.0}) == &mod);
  // eta = 0: the strict inequality never holds.
  for (int64_t t : {int64_t{0}, int64_t{50}, int64_t{99}})
    CHECK(&editor::swap_rule(orig, mod, t, 100, {0.0}) == &orig);
  // eta = 0.5 with T = 100 cuts strictly at t = 50.
  CHECK(&editor::swap_rule(orig, mod, 49, 100, {0.5}) == &mod);
  CHECK(&editor::swap_rule(orig, mod, 50, 100, {0.5}) == &orig);
  CHECK(&editor::swap_rule(orig, mod, 51, 100, {0.5}) == &orig);

  // Pure: neither input is touched.
  CHECK(orig.data == orig_copy);
  CHECK(mod.data == mod_copy);

  Tensor<float> transposed({3, 2});
  CHECK_THROWS_AS((void)editor::swap_rule(orig, transposed, 10, 100, {0.5}), ValidationError);
  CHECK_THROWS_AS((void)editor::swap_rule(orig, mod, -1, 100, {0.5}), ValidationError);
  CHECK_THROWS_AS((void)editor::swap_rule(orig, mod, 100, 100, {0.5}), ValidationError);
  CHECK_THROWS_AS((void)editor::swap_rule(orig, mod, 0, 0, {0.5}), ValidationError);
  CHECK_THROWS_AS((void)editor::swap_rule(orig, mod, 10, 100, {1.5}), ValidationError);
  CHECK_THROWS_AS((void)editor::swap_rule(orig, mod, 10, 100, {-0.1}), ValidationError);
}

TEST_CASE("edit: identity rewrite reproduces the reference bit for bit") {
  auto& model = trained_tiny();
  const auto [report, _] = report_pair();
  const auto res = editor::edit(model, report, report, 5, {0.5}, 6, 2.0);

  CHECK(same_bits(res.edited, res.reference));
  REQUIRE(res.edit_trace.maps.size() == res.ref_trace.maps.size());
  for (size_t i = 0; i < res.ref_trace.maps.size(); ++i) {
    const auto& a = res.ref_trace.maps[i];
    const auto& b = res.edit_trace.maps[i];
    CHECK(a.layer == b.layer);
    CHECK(a.t == b.t);
    CHECK(a.key_valid == b.key_valid);
    CHECK(a.probs.data == b.probs.data);
  }
}

TEST_CASE("edit: eta 1 reproduces plain sampling of both reports") {
  auto& model = trained_tiny();
  const auto [report, rewritten] = report_pair();
  const uint64_t seed = 11;
  const int64_t steps = 6;
  const double w = 2.0;

  const auto res = editor::edit(model, report, rewritten, seed, {1.0}, steps, w);
  CHECK(same_bits(res.edited, diffusion::sample(model, rewritten, seed, steps, w).image));
  CHECK(same_bits(res.reference, diffusion::sample(model, report, seed, steps, w).image));

  // The reference leg never depends on the rewrite.
  const auto other = editor::edit(model, report, report + " .", seed, {1.0}, steps, w);
  CHECK(same_bits(res.reference, other.reference));
}

TEST_CASE("edit: eta 0 pins every reference map while the image changes") {
  auto& model = trained_tiny();
  const auto [report, rewritten] = report_pair();
  const auto res = editor::edit(model, report, rewritten, 13, {0.0}, 6, 2.0);

  REQUIRE(res.edit_trace.maps.size() == res.ref_trace.maps.size());
  for (size_t i = 0; i < res.ref_trace.maps.size(); ++i) {
    CHECK(res.edit_trace.maps[i].probs.data == res.ref_trace.maps[i].probs.data);
    // Injected maps carry the mask that shaped them.
    CHECK(res.edit_trace.maps[i].key_valid == res.ref_trace.maps[i].key_valid);
  }
  // Values still come from the rewritten report, so the image moves.
  CHECK_FALSE(same_bits(res.edited, res.reference));
}

TEST_CASE("edit: eta 0.5 swaps exactly the high-noise steps") {
  auto& model = trained_tiny();
  const auto [report, rewritten] = report_pair();
  const int64_t steps = 8;
  const uint64_t seed = 19;
  const double w = 2.0;
  const auto res = editor::edit(model, report, rewritten, seed, {0.5}, steps, w);

  const auto grid = model.sched.inference_grid(steps);
  const int layers = model.attn_layer_count();
  REQUIRE(res.edit_trace.steps == steps);
  REQUIRE(res.edit_trace.layers == layers);
  REQUIRE(res.edit_trace.maps.size() == static_cast<size_t>(steps) * layers);

  const auto valid_ref =
      text::Tokenizer::valid_mask(diffusion::encode_report(model.cfg, report));
  const auto valid_edit =
      text::Tokenizer::valid_mask(diffusion::encode_report(model.cfg, rewritten));

  size_t tail_diffs = 0;
  for (size_t i = 0; i < res.edit_trace.maps.size(); ++i) {
    const auto& m = res.edit_trace.maps[i];
    const size_t step = i / static_cast<size_t>(layers);
    CHECK(m.layer == static_cast<int>(i % static_cast<size_t>(layers)));
    CHECK(m.t == grid[step]);

    const bool injected = static_cast<double>(m.t) / 100.0 >= 0.5;
    if (injected) {
      CHECK(m.probs.data == res.ref_trace.maps[i].probs.data);
      CHECK(m.key_valid == valid_ref);
    } else {
      CHECK(m.key_valid == valid_edit);
      tail_diffs += m.probs.data != res.ref_trace.maps[i].probs.data;
    }

    // Row-stochastic with exact zeros on masked columns.
    const int64_t q = m.probs.dim(0), l = m.probs.dim(1);
    for (int64_t r = 0; r < q; ++r) {
      double sum = 0.0;
      for (int64_t c = 0; c < l; ++c) {
        const float p = m.probs.data[static_cast<size_t>(r * l + c)];
        if (!m.key_valid[static_cast<size_t>(c)]) CHECK(p == 0.0f);
        sum += p;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
  // With t on a T = 100 schedule and grid {99,84,70,56,42,28,14,0}, four
  // steps inject and four run free; the free ones have diverged.
  CHECK(tail_diffs > 0);

  CHECK_FALSE(same_bits(res.edited, res.reference));
  CHECK_FALSE(same_bits(res.edited, diffusion::sample(model, rewritten, seed, steps, w).image));

  // Determinism: the full result reproduces bitwise.
  const auto again = editor::edit(model, report, rewritten, seed, {0.5}, steps, w);
  CHECK(same_bits(res.edited, again.edited));
  CHECK(same_bits(res.reference, again.reference));
  for (size_t i = 0; i < res.edit_trace.maps.size(); ++i)
    CHECK(res.edit_trace.maps[i].probs.data == again.edit_trace.maps[i].probs.data);
}

TEST_CASE("edit: state and validation errors") {
  diffusion::DiffusionModel<float> fresh(tiny_config(),
                                         diffusion::NoiseSchedule::linear(100, 1e-4, 0.04, 10));
  const auto [report, rewritten] = report_pair();
  CHECK_THROWS_AS((void)editor::edit(fresh, report, rewritten, 1, {0.5}, 6, 2.0), StateError);

  auto& model = trained_tiny();
  std::string overlong;
  for (int i = 0; i <= model.cfg.max_tokens; ++i) overlong += "left ";
  CHECK_THROWS_AS((void)editor::edit(model, report, overlong, 1, {0.5}, 6, 2.0), ValidationError);
  CHECK_THROWS_AS((void)editor::edit(model, overlong, report, 1, {0.5}, 6, 2.0), ValidationError);
  CHECK_THROWS_AS((void)editor::edit(model, report, rewritten, 1, {1.5}, 6, 2.0), ValidationError);
  CHECK_THROWS_AS(
      (void)editor::edit(model, report, rewritten, 1, {0.5}, 6,
                         std::numeric_limits<double>::infinity()),
      ValidationError);
}

TEST_CASE("run_intraaug_batch: records, lineage, determinism") {
  auto& model = trained_tiny();
  const auto man = tiny_manifest(3, 41);

  editor::IntraAugConfig cfg;
  cfg.flips = 1;
  cfg.steps = 6;
  cfg.guidance = 2.0;
  cfg.seed = 9;

  CHECK(editor::run_intraaug_batch(model, {}, cfg).empty());

  const auto items = editor::run_intraaug_batch(model, man.records, cfg);
  REQUIRE(items.size() == man.records.size());
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& src = man.records[i];
    const auto& it = items[i];
    CHECK(it.record.provenance == "intraaug");
    CHECK(it.record.patient_id == src.patient_id);
    CHECK(it.record.source_case_id == src.case_id);
    CHECK(it.record.case_id != src.case_id);
    CHECK(it.record.report != src.report);
    CHECK(it.record.image_path.empty());
    CHECK(it.record.scores.empty());

    int label_diffs = 0;
    for (int f = 0; f < corpus::kNumFindings; ++f)
      label_diffs += it.record.labels[static_cast<size_t>(f)] != src.labels[static_cast<size_t>(f)];
    CHECK(label_diffs == cfg.flips);
    // Ternary parse (+1 present, -1 negated, 0 silent) agrees on the positives.
    const auto parsed = corpus::parse_report(it.record.report);
    for (int f = 0; f < corpus::kNumFindings; ++f)
      CHECK((parsed[static_cast<size_t>(f)] == 1) ==
            (it.record.labels[static_cast<size_t>(f)] == 1));

    REQUIRE(it.edited.rank() == 3);
    CHECK(it.edited.dim(1) == corpus::kImageSize);
    CHECK(it.reference.dim(2) == corpus::kImageSize);
    for (float v : it.edited.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    CHECK_FALSE(same_bits(it.edited, it.reference));
  }

  // Bitwise reproducible, and item i ignores the rest of the batch.
  const auto again = editor::run_intraaug_batch(model, man.records, cfg);
  const auto solo = editor::run_intraaug_batch(model, {man.records[0]}, cfg);
  REQUIRE(again.size() == items.size());
  for (size_t i = 0; i < items.size(); ++i) {
    CHECK(again[i].record == items[i].record);
    CHECK(same_bits(again[i].edited, items[i].edited));
    CHECK(same_bits(again[i].reference, items[i].reference));
  }
  CHECK(solo[0].record == items[0].record);
  CHECK(same_bits(solo[0].edited, items[0].edited));

  // The worker pool only changes scheduling, never results.
  editor::IntraAugConfig pooled = cfg;
  pooled.workers = 2;
  const auto threaded = editor::run_intraaug_batch(model, man.records, pooled);
  REQUIRE(threaded.size() == items.size());
  for (size_t i = 0; i < items.size(); ++i) {
    CHECK(threaded[i].record == items[i].record);
    CHECK(same_bits(threaded[i].edited, items[i].edited));
    CHECK(same_bits(threaded[i].reference, items[i].reference));
  }

  diffusion::DiffusionModel<float> fresh(tiny_config(),
                                         diffusion::NoiseSchedule::linear(100, 1e-4, 0.04, 10));
  CHECK_THROWS_AS((void)editor::run_intraaug_batch(fresh, man.records, cfg), StateError);
}
