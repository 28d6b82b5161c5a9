#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include <doctest.h>

#include "pairaug/corpus.hpp"
#include "pairaug/pruning.hpp"
#include "pairaug/rng.hpp"
#include "pairaug/textaug.hpp"
#include "pairaug/tokenizer.hpp"
#include "pairaug/vlp.hpp"

using namespace pairaug;
using nn::Tensor;

namespace {

const text::Tokenizer& tokenizer() {
  static text::Tokenizer tok;
  return tok;
}

vlp::DualEncoder<float> tiny_scorer() {
  vlp::VlpConfig cfg;
  cfg.d_model = 16;
  cfg.embed_dim = 16;
  cfg.n_blocks = 1;
  cfg.patch = 16;
  cfg.vocab_size = tokenizer().vocab_size();
  cfg.param_seed = 31;
  return vlp::DualEncoder<float>(cfg);
}

/// Reference filter for one criterion.
std::vector<size_t> omega(const std::vector<double>& s, double threshold) {
  std::vector<size_t> out;
  for (size_t i = 0; i < s.size(); ++i)
    if (s[i] > threshold) out.push_back(i);
  return out;
}

bool is_subset(const std::vector<size_t>& inner, const std::vector<size_t>& outer) {
  return std::includes(outer.begin(), outer.end(), inner.begin(), inner.end());
}

}  // namespace

TEST_CASE("row_cosine matches hand values and flags undefined directions") {
  Tensor<float> a({4, 2}, {1, 0, 1, 1, 1, 0, 0, 0});
  Tensor<float> b({4, 2}, {0, 1, 1, 1, -1, 0, 1, 0});
  const auto cs = pruning::row_cosine(a, b);
  REQUIRE(cs.size() == 4);
  CHECK(cs[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cs[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cs[2] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(cs[3] == -1.0);  // zero row: undefined direction scores worst

  CHECK_THROWS_AS(pruning::row_cosine(a, Tensor<float>({2, 2})), ValidationError);
  CHECK_THROWS_AS(pruning::row_cosine(Tensor<float>({4}), Tensor<float>({4})), ValidationError);
}

TEST_CASE("prune_inter keeps strictly above tau and is monotone") {
  CHECK(pruning::prune_inter({0.3}, 0.3).empty());  // equality is not enough
  CHECK(pruning::prune_inter({std::nextafter(0.3, 1.0)}, 0.3) == std::vector<size_t>{0});

  Rng rng(71);
  std::vector<double> scores(40);
  for (auto& s : scores) s = rng.uniform(-1.0, 1.0);
  std::vector<size_t> prev = pruning::prune_inter(scores, -1.1);
  CHECK(prev.size() == scores.size());  // everything above -1.1
  for (double tau : {-0.5, -0.1, 0.0, 0.3, 0.7, 1.0}) {
    const auto kept = pruning::prune_inter(scores, tau);
    CHECK(is_subset(kept, prev));
    CHECK(kept == omega(scores, tau));
    prev = kept;
  }

  CHECK_THROWS_AS(pruning::prune_inter({}, 0.3), ValidationError);
  CHECK_THROWS_AS(pruning::prune_inter({std::nan("")}, 0.3), ValidationError);
  CHECK_THROWS_AS(pruning::prune_inter({0.5}, std::nan("")), ValidationError);
}

TEST_CASE("prune_intra matches the five-record oracle") {
  pruning::IntraScores s;
  s.s1 = {0.9, 0.5, 0.7, 0.3, 0.6};  // mu1 = 0.6
  s.s2 = {0.8, 0.8, 0.2, 0.8, 0.8};  // mu2 = 0.68
  s.s3 = {0.1, 0.9, 0.5, 0.5, 0.5};  // mu3 = 0.5
  pruning::fill_means(s);
  CHECK(s.mu1 == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(s.mu2 == doctest::Approx(0.68).epsilon(1e-12));
  CHECK(s.mu3 == doctest::Approx(0.5).epsilon(1e-12));

  // by hand: 0 fails s3 (0.1 < 0.497), 1 fails s1 (0.5 < 0.597),
  // 2 fails s2 (0.2 < 0.677), 3 fails s1 (0.3 < 0.597), 4 passes all
  CHECK(pruning::prune_intra(s, 0.003) == std::vector<size_t>{4});

  // the result is exactly the intersection of the three one-criterion sets
  const auto o1 = omega(s.s1, s.mu1 - 0.003);
  const auto o2 = omega(s.s2, s.mu2 - 0.003);
  const auto o3 = omega(s.s3, s.mu3 - 0.003);
  std::vector<size_t> o12, o123;
  std::set_intersection(o1.begin(), o1.end(), o2.begin(), o2.end(), std::back_inserter(o12));
  std::set_intersection(o12.begin(), o12.end(), o3.begin(), o3.end(), std::back_inserter(o123));
  CHECK(pruning::prune_intra(s, 0.003) == o123);
}

TEST_CASE("prune_intra thresholds are strict and widen with eps") {
  // constant scores make every threshold land exactly on the mean
  pruning::IntraScores flat;
  flat.s1 = {0.4, 0.4, 0.4};
  flat.s2 = {0.7, 0.7, 0.7};
  flat.s3 = {-0.2, -0.2, -0.2};
  pruning::fill_means(flat);
  CHECK(pruning::prune_intra(flat, 0.0).empty());  // s == mu - 0 is excluded
  CHECK(pruning::prune_intra(flat, 1e-9).size() == 3);

  Rng rng(72);
  pruning::IntraScores s;
  for (int i = 0; i < 64; ++i) {
    s.s1.push_back(rng.uniform(-1.0, 1.0));
    s.s2.push_back(rng.uniform(-1.0, 1.0));
    s.s3.push_back(rng.uniform(-1.0, 1.0));
  }
  pruning::fill_means(s);
  std::vector<size_t> prev;
  for (double eps : {0.0, 0.003, 0.01, 0.1, 0.5, 2.0}) {
    const auto kept = pruning::prune_intra(s, eps);
    CHECK(is_subset(prev, kept));
    // brute-force oracle per candidate
    std::vector<size_t> expect;
    for (size_t i = 0; i < s.s1.size(); ++i)
      if (s.s1[i] > s.mu1 - eps && s.s2[i] > s.mu2 - eps && s.s3[i] > s.mu3 - eps)
        expect.push_back(i);
    CHECK(kept == expect);
    prev = kept;
  }
  CHECK(pruning::prune_intra(s, 2.0).size() == s.s1.size());  // wide eps keeps all

  CHECK_THROWS_AS(pruning::prune_intra(s, -0.1), ValidationError);
  CHECK_THROWS_AS(pruning::prune_intra(pruning::IntraScores{}, 0.1), ValidationError);
}

TEST_CASE("alignment and intra scores come from the frozen scorer embeddings") {
  const auto scorer = tiny_scorer();
  const auto& tok = tokenizer();

  corpus::SampleConfig sc;
  sc.name = "prune";
  sc.count = 6;
  sc.seed = 41;
  auto manifest = corpus::sample_corpus(sc);
  std::vector<Tensor<float>> images;
  std::vector<std::vector<int32_t>> ids;
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    images.push_back(corpus::render_case(manifest.records[i].findings, derive_seed(41, "r", i)));
    ids.push_back(tok.encode(manifest.records[i].report));
  }

  const auto scores = pruning::alignment_scores(scorer, images, ids);
  REQUIRE(scores.size() == 6);
  const auto manual =
      pruning::row_cosine(vlp::embed_images(scorer, images), vlp::embed_texts(scorer, ids));
  CHECK(scores == manual);
  for (double v : scores) {
    CHECK(v >= -1.0 - 1e-9);
    CHECK(v <= 1.0 + 1e-9);
  }
  CHECK(pruning::alignment_scores(scorer, images, ids) == scores);  // deterministic

  // edited pairs: flip one finding per record
  std::vector<Tensor<float>> edited_images;
  std::vector<std::vector<int32_t>> edited_ids;
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    const auto flip = textaug::flip_findings(manifest.records[i], 1, 500 + i);
    edited_images.push_back(corpus::render_case(flip.record.findings, derive_seed(41, "e", i)));
    edited_ids.push_back(tok.encode(flip.record.report));
  }
  const auto is = pruning::intra_scores(scorer, edited_images, edited_ids, images, ids);
  REQUIRE(is.s1.size() == 6);
  CHECK(is.s1 == pruning::alignment_scores(scorer, edited_images, edited_ids));
  for (size_t i = 0; i < 6; ++i) {
    CHECK(is.s2[i] > -1.0);
    CHECK(is.s2[i] <= 1.0 + 1e-9);
    CHECK(std::isfinite(is.s3[i]));
  }
  CHECK(is.mu1 == doctest::Approx((is.s1[0] + is.s1[1] + is.s1[2] + is.s1[3] + is.s1[4] + is.s1[5]) / 6.0));

  // identical edited/original pairs: s2 == 1, deltas vanish, s3 == -1
  const auto self = pruning::intra_scores(scorer, images, ids, images, ids);
  for (size_t i = 0; i < 6; ++i) {
    CHECK(self.s2[i] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(self.s3[i] == -1.0);
  }

  CHECK_THROWS_AS(pruning::intra_scores(scorer, edited_images, edited_ids, images,
                                        std::vector<std::vector<int32_t>>{}),
                  ValidationError);
}
