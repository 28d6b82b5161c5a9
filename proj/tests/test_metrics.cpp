#include <cmath>
#include <vector>

#include <doctest.h>

#include "pairaug/metrics.hpp"
#include "pairaug/rng.hpp"

using namespace pairaug;

namespace {

/// O(n^2) reference: count every positive/negative pair directly.
double brute_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  uint64_t wins = 0, ties = 0, n_pos = 0, n_neg = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    ++n_pos;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      if (scores[i] > scores[j])
        ++wins;
      else if (scores[i] == scores[j])
        ++ties;
    }
  }
  n_neg = scores.size() - n_pos;
  return (static_cast<double>(wins) + 0.5 * static_cast<double>(ties)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Scores from a coarse grid so ties actually occur.
std::vector<double> grid_scores(size_t n, Rng& rng) {
  std::vector<double> s(n);
  for (auto& v : s) v = 0.25 * rng.uniform_int(5);
  return s;
}

}  // namespace

TEST_CASE("auc matches hand-computed values") {
  CHECK(metrics::auc({0.1, 0.9}, {0, 1}) == 1.0);
  CHECK(metrics::auc({0.9, 0.1}, {0, 1}) == 0.0);
  CHECK(metrics::auc({0.4, 0.4, 0.4}, {1, 0, 1}) == 0.5);
  // pairs: 0.8>0.6 win, 0.8>0.2 win, 0.4<0.6 loss, 0.4>0.2 win
  CHECK(metrics::auc({0.8, 0.6, 0.4, 0.2}, {1, 0, 1, 0}) == 0.75);
  // one tie between a positive and a negative: (1 + 0.5) / 2
  CHECK(metrics::auc({0.5, 0.5, 0.1}, {1, 0, 0}) == 0.75);
}

TEST_CASE("auc equals the pairwise oracle on every labeling up to n=12") {
  for (size_t n : {5, 12}) {
    CAPTURE(n);
    Rng rng(900 + n);
    const auto scores = grid_scores(n, rng);
    for (uint32_t bits = 1; bits + 1 < (1u << n); ++bits) {
      std::vector<int> labels(n);
      for (size_t i = 0; i < n; ++i) labels[i] = (bits >> i) & 1u;
      REQUIRE(metrics::auc(scores, labels) == brute_auc(scores, labels));
    }
  }
}

TEST_CASE("auc equals the pairwise oracle on random instances") {
  Rng rng(901);
  for (int trial = 0; trial < 1000; ++trial) {
    const size_t n = 2 + rng.uniform_int(39);
    const auto scores = grid_scores(n, rng);
    std::vector<int> labels(n);
    for (auto& y : labels) y = rng.bernoulli(0.4) ? 1 : 0;
    labels[0] = 0;
    labels[n - 1] = 1;  // force both classes
    REQUIRE(metrics::auc(scores, labels) == brute_auc(scores, labels));
  }
}

TEST_CASE("auc rejects degenerate inputs") {
  CHECK_THROWS_AS(metrics::auc({}, {}), MetricError);
  CHECK_THROWS_AS(metrics::auc({0.5}, {0, 1}), MetricError);
  CHECK_THROWS_AS(metrics::auc({0.5, 0.6}, {1, 1}), MetricError);
  CHECK_THROWS_AS(metrics::auc({0.5, 0.6}, {0, 0}), MetricError);
  CHECK_THROWS_AS(metrics::auc({0.5, 0.6}, {0, 2}), MetricError);
  CHECK_THROWS_AS(metrics::auc({std::nan(""), 0.6}, {0, 1}), MetricError);
}

TEST_CASE("confusion_at matches a hand-filled table") {
  const std::vector<double> s{0.9, 0.7, 0.4, 0.2, 0.6};
  const std::vector<int> y{1, 0, 1, 0, 1};
  const auto c = metrics::confusion_at(s, y, 0.5);
  CHECK(c.tp == 2);
  CHECK(c.fp == 1);
  CHECK(c.tn == 1);
  CHECK(c.fn == 1);
  CHECK(c.accuracy == doctest::Approx(0.6));
  CHECK(c.precision == doctest::Approx(2.0 / 3.0));
  CHECK(c.recall == doctest::Approx(2.0 / 3.0));
  CHECK(c.f1 == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("confusion_at threshold is strict and rates degrade to zero") {
  // score == threshold predicts negative
  const auto edge = metrics::confusion_at({0.5}, {1}, 0.5);
  CHECK(edge.fn == 1);
  CHECK(edge.tp == 0);

  // nothing predicted positive: precision, recall, f1 all defined as 0
  const auto none = metrics::confusion_at({0.1, 0.2, 0.3}, {1, 0, 1}, 0.9);
  CHECK(none.tp == 0);
  CHECK(none.fp == 0);
  CHECK(none.precision == 0.0);
  CHECK(none.recall == 0.0);
  CHECK(none.f1 == 0.0);
  CHECK(none.accuracy == doctest::Approx(1.0 / 3.0));

  CHECK_THROWS_AS(metrics::confusion_at({0.5}, {3}, 0.5), MetricError);
}

TEST_CASE("bootstrap_ci is deterministic and collapses on constants") {
  const std::vector<double> values{0.62, 0.7, 0.66, 0.71, 0.64};
  const auto a = metrics::bootstrap_ci(values, 500, 77);
  const auto b = metrics::bootstrap_ci(values, 500, 77);
  CHECK(a.mean == b.mean);
  CHECK(a.lo == b.lo);
  CHECK(a.hi == b.hi);
  CHECK(a.lo <= a.mean);
  CHECK(a.mean <= a.hi);

  const auto c = metrics::bootstrap_ci(values, 500, 78);
  CHECK((c.lo != a.lo || c.hi != a.hi));  // seed moves the resamples

  const auto flat = metrics::bootstrap_ci({0.42, 0.42, 0.42, 0.42}, 200, 9);
  CHECK(flat.lo == flat.hi);
  CHECK(flat.hi - flat.lo == 0.0);
  CHECK(flat.lo == doctest::Approx(0.42));

  // resampled means never leave the sample range
  const auto ranged = metrics::bootstrap_ci({1.0, 2.0, 3.0}, 300, 10);
  CHECK(ranged.lo >= 1.0);
  CHECK(ranged.hi <= 3.0);
}

TEST_CASE("bootstrap_ci validates its arguments") {
  CHECK_THROWS_AS(metrics::bootstrap_ci({}, 10, 1), MetricError);
  CHECK_THROWS_AS(metrics::bootstrap_ci({1.0}, 0, 1), MetricError);
  CHECK_THROWS_AS(metrics::bootstrap_ci({1.0}, 10, 1, 0.0), MetricError);
  CHECK_THROWS_AS(metrics::bootstrap_ci({1.0}, 10, 1, 1.0), MetricError);
  CHECK_THROWS_AS(metrics::bootstrap_ci({std::nan("")}, 10, 1), MetricError);
}
