#include "pairaug/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pairaug/rng.hpp"

namespace pairaug::metrics {

namespace {

void check_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
  PAIRAUG_CHECK(!scores.empty(), MetricError, "empty score vector");
  PAIRAUG_CHECK(scores.size() == labels.size(), MetricError, "scores (", scores.size(),
                ") and labels (", labels.size(), ") differ in length");
  for (size_t i = 0; i < scores.size(); ++i) {
    PAIRAUG_CHECK(std::isfinite(scores[i]), MetricError, "non-finite score at index ", i);
    PAIRAUG_CHECK(labels[i] == 0 || labels[i] == 1, MetricError, "label at index ", i,
                  " is ", labels[i], ", expected 0 or 1");
  }
}

}  // namespace

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_pairs(scores, labels);
  const size_t n = scores.size();

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  uint64_t n_pos = 0, n_neg = 0;
  for (int y : labels) (y == 1 ? n_pos : n_neg)++;
  PAIRAUG_CHECK(n_pos > 0 && n_neg > 0, MetricError,
                "auc needs both classes, got ", n_pos, " positive / ", n_neg, " negative");

  // Walk score-tie groups in ascending order; every positive beats all
  // negatives strictly below its group and half-ties within it.
  uint64_t wins = 0, ties = 0, neg_below = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    uint64_t pos_here = 0, neg_here = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos_here : neg_here)++;
      ++j;
    }
    wins += pos_here * neg_below;
    ties += pos_here * neg_here;
    neg_below += neg_here;
    i = j;
  }
  return (static_cast<double>(wins) + 0.5 * static_cast<double>(ties)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

Confusion confusion_at(const std::vector<double>& scores, const std::vector<int>& labels,
                       double threshold) {
  check_pairs(scores, labels);
  Confusion c;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] > threshold;
    const bool truth = labels[i] == 1;
    if (pred && truth)
      ++c.tp;
    else if (pred && !truth)
      ++c.fp;
    else if (!pred && truth)
      ++c.fn;
    else
      ++c.tn;
  }
  const auto total = static_cast<double>(scores.size());
  c.accuracy = static_cast<double>(c.tp + c.tn) / total;
  c.precision = c.tp + c.fp > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  c.recall = c.tp + c.fn > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  c.f1 = c.precision + c.recall > 0.0 ? 2.0 * c.precision * c.recall / (c.precision + c.recall)
                                      : 0.0;
  return c;
}

BootstrapCi bootstrap_ci(const std::vector<double>& values, int n_boot, uint64_t seed,
                         double alpha) {
  PAIRAUG_CHECK(!values.empty(), MetricError, "bootstrap over an empty sample");
  PAIRAUG_CHECK(n_boot >= 1, MetricError, "n_boot must be positive, got ", n_boot);
  PAIRAUG_CHECK(alpha > 0.0 && alpha < 1.0, MetricError, "alpha must lie in (0, 1), got ", alpha);
  for (size_t i = 0; i < values.size(); ++i)
    PAIRAUG_CHECK(std::isfinite(values[i]), MetricError, "non-finite value at index ", i);

  const size_t n = values.size();
  Rng rng(seed);
  std::vector<double> means(static_cast<size_t>(n_boot));
  for (auto& m : means) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += values[rng.uniform_int(n)];
    m = acc / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());

  const auto rank = [&](double q) {
    const auto idx = static_cast<size_t>(std::llround(q * static_cast<double>(n_boot - 1)));
    return means[std::min(idx, means.size() - 1)];
  };
  BootstrapCi ci;
  ci.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  ci.lo = rank(alpha / 2.0);
  ci.hi = rank(1.0 - alpha / 2.0);
  return ci;
}

}  // namespace pairaug::metrics
