#pragma once

#include <cstdint>
#include <vector>

#include "pairaug/common.hpp"

namespace pairaug::metrics {

/// Tie-aware ROC AUC by exact pair counting: (wins + ties/2) over all
/// positive/negative pairs, computed with integer counts. Labels must be
/// 0/1 with both classes present and scores finite, else MetricError.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct Confusion {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t tn = 0;
  int64_t fn = 0;
  double accuracy = 0.0;
  double precision = 0.0;  // 0 when no positive predictions
  double recall = 0.0;     // 0 when no positive labels
  double f1 = 0.0;         // 0 when precision + recall == 0
};

/// Confusion counts and derived rates with prediction = score > threshold
/// (strictly). Labels must be 0/1, else MetricError.
Confusion confusion_at(const std::vector<double>& scores, const std::vector<int>& labels,
                       double threshold);

struct BootstrapCi {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap over the mean of `values`: n_boot resamples with
/// replacement drawn from a seeded generator, nearest-rank percentiles at
/// alpha/2 and 1-alpha/2. Deterministic for a fixed seed; a constant
/// input yields a zero-width interval.
BootstrapCi bootstrap_ci(const std::vector<double>& values, int n_boot, uint64_t seed,
                         double alpha = 0.05);

}  // namespace pairaug::metrics
