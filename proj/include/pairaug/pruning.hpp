#pragma once

#include <cstdint>
#include <vector>

#include "pairaug/vlp.hpp"

namespace pairaug::pruning {

using nn::Tensor;

/// Cosine similarity per matched row of two [n, d] matrices, accumulated
/// in double. Rows with norm <= 1e-8 on either side score -1 (undefined
/// direction counts as maximally dissimilar).
std::vector<double> row_cosine(const Tensor<float>& a, const Tensor<float>& b);

/// New-pair alignment score: cosine between the frozen scorer's image and
/// text embeddings of each candidate pair.
std::vector<double> alignment_scores(const vlp::DualEncoder<float>& scorer,
                                     const std::vector<Tensor<float>>& images,
                                     const std::vector<std::vector<int32_t>>& token_ids);

/// Keep candidates whose score strictly exceeds tau; returns ascending
/// indices into `scores`.
std::vector<size_t> prune_inter(const std::vector<double>& scores, double tau);

/// Per-candidate consistency scores for edited pairs against their
/// originals, plus the batch means used as thresholds:
///   s1 = cos(edited image, edited text)   alignment of the new pair
///   s2 = cos(edited image, original image) imaging consistency
///   s3 = cos(image delta, text delta)      change consistency
struct IntraScores {
  std::vector<double> s1, s2, s3;
  double mu1 = 0.0, mu2 = 0.0, mu3 = 0.0;
};

IntraScores intra_scores(const vlp::DualEncoder<float>& scorer,
                         const std::vector<Tensor<float>>& edited_images,
                         const std::vector<std::vector<int32_t>>& edited_ids,
                         const std::vector<Tensor<float>>& original_images,
                         const std::vector<std::vector<int32_t>>& original_ids);

/// Compute the three thresholds' means from raw score vectors (exposed
/// so callers can report them).
void fill_means(IntraScores& s);

/// Keep candidate i iff s1 > mu1-eps and s2 > mu2-eps and s3 > mu3-eps
/// (all strict); returns ascending indices.
std::vector<size_t> prune_intra(const IntraScores& scores, double eps);

}  // namespace pairaug::pruning
