#include "pairaug/pruning.hpp"

#include <cmath>

namespace pairaug::pruning {

using nn::shape_str;

namespace {

constexpr double kZeroNorm = 1e-8;

double cosine(const float* a, const float* b, int64_t d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int64_t c = 0; c < d; ++c) {
    dot += static_cast<double>(a[c]) * b[c];
    na += static_cast<double>(a[c]) * a[c];
    nb += static_cast<double>(b[c]) * b[c];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na <= kZeroNorm || nb <= kZeroNorm) return -1.0;
  return dot / (na * nb);
}

double mean(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> row_cosine(const Tensor<float>& a, const Tensor<float>& b) {
  PAIRAUG_VALIDATE(a.rank() == 2 && a.same_shape(b), "row_cosine expects matching [n, d], got ",
                   shape_str(a.shape), " vs ", shape_str(b.shape));
  const int64_t n = a.dim(0), d = a.dim(1);
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    out[static_cast<size_t>(i)] = cosine(a.data.data() + i * d, b.data.data() + i * d, d);
  return out;
}

std::vector<double> alignment_scores(const vlp::DualEncoder<float>& scorer,
                                     const std::vector<Tensor<float>>& images,
                                     const std::vector<std::vector<int32_t>>& token_ids) {
  PAIRAUG_VALIDATE(images.size() == token_ids.size(), "got ", images.size(), " images but ",
                   token_ids.size(), " token sequences");
  PAIRAUG_VALIDATE(!images.empty(), "no candidate pairs to score");
  const auto ie = vlp::embed_images(scorer, images);
  const auto te = vlp::embed_texts(scorer, token_ids);
  return row_cosine(ie, te);
}

std::vector<size_t> prune_inter(const std::vector<double>& scores, double tau) {
  PAIRAUG_VALIDATE(!scores.empty(), "no scores to prune");
  PAIRAUG_VALIDATE(std::isfinite(tau), "tau must be finite");
  for (size_t i = 0; i < scores.size(); ++i)
    PAIRAUG_VALIDATE(std::isfinite(scores[i]), "non-finite score at index ", i);
  std::vector<size_t> kept;
  for (size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > tau) kept.push_back(i);
  return kept;
}

IntraScores intra_scores(const vlp::DualEncoder<float>& scorer,
                         const std::vector<Tensor<float>>& edited_images,
                         const std::vector<std::vector<int32_t>>& edited_ids,
                         const std::vector<Tensor<float>>& original_images,
                         const std::vector<std::vector<int32_t>>& original_ids) {
  const size_t n = edited_images.size();
  PAIRAUG_VALIDATE(n > 0, "no edited pairs to score");
  PAIRAUG_VALIDATE(edited_ids.size() == n && original_images.size() == n &&
                       original_ids.size() == n,
                   "edited/original sizes disagree: ", n, "/", edited_ids.size(), "/",
                   original_images.size(), "/", original_ids.size());

  const auto ie_new = vlp::embed_images(scorer, edited_images);
  const auto te_new = vlp::embed_texts(scorer, edited_ids);
  const auto ie_old = vlp::embed_images(scorer, original_images);
  const auto te_old = vlp::embed_texts(scorer, original_ids);

  IntraScores s;
  s.s1 = row_cosine(ie_new, te_new);
  s.s2 = row_cosine(ie_new, ie_old);

  const int64_t d = ie_new.dim(1);
  Tensor<float> dx({static_cast<int64_t>(n), d}), dy({static_cast<int64_t>(n), d});
  for (size_t i = 0; i < n * static_cast<size_t>(d); ++i) {
    dx.data[i] = ie_new.data[i] - ie_old.data[i];
    dy.data[i] = te_new.data[i] - te_old.data[i];
  }
  s.s3 = row_cosine(dx, dy);
  fill_means(s);
  return s;
}

void fill_means(IntraScores& s) {
  PAIRAUG_VALIDATE(!s.s1.empty() && s.s1.size() == s.s2.size() && s.s1.size() == s.s3.size(),
                   "score vectors must be non-empty and equally sized");
  s.mu1 = mean(s.s1);
  s.mu2 = mean(s.s2);
  s.mu3 = mean(s.s3);
}

std::vector<size_t> prune_intra(const IntraScores& scores, double eps) {
  PAIRAUG_VALIDATE(std::isfinite(eps) && eps >= 0.0, "eps must be finite and >= 0, got ", eps);
  PAIRAUG_VALIDATE(!scores.s1.empty() && scores.s1.size() == scores.s2.size() &&
                       scores.s1.size() == scores.s3.size(),
                   "score vectors must be non-empty and equally sized");
  for (size_t i = 0; i < scores.s1.size(); ++i)
    PAIRAUG_VALIDATE(
        std::isfinite(scores.s1[i]) && std::isfinite(scores.s2[i]) && std::isfinite(scores.s3[i]),
        "non-finite score at index ", i);

  std::vector<size_t> kept;
  for (size_t i = 0; i < scores.s1.size(); ++i) {
    const bool in1 = scores.s1[i] > scores.mu1 - eps;
    const bool in2 = scores.s2[i] > scores.mu2 - eps;
    const bool in3 = scores.s3[i] > scores.mu3 - eps;
    if (in1 && in2 && in3) kept.push_back(i);
  }
  return kept;
}

}  // namespace pairaug::pruning
