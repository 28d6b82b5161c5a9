#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "pairaug/corpus.hpp"
#include "pairaug/modules.hpp"
#include "pairaug/nnops.hpp"
#include "pairaug/tokenizer.hpp"

namespace pairaug::vlp {

using nn::Tensor;
using nn::shape_str;

struct VlpConfig {
  int64_t d_model = 64;
  int64_t embed_dim = 64;
  int64_t n_blocks = 2;
  int64_t patch = 8;
  int64_t image_size = corpus::kImageSize;
  int64_t max_tokens = text::kMaxTokens;
  int64_t vocab_size = 0;  // from Tokenizer::vocab_size()
  uint64_t param_seed = 1;

  int64_t image_tokens() const {
    const int64_t g = image_size / patch;
    return g * g;
  }
};

/// Pre-norm transformer block with single-head attention over packed
/// [n*tokens, d] rows. Key positions with mask==0 are invisible.
template <typename S>
struct EncoderBlock {
  nn::LayerNorm<S> ln1, ln2;
  nn::Linear<S> wq, wk, wv, wo, fc1, fc2;

  EncoderBlock() = default;
  EncoderBlock(nn::ParamStore<S>& ps, const std::string& name, int64_t d)
      : ln1(ps, name + ".ln1", d),
        ln2(ps, name + ".ln2", d),
        wq(ps, name + ".wq", d, d),
        wk(ps, name + ".wk", d, d),
        wv(ps, name + ".wv", d, d),
        wo(ps, name + ".wo", d, d),
        fc1(ps, name + ".fc1", d, 2 * d),
        fc2(ps, name + ".fc2", 2 * d, d) {}

  nn::Var<S> operator()(nn::Var<S> x, const std::vector<uint8_t>& key_valid, int64_t n,
                        int64_t tokens) const {
    const auto d = x->value.dim(1);
    const S scale = S(1) / std::sqrt(static_cast<S>(d));
    auto h = ln1(x);
    auto a = nn::masked_attention(wq(h), wk(h), wv(h), n, tokens, tokens, key_valid, scale);
    x = nn::add(x, wo(a));
    auto m = ln2(x);
    return nn::add(x, fc2(nn::silu(fc1(m))));
  }
};

/// CLIP-style dual encoder: a patch transformer over 1x64x64 images and a
/// token transformer over tokenized reports, both pooled and projected
/// onto a shared unit sphere, plus a learnable logit scale.
template <typename S>
struct DualEncoder {
  VlpConfig cfg;
  nn::ParamStore<S> params;

  nn::Conv2d<S> patch;
  nn::Var<S> img_pos, txt_embed, txt_pos, logit_scale;
  nn::Var<S> input_mean, input_std;  // frozen standardization buffers
  std::vector<EncoderBlock<S>> img_blocks, txt_blocks;
  nn::LayerNorm<S> img_ln, txt_ln;
  nn::Linear<S> img_proj, txt_proj;

  explicit DualEncoder(const VlpConfig& c)
      : cfg(c),
        params(c.param_seed),
        patch(params, "img.patch", 1, c.d_model, c.patch, c.patch, 0) {
    PAIRAUG_VALIDATE(cfg.vocab_size > 0, "vocab_size must be set");
    PAIRAUG_VALIDATE(cfg.image_size % cfg.patch == 0, "patch must divide image size");
    input_mean = params.create("img.input_mean", {1, cfg.image_size, cfg.image_size},
                               nn::Init::kZeros);
    input_std = params.create("img.input_std", {1}, nn::Init::kOnes);
    input_mean->requires_grad = false;
    input_std->requires_grad = false;
    img_pos = params.create("img.pos", {cfg.image_tokens(), cfg.d_model}, nn::Init::kNormal02);
    txt_embed = params.create("txt.embed", {cfg.vocab_size, cfg.d_model}, nn::Init::kNormal02);
    txt_pos = params.create("txt.pos", {cfg.max_tokens, cfg.d_model}, nn::Init::kNormal02);
    for (int64_t i = 0; i < cfg.n_blocks; ++i) {
      img_blocks.emplace_back(params, cat("img.blk", i), cfg.d_model);
      txt_blocks.emplace_back(params, cat("txt.blk", i), cfg.d_model);
    }
    img_ln = nn::LayerNorm<S>(params, "img.ln", cfg.d_model);
    txt_ln = nn::LayerNorm<S>(params, "txt.ln", cfg.d_model);
    img_proj = nn::Linear<S>(params, "img.proj", cfg.d_model, cfg.embed_dim);
    txt_proj = nn::Linear<S>(params, "txt.proj", cfg.d_model, cfg.embed_dim);
    logit_scale = params.create("logit_scale", {1}, nn::Init::kZeros);
    logit_scale->value.data[0] = std::log(S(1) / S(0.07));
  }

  /// images [n,1,H,W] -> row-normalized [n, embed_dim]. Inputs are shifted
  /// and scaled by the stored standardization buffers first; without a
  /// fit_input_stats call those are the identity.
  nn::Var<S> encode_image(const Tensor<S>& images) const {
    PAIRAUG_VALIDATE(images.rank() == 4 && images.dim(1) == 1 &&
                         images.dim(2) == cfg.image_size && images.dim(3) == cfg.image_size,
                     "encode_image expects [n,1,", cfg.image_size, ",", cfg.image_size,
                     "], got ", shape_str(images.shape));
    const int64_t n = images.dim(0);
    const int64_t tokens = cfg.image_tokens();
    const int64_t px = cfg.image_size * cfg.image_size;
    Tensor<S> centered = images;
    const S sd = std::max(input_std->value.data[0], S(1e-3));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < px; ++j) {
        auto& v = centered.data[static_cast<size_t>(i * px + j)];
        v = (v - input_mean->value.data[static_cast<size_t>(j)]) / sd;
      }
    auto x = patch(nn::constant(std::move(centered)));
    auto tok = nn::add_tiled(nn::nchw_to_tokens(x), img_pos, n);
    const std::vector<uint8_t> all_valid(static_cast<size_t>(n * tokens), 1);
    for (const auto& blk : img_blocks) tok = blk(tok, all_valid, n, tokens);
    tok = img_ln(tok);
    auto pooled = nn::masked_meanpool(tok, all_valid, n, tokens);
    return nn::normalize_rows(img_proj(pooled));
  }

  /// ids: n stacked sequences of cfg.max_tokens -> [n, embed_dim]
  nn::Var<S> encode_text(const std::vector<int32_t>& ids, int64_t n) const {
    PAIRAUG_VALIDATE(static_cast<int64_t>(ids.size()) == n * cfg.max_tokens,
                     "encode_text expects ", n * cfg.max_tokens, " ids, got ", ids.size());
    const auto valid = text::Tokenizer::valid_mask(ids);
    auto tok = nn::add_tiled(nn::embedding(txt_embed, ids), txt_pos, n);
    for (const auto& blk : txt_blocks) tok = blk(tok, valid, n, cfg.max_tokens);
    tok = txt_ln(tok);
    auto pooled = nn::masked_meanpool(tok, valid, n, cfg.max_tokens);
    return nn::normalize_rows(txt_proj(pooled));
  }

  /// Symmetric InfoNCE over matched rows of two [n, embed_dim] encodings.
  nn::Var<S> contrastive_loss(const nn::Var<S>& img_emb, const nn::Var<S>& txt_emb) const {
    PAIRAUG_VALIDATE(img_emb->value.same_shape(txt_emb->value) && img_emb->value.rank() == 2,
                     "contrastive_loss expects matching [n, d] encodings");
    PAIRAUG_VALIDATE(img_emb->value.dim(0) >= 2, "contrastive_loss needs at least 2 pairs");
    auto logits =
        nn::broadcast_scale(nn::matmul(img_emb, nn::transpose2d(txt_emb)), nn::exp_op(logit_scale));
    auto i2t = nn::mean_all(nn::sub(nn::logsumexp_rows(logits), nn::diag(logits)));
    auto logits_t = nn::transpose2d(logits);
    auto t2i = nn::mean_all(nn::sub(nn::logsumexp_rows(logits_t), nn::diag(logits_t)));
    return nn::scale(nn::add(i2t, t2i), S(0.5));
  }
};

/// Fit the image standardization buffers on a training set: per-pixel
/// mean plus one global standard deviation. The shared anatomy template
/// otherwise dominates the pooled features and leaves contrastive
/// training stuck at its collapse saddle.
template <typename S>
void fit_input_stats(DualEncoder<S>& model, const std::vector<Tensor<S>>& images) {
  PAIRAUG_VALIDATE(!images.empty(), "fit_input_stats needs at least one image");
  const int64_t px = model.cfg.image_size * model.cfg.image_size;
  auto& mu = model.input_mean->value;
  std::fill(mu.data.begin(), mu.data.end(), S(0));
  for (const auto& img : images) {
    PAIRAUG_VALIDATE((img.shape ==
                      std::vector<int64_t>{1, model.cfg.image_size, model.cfg.image_size}),
                     "image has shape ", shape_str(img.shape));
    for (int64_t j = 0; j < px; ++j) mu.data[static_cast<size_t>(j)] += img.data[static_cast<size_t>(j)];
  }
  for (auto& v : mu.data) v /= static_cast<S>(images.size());
  double sq = 0.0;
  for (const auto& img : images)
    for (int64_t j = 0; j < px; ++j) {
      const double d = static_cast<double>(img.data[static_cast<size_t>(j)]) -
                       static_cast<double>(mu.data[static_cast<size_t>(j)]);
      sq += d * d;
    }
  const double var = sq / (static_cast<double>(images.size()) * static_cast<double>(px));
  model.input_std->value.data[0] = std::max(static_cast<S>(std::sqrt(var)), S(1e-3));
}

// ---------------------------------------------------------------------------
// float drivers
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 10;
  int batch = 64;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double clip = 5.0;
  uint64_t seed = 1;
};

struct TrainStats {
  std::vector<double> epoch_loss;  // mean per epoch
  int steps = 0;
};

/// Contrastive pre-training over matched (image, token sequence) pairs
/// with AdamW. Standardization buffers are refit on `images` first;
/// batches are reshuffled every epoch and trailing batches smaller than
/// 2 pairs are dropped.
TrainStats train_contrastive(DualEncoder<float>& model, const std::vector<Tensor<float>>& images,
                             const std::vector<std::vector<int32_t>>& token_ids,
                             const TrainConfig& cfg);

/// Encode images in fixed-size batches without building a graph.
Tensor<float> embed_images(const DualEncoder<float>& model, const std::vector<Tensor<float>>& images,
                           int batch = 64);

/// Encode tokenized texts without building a graph.
Tensor<float> embed_texts(const DualEncoder<float>& model,
                          const std::vector<std::vector<int32_t>>& token_ids, int batch = 64);

/// Zero-shot finding probabilities: softmax over the similarities to a
/// fixed positive/negative prompt pair per finding, scaled by the learned
/// logit scale. Returns [n, kNumFindings] with p(positive); if p_neg_out
/// is given it receives the matching p(negative) table.
Tensor<float> zero_shot_probs(const DualEncoder<float>& model,
                              const std::vector<Tensor<float>>& images, const text::Tokenizer& tok,
                              Tensor<float>* p_neg_out = nullptr);

/// Same, with caller-supplied prompt pairs, one per finding in order.
Tensor<float> zero_shot_probs(const DualEncoder<float>& model,
                              const std::vector<Tensor<float>>& images, const text::Tokenizer& tok,
                              const std::vector<corpus::PromptPair>& prompts,
                              Tensor<float>* p_neg_out = nullptr);

struct ProbeConfig {
  int epochs = 40;
  int batch = 96;
  double lr = 5e-4;
  double weight_decay = 1e-4;
  uint64_t seed = 2;
};

struct ProbeResult {
  Tensor<float> w;  // [embed_dim, kNumFindings]
  Tensor<float> b;  // [kNumFindings]
  std::string encoder_hash;  // checkpoint hash of the frozen encoder
  std::vector<double> epoch_loss;
};

/// Multi-label logistic probe on frozen image embeddings, trained with
/// AdamW on binary cross-entropy. The encoder is hashed before and after
/// and must come back identical (StateError otherwise).
ProbeResult train_linear_probe(const DualEncoder<float>& model,
                               const std::vector<Tensor<float>>& images,
                               const std::vector<std::array<int, corpus::kNumFindings>>& labels,
                               const ProbeConfig& cfg);

/// Probe probabilities for a batch of images: sigmoid(emb W + b).
Tensor<float> probe_probs(const DualEncoder<float>& model, const ProbeResult& probe,
                          const std::vector<Tensor<float>>& images);

/// Per-finding AUC of column k of probs [n, K] against labels, plus the
/// macro average.
struct AucReport {
  std::array<double, corpus::kNumFindings> per_finding{};
  double macro = 0.0;
};
AucReport auc_report(const Tensor<float>& probs,
                     const std::vector<std::array<int, corpus::kNumFindings>>& labels);

/// Serializes weights (standardization buffers included) plus the config.
Checkpoint to_checkpoint(const DualEncoder<float>& model);
DualEncoder<float> model_from_checkpoint(const Checkpoint& ck);

}  // namespace pairaug::vlp
