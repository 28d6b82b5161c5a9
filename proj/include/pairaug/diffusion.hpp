#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "pairaug/checkpoint.hpp"
#include "pairaug/corpus.hpp"
#include "pairaug/modules.hpp"
#include "pairaug/nnops.hpp"
#include "pairaug/rng.hpp"
#include "pairaug/tokenizer.hpp"

namespace pairaug::diffusion {

using nn::Tensor;
using nn::shape_str;

// ---------------------------------------------------------------------------
// noise schedule
// ---------------------------------------------------------------------------

/// Forward-process constants of a DDPM: betas with derived alphas and their
/// cumulative products, plus the default inference step count. All schedule
/// math is kept in double.
struct NoiseSchedule {
  int64_t T = 1000;
  int64_t inference_steps = 50;
  std::vector<double> betas;   // length T, each in (0,1), nondecreasing
  std::vector<double> alphas;  // 1 - beta_t
  std::vector<double> acp;     // cumulative product of alphas, strictly decreasing

  static NoiseSchedule linear(int64_t T = 1000, double beta_start = 1e-4, double beta_end = 0.02,
                              int64_t inference_steps = 50);

  /// Recomputes alphas/acp from betas and checks every invariant.
  void finalize();

  /// The descending, distinct training timesteps an inference run visits.
  std::vector<int64_t> inference_grid(int64_t steps) const;
};

// ---------------------------------------------------------------------------
// denoiser configuration and attention records
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  int64_t base = 12;
  std::vector<int64_t> mults = {1, 2, 3, 5};   // per-resolution channel multipliers
  std::vector<int64_t> attn_levels = {2, 3};   // cross-attention levels (plus mid, always)
  int64_t norm_groups = 6;
  int64_t temb_dim = 48;
  int64_t txt_dim = 48;
  int64_t max_tokens = text::kMaxTokens;  // fixed token length L
  int64_t image_size = corpus::kImageSize;
  int64_t vocab_size = 0;  // from Tokenizer::vocab_size()
  uint64_t param_seed = 1;

  int64_t levels() const { return static_cast<int64_t>(mults.size()); }
  int64_t channels(int64_t level) const { return base * mults[static_cast<size_t>(level)]; }
};

/// One recorded cross-attention map. Rows are image query positions, columns
/// the L token slots; every row sums to one, masked columns hold exactly
/// zero, and a fully masked sample (null conditioning) attends uniformly.
struct CrossAttentionMap {
  int layer = 0;  // position in DiffusionModel::attn_layer_names()
  int64_t t = 0;  // training timestep that produced the map
  Tensor<float> probs;             // [query positions, L]
  std::vector<uint8_t> key_valid;  // length L
};

/// Complete record of one trajectory: one map per (inference step, layer),
/// step-major in sampling order.
struct AttentionTrace {
  int64_t steps = 0;
  int layers = 0;
  std::vector<CrossAttentionMap> maps;

  const CrossAttentionMap& at(int64_t step, int layer) const {
    PAIRAUG_CHECK(step >= 0 && step < steps && layer >= 0 && layer < layers, ValidationError,
                  "trace index (", step, ",", layer, ") out of range");
    return maps[static_cast<size_t>(step * layers + layer)];
  }
};

/// Sampling-time observer for cross-attention: invoked once per (layer,
/// sample) with the map the layer just computed, which it may overwrite
/// in place (shape-preserving) before the value multiply.
template <typename S>
using MapHook = std::function<void(int layer, int64_t sample, Tensor<S>& probs)>;

// ---------------------------------------------------------------------------
// blocks
// ---------------------------------------------------------------------------

/// GroupNorm-SiLU-conv residual block with an additive per-channel time
/// embedding between the convolutions.
template <typename S>
struct ResBlock {
  nn::GroupNorm<S> gn1, gn2;
  nn::Conv2d<S> conv1, conv2, skip;
  nn::Linear<S> temb;
  bool project = false;

  ResBlock() = default;
  ResBlock(nn::ParamStore<S>& ps, const std::string& name, int64_t cin, int64_t cout,
           int64_t groups, int64_t temb_dim)
      : gn1(ps, name + ".gn1", cin, groups),
        gn2(ps, name + ".gn2", cout, groups),
        conv1(ps, name + ".conv1", cin, cout, 3, 1, 1),
        conv2(ps, name + ".conv2", cout, cout, 3, 1, 1),
        temb(ps, name + ".temb", temb_dim, cout),
        project(cin != cout) {
    if (project) skip = nn::Conv2d<S>(ps, name + ".skip", cin, cout, 1, 1, 0);
  }

  /// emb is the shared activated time embedding [n, temb_dim].
  nn::Var<S> operator()(const nn::Var<S>& x, const nn::Var<S>& emb) const {
    auto h = conv1(nn::silu(gn1(x)));
    h = nn::add_channel_bias(h, temb(emb));
    h = conv2(nn::silu(gn2(h)));
    return nn::add(h, project ? skip(x) : x);
  }
};

/// Single-head cross-attention from image positions into the text context,
/// wrapped in a residual connection.
template <typename S>
struct CrossAttnBlock {
  nn::LayerNorm<S> ln;
  nn::Linear<S> wq, wk, wv, wo;
  int layer = 0;

  CrossAttnBlock() = default;
  CrossAttnBlock(nn::ParamStore<S>& ps, const std::string& name, int64_t c, int64_t txt_dim,
                 int layer_)
      : ln(ps, name + ".ln", c),
        wq(ps, name + ".wq", c, c),
        wk(ps, name + ".wk", txt_dim, c),
        wv(ps, name + ".wv", txt_dim, c),
        wo(ps, name + ".wo", c, c),
        layer(layer_) {}

  nn::Var<S> operator()(const nn::Var<S>& x, const nn::Var<S>& ctx,
                        const std::vector<uint8_t>& key_valid, int64_t tokens,
                        const MapHook<S>* hook) const {
    const int64_t n = x->value.dim(0), c = x->value.dim(1);
    const int64_t h = x->value.dim(2), w = x->value.dim(3);
    const S scale = S(1) / std::sqrt(static_cast<S>(c));
    auto tok = nn::nchw_to_tokens(x);
    nn::AttnHook<S> wrapped;
    if (hook && *hook)
      wrapped = [this, hook](int64_t sample, Tensor<S>& probs) { (*hook)(layer, sample, probs); };
    auto a = nn::masked_attention(wq(ln(tok)), wk(ctx), wv(ctx), n, h * w, tokens, key_valid,
                                  scale, wrapped ? &wrapped : nullptr);
    return nn::add(x, nn::tokens_to_nchw(wo(a), n, h, w));
  }
};

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

/// Text-conditioned pixel-space U-Net noise predictor. Levels run at
/// image_size / 2^level; cross-attention sits after the residual block of
/// every configured level on both paths, plus one block mid-network. The
/// text context is token embedding + position, layer-normed; null
/// conditioning is the all-padding sequence.
template <typename S>
struct DiffusionModel {
  DenoiserConfig cfg;
  NoiseSchedule sched;
  nn::ParamStore<S> params;
  bool trained = false;
  std::vector<float> loss_curve;  // one entry per optimizer step

  nn::Conv2d<S> stem, out_conv;
  nn::GroupNorm<S> out_gn;
  nn::Linear<S> temb_l1, temb_l2;
  nn::Var<S> txt_embed, txt_pos;
  nn::LayerNorm<S> txt_ln;
  std::vector<ResBlock<S>> down, up;     // one per level
  std::vector<nn::Conv2d<S>> down_conv;  // between levels, stride 2
  std::vector<nn::Conv2d<S>> up_conv;    // after nearest-neighbor upsample
  ResBlock<S> mid1, mid2;
  std::vector<CrossAttnBlock<S>> attn_down, attn_up;  // per attn level
  CrossAttnBlock<S> attn_mid;

  DiffusionModel(const DenoiserConfig& c, const NoiseSchedule& s)
      : cfg(c), sched(s), params(c.param_seed) {
    PAIRAUG_VALIDATE(cfg.vocab_size > 0, "vocab_size must be set");
    PAIRAUG_VALIDATE(cfg.base >= 1 && !cfg.mults.empty(), "need base channels and multipliers");
    PAIRAUG_VALIDATE(cfg.temb_dim >= 4 && cfg.temb_dim % 2 == 0, "temb_dim must be even, >= 4");
    PAIRAUG_VALIDATE(cfg.max_tokens >= 1 && cfg.max_tokens <= text::kMaxTokens,
                     "max_tokens must be in [1, ", text::kMaxTokens, "]");
    const int64_t levels = cfg.levels();
    int64_t span = int64_t{1} << (levels - 1);
    PAIRAUG_VALIDATE(cfg.image_size % (2 * span) == 0, "image_size ", cfg.image_size,
                     " not divisible across ", levels, " levels");
    for (int64_t i = 0; i < levels; ++i)
      PAIRAUG_VALIDATE(cfg.channels(i) % cfg.norm_groups == 0, "level ", i, " channels ",
                       cfg.channels(i), " not divisible by ", cfg.norm_groups, " groups");
    for (size_t i = 0; i < cfg.attn_levels.size(); ++i) {
      PAIRAUG_VALIDATE(cfg.attn_levels[i] >= 0 && cfg.attn_levels[i] < levels,
                       "attention level out of range");
      PAIRAUG_VALIDATE(i == 0 || cfg.attn_levels[i] > cfg.attn_levels[i - 1],
                       "attention levels must be sorted and unique");
    }
    sched.finalize();

    temb_l1 = nn::Linear<S>(params, "temb.l1", cfg.temb_dim, cfg.temb_dim);
    temb_l2 = nn::Linear<S>(params, "temb.l2", cfg.temb_dim, cfg.temb_dim);
    txt_embed = params.create("txt.embed", {cfg.vocab_size, cfg.txt_dim}, nn::Init::kNormal02);
    txt_pos = params.create("txt.pos", {cfg.max_tokens, cfg.txt_dim}, nn::Init::kNormal02);
    txt_ln = nn::LayerNorm<S>(params, "txt.ln", cfg.txt_dim);

    stem = nn::Conv2d<S>(params, "stem", 1, cfg.channels(0), 3, 1, 1);
    int layer_idx = 0;
    for (int64_t i = 0; i < levels; ++i) {
      const int64_t cin = cfg.channels(i == 0 ? 0 : i - 1), cout = cfg.channels(i);
      down.emplace_back(params, cat("down", i), cin, cout, cfg.norm_groups, cfg.temb_dim);
      if (has_attn(i))
        attn_down.emplace_back(params, cat("attn.down", i), cout, cfg.txt_dim, layer_idx++);
      if (i + 1 < levels)
        down_conv.emplace_back(params, cat("downc", i), cout, cout, 3, 2, 1);
    }
    const int64_t cl = cfg.channels(levels - 1);
    mid1 = ResBlock<S>(params, "mid1", cl, cl, cfg.norm_groups, cfg.temb_dim);
    attn_mid = CrossAttnBlock<S>(params, "attn.mid", cl, cfg.txt_dim, layer_idx++);
    mid2 = ResBlock<S>(params, "mid2", cl, cl, cfg.norm_groups, cfg.temb_dim);
    up.resize(static_cast<size_t>(levels));
    up_conv.resize(static_cast<size_t>(levels > 0 ? levels - 1 : 0));
    attn_up.resize(cfg.attn_levels.size());
    int64_t cur = cl;  // channel width entering each level's concat
    for (int64_t i = levels - 1; i >= 0; --i) {
      const int64_t cout = cfg.channels(i == 0 ? 0 : i - 1);
      up[static_cast<size_t>(i)] = ResBlock<S>(params, cat("up", i), cur + cfg.channels(i), cout,
                                               cfg.norm_groups, cfg.temb_dim);
      if (has_attn(i))
        attn_up[attn_slot(i)] =
            CrossAttnBlock<S>(params, cat("attn.up", i), cout, cfg.txt_dim, layer_idx++);
      if (i > 0) up_conv[static_cast<size_t>(i - 1)] =
          nn::Conv2d<S>(params, cat("upc", i - 1), cout, cout, 3, 1, 1);
      cur = cout;
    }
    out_gn = nn::GroupNorm<S>(params, "out.gn", cfg.channels(0), cfg.norm_groups);
    out_conv = nn::Conv2d<S>(params, "out.conv", cfg.channels(0), 1, 3, 1, 1);
  }

  bool has_attn(int64_t level) const {
    for (int64_t a : cfg.attn_levels)
      if (a == level) return true;
    return false;
  }

  /// Names of the cross-attention layers in execution order; a map's layer
  /// field indexes this list.
  std::vector<std::string> attn_layer_names() const {
    std::vector<std::string> names;
    for (int64_t a : cfg.attn_levels) names.push_back(cat("down", a));
    names.push_back("mid");
    for (auto it = cfg.attn_levels.rbegin(); it != cfg.attn_levels.rend(); ++it)
      names.push_back(cat("up", *it));
    return names;
  }
  int attn_layer_count() const { return static_cast<int>(2 * cfg.attn_levels.size() + 1); }

  /// Sinusoidal embedding of raw timesteps, [n, temb_dim].
  Tensor<S> time_embedding(const std::vector<int64_t>& t) const {
    const int64_t half = cfg.temb_dim / 2;
    Tensor<S> out({static_cast<int64_t>(t.size()), cfg.temb_dim});
    for (size_t i = 0; i < t.size(); ++i)
      for (int64_t k = 0; k < half; ++k) {
        const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                  static_cast<double>(half - 1));
        const double a = static_cast<double>(t[i]) * f;
        out.data[i * static_cast<size_t>(cfg.temb_dim) + static_cast<size_t>(k)] =
            static_cast<S>(std::sin(a));
        out.data[i * static_cast<size_t>(cfg.temb_dim) + static_cast<size_t>(half + k)] =
            static_cast<S>(std::cos(a));
      }
    return out;
  }

  /// Noise prediction for a batch. x_t is [n,1,H,W]; ids and key_valid are
  /// packed [n*L]. The hook (sampling only) sees every cross-attention map.
  nn::Var<S> forward(const Tensor<S>& x_t, const std::vector<int64_t>& t,
                     const std::vector<int32_t>& ids, const std::vector<uint8_t>& key_valid,
                     const MapHook<S>* hook = nullptr) const {
    const int64_t n = x_t.dim(0), levels = cfg.levels(), L = cfg.max_tokens;
    PAIRAUG_VALIDATE(x_t.rank() == 4 && x_t.dim(1) == 1 && x_t.dim(2) == cfg.image_size &&
                         x_t.dim(3) == cfg.image_size,
                     "forward expects [n,1,", cfg.image_size, ",", cfg.image_size, "], got ",
                     shape_str(x_t.shape));
    PAIRAUG_VALIDATE(static_cast<int64_t>(t.size()) == n, "one timestep per sample");
    PAIRAUG_VALIDATE(static_cast<int64_t>(ids.size()) == n * L &&
                         static_cast<int64_t>(key_valid.size()) == n * L,
                     "ids/key_valid must be packed [n*L]");
    for (int64_t ti : t)
      PAIRAUG_VALIDATE(ti >= 0 && ti < sched.T, "timestep ", ti, " outside [0, ", sched.T, ")");

    auto emb = nn::silu(temb_l2(nn::silu(temb_l1(nn::constant(time_embedding(t))))));
    auto ctx = txt_ln(nn::add_tiled(nn::embedding(txt_embed, ids), txt_pos, n));

    auto h = stem(nn::constant(x_t));
    std::vector<nn::Var<S>> skips;
    for (int64_t i = 0; i < levels; ++i) {
      h = down[static_cast<size_t>(i)](h, emb);
      if (has_attn(i)) h = attn_down[attn_slot(i)](h, ctx, key_valid, L, hook);
      skips.push_back(h);
      if (i + 1 < levels) h = down_conv[static_cast<size_t>(i)](h);
    }
    h = mid1(h, emb);
    h = attn_mid(h, ctx, key_valid, L, hook);
    h = mid2(h, emb);
    for (int64_t i = levels - 1; i >= 0; --i) {
      h = nn::concat_channels(h, skips[static_cast<size_t>(i)]);
      h = up[static_cast<size_t>(i)](h, emb);
      if (has_attn(i)) h = attn_up[attn_slot(i)](h, ctx, key_valid, L, hook);
      if (i > 0) h = up_conv[static_cast<size_t>(i - 1)](nn::upsample_nearest2(h));
    }
    return out_conv(nn::silu(out_gn(h)));
  }

 private:
  size_t attn_slot(int64_t level) const {
    for (size_t i = 0; i < cfg.attn_levels.size(); ++i)
      if (cfg.attn_levels[i] == level) return i;
    PAIRAUG_CHECK(false, StateError, "no attention at level ", level);
    return 0;
  }
};

// ---------------------------------------------------------------------------
// classifier-free guidance and the multistep sampler
// ---------------------------------------------------------------------------

/// eps_uncond + w (eps_cond - eps_uncond), exact (bitwise) at w in {0, 1}.
template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_cond, const Tensor<S>& eps_uncond, double w) {
  PAIRAUG_VALIDATE(eps_cond.same_shape(eps_uncond), "cfg_combine: shape mismatch ",
                   shape_str(eps_cond.shape), " vs ", shape_str(eps_uncond.shape));
  PAIRAUG_VALIDATE(std::isfinite(w), "guidance scale must be finite");
  if (w == 0.0) return eps_uncond;
  if (w == 1.0) return eps_cond;
  Tensor<S> out = eps_uncond;
  for (size_t i = 0; i < out.data.size(); ++i) {
    const double u = eps_uncond.data[i];
    out.data[i] = static_cast<S>(u + w * (static_cast<double>(eps_cond.data[i]) - u));
  }
  return out;
}

/// Walks a fixed descending timestep grid; history holds raw prior noise
/// estimates, newest first, at most three (the step rule combines them with
/// the current estimate, so up to four enter one update).
struct SamplerState {
  std::vector<int64_t> grid;
  int64_t cursor = 0;  // next expected step index
  Tensor<float> x;     // current latent [n,1,H,W]
  std::deque<Tensor<float>> history;
};

SamplerState init_sampler(const NoiseSchedule& sched, int64_t steps, Tensor<float> x_init);

/// One PNDM-style linear-multistep update. With h prior estimates the
/// effective noise is the order-(h+1) Adams-Bashforth combination (plain,
/// 2-, 3-, then 4-step weights); the transfer is the deterministic DDIM rule,
/// and the final step uses cumulative alpha 1, returning the clean sample.
/// Steps must be taken in grid order, each exactly once (StateError).
const Tensor<float>& scheduler_step(const NoiseSchedule& sched, SamplerState& state,
                                    const Tensor<float>& eps, int64_t step_index);

// ---------------------------------------------------------------------------
// training and sampling
// ---------------------------------------------------------------------------

struct TrainDiffusionConfig {
  int64_t steps = 1500;
  int64_t batch = 8;
  double lr = 2e-3;
  double weight_decay = 0.0;
  double clip = 1.0;
  double cond_dropout = 0.1;  // null-conditioning rate for guidance
  uint64_t seed = 1;
};

/// The tokenizer every diffusion entry point shares.
const text::Tokenizer& default_tokenizer();

/// Tokenizes a report to the model's fixed length L.
std::vector<int32_t> encode_report(const DenoiserConfig& cfg, const std::string& report);

/// Noise-prediction training over paired images [1,H,W] and reports.
/// Appends to the model's loss curve, marks it trained, and returns the
/// checkpoint. Aborts with diagnostics on a non-finite loss.
Checkpoint train_diffusion(DiffusionModel<float>& model, const std::vector<Tensor<float>>& images,
                           const std::vector<std::string>& reports,
                           const TrainDiffusionConfig& tc);

/// Serializes weights plus config, schedule, and loss curve.
Checkpoint to_checkpoint(const DiffusionModel<float>& model);
DiffusionModel<float> model_from_checkpoint(const Checkpoint& ck);

/// The standard-normal starting latent [n,1,H,W]; sample s depends only on
/// (seed, s), never on batch composition.
Tensor<float> initial_noise(const DenoiserConfig& cfg, uint64_t seed, int64_t n);

/// Runs a guided trajectory from x_init over `steps` grid steps and returns
/// the final latent (unclipped). The hook, when given, sees every
/// cross-attention map of the conditional pass; the unconditional pass runs
/// on null text and is never hooked.
Tensor<float> guided_trajectory(const DiffusionModel<float>& model,
                                const std::vector<int32_t>& cond_ids,
                                const std::vector<uint8_t>& cond_valid, int64_t n, int64_t steps,
                                double guidance, Tensor<float> x_init,
                                const MapHook<float>* hook = nullptr);

/// Clips one sample of a batched latent into a [1,H,W] image in [0,1].
Tensor<float> to_image(const Tensor<float>& latent, int64_t sample);

struct SampleResult {
  Tensor<float> image;   // [1,H,W], clipped to [0,1]
  AttentionTrace trace;  // populated when requested
};

/// Deterministic guided sampling of one image from a report. The trace
/// records the conditional pass's maps for every (step, layer).
SampleResult sample(const DiffusionModel<float>& model, const std::string& report, uint64_t seed,
                    int64_t steps, double guidance, bool record_trace = false);

/// Batched variant (no traces). Each sample's starting noise depends only on
/// its own seed.
std::vector<Tensor<float>> sample_batch(const DiffusionModel<float>& model,
                                        const std::vector<std::string>& reports,
                                        const std::vector<uint64_t>& seeds, int64_t steps,
                                        double guidance);

}  // namespace pairaug::diffusion
