#include "pairaug/vlp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "pairaug/metrics.hpp"
#include "pairaug/rng.hpp"

namespace pairaug::vlp {

namespace {

void check_pairs(const VlpConfig& cfg, const std::vector<Tensor<float>>& images,
                 const std::vector<std::vector<int32_t>>* token_ids) {
  PAIRAUG_VALIDATE(!images.empty(), "no training pairs");
  if (token_ids)
    PAIRAUG_VALIDATE(images.size() == token_ids->size(), "got ", images.size(), " images but ",
                     token_ids->size(), " token sequences");
  for (size_t i = 0; i < images.size(); ++i) {
    PAIRAUG_VALIDATE((images[i].shape ==
                      std::vector<int64_t>{1, cfg.image_size, cfg.image_size}),
                     "image ", i, " has shape ", shape_str(images[i].shape));
    if (token_ids)
      PAIRAUG_VALIDATE(static_cast<int64_t>((*token_ids)[i].size()) == cfg.max_tokens,
                       "token sequence ", i, " has length ", (*token_ids)[i].size());
  }
}

Tensor<float> stack_images(const std::vector<Tensor<float>>& images,
                           const std::vector<size_t>& idx, size_t start, size_t count,
                           int64_t side) {
  Tensor<float> out({static_cast<int64_t>(count), 1, side, side});
  const size_t px = static_cast<size_t>(side * side);
  for (size_t b = 0; b < count; ++b)
    std::copy_n(images[idx[start + b]].data.data(), px, out.data.data() + b * px);
  return out;
}

std::vector<int32_t> stack_ids(const std::vector<std::vector<int32_t>>& token_ids,
                               const std::vector<size_t>& idx, size_t start, size_t count,
                               int64_t max_tokens) {
  std::vector<int32_t> out;
  out.reserve(count * static_cast<size_t>(max_tokens));
  for (size_t b = 0; b < count; ++b) {
    const auto& seq = token_ids[idx[start + b]];
    out.insert(out.end(), seq.begin(), seq.end());
  }
  return out;
}

std::vector<size_t> shuffled_indices(size_t n, uint64_t seed) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  Rng rng(seed);
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
  return idx;
}

}  // namespace

TrainStats train_contrastive(DualEncoder<float>& model, const std::vector<Tensor<float>>& images,
                             const std::vector<std::vector<int32_t>>& token_ids,
                             const TrainConfig& cfg) {
  check_pairs(model.cfg, images, &token_ids);
  PAIRAUG_VALIDATE(images.size() >= 2, "contrastive training needs at least 2 pairs");
  PAIRAUG_VALIDATE(cfg.batch >= 2 && cfg.epochs >= 1, "batch must be >= 2 and epochs >= 1");

  fit_input_stats(model, images);
  const auto params = model.params.all();
  nn::AdamW<float> opt(params, static_cast<float>(cfg.lr), 0.9f, 0.999f, 1e-8f,
                       static_cast<float>(cfg.weight_decay));
  const size_t n = images.size();
  const auto batch = static_cast<size_t>(cfg.batch);

  TrainStats stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto idx = shuffled_indices(n, derive_seed(cfg.seed, "shuffle", epoch));
    double acc = 0.0;
    int batches = 0;
    for (size_t start = 0; start + 2 <= n; start += batch) {
      const size_t count = std::min(batch, n - start);
      if (count < 2) break;
      const auto imgs = stack_images(images, idx, start, count, model.cfg.image_size);
      const auto ids = stack_ids(token_ids, idx, start, count, model.cfg.max_tokens);

      auto loss = model.contrastive_loss(model.encode_image(imgs),
                                         model.encode_text(ids, static_cast<int64_t>(count)));
      const double value = loss->value.data[0];
      PAIRAUG_CHECK(std::isfinite(value), NumericError, "non-finite contrastive loss at step ",
                    stats.steps, " (epoch ", epoch, ")");
      model.params.zero_grad();
      nn::backward(loss);
      nn::clip_grad_norm(params, static_cast<float>(cfg.clip));
      opt.step();

      acc += value;
      ++batches;
      ++stats.steps;
    }
    stats.epoch_loss.push_back(acc / std::max(1, batches));
  }
  return stats;
}

Tensor<float> embed_images(const DualEncoder<float>& model, const std::vector<Tensor<float>>& images,
                           int batch) {
  check_pairs(model.cfg, images, nullptr);
  PAIRAUG_VALIDATE(batch >= 1, "batch must be positive");
  nn::NoGradGuard guard;

  const size_t n = images.size();
  Tensor<float> out({static_cast<int64_t>(n), model.cfg.embed_dim});
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  for (size_t start = 0; start < n; start += static_cast<size_t>(batch)) {
    const size_t count = std::min(static_cast<size_t>(batch), n - start);
    const auto imgs = stack_images(images, idx, start, count, model.cfg.image_size);
    const auto emb = model.encode_image(imgs);
    std::copy_n(emb->value.data.data(), count * static_cast<size_t>(model.cfg.embed_dim),
                out.data.data() + start * static_cast<size_t>(model.cfg.embed_dim));
  }
  return out;
}

Tensor<float> embed_texts(const DualEncoder<float>& model,
                          const std::vector<std::vector<int32_t>>& token_ids, int batch) {
  PAIRAUG_VALIDATE(!token_ids.empty(), "no token sequences");
  PAIRAUG_VALIDATE(batch >= 1, "batch must be positive");
  nn::NoGradGuard guard;

  const size_t n = token_ids.size();
  Tensor<float> out({static_cast<int64_t>(n), model.cfg.embed_dim});
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  for (size_t start = 0; start < n; start += static_cast<size_t>(batch)) {
    const size_t count = std::min(static_cast<size_t>(batch), n - start);
    const auto ids = stack_ids(token_ids, idx, start, count, model.cfg.max_tokens);
    const auto emb = model.encode_text(ids, static_cast<int64_t>(count));
    std::copy_n(emb->value.data.data(), count * static_cast<size_t>(model.cfg.embed_dim),
                out.data.data() + start * static_cast<size_t>(model.cfg.embed_dim));
  }
  return out;
}

Tensor<float> zero_shot_probs(const DualEncoder<float>& model,
                              const std::vector<Tensor<float>>& images, const text::Tokenizer& tok,
                              const std::vector<corpus::PromptPair>& prompts,
                              Tensor<float>* p_neg_out) {
  constexpr int K = corpus::kNumFindings;
  PAIRAUG_VALIDATE(prompts.size() == static_cast<size_t>(K), "expected ", K,
                   " prompt pairs, got ", prompts.size());
  std::vector<std::vector<int32_t>> prompt_ids;
  prompt_ids.reserve(2 * K);
  for (int k = 0; k < K; ++k) {
    const auto& pp = prompts[static_cast<size_t>(k)];
    prompt_ids.push_back(tok.encode(pp.positive, static_cast<int>(model.cfg.max_tokens)));
    prompt_ids.push_back(tok.encode(pp.negative, static_cast<int>(model.cfg.max_tokens)));
  }

  const auto pe = embed_texts(model, prompt_ids);
  const auto ie = embed_images(model, images);
  const auto n = ie.dim(0);
  const auto d = model.cfg.embed_dim;
  const float scale = std::exp(model.logit_scale->value.data[0]);

  Tensor<float> pos({n, K});
  Tensor<float> neg({n, K});
  for (int64_t i = 0; i < n; ++i) {
    const float* img = ie.data.data() + i * d;
    for (int k = 0; k < K; ++k) {
      const float* tp = pe.data.data() + (2 * k) * d;
      const float* tn = pe.data.data() + (2 * k + 1) * d;
      float sp = 0.f, sn = 0.f;
      for (int64_t c = 0; c < d; ++c) {
        sp += img[c] * tp[c];
        sn += img[c] * tn[c];
      }
      sp *= scale;
      sn *= scale;
      const float m = std::max(sp, sn);
      const float ep = std::exp(sp - m), en = std::exp(sn - m);
      pos.at2(i, k) = ep / (ep + en);
      neg.at2(i, k) = en / (ep + en);
    }
  }
  if (p_neg_out) *p_neg_out = std::move(neg);
  return pos;
}

Tensor<float> zero_shot_probs(const DualEncoder<float>& model,
                              const std::vector<Tensor<float>>& images, const text::Tokenizer& tok,
                              Tensor<float>* p_neg_out) {
  std::vector<corpus::PromptPair> prompts;
  prompts.reserve(corpus::kNumFindings);
  for (int k = 0; k < corpus::kNumFindings; ++k)
    prompts.push_back(corpus::prompt_pair(static_cast<corpus::Finding>(k)));
  return zero_shot_probs(model, images, tok, prompts, p_neg_out);
}

ProbeResult train_linear_probe(const DualEncoder<float>& model,
                               const std::vector<Tensor<float>>& images,
                               const std::vector<std::array<int, corpus::kNumFindings>>& labels,
                               const ProbeConfig& cfg) {
  constexpr int K = corpus::kNumFindings;
  PAIRAUG_VALIDATE(images.size() == labels.size(), "got ", images.size(), " images but ",
                   labels.size(), " label rows");
  PAIRAUG_VALIDATE(cfg.batch >= 1 && cfg.epochs >= 1, "batch and epochs must be positive");

  const std::string hash_before = model.params.to_checkpoint().content_hash();
  const auto emb = embed_images(model, images);
  const size_t n = images.size();
  const auto d = model.cfg.embed_dim;

  nn::ParamStore<float> head(derive_seed(cfg.seed, "probe-head"));
  auto w = head.create("w", {d, K}, nn::Init::kXavierUniform);
  auto b = head.create("b", {K}, nn::Init::kZeros);
  nn::AdamW<float> opt(head.all(), static_cast<float>(cfg.lr), 0.9f, 0.999f, 1e-8f,
                       static_cast<float>(cfg.weight_decay));

  ProbeResult result;
  const auto batch = static_cast<size_t>(cfg.batch);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto idx = shuffled_indices(n, derive_seed(cfg.seed, "probe-shuffle", epoch));
    double acc = 0.0;
    int batches = 0;
    for (size_t start = 0; start < n; start += batch) {
      const size_t count = std::min(batch, n - start);
      Tensor<float> x({static_cast<int64_t>(count), d});
      Tensor<float> y({static_cast<int64_t>(count), K});
      for (size_t r = 0; r < count; ++r) {
        const size_t src = idx[start + r];
        std::copy_n(emb.data.data() + src * static_cast<size_t>(d), static_cast<size_t>(d),
                    x.data.data() + r * static_cast<size_t>(d));
        for (int k = 0; k < K; ++k) {
          const int lab = labels[src][static_cast<size_t>(k)];
          PAIRAUG_VALIDATE(lab == 0 || lab == 1, "label must be 0/1, got ", lab);
          y.at2(static_cast<int64_t>(r), k) = static_cast<float>(lab);
        }
      }
      auto logits = nn::add_row(nn::matmul(nn::constant(std::move(x)), w), b);
      auto loss = nn::bce_with_logits(logits, y);
      head.zero_grad();
      nn::backward(loss);
      opt.step();
      acc += loss->value.data[0];
      ++batches;
    }
    result.epoch_loss.push_back(acc / std::max(1, batches));
  }

  const std::string hash_after = model.params.to_checkpoint().content_hash();
  PAIRAUG_CHECK(hash_before == hash_after, StateError,
                "encoder changed during linear probing: ", hash_before, " -> ", hash_after);
  result.w = w->value;
  result.b = b->value;
  result.encoder_hash = hash_after;
  return result;
}

Tensor<float> probe_probs(const DualEncoder<float>& model, const ProbeResult& probe,
                          const std::vector<Tensor<float>>& images) {
  constexpr int K = corpus::kNumFindings;
  PAIRAUG_VALIDATE((probe.w.shape == std::vector<int64_t>{model.cfg.embed_dim, K}),
                   "probe weights have shape ", shape_str(probe.w.shape));
  const auto emb = embed_images(model, images);
  const auto n = emb.dim(0);
  const auto d = model.cfg.embed_dim;
  Tensor<float> out({n, K});
  for (int64_t i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) {
      float z = probe.b.data[static_cast<size_t>(k)];
      for (int64_t c = 0; c < d; ++c) z += emb.at2(i, c) * probe.w.at2(c, k);
      out.at2(i, k) = 1.f / (1.f + std::exp(-z));
    }
  return out;
}

AucReport auc_report(const Tensor<float>& probs,
                     const std::vector<std::array<int, corpus::kNumFindings>>& labels) {
  constexpr int K = corpus::kNumFindings;
  PAIRAUG_VALIDATE(probs.rank() == 2 && probs.dim(1) == K, "probs must be [n, ", K, "]");
  PAIRAUG_VALIDATE(probs.dim(0) == static_cast<int64_t>(labels.size()), "probs rows (",
                   probs.dim(0), ") != label rows (", labels.size(), ")");
  AucReport report;
  const auto n = probs.dim(0);
  for (int k = 0; k < K; ++k) {
    std::vector<double> scores(static_cast<size_t>(n));
    std::vector<int> ys(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      scores[static_cast<size_t>(i)] = probs.at2(i, k);
      ys[static_cast<size_t>(i)] = labels[static_cast<size_t>(i)][static_cast<size_t>(k)];
    }
    report.per_finding[static_cast<size_t>(k)] = metrics::auc(scores, ys);
  }
  report.macro = std::accumulate(report.per_finding.begin(), report.per_finding.end(), 0.0) /
                 static_cast<double>(K);
  return report;
}


Checkpoint to_checkpoint(const DualEncoder<float>& model) {
  std::map<std::string, std::string> meta;
  meta["format"] = "pairaug-vlp-v1";
  meta["config"] = nlohmann::ordered_json{{"d_model", model.cfg.d_model},
                                          {"embed_dim", model.cfg.embed_dim},
                                          {"n_blocks", model.cfg.n_blocks},
                                          {"patch", model.cfg.patch},
                                          {"image_size", model.cfg.image_size},
                                          {"max_tokens", model.cfg.max_tokens},
                                          {"vocab_size", model.cfg.vocab_size},
                                          {"param_seed", model.cfg.param_seed}}
                       .dump();
  return model.params.to_checkpoint(std::move(meta));
}

DualEncoder<float> model_from_checkpoint(const Checkpoint& ck) {
  PAIRAUG_CHECK(ck.meta.count("format") && ck.meta.at("format") == "pairaug-vlp-v1", SchemaError,
                "not a dual-encoder checkpoint");
  nlohmann::ordered_json cj;
  try {
    cj = nlohmann::ordered_json::parse(ck.meta.at("config"));
  } catch (const std::exception& e) {
    PAIRAUG_CHECK(false, SchemaError, "bad checkpoint metadata: ", e.what());
  }
  VlpConfig cfg;
  cfg.d_model = cj.at("d_model").get<int64_t>();
  cfg.embed_dim = cj.at("embed_dim").get<int64_t>();
  cfg.n_blocks = cj.at("n_blocks").get<int64_t>();
  cfg.patch = cj.at("patch").get<int64_t>();
  cfg.image_size = cj.at("image_size").get<int64_t>();
  cfg.max_tokens = cj.at("max_tokens").get<int64_t>();
  cfg.vocab_size = cj.at("vocab_size").get<int64_t>();
  cfg.param_seed = cj.at("param_seed").get<uint64_t>();
  DualEncoder<float> model(cfg);
  model.params.load_checkpoint(ck);
  return model;
}

}  // namespace pairaug::vlp
