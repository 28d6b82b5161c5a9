#include "pairaug/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace pairaug::diffusion {

using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int64_t T, double beta_start, double beta_end,
                                    int64_t inference_steps) {
  PAIRAUG_VALIDATE(T >= 1, "schedule needs at least one timestep");
  PAIRAUG_VALIDATE(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
                   "betas must satisfy 0 < start <= end < 1, got ", beta_start, "..", beta_end);
  NoiseSchedule s;
  s.T = T;
  s.inference_steps = inference_steps;
  s.betas.resize(static_cast<size_t>(T));
  for (int64_t i = 0; i < T; ++i)
    s.betas[static_cast<size_t>(i)] =
        T == 1 ? beta_start
               : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                                  static_cast<double>(T - 1);
  s.finalize();
  return s;
}

void NoiseSchedule::finalize() {
  PAIRAUG_VALIDATE(T >= 1 && static_cast<int64_t>(betas.size()) == T, "betas must have length T");
  PAIRAUG_VALIDATE(inference_steps >= 1 && inference_steps <= T,
                   "inference_steps must be in [1, T]");
  alphas.resize(betas.size());
  acp.resize(betas.size());
  double run = 1.0;
  for (size_t i = 0; i < betas.size(); ++i) {
    PAIRAUG_VALIDATE(betas[i] > 0.0 && betas[i] < 1.0, "beta[", i, "] outside (0, 1)");
    PAIRAUG_VALIDATE(i == 0 || betas[i] >= betas[i - 1], "betas must be nondecreasing");
    alphas[i] = 1.0 - betas[i];
    run *= alphas[i];
    PAIRAUG_VALIDATE(run > 0.0, "cumulative alpha underflowed at ", i);
    acp[i] = run;
  }
}

std::vector<int64_t> NoiseSchedule::inference_grid(int64_t steps) const {
  PAIRAUG_VALIDATE(steps >= 1 && steps <= T, "steps must be in [1, ", T, "], got ", steps);
  std::vector<int64_t> grid(static_cast<size_t>(steps));
  if (steps == 1) {
    grid[0] = T - 1;
    return grid;
  }
  // descending floor(linspace(T-1 .. 0)); spacing >= 1 keeps entries distinct
  for (int64_t j = 0; j < steps; ++j)
    grid[static_cast<size_t>(j)] = static_cast<int64_t>(
        std::floor(static_cast<double>(steps - 1 - j) * static_cast<double>(T - 1) /
                   static_cast<double>(steps - 1)));
  return grid;
}

// ---------------------------------------------------------------------------
// sampler
// ---------------------------------------------------------------------------

SamplerState init_sampler(const NoiseSchedule& sched, int64_t steps, Tensor<float> x_init) {
  PAIRAUG_VALIDATE(x_init.rank() == 4, "sampler latent must be [n,1,H,W], got ",
                   shape_str(x_init.shape));
  SamplerState st;
  st.grid = sched.inference_grid(steps);
  st.x = std::move(x_init);
  return st;
}

const Tensor<float>& scheduler_step(const NoiseSchedule& sched, SamplerState& state,
                                    const Tensor<float>& eps, int64_t step_index) {
  PAIRAUG_CHECK(step_index == state.cursor, StateError, "scheduler_step expects step ",
                state.cursor, ", got ", step_index);
  PAIRAUG_CHECK(state.cursor < static_cast<int64_t>(state.grid.size()), StateError,
                "trajectory already finished");
  PAIRAUG_VALIDATE(eps.same_shape(state.x), "noise estimate shape ", shape_str(eps.shape),
                   " does not match latent ", shape_str(state.x.shape));

  const size_t i = static_cast<size_t>(step_index);
  const int64_t t = state.grid[i];
  const double acp_t = sched.acp[static_cast<size_t>(t)];
  const double acp_prev =
      i + 1 < state.grid.size() ? sched.acp[static_cast<size_t>(state.grid[i + 1])] : 1.0;

  // Adams-Bashforth combination of the raw estimates, newest first
  const size_t h = std::min<size_t>(state.history.size(), 3);
  const Tensor<float>* e1 = h >= 1 ? &state.history[0] : nullptr;
  const Tensor<float>* e2 = h >= 2 ? &state.history[1] : nullptr;
  const Tensor<float>* e3 = h >= 3 ? &state.history[2] : nullptr;

  const double sa = std::sqrt(acp_t), sb = std::sqrt(1.0 - acp_t);
  const double sp = std::sqrt(acp_prev), sq = std::sqrt(1.0 - acp_prev);
  for (size_t j = 0; j < state.x.data.size(); ++j) {
    const double e0 = eps.data[j];
    double ec = e0;
    if (h == 1) ec = (3.0 * e0 - static_cast<double>(e1->data[j])) / 2.0;
    else if (h == 2)
      ec = (23.0 * e0 - 16.0 * e1->data[j] + 5.0 * e2->data[j]) / 12.0;
    else if (h == 3)
      ec = (55.0 * e0 - 59.0 * e1->data[j] + 37.0 * e2->data[j] - 9.0 * e3->data[j]) / 24.0;
    const double x0 = (static_cast<double>(state.x.data[j]) - sb * ec) / sa;
    state.x.data[j] = static_cast<float>(sp * x0 + sq * ec);
  }

  state.history.push_front(eps);
  while (state.history.size() > 3) state.history.pop_back();
  ++state.cursor;
  return state.x;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

const text::Tokenizer& default_tokenizer() {
  static const text::Tokenizer tok;
  return tok;
}

std::vector<int32_t> encode_report(const DenoiserConfig& cfg, const std::string& report) {
  return default_tokenizer().encode(report, static_cast<int>(cfg.max_tokens));
}

namespace {

/// Packs per-record ids/masks for a batch, dropping conditioning where asked.
void pack_batch(const std::vector<std::vector<int32_t>>& ids,
                const std::vector<size_t>& batch_idx, const std::vector<uint8_t>& drop,
                int64_t L, std::vector<int32_t>& out_ids, std::vector<uint8_t>& out_valid) {
  out_ids.assign(batch_idx.size() * static_cast<size_t>(L), text::Tokenizer::kPad);
  out_valid.assign(batch_idx.size() * static_cast<size_t>(L), 0);
  for (size_t s = 0; s < batch_idx.size(); ++s) {
    if (drop[s]) continue;
    const auto& row = ids[batch_idx[s]];
    for (int64_t j = 0; j < L; ++j) {
      const int32_t id = row[static_cast<size_t>(j)];
      out_ids[s * static_cast<size_t>(L) + static_cast<size_t>(j)] = id;
      if (id != text::Tokenizer::kPad)
        out_valid[s * static_cast<size_t>(L) + static_cast<size_t>(j)] = 1;
    }
  }
}

ordered_json config_json(const DenoiserConfig& c) {
  return ordered_json{{"base", c.base},
                      {"mults", c.mults},
                      {"attn_levels", c.attn_levels},
                      {"norm_groups", c.norm_groups},
                      {"temb_dim", c.temb_dim},
                      {"txt_dim", c.txt_dim},
                      {"max_tokens", c.max_tokens},
                      {"image_size", c.image_size},
                      {"vocab_size", c.vocab_size},
                      {"param_seed", c.param_seed}};
}

DenoiserConfig config_from_json(const ordered_json& j) {
  DenoiserConfig c;
  c.base = j.at("base").get<int64_t>();
  c.mults = j.at("mults").get<std::vector<int64_t>>();
  c.attn_levels = j.at("attn_levels").get<std::vector<int64_t>>();
  c.norm_groups = j.at("norm_groups").get<int64_t>();
  c.temb_dim = j.at("temb_dim").get<int64_t>();
  c.txt_dim = j.at("txt_dim").get<int64_t>();
  c.max_tokens = j.at("max_tokens").get<int64_t>();
  c.image_size = j.at("image_size").get<int64_t>();
  c.vocab_size = j.at("vocab_size").get<int64_t>();
  c.param_seed = j.at("param_seed").get<uint64_t>();
  return c;
}

}  // namespace

Checkpoint to_checkpoint(const DiffusionModel<float>& model) {
  std::map<std::string, std::string> meta;
  meta["format"] = "pairaug-diffusion-v1";
  meta["config"] = config_json(model.cfg).dump();
  meta["schedule"] = ordered_json{{"T", model.sched.T},
                                  {"inference_steps", model.sched.inference_steps},
                                  {"betas", model.sched.betas}}
                         .dump();
  meta["trained_steps"] = std::to_string(model.loss_curve.size());
  meta["loss_curve"] = ordered_json(model.loss_curve).dump();
  return model.params.to_checkpoint(std::move(meta));
}

DiffusionModel<float> model_from_checkpoint(const Checkpoint& ck) {
  PAIRAUG_CHECK(ck.meta.count("format") && ck.meta.at("format") == "pairaug-diffusion-v1",
                SchemaError, "not a diffusion checkpoint");
  ordered_json cj, sj;
  try {
    cj = ordered_json::parse(ck.meta.at("config"));
    sj = ordered_json::parse(ck.meta.at("schedule"));
  } catch (const std::exception& e) {
    PAIRAUG_CHECK(false, SchemaError, "bad checkpoint metadata: ", e.what());
  }
  NoiseSchedule sched;
  sched.T = sj.at("T").get<int64_t>();
  sched.inference_steps = sj.at("inference_steps").get<int64_t>();
  sched.betas = sj.at("betas").get<std::vector<double>>();
  sched.finalize();
  DiffusionModel<float> model(config_from_json(cj), sched);
  model.params.load_checkpoint(ck);
  if (ck.meta.count("loss_curve"))
    model.loss_curve = ordered_json::parse(ck.meta.at("loss_curve")).get<std::vector<float>>();
  model.trained = !model.loss_curve.empty();
  return model;
}

Checkpoint train_diffusion(DiffusionModel<float>& model, const std::vector<Tensor<float>>& images,
                           const std::vector<std::string>& reports,
                           const TrainDiffusionConfig& tc) {
  PAIRAUG_VALIDATE(!images.empty(), "training corpus is empty");
  PAIRAUG_VALIDATE(images.size() == reports.size(), "got ", images.size(), " images for ",
                   reports.size(), " reports");
  PAIRAUG_VALIDATE(tc.steps >= 1 && tc.batch >= 1, "steps and batch must be positive");
  PAIRAUG_VALIDATE(tc.cond_dropout >= 0.0 && tc.cond_dropout <= 1.0,
                   "cond_dropout must be in [0, 1]");
  const int64_t hw = model.cfg.image_size, L = model.cfg.max_tokens;
  const int64_t px = hw * hw;
  for (const auto& img : images)
    PAIRAUG_VALIDATE(img.rank() == 3 && img.dim(0) == 1 && img.dim(1) == hw && img.dim(2) == hw,
                     "image must be [1,", hw, ",", hw, "], got ", shape_str(img.shape));

  std::vector<std::vector<int32_t>> ids(reports.size());
  for (size_t i = 0; i < reports.size(); ++i) ids[i] = encode_report(model.cfg, reports[i]);

  nn::AdamW<float> opt(model.params.all(), static_cast<float>(tc.lr), 0.9f, 0.999f, 1e-8f,
                       static_cast<float>(tc.weight_decay));
  const int64_t n_batch = tc.batch;
  Tensor<float> x_t({n_batch, 1, hw, hw});
  Tensor<float> noise({n_batch, 1, hw, hw});
  std::vector<int64_t> tsteps(static_cast<size_t>(n_batch));
  std::vector<int32_t> packed_ids;
  std::vector<uint8_t> packed_valid;

  for (int64_t step = 0; step < tc.steps; ++step) {
    Rng rng(derive_seed(tc.seed, "step", static_cast<uint64_t>(step)));
    std::vector<size_t> batch_idx(static_cast<size_t>(n_batch));
    std::vector<uint8_t> drop(static_cast<size_t>(n_batch), 0);
    for (int64_t s = 0; s < n_batch; ++s) {
      batch_idx[static_cast<size_t>(s)] =
          static_cast<size_t>(rng.uniform_int(static_cast<uint64_t>(images.size())));
      tsteps[static_cast<size_t>(s)] =
          static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(model.sched.T)));
      drop[static_cast<size_t>(s)] = rng.bernoulli(tc.cond_dropout) ? 1 : 0;
    }
    for (int64_t s = 0; s < n_batch; ++s) {
      const auto& x0 = images[batch_idx[static_cast<size_t>(s)]];
      const double acp = model.sched.acp[static_cast<size_t>(tsteps[static_cast<size_t>(s)])];
      const double sa = std::sqrt(acp), sb = std::sqrt(1.0 - acp);
      float* xp = x_t.data.data() + s * px;
      float* np = noise.data.data() + s * px;
      for (int64_t j = 0; j < px; ++j) {
        const double z = rng.normal();
        np[j] = static_cast<float>(z);
        xp[j] = static_cast<float>(sa * x0.data[static_cast<size_t>(j)] + sb * z);
      }
    }
    pack_batch(ids, batch_idx, drop, L, packed_ids, packed_valid);

    auto pred = model.forward(x_t, tsteps, packed_ids, packed_valid);
    auto loss = nn::mse_loss(pred, noise);
    const float lv = loss->value.data[0];
    PAIRAUG_CHECK(std::isfinite(lv), NumericError, "non-finite loss at step ", step,
                  " (lr=", tc.lr, ")");
    model.params.zero_grad();
    nn::backward(loss);
    nn::clip_grad_norm(model.params.all(), static_cast<float>(tc.clip));
    opt.step();
    model.loss_curve.push_back(lv);
  }
  model.trained = true;
  return to_checkpoint(model);
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

Tensor<float> initial_noise(const DenoiserConfig& cfg, uint64_t seed, int64_t n) {
  Tensor<float> x({n, 1, cfg.image_size, cfg.image_size});
  const int64_t px = cfg.image_size * cfg.image_size;
  for (int64_t s = 0; s < n; ++s) {
    Rng rng(derive_seed(seed, "z", static_cast<uint64_t>(s)));
    for (int64_t j = 0; j < px; ++j)
      x.data[static_cast<size_t>(s * px + j)] = static_cast<float>(rng.normal());
  }
  return x;
}

Tensor<float> guided_trajectory(const DiffusionModel<float>& model,
                                const std::vector<int32_t>& cond_ids,
                                const std::vector<uint8_t>& cond_valid, int64_t n, int64_t steps,
                                double guidance, Tensor<float> x_init,
                                const MapHook<float>* hook) {
  const int64_t L = model.cfg.max_tokens;
  const std::vector<int32_t> null_ids(static_cast<size_t>(n * L), text::Tokenizer::kPad);
  const std::vector<uint8_t> null_valid(static_cast<size_t>(n * L), 0);

  nn::NoGradGuard guard;
  SamplerState st = init_sampler(model.sched, steps, std::move(x_init));
  std::vector<int64_t> tsteps(static_cast<size_t>(n));
  for (int64_t i = 0; i < steps; ++i) {
    std::fill(tsteps.begin(), tsteps.end(), st.grid[static_cast<size_t>(i)]);
    auto eps_c = model.forward(st.x, tsteps, cond_ids, cond_valid, hook);
    auto eps_u = model.forward(st.x, tsteps, null_ids, null_valid);
    scheduler_step(model.sched, st, cfg_combine(eps_c->value, eps_u->value, guidance), i);
  }
  return std::move(st.x);
}

Tensor<float> to_image(const Tensor<float>& latent, int64_t sample) {
  PAIRAUG_VALIDATE(latent.rank() == 4 && latent.dim(1) == 1 && sample >= 0 &&
                       sample < latent.dim(0),
                   "to_image expects [n,1,H,W] and a sample in range");
  const int64_t h = latent.dim(2), w = latent.dim(3);
  Tensor<float> img({1, h, w});
  const int64_t px = h * w;
  for (int64_t j = 0; j < px; ++j)
    img.data[static_cast<size_t>(j)] =
        std::clamp(latent.data[static_cast<size_t>(sample * px + j)], 0.0f, 1.0f);
  return img;
}

SampleResult sample(const DiffusionModel<float>& model, const std::string& report, uint64_t seed,
                    int64_t steps, double guidance, bool record_trace) {
  PAIRAUG_CHECK(model.trained, StateError, "sample requires a trained checkpoint");
  PAIRAUG_VALIDATE(std::isfinite(guidance), "guidance must be finite");
  const int64_t L = model.cfg.max_tokens;
  const auto ids = encode_report(model.cfg, report);
  const auto valid = text::Tokenizer::valid_mask(ids);

  SampleResult res;
  MapHook<float> recorder;
  if (record_trace) {
    res.trace.layers = model.attn_layer_count();
    recorder = [&](int layer, int64_t /*sample*/, Tensor<float>& probs) {
      CrossAttentionMap m;
      m.layer = layer;
      m.probs = probs;
      m.key_valid = valid;
      res.trace.maps.push_back(std::move(m));
    };
  }
  Tensor<float> x =
      guided_trajectory(model, ids, valid, 1, steps, guidance, initial_noise(model.cfg, seed, 1),
                     record_trace ? &recorder : nullptr);
  if (record_trace) {
    res.trace.steps = steps;
    const auto grid = model.sched.inference_grid(steps);
    PAIRAUG_CHECK(res.trace.maps.size() ==
                      static_cast<size_t>(steps * res.trace.layers),
                  StateError, "incomplete attention trace");
    for (size_t i = 0; i < res.trace.maps.size(); ++i)
      res.trace.maps[i].t = grid[i / static_cast<size_t>(res.trace.layers)];
  }
  res.image = to_image(x, 0);
  return res;
}

std::vector<Tensor<float>> sample_batch(const DiffusionModel<float>& model,
                                        const std::vector<std::string>& reports,
                                        const std::vector<uint64_t>& seeds, int64_t steps,
                                        double guidance) {
  PAIRAUG_CHECK(model.trained, StateError, "sample requires a trained checkpoint");
  PAIRAUG_VALIDATE(!reports.empty() && reports.size() == seeds.size(),
                   "need one seed per report");
  PAIRAUG_VALIDATE(std::isfinite(guidance), "guidance must be finite");
  const int64_t n = static_cast<int64_t>(reports.size()), L = model.cfg.max_tokens;

  std::vector<int32_t> ids(static_cast<size_t>(n * L));
  std::vector<uint8_t> valid(static_cast<size_t>(n * L));
  for (int64_t s = 0; s < n; ++s) {
    const auto row = encode_report(model.cfg, reports[static_cast<size_t>(s)]);
    const auto mask = text::Tokenizer::valid_mask(row);
    std::copy(row.begin(), row.end(), ids.begin() + s * L);
    std::copy(mask.begin(), mask.end(), valid.begin() + s * L);
  }
  Tensor<float> x({n, 1, model.cfg.image_size, model.cfg.image_size});
  for (int64_t s = 0; s < n; ++s) {
    Tensor<float> z = initial_noise(model.cfg, seeds[static_cast<size_t>(s)], 1);
    std::copy(z.data.begin(), z.data.end(),
              x.data.begin() + s * model.cfg.image_size * model.cfg.image_size);
  }
  x = guided_trajectory(model, ids, valid, n, steps, guidance, std::move(x), nullptr);
  std::vector<Tensor<float>> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t s = 0; s < n; ++s) out.push_back(to_image(x, s));
  return out;
}

}  // namespace pairaug::diffusion
