#include <cmath>
#include <set>
#include <vector>

#include <doctest.h>

#include "pairaug/corpus.hpp"
#include "pairaug/metrics.hpp"
#include "pairaug/rng.hpp"
#include "pairaug/tokenizer.hpp"
#include "pairaug/vlp.hpp"

using namespace pairaug;
using nn::Tensor;

namespace {

const text::Tokenizer& tokenizer() {
  static text::Tokenizer tok;
  return tok;
}

vlp::VlpConfig tiny_config() {
  vlp::VlpConfig cfg;
  cfg.d_model = 16;
  cfg.embed_dim = 16;
  cfg.n_blocks = 1;
  cfg.patch = 16;
  cfg.vocab_size = tokenizer().vocab_size();
  cfg.param_seed = 11;
  return cfg;
}

/// Small labelled set rendered straight from the corpus sampler.
struct TinyData {
  std::vector<Tensor<float>> images;
  std::vector<std::vector<int32_t>> ids;
  std::vector<std::array<int, corpus::kNumFindings>> labels;
};

TinyData tiny_data(int count, uint64_t seed) {
  corpus::SampleConfig sc;
  sc.name = "vlptest";
  sc.count = count;
  sc.seed = seed;
  auto manifest = corpus::sample_corpus(sc);
  TinyData data;
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    auto& rec = manifest.records[i];
    data.images.push_back(corpus::render_case(rec.findings, derive_seed(seed, "render", i)));
    data.ids.push_back(tokenizer().encode(rec.report));
    data.labels.push_back(rec.labels);
  }
  return data;
}

}  // namespace

TEST_CASE("contrastive gradient matches central differences in double") {
  const auto& tok = tokenizer();
  vlp::VlpConfig cfg;
  cfg.d_model = 8;
  cfg.embed_dim = 8;
  cfg.n_blocks = 1;
  cfg.patch = 8;
  cfg.image_size = 16;
  cfg.max_tokens = 8;
  cfg.vocab_size = tok.vocab_size();
  cfg.param_seed = 3;
  vlp::DualEncoder<double> model(cfg);

  Rng rng(42);
  Tensor<double> imgs({4, 1, 16, 16});
  for (auto& v : imgs.data) v = rng.uniform();
  std::vector<int32_t> ids;
  std::set<int32_t> used_rows;
  for (const char* text : {"there is mild pulmonary edema .", "no pleural effusion .",
                           "severe cardiomegaly is noted .", "the lungs are clear ."}) {
    const auto seq = tok.encode(text, static_cast<int>(cfg.max_tokens));
    ids.insert(ids.end(), seq.begin(), seq.end());
    used_rows.insert(seq.begin(), seq.end());
  }

  const auto loss_value = [&] {
    nn::NoGradGuard guard;
    return model
        .contrastive_loss(model.encode_image(imgs), model.encode_text(ids, 4))
        ->value.data[0];
  };

  model.params.zero_grad();
  auto loss = model.contrastive_loss(model.encode_image(imgs), model.encode_text(ids, 4));
  nn::backward(loss);
  CHECK(std::isfinite(loss->value.data[0]));

  const double eps = 1e-5;
  int checked = 0;
  for (const auto& name : model.params.names()) {
    auto p = model.params.get(name);
    if (!p->requires_grad) continue;  // standardization buffers are constants
    const bool is_embed = name == "txt.embed";
    for (int64_t j = 0; j < p->value.numel(); ++j) {
      if (is_embed && !used_rows.count(static_cast<int32_t>(j / cfg.d_model))) continue;
      const double keep = p->value.data[j];
      p->value.data[j] = keep + eps;
      const double up = loss_value();
      p->value.data[j] = keep - eps;
      const double down = loss_value();
      p->value.data[j] = keep;

      const double num = (up - down) / (2 * eps);
      const double ana = p->grad.data.empty() ? 0.0 : p->grad.data[j];
      const double tol = 1e-4 * std::max({1.0, std::abs(num), std::abs(ana)});
      if (std::abs(num - ana) > tol) {
        CAPTURE(name);
        CAPTURE(j);
        CAPTURE(num);
        CAPTURE(ana);
        REQUIRE(std::abs(num - ana) <= tol);
      }
      ++checked;
    }
  }
  CHECK(checked > 1500);  // the sweep actually covered the model

  // untouched embedding rows receive no gradient
  auto embed = model.params.get("txt.embed");
  REQUIRE_FALSE(embed->grad.data.empty());
  int32_t untouched = -1;
  for (int32_t r = 0; r < cfg.vocab_size; ++r)
    if (!used_rows.count(r)) {
      untouched = r;
      break;
    }
  REQUIRE(untouched >= 0);
  for (int64_t c = 0; c < cfg.d_model; ++c)
    CHECK(embed->grad.data[static_cast<size_t>(untouched) * cfg.d_model + c] == 0.0);
}

TEST_CASE("encoders produce unit rows and validate shapes") {
  auto cfg = tiny_config();
  vlp::DualEncoder<float> model(cfg);
  const auto data = tiny_data(6, 21);

  const auto emb = vlp::embed_images(model, data.images, 4);
  CHECK(emb.shape == std::vector<int64_t>{6, cfg.embed_dim});
  for (int64_t i = 0; i < 6; ++i) {
    float norm = 0.f;
    for (int64_t c = 0; c < cfg.embed_dim; ++c) norm += emb.at2(i, c) * emb.at2(i, c);
    CHECK(std::sqrt(norm) == doctest::Approx(1.f).epsilon(1e-4));
  }

  const auto temb = vlp::embed_texts(model, data.ids, 4);
  CHECK(temb.shape == std::vector<int64_t>{6, cfg.embed_dim});
  for (int64_t i = 0; i < 6; ++i) {
    float norm = 0.f;
    for (int64_t c = 0; c < cfg.embed_dim; ++c) norm += temb.at2(i, c) * temb.at2(i, c);
    CHECK(std::sqrt(norm) == doctest::Approx(1.f).epsilon(1e-4));
  }

  CHECK_THROWS_AS(model.encode_image(Tensor<float>({2, 1, 32, 32})), ValidationError);
  CHECK_THROWS_AS(model.encode_text(std::vector<int32_t>(7), 1), ValidationError);
  const auto e = model.encode_image(Tensor<float>({1, 1, 64, 64}));
  CHECK_THROWS_AS(model.contrastive_loss(e, e), ValidationError);  // needs >= 2 pairs

  vlp::VlpConfig bad = cfg;
  bad.vocab_size = 0;
  CHECK_THROWS_AS((void)vlp::DualEncoder<float>{bad}, ValidationError);
}

TEST_CASE("contrastive training is deterministic and fits a small set") {
  const auto data = tiny_data(16, 22);
  vlp::TrainConfig tc;
  tc.epochs = 40;
  tc.batch = 8;
  tc.lr = 1e-3;
  tc.seed = 5;

  vlp::DualEncoder<float> model(tiny_config());
  const auto stats = vlp::train_contrastive(model, data.images, data.ids, tc);
  REQUIRE(stats.epoch_loss.size() == 40);
  CHECK(stats.steps == 80);

  // random-pairing chance level is ln(batch); training must beat it
  const double chance = std::log(double(tc.batch));
  CHECK(stats.epoch_loss.front() > 0.5 * chance);
  CHECK(stats.epoch_loss.back() < 0.8 * chance);
  CHECK(stats.epoch_loss.back() < stats.epoch_loss.front());

  // bitwise repeatable end to end
  vlp::DualEncoder<float> twin(tiny_config());
  const auto twin_stats = vlp::train_contrastive(twin, data.images, data.ids, tc);
  CHECK(twin_stats.epoch_loss == stats.epoch_loss);
  CHECK(twin.params.to_checkpoint().content_hash() ==
        model.params.to_checkpoint().content_hash());
}

TEST_CASE("zero-shot probabilities are a two-way softmax") {
  vlp::DualEncoder<float> model(tiny_config());
  const auto data = tiny_data(8, 23);

  Tensor<float> p_neg;
  const auto p_pos = vlp::zero_shot_probs(model, data.images, tokenizer(), &p_neg);
  REQUIRE(p_pos.shape == std::vector<int64_t>({8, corpus::kNumFindings}));
  REQUIRE(p_neg.shape == p_pos.shape);
  for (int64_t i = 0; i < p_pos.dim(0); ++i)
    for (int64_t k = 0; k < p_pos.dim(1); ++k) {
      const float pp = p_pos.at2(i, k), pn = p_neg.at2(i, k);
      CHECK(pp >= 0.f);
      CHECK(pp <= 1.f);
      CHECK(std::abs(pp + pn - 1.f) <= 1e-6f);
    }

  const auto again = vlp::zero_shot_probs(model, data.images, tokenizer());
  CHECK(again.data == p_pos.data);
}

TEST_CASE("linear probe trains a head while the encoder stays frozen") {
  vlp::DualEncoder<float> model(tiny_config());
  const auto data = tiny_data(48, 24);
  const std::string hash_before = model.params.to_checkpoint().content_hash();

  vlp::ProbeConfig pc;
  pc.epochs = 30;
  pc.batch = 16;
  pc.seed = 7;
  const auto probe = vlp::train_linear_probe(model, data.images, data.labels, pc);

  CHECK(probe.encoder_hash == hash_before);
  CHECK(model.params.to_checkpoint().content_hash() == hash_before);
  REQUIRE(probe.epoch_loss.size() == 30);
  CHECK(probe.epoch_loss.back() < probe.epoch_loss.front());

  const auto probs = vlp::probe_probs(model, probe, data.images);
  REQUIRE(probs.shape == std::vector<int64_t>({48, corpus::kNumFindings}));
  for (float v : probs.data) {
    CHECK(v > 0.f);
    CHECK(v < 1.f);
  }

  const auto twin = vlp::train_linear_probe(model, data.images, data.labels, pc);
  CHECK(twin.w.data == probe.w.data);
  CHECK(twin.b.data == probe.b.data);
}

TEST_CASE("auc_report reduces per-finding columns with the exact metric") {
  Tensor<float> probs({4, corpus::kNumFindings});
  std::vector<std::array<int, corpus::kNumFindings>> labels(4);
  Rng rng(31);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t k = 0; k < corpus::kNumFindings; ++k) {
      probs.at2(i, k) = static_cast<float>(0.25 * rng.uniform_int(5));
      labels[static_cast<size_t>(i)][static_cast<size_t>(k)] = i % 2;  // both classes everywhere
    }
  const auto report = vlp::auc_report(probs, labels);

  double acc = 0.0;
  for (int k = 0; k < corpus::kNumFindings; ++k) {
    std::vector<double> col;
    std::vector<int> ys;
    for (int64_t i = 0; i < 4; ++i) {
      col.push_back(probs.at2(i, k));
      ys.push_back(labels[static_cast<size_t>(i)][static_cast<size_t>(k)]);
    }
    CHECK(report.per_finding[static_cast<size_t>(k)] == metrics::auc(col, ys));
    acc += report.per_finding[static_cast<size_t>(k)];
  }
  CHECK(report.macro == doctest::Approx(acc / corpus::kNumFindings));

  // perfect separation oracle on the first column
  Tensor<float> hand({4, corpus::kNumFindings});
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t k = 0; k < corpus::kNumFindings; ++k)
      hand.at2(i, k) = (i < 2) ? 0.8f + 0.1f * static_cast<float>(i) : 0.1f * static_cast<float>(i);
  std::vector<std::array<int, corpus::kNumFindings>> ylab(4);
  for (int64_t i = 0; i < 4; ++i) ylab[static_cast<size_t>(i)].fill(i < 2 ? 1 : 0);
  CHECK(vlp::auc_report(hand, ylab).macro == 1.0);
}
