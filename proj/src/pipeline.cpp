#include "pairaug/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <utility>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "pairaug/io.hpp"
#include "pairaug/metrics.hpp"
#include "pairaug/pruning.hpp"
#include "pairaug/rng.hpp"
#include "pairaug/sha256.hpp"
#include "pairaug/textaug.hpp"
#include "pairaug/tokenizer.hpp"

namespace pairaug::pipeline {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// small helpers
// ---------------------------------------------------------------------------

namespace {

const text::Tokenizer& tok() {
  static const text::Tokenizer t;
  return t;
}

std::vector<int32_t> encode_tokens(const std::string& report) {
  return tok().encode(report, text::kMaxTokens);
}

std::string file_hash(const fs::path& p) { return Sha256::hex(io::read_file(p)); }

struct StageTimer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  }
};

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// config key table
// ---------------------------------------------------------------------------

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) return v;
  else if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
  else if constexpr (std::is_floating_point_v<T>) return fmt_double(v);
  else return std::to_string(v);
}

template <typename T>
T parse_value(const std::string& s) {
  if constexpr (std::is_same_v<T, std::string>) {
    return s;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw SchemaError(cat("expected a boolean, got '", s, "'"));
  } else {
    T v{};
    const char* b = s.data();
    const char* e = s.data() + s.size();
    auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc{} || res.ptr != e)
      throw SchemaError(cat("cannot parse value '", s, "'"));
    return v;
  }
}

struct KeyDef {
  std::string name;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
};

template <typename T>
KeyDef key(const char* name, T PipelineConfig::*m) {
  return {name, [m](const PipelineConfig& c) { return format_value(c.*m); },
          [m](PipelineConfig& c, const std::string& v) { c.*m = parse_value<T>(v); }};
}

KeyDef bkey(const char* name, bool BranchFlags::*m) {
  return {name, [m](const PipelineConfig& c) { return format_value(c.branches.*m); },
          [m](PipelineConfig& c, const std::string& v) { c.branches.*m = parse_value<bool>(v); }};
}

const std::vector<KeyDef>& config_keys() {
  static const std::vector<KeyDef> keys = [] {
    std::vector<KeyDef> k;
    k.push_back(key("corpus.name", &PipelineConfig::corpus_name));
    k.push_back(key("corpus.count", &PipelineConfig::corpus_count));
    k.push_back(key("corpus.eval_count", &PipelineConfig::eval_count));
    k.push_back(key("corpus.seed", &PipelineConfig::corpus_seed));
    k.push_back(key("corpus.healthy_frac", &PipelineConfig::healthy_frac));
    k.push_back(key("corpus.second_finding_frac", &PipelineConfig::second_finding_frac));
    k.push_back(key("textaug.mode", &PipelineConfig::textaug_mode));
    k.push_back(key("textaug.flips", &PipelineConfig::flips));
    k.push_back(key("textaug.fallback", &PipelineConfig::llm_fallback));
    k.push_back(key("textaug.host", &PipelineConfig::llm_host));
    k.push_back(key("textaug.port", &PipelineConfig::llm_port));
    k.push_back(key("textaug.path", &PipelineConfig::llm_path));
    k.push_back(key("diffusion.base", &PipelineConfig::diff_base));
    k.push_back(key("diffusion.groups", &PipelineConfig::diff_groups));
    k.push_back(key("diffusion.T", &PipelineConfig::diff_T));
    k.push_back(key("diffusion.train_steps", &PipelineConfig::diff_train_steps));
    k.push_back(key("diffusion.batch", &PipelineConfig::diff_batch));
    k.push_back(key("diffusion.lr", &PipelineConfig::diff_lr));
    k.push_back(key("sample.steps", &PipelineConfig::sample_steps));
    k.push_back(key("sample.batch", &PipelineConfig::sample_batch));
    k.push_back(key("sample.guidance", &PipelineConfig::guidance));
    k.push_back(key("edit.eta", &PipelineConfig::eta));
    k.push_back(key("prune.tau", &PipelineConfig::tau));
    k.push_back(key("prune.eps", &PipelineConfig::epsilon));
    k.push_back(key("multiplicity.inter", &PipelineConfig::mult_inter));
    k.push_back(key("multiplicity.intra", &PipelineConfig::mult_intra));
    k.push_back(key("vlp.d_model", &PipelineConfig::vlp_d_model));
    k.push_back(key("vlp.embed_dim", &PipelineConfig::vlp_embed_dim));
    k.push_back(key("vlp.blocks", &PipelineConfig::vlp_blocks));
    k.push_back(key("vlp.patch", &PipelineConfig::vlp_patch));
    k.push_back(key("vlp.epochs", &PipelineConfig::vlp_epochs));
    k.push_back(key("vlp.batch", &PipelineConfig::vlp_batch));
    k.push_back(key("vlp.lr", &PipelineConfig::vlp_lr));
    k.push_back(key("scorer.epochs", &PipelineConfig::scorer_epochs));
    k.push_back(key("eval.ablation_seeds", &PipelineConfig::ablation_seeds));
    k.push_back(key("eval.bootstrap", &PipelineConfig::bootstrap));
    k.push_back(bkey("branches.interaug", &BranchFlags::interaug));
    k.push_back(bkey("branches.intraaug", &BranchFlags::intraaug));
    k.push_back(bkey("branches.prune_a", &BranchFlags::prune_a));
    k.push_back(bkey("branches.prune_e", &BranchFlags::prune_e));
    k.push_back(bkey("branches.baseline_img", &BranchFlags::baseline_img));
    k.push_back(bkey("branches.baseline_text", &BranchFlags::baseline_text));
    k.push_back(key("seed", &PipelineConfig::seed));
    k.push_back(key("out_root", &PipelineConfig::out_root));
    k.push_back(key("workers", &PipelineConfig::workers));
    std::sort(k.begin(), k.end(), [](const KeyDef& a, const KeyDef& b) { return a.name < b.name; });
    return k;
  }();
  return keys;
}

const KeyDef* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
  PipelineConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    PAIRAUG_CHECK(eq != std::string::npos, SchemaError, "config line ", lineno,
                  " is not 'key = value': ", stripped);
    const std::string name = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    const KeyDef* k = find_key(name);
    PAIRAUG_CHECK(k != nullptr, SchemaError, "unknown config key '", name, "' on line ", lineno);
    try {
      k->set(cfg, value);
    } catch (const SchemaError& e) {
      throw SchemaError(cat("config key '", name, "': ", e.what()));
    }
  }
  return cfg;
}

PipelineConfig parse_config_file(const fs::path& path) {
  return parse_config(io::read_file(path));
}

std::string dump_config(const PipelineConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// ledger
// ---------------------------------------------------------------------------

const LedgerEntry* RunLedger::find(const std::string& stage) const {
  for (auto it = entries.rbegin(); it != entries.rend(); ++it)
    if (it->stage == stage) return &*it;
  return nullptr;
}

std::string RunLedger::to_json() const {
  ordered_json arr = ordered_json::array();
  for (const auto& e : entries) {
    ordered_json in = ordered_json::object();
    for (const auto& [k, v] : e.inputs) in[k] = v;
    arr.push_back(ordered_json{{"stage", e.stage},
                               {"inputs", in},
                               {"output_hash", e.output_hash},
                               {"n_in", e.n_in},
                               {"n_out", e.n_out},
                               {"wall_ms", e.wall_ms},
                               {"seed", e.seed}});
  }
  return arr.dump(2);
}

// ---------------------------------------------------------------------------
// image transforms for the AugImg baseline
// ---------------------------------------------------------------------------

namespace {

int64_t reflect(int64_t i, int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

}  // namespace

Tensor<float> gaussian_blur(const Tensor<float>& img, double sigma) {
  PAIRAUG_VALIDATE(img.rank() == 3, "gaussian_blur expects [c,h,w], got ", nn::shape_str(img.shape));
  PAIRAUG_VALIDATE(std::isfinite(sigma) && sigma >= 0.0, "sigma must be finite and >= 0");
  if (sigma < 1e-6) return img;
  const int64_t r = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
  std::vector<double> w(static_cast<size_t>(2 * r + 1));
  double sum = 0.0;
  for (int64_t i = -r; i <= r; ++i) {
    w[static_cast<size_t>(i + r)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += w[static_cast<size_t>(i + r)];
  }
  for (auto& v : w) v /= sum;

  const int64_t c = img.dim(0), h = img.dim(1), wd = img.dim(2);
  Tensor<float> mid({c, h, wd});
  Tensor<float> out({c, h, wd});
  for (int64_t ch = 0; ch < c; ++ch) {
    const float* src = img.data.data() + ch * h * wd;
    float* tmp = mid.data.data() + ch * h * wd;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < wd; ++x) {
        double acc = 0.0;
        for (int64_t k = -r; k <= r; ++k)
          acc += w[static_cast<size_t>(k + r)] * src[y * wd + reflect(x + k, wd)];
        tmp[y * wd + x] = static_cast<float>(acc);
      }
    float* dst = out.data.data() + ch * h * wd;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < wd; ++x) {
        double acc = 0.0;
        for (int64_t k = -r; k <= r; ++k)
          acc += w[static_cast<size_t>(k + r)] * tmp[reflect(y + k, h) * wd + x];
        dst[y * wd + x] = static_cast<float>(acc);
      }
  }
  return out;
}

namespace {

/// Bilinear crop-and-resize of the window [oy, oy+side) x [ox, ox+side)
/// back to the full frame.
Tensor<float> crop_resize(const Tensor<float>& img, int64_t side, int64_t oy, int64_t ox) {
  const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<float> out({c, h, w});
  for (int64_t ch = 0; ch < c; ++ch) {
    const float* src = img.data.data() + ch * h * w;
    float* dst = out.data.data() + ch * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double sy = oy + (y + 0.5) * side / static_cast<double>(h) - 0.5;
        const double sx = ox + (x + 0.5) * side / static_cast<double>(w) - 0.5;
        const int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(sy)), 0, h - 1);
        const int64_t x0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(sx)), 0, w - 1);
        const int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
        const int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
        const double fy = std::clamp(sy - y0, 0.0, 1.0);
        const double fx = std::clamp(sx - x0, 0.0, 1.0);
        const double top = src[y0 * w + x0] * (1 - fx) + src[y0 * w + x1] * fx;
        const double bot = src[y1 * w + x0] * (1 - fx) + src[y1 * w + x1] * fx;
        dst[y * w + x] = static_cast<float>(top * (1 - fy) + bot * fy);
      }
  }
  return out;
}

}  // namespace

Tensor<float> augment_image(const Tensor<float>& img, uint64_t seed) {
  PAIRAUG_VALIDATE(img.rank() == 3, "augment_image expects [c,h,w], got ", nn::shape_str(img.shape));
  Rng rng(seed);
  const int64_t h = img.dim(1);
  // random crop-and-resize
  const double scale = rng.uniform(0.7, 1.0);
  const int64_t side = std::max<int64_t>(8, static_cast<int64_t>(std::llround(h * scale)));
  const int64_t oy = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(h - side + 1)));
  const int64_t ox = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(h - side + 1)));
  Tensor<float> out = crop_resize(img, side, oy, ox);
  // blur
  out = gaussian_blur(out, rng.uniform(0.0, 1.2));
  // contrast compression toward the mean
  const double f = rng.uniform(0.5, 1.0);
  double mean = 0.0;
  for (float v : out.data) mean += v;
  mean /= static_cast<double>(out.numel());
  for (auto& v : out.data)
    v = static_cast<float>(std::clamp(mean + f * (v - mean), 0.0, 1.0));
  return out;
}

// ---------------------------------------------------------------------------
// eval report
// ---------------------------------------------------------------------------

std::string EvalReport::to_json() const {
  ordered_json j{{"mean_auc", mean_auc}, {"per_auc", per_auc},   {"mean_acc", mean_acc},
                 {"mean_f1", mean_f1},   {"ci_lo", ci_lo},       {"ci_hi", ci_hi},
                 {"n_train", n_train},   {"n_eval", n_eval},     {"seed", seed}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

struct Pipeline::Candidates {
  corpus::Manifest manifest;
  std::vector<double> align;     // interaug: alignment score per candidate
  pruning::IntraScores intra;    // intraaug: hybrid scores and their means
  std::string fhash;             // hash of the candidate manifest on disk
};

Pipeline::Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)), root_(cfg_.out_root) {
  PAIRAUG_VALIDATE(cfg_.corpus_count > 0 && cfg_.eval_count > 0, "corpus counts must be positive");
  PAIRAUG_VALIDATE(cfg_.textaug_mode == "flip" || cfg_.textaug_mode == "external",
                   "textaug.mode must be 'flip' or 'external', got '", cfg_.textaug_mode, "'");
  PAIRAUG_VALIDATE(cfg_.mult_inter >= 1 && cfg_.mult_intra >= 1, "multiplicity must be >= 1");
  PAIRAUG_VALIDATE(std::isfinite(cfg_.tau) && std::isfinite(cfg_.epsilon), "thresholds must be finite");
  PAIRAUG_VALIDATE(std::isfinite(cfg_.eta) && cfg_.eta >= 0.0 && cfg_.eta <= 1.0,
                   "eta must lie in [0, 1]");
  PAIRAUG_VALIDATE(cfg_.workers >= 1, "workers must be >= 1");
  PAIRAUG_VALIDATE(cfg_.sample_batch >= 1, "sample.batch must be >= 1");
  PAIRAUG_VALIDATE(!cfg_.out_root.empty(), "out_root must be set");
  fs::create_directories(root_ / "corpus");
  fs::create_directories(root_ / "cache");
  fs::create_directories(root_ / "synthetic" / "images");
  fs::create_directories(root_ / "eval");
  io::write_file_atomic(root_ / "config.txt", dump_config(cfg_));
}

Pipeline::~Pipeline() = default;

std::string Pipeline::corpus_hash() {
  train_manifest();
  return corpus_hash_;
}

const corpus::Manifest& Pipeline::train_manifest() {
  if (train_) return *train_;
  StageTimer timer;
  corpus::SampleConfig tc;
  tc.name = cfg_.corpus_name;
  tc.split = "train";
  tc.count = cfg_.corpus_count;
  tc.seed = cfg_.corpus_seed;
  tc.healthy_frac = cfg_.healthy_frac;
  tc.second_finding_frac = cfg_.second_finding_frac;
  corpus::SampleConfig ec = tc;
  ec.split = "eval";
  ec.count = cfg_.eval_count;
  ec.seed = derive_seed(cfg_.corpus_seed, "eval");

  const ordered_json desc{{"name", tc.name},
                          {"count", tc.count},
                          {"seed", tc.seed},
                          {"healthy_frac", tc.healthy_frac},
                          {"second_finding_frac", tc.second_finding_frac},
                          {"eval_count", ec.count},
                          {"eval_seed", ec.seed}};
  const fs::path dir = root_ / "corpus";
  const fs::path tp = dir / "train.jsonl", ep = dir / "eval.jsonl";
  const fs::path ip = dir / "corpus.inputs.json";
  const bool hit =
      fs::exists(tp) && fs::exists(ep) && fs::exists(ip) && io::read_file(ip) == desc.dump(2);
  if (!hit) {
    auto tm = corpus::sample_corpus(tc);
    corpus::materialize_images(dir, tm);
    corpus::save_manifest(tp, tm);
    auto em = corpus::sample_corpus(ec);
    corpus::materialize_images(dir, em);
    corpus::save_manifest(ep, em);
    io::write_file_atomic(ip, desc.dump(2));
  }
  train_ = corpus::load_manifest(tp);
  eval_ = corpus::load_manifest(ep);
  corpus_hash_ = Sha256::hex(io::read_file(tp) + io::read_file(ep));
  ledger_.entries.push_back({"corpus",
                             {{"config", Sha256::hex(desc.dump())}},
                             corpus_hash_,
                             0,
                             static_cast<int64_t>(train_->records.size() + eval_->records.size()),
                             timer.ms(),
                             cfg_.corpus_seed});
  return *train_;
}

const corpus::Manifest& Pipeline::eval_manifest() {
  train_manifest();
  return *eval_;
}

const diffusion::DiffusionModel<float>& Pipeline::t2i() {
  if (t2i_) return *t2i_;
  train_manifest();
  StageTimer timer;
  diffusion::DenoiserConfig dc;
  dc.base = cfg_.diff_base;
  dc.norm_groups = cfg_.diff_groups;
  dc.vocab_size = tok().vocab_size();
  dc.param_seed = derive_seed(cfg_.seed, "t2i-params");
  diffusion::TrainDiffusionConfig tc;
  tc.steps = cfg_.diff_train_steps;
  tc.batch = cfg_.diff_batch;
  tc.lr = cfg_.diff_lr;
  tc.seed = derive_seed(cfg_.seed, "t2i");

  const ordered_json desc{{"corpus", corpus_hash_},
                          {"base", dc.base},
                          {"groups", dc.norm_groups},
                          {"T", cfg_.diff_T},
                          {"param_seed", dc.param_seed},
                          {"steps", tc.steps},
                          {"batch", tc.batch},
                          {"lr", tc.lr},
                          {"seed", tc.seed}};
  const fs::path cp = root_ / "cache" / "t2i.ck";
  const fs::path ip = root_ / "cache" / "t2i.inputs.json";
  std::string out_hash;
  if (fs::exists(cp) && fs::exists(ip) && io::read_file(ip) == desc.dump(2)) {
    const Checkpoint ck = Checkpoint::load(cp);
    t2i_ = diffusion::model_from_checkpoint(ck);
    out_hash = ck.content_hash();
  } else {
    diffusion::DiffusionModel<float> model(
        dc, diffusion::NoiseSchedule::linear(cfg_.diff_T, 1e-4, 0.02, cfg_.sample_steps));
    const auto images = corpus::load_images(root_ / "corpus", *train_);
    std::vector<std::string> reports;
    reports.reserve(train_->records.size());
    for (const auto& r : train_->records) reports.push_back(r.report);
    const Checkpoint ck = diffusion::train_diffusion(model, images, reports, tc);
    ck.save(cp);
    io::write_file_atomic(ip, desc.dump(2));
    t2i_ = std::move(model);
    out_hash = ck.content_hash();
  }
  t2i_hash_ = out_hash;
  ledger_.entries.push_back({"t2i",
                             {{"corpus", corpus_hash_}, {"config", Sha256::hex(desc.dump())}},
                             out_hash,
                             static_cast<int64_t>(train_->records.size()),
                             tc.steps,
                             timer.ms(),
                             tc.seed});
  return *t2i_;
}

const vlp::DualEncoder<float>& Pipeline::scorer() {
  if (scorer_) return *scorer_;
  train_manifest();
  StageTimer timer;
  vlp::VlpConfig vc;
  vc.d_model = cfg_.vlp_d_model;
  vc.embed_dim = cfg_.vlp_embed_dim;
  vc.n_blocks = cfg_.vlp_blocks;
  vc.patch = cfg_.vlp_patch;
  vc.vocab_size = tok().vocab_size();
  vc.param_seed = derive_seed(cfg_.seed, "scorer-params");
  vlp::TrainConfig tc;
  tc.epochs = cfg_.scorer_epochs;
  tc.batch = cfg_.vlp_batch;
  tc.lr = cfg_.vlp_lr;
  tc.seed = derive_seed(cfg_.seed, "scorer");

  const ordered_json desc{{"corpus", corpus_hash_}, {"d_model", vc.d_model},
                          {"embed_dim", vc.embed_dim}, {"blocks", vc.n_blocks},
                          {"patch", vc.patch},         {"param_seed", vc.param_seed},
                          {"epochs", tc.epochs},       {"batch", tc.batch},
                          {"lr", tc.lr},               {"seed", tc.seed}};
  const fs::path cp = root_ / "cache" / "scorer.ck";
  const fs::path ip = root_ / "cache" / "scorer.inputs.json";
  std::string out_hash;
  if (fs::exists(cp) && fs::exists(ip) && io::read_file(ip) == desc.dump(2)) {
    const Checkpoint ck = Checkpoint::load(cp);
    scorer_ = vlp::model_from_checkpoint(ck);
    out_hash = ck.content_hash();
  } else {
    vlp::DualEncoder<float> model(vc);
    const auto images = corpus::load_images(root_ / "corpus", *train_);
    std::vector<std::vector<int32_t>> ids;
    ids.reserve(train_->records.size());
    for (const auto& r : train_->records) ids.push_back(encode_tokens(r.report));
    vlp::train_contrastive(model, images, ids, tc);
    const Checkpoint ck = vlp::to_checkpoint(model);
    ck.save(cp);
    io::write_file_atomic(ip, desc.dump(2));
    scorer_ = std::move(model);
    out_hash = ck.content_hash();
  }
  scorer_hash_ = out_hash;
  ledger_.entries.push_back({"scorer",
                             {{"corpus", corpus_hash_}, {"config", Sha256::hex(desc.dump())}},
                             out_hash,
                             static_cast<int64_t>(train_->records.size()),
                             static_cast<int64_t>(tc.epochs),
                             timer.ms(),
                             tc.seed});
  return *scorer_;
}

// ---------------------------------------------------------------------------
// branch candidates
// ---------------------------------------------------------------------------

const Pipeline::Candidates& Pipeline::interaug_candidates() {
  if (inter_cand_) return *inter_cand_;
  train_manifest();
  t2i();
  scorer();
  StageTimer timer;

  const ordered_json desc{{"corpus", corpus_hash_},
                          {"t2i", t2i_hash_},
                          {"scorer", scorer_hash_},
                          {"mode", cfg_.textaug_mode},
                          {"flips", cfg_.flips},
                          {"mult", cfg_.mult_inter},
                          {"steps", cfg_.sample_steps},
                          {"guidance", cfg_.guidance},
                          {"batch", cfg_.sample_batch},
                          {"seed", cfg_.seed}};
  const fs::path dir = root_ / "synthetic";
  const fs::path mp = dir / "omega_a.jsonl";
  const fs::path ip = dir / "omega_a.inputs.json";

  auto cand = std::make_unique<Candidates>();
  if (fs::exists(mp) && fs::exists(ip) && io::read_file(ip) == desc.dump(2)) {
    cand->manifest = corpus::load_manifest(mp);
    for (const auto& r : cand->manifest.records) cand->align.push_back(r.scores.at("s_align"));
  } else {
    const auto& srcs = train_->records;
    std::vector<corpus::CaseRecord> recs;
    recs.reserve(srcs.size() * static_cast<size_t>(cfg_.mult_inter));
    textaug::LlmConfig llm;
    llm.host = cfg_.llm_host;
    llm.port = cfg_.llm_port;
    llm.path = cfg_.llm_path;
    for (size_t i = 0; i < srcs.size(); ++i) {
      for (int j = 0; j < cfg_.mult_inter; ++j) {
        const uint64_t idx = static_cast<uint64_t>(i) * cfg_.mult_inter + j;
        const uint64_t rs = derive_seed(cfg_.seed, "rewrite", idx);
        corpus::CaseRecord rec;
        bool have = false;
        if (cfg_.textaug_mode == "external") {
          try {
            auto out = textaug::external_rewrite(srcs[i], llm, rs);
            if (out.accepted) {
              rec = std::move(out.record);
              have = true;
            }
          } catch (const IoError&) {
            if (!cfg_.llm_fallback) throw;
          }
          if (!have && !cfg_.llm_fallback) continue;  // rejected, no fallback: drop
        }
        if (!have) rec = textaug::flip_findings(srcs[i], cfg_.flips, rs).record;
        // stable ids: unique by construction, lineage readable
        rec.case_id = cat("inter-", idx, "-", srcs[i].case_id);
        rec.patient_id = rec.case_id + "-pat";  // a new patient, never the source's
        recs.push_back(std::move(rec));
      }
    }

    // generate images in deterministic chunks; chunks run in parallel
    const int64_t n = static_cast<int64_t>(recs.size());
    const int64_t bs = cfg_.sample_batch;
    const int64_t nchunks = (n + bs - 1) / bs;
    std::vector<std::vector<Tensor<float>>> chunks(static_cast<size_t>(nchunks));
    parallel_for(nchunks, cfg_.workers, [&](int64_t ci) {
      const int64_t lo = ci * bs, hi = std::min(n, lo + bs);
      std::vector<std::string> reps;
      std::vector<uint64_t> seeds;
      for (int64_t k = lo; k < hi; ++k) {
        reps.push_back(recs[static_cast<size_t>(k)].report);
        seeds.push_back(derive_seed(cfg_.seed, "gen", static_cast<uint64_t>(k)));
      }
      chunks[static_cast<size_t>(ci)] =
          diffusion::sample_batch(*t2i_, reps, seeds, cfg_.sample_steps, cfg_.guidance);
    });
    std::vector<Tensor<float>> images;
    images.reserve(static_cast<size_t>(n));
    for (auto& chunk : chunks)
      for (auto& img : chunk) images.push_back(std::move(img));

    std::vector<std::vector<int32_t>> ids;
    ids.reserve(recs.size());
    for (size_t k = 0; k < recs.size(); ++k) {
      recs[k].image_path = "images/" + recs[k].case_id + ".patn";
      io::save_tensor(dir / recs[k].image_path, images[k]);
      ids.push_back(encode_tokens(recs[k].report));
    }
    cand->align = pruning::alignment_scores(*scorer_, images, ids);
    for (size_t k = 0; k < recs.size(); ++k) recs[k].scores["s_align"] = cand->align[k];

    cand->manifest.name = "omega_a";
    cand->manifest.split = "train";
    cand->manifest.seed = cfg_.seed;
    cand->manifest.image_size = corpus::kImageSize;
    cand->manifest.records = std::move(recs);
    corpus::save_manifest(mp, cand->manifest);
    io::write_file_atomic(ip, desc.dump(2));
  }
  cand->fhash = file_hash(mp);
  ledger_.entries.push_back(
      {"interaug-candidates",
       {{"corpus", corpus_hash_}, {"t2i", t2i_hash_}, {"scorer", scorer_hash_}},
       cand->fhash,
       static_cast<int64_t>(train_->records.size()),
       static_cast<int64_t>(cand->manifest.records.size()),
       timer.ms(),
       cfg_.seed});
  inter_cand_ = std::move(cand);
  return *inter_cand_;
}

const Pipeline::Candidates& Pipeline::intraaug_candidates() {
  if (intra_cand_) return *intra_cand_;
  train_manifest();
  t2i();
  scorer();
  StageTimer timer;

  const ordered_json desc{{"corpus", corpus_hash_},
                          {"t2i", t2i_hash_},
                          {"scorer", scorer_hash_},
                          {"flips", cfg_.flips},
                          {"mult", cfg_.mult_intra},
                          {"steps", cfg_.sample_steps},
                          {"guidance", cfg_.guidance},
                          {"eta", cfg_.eta},
                          {"seed", cfg_.seed}};
  const fs::path dir = root_ / "synthetic";
  const fs::path mp = dir / "omega_e.jsonl";
  const fs::path ip = dir / "omega_e.inputs.json";

  auto cand = std::make_unique<Candidates>();
  if (fs::exists(mp) && fs::exists(ip) && io::read_file(ip) == desc.dump(2)) {
    cand->manifest = corpus::load_manifest(mp);
    for (const auto& r : cand->manifest.records) {
      cand->intra.s1.push_back(r.scores.at("s1"));
      cand->intra.s2.push_back(r.scores.at("s2"));
      cand->intra.s3.push_back(r.scores.at("s3"));
    }
    pruning::fill_means(cand->intra);
  } else {
    const auto& srcs = train_->records;
    std::vector<corpus::CaseRecord> recs;
    std::vector<std::map<std::string, std::string>> extras;
    std::vector<Tensor<float>> edited, refs;
    std::vector<std::vector<int32_t>> edited_ids, orig_ids;
    for (int j = 0; j < cfg_.mult_intra; ++j) {
      editor::IntraAugConfig icfg;
      icfg.flips = cfg_.flips;
      icfg.schedule.eta = cfg_.eta;
      icfg.steps = cfg_.sample_steps;
      icfg.guidance = cfg_.guidance;
      icfg.seed = derive_seed(cfg_.seed, "intra", static_cast<uint64_t>(j));
      icfg.workers = cfg_.workers;
      auto items = editor::run_intraaug_batch(*t2i_, srcs, icfg);
      for (size_t i = 0; i < items.size(); ++i) {
        auto& it = items[i];
        it.record.case_id = cat("intra-", j, "-", i, "-", srcs[i].case_id);
        it.record.image_path = "images/" + it.record.case_id + ".patn";
        const std::string ref_path = "images/" + it.record.case_id + "-ref.patn";
        io::save_tensor(dir / it.record.image_path, it.edited);
        io::save_tensor(dir / ref_path, it.reference);
        extras.push_back({{"source_report", srcs[i].report}, {"reference_path", ref_path}});
        edited_ids.push_back(encode_tokens(it.record.report));
        orig_ids.push_back(encode_tokens(srcs[i].report));
        edited.push_back(std::move(it.edited));
        refs.push_back(std::move(it.reference));
        recs.push_back(std::move(it.record));
      }
    }
    cand->intra = pruning::intra_scores(*scorer_, edited, edited_ids, refs, orig_ids);
    for (size_t k = 0; k < recs.size(); ++k) {
      recs[k].scores["s1"] = cand->intra.s1[k];
      recs[k].scores["s2"] = cand->intra.s2[k];
      recs[k].scores["s3"] = cand->intra.s3[k];
    }
    cand->manifest.name = "omega_e";
    cand->manifest.split = "train";
    cand->manifest.seed = cfg_.seed;
    cand->manifest.image_size = corpus::kImageSize;
    cand->manifest.records = std::move(recs);
    corpus::save_manifest(mp, cand->manifest, extras);
    io::write_file_atomic(ip, desc.dump(2));
  }
  cand->fhash = file_hash(mp);
  ledger_.entries.push_back(
      {"intraaug-candidates",
       {{"corpus", corpus_hash_}, {"t2i", t2i_hash_}, {"scorer", scorer_hash_}},
       cand->fhash,
       static_cast<int64_t>(train_->records.size()),
       static_cast<int64_t>(cand->manifest.records.size()),
       timer.ms(),
       cfg_.seed});
  intra_cand_ = std::move(cand);
  return *intra_cand_;
}

// ---------------------------------------------------------------------------
// pruning, merging, baselines
// ---------------------------------------------------------------------------

void Pipeline::save_synthetic(const corpus::Manifest& m, const std::string& basename) {
  corpus::save_manifest(root_ / "synthetic" / (basename + ".jsonl"), m);
}

corpus::Manifest Pipeline::prune_interaug(const Candidates& cand, double tau, bool enabled) {
  corpus::Manifest out;
  out.name = "omega_hat_a";
  out.split = "train";
  out.seed = cfg_.seed;
  out.image_size = corpus::kImageSize;
  if (enabled) {
    for (size_t idx : pruning::prune_inter(cand.align, tau))
      out.records.push_back(cand.manifest.records[idx]);
  } else {
    out.records = cand.manifest.records;
  }
  return out;
}

corpus::Manifest Pipeline::prune_intraaug(const Candidates& cand, double eps, bool enabled) {
  corpus::Manifest out;
  out.name = "omega_e_prime";
  out.split = "train";
  out.seed = cfg_.seed;
  out.image_size = corpus::kImageSize;
  if (enabled) {
    for (size_t idx : pruning::prune_intra(cand.intra, eps))
      out.records.push_back(cand.manifest.records[idx]);
  } else {
    out.records = cand.manifest.records;
  }
  return out;
}

corpus::Manifest Pipeline::run_interaug() {
  const Candidates& cand = interaug_candidates();
  StageTimer timer;
  corpus::Manifest out = prune_interaug(cand, cfg_.tau, cfg_.branches.prune_a);
  save_synthetic(out, "omega_hat_a");
  ledger_.entries.push_back({"prune-inter",
                             {{"omega_a", cand.fhash}},
                             file_hash(root_ / "synthetic" / "omega_hat_a.jsonl"),
                             static_cast<int64_t>(cand.manifest.records.size()),
                             static_cast<int64_t>(out.records.size()),
                             timer.ms(),
                             cfg_.seed});
  return out;
}

corpus::Manifest Pipeline::run_intraaug() {
  const Candidates& cand = intraaug_candidates();
  StageTimer timer;
  corpus::Manifest out = prune_intraaug(cand, cfg_.epsilon, cfg_.branches.prune_e);
  save_synthetic(out, "omega_e_prime");
  ledger_.entries.push_back({"prune-intra",
                             {{"omega_e", cand.fhash}},
                             file_hash(root_ / "synthetic" / "omega_e_prime.jsonl"),
                             static_cast<int64_t>(cand.manifest.records.size()),
                             static_cast<int64_t>(out.records.size()),
                             timer.ms(),
                             cfg_.seed});
  return out;
}

corpus::Manifest Pipeline::merge_synthetic(const corpus::Manifest& inter,
                                           const corpus::Manifest& intra) {
  corpus::Manifest out;
  out.name = "omega_s";
  out.split = "train";
  out.seed = inter.seed;
  out.image_size = inter.image_size;
  std::set<std::string> ids;
  for (const auto* part : {&inter, &intra})
    for (const auto& rec : part->records) {
      PAIRAUG_VALIDATE(ids.insert(rec.case_id).second, "case id collision in merge: ",
                       rec.case_id);
      out.records.push_back(rec);
    }
  return out;
}

corpus::Manifest Pipeline::run_baseline(const std::string& kind) {
  PAIRAUG_VALIDATE(kind == "aug-img" || kind == "aug-text" || kind == "both",
                   "baseline kind must be aug-img, aug-text, or both, got '", kind, "'");
  train_manifest();
  StageTimer timer;
  const fs::path dir = root_ / "baseline";
  fs::create_directories(dir / "images");
  const bool do_img = kind != "aug-text";
  const bool do_text = kind != "aug-img";
  const std::string suffix = kind == "both" ? "-augboth" : (do_img ? "-augimg" : "-augtext");
  const std::string prov = kind == "both" ? "baseline-both"
                                          : (do_img ? "baseline-img" : "baseline-text");

  const auto& srcs = train_->records;
  std::vector<corpus::CaseRecord> recs(srcs.size());
  parallel_for(static_cast<int64_t>(srcs.size()), cfg_.workers, [&](int64_t i) {
    const auto& src = srcs[static_cast<size_t>(i)];
    corpus::CaseRecord rec = src;
    rec.case_id = src.case_id + suffix;
    rec.provenance = prov;
    rec.source_case_id = src.case_id;
    rec.scores.clear();
    if (do_text)
      rec.report = textaug::paraphrase(src, derive_seed(cfg_.seed, "augtext", static_cast<uint64_t>(i)));
    Tensor<float> img = corpus::load_case_image(root_ / "corpus", src);
    if (do_img) img = augment_image(img, derive_seed(cfg_.seed, "augimg", static_cast<uint64_t>(i)));
    rec.image_path = "images/" + rec.case_id + ".patn";
    io::save_tensor(dir / rec.image_path, img);
    recs[static_cast<size_t>(i)] = std::move(rec);
  });

  corpus::Manifest out;
  out.name = "baseline-" + kind;
  out.split = "train";
  out.seed = cfg_.seed;
  out.image_size = corpus::kImageSize;
  out.records = std::move(recs);
  corpus::save_manifest(dir / (kind + ".jsonl"), out);
  ledger_.entries.push_back({"baseline-" + kind,
                             {{"corpus", corpus_hash_}},
                             file_hash(dir / (kind + ".jsonl")),
                             static_cast<int64_t>(srcs.size()),
                             static_cast<int64_t>(out.records.size()),
                             timer.ms(),
                             cfg_.seed});
  return out;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

EvalReport Pipeline::train_and_eval(const std::vector<corpus::CaseRecord>& extra,
                                    const fs::path& extra_dir, uint64_t run_seed) {
  train_manifest();
  StageTimer timer;
  auto images = corpus::load_images(root_ / "corpus", *train_);
  std::vector<std::vector<int32_t>> ids;
  ids.reserve(train_->records.size() + extra.size());
  for (const auto& r : train_->records) ids.push_back(encode_tokens(r.report));
  for (const auto& r : extra) {
    images.push_back(corpus::load_case_image(extra_dir, r));
    ids.push_back(encode_tokens(r.report));
  }

  vlp::VlpConfig vc;
  vc.d_model = cfg_.vlp_d_model;
  vc.embed_dim = cfg_.vlp_embed_dim;
  vc.n_blocks = cfg_.vlp_blocks;
  vc.patch = cfg_.vlp_patch;
  vc.vocab_size = tok().vocab_size();
  vc.param_seed = derive_seed(run_seed, "vlp-params");
  vlp::TrainConfig tc;
  tc.epochs = cfg_.vlp_epochs;
  tc.batch = cfg_.vlp_batch;
  tc.lr = cfg_.vlp_lr;
  tc.seed = derive_seed(run_seed, "vlp");
  vlp::DualEncoder<float> model(vc);
  vlp::train_contrastive(model, images, ids, tc);

  const auto eval_images = corpus::load_images(root_ / "corpus", *eval_);
  const Tensor<float> probs = vlp::zero_shot_probs(model, eval_images, tok());
  std::vector<std::array<int, corpus::kNumFindings>> labels;
  labels.reserve(eval_->records.size());
  for (const auto& r : eval_->records) labels.push_back(r.labels);
  const auto ar = vlp::auc_report(probs, labels);

  EvalReport rep;
  rep.mean_auc = ar.macro;
  rep.per_auc = ar.per_finding;
  const int64_t n = probs.dim(0);
  double acc = 0.0, f1 = 0.0;
  for (int k = 0; k < corpus::kNumFindings; ++k) {
    std::vector<double> col(static_cast<size_t>(n));
    std::vector<int> lab(static_cast<size_t>(n));
    for (int64_t r = 0; r < n; ++r) {
      col[static_cast<size_t>(r)] = probs.data[static_cast<size_t>(r * corpus::kNumFindings + k)];
      lab[static_cast<size_t>(r)] = labels[static_cast<size_t>(r)][static_cast<size_t>(k)];
    }
    const auto cm = metrics::confusion_at(col, lab, 0.5);
    acc += cm.accuracy;
    f1 += cm.f1;
  }
  rep.mean_acc = acc / corpus::kNumFindings;
  rep.mean_f1 = f1 / corpus::kNumFindings;
  const std::vector<double> per(ar.per_finding.begin(), ar.per_finding.end());
  const auto ci = metrics::bootstrap_ci(per, cfg_.bootstrap, derive_seed(run_seed, "ci"));
  rep.ci_lo = ci.lo;
  rep.ci_hi = ci.hi;
  rep.n_train = static_cast<int64_t>(images.size());
  rep.n_eval = n;
  rep.seed = run_seed;
  ledger_.entries.push_back({"train-eval",
                             {{"corpus", corpus_hash_}},
                             Sha256::hex(rep.to_json()),
                             rep.n_train,
                             rep.n_eval,
                             timer.ms(),
                             run_seed});
  return rep;
}

std::vector<AblationRow> Pipeline::run_ablation() {
  const Candidates& ca = interaug_candidates();
  const Candidates& ce = intraaug_candidates();
  const corpus::Manifest pa = prune_interaug(ca, cfg_.tau, true);
  const corpus::Manifest pe = prune_intraaug(ce, cfg_.epsilon, true);
  const corpus::Manifest full = merge_synthetic(pa, pe);

  struct Def {
    std::string name;
    const std::vector<corpus::CaseRecord>* extra;
  };
  static const std::vector<corpus::CaseRecord> kNone;
  const std::vector<Def> defs = {{"base", &kNone},
                                 {"+InterAug", &ca.manifest.records},
                                 {"+InterAug+Pr_a", &pa.records},
                                 {"+IntraAug", &ce.manifest.records},
                                 {"+IntraAug+Pr_e", &pe.records},
                                 {"full", &full.records}};
  std::vector<AblationRow> rows;
  for (const auto& def : defs) {
    AblationRow row;
    row.name = def.name;
    for (int s = 0; s < cfg_.ablation_seeds; ++s) {
      const uint64_t rs = derive_seed(cfg_.seed, "ablate", static_cast<uint64_t>(s));
      row.aucs.push_back(train_and_eval(*def.extra, root_ / "synthetic", rs).mean_auc);
    }
    row.mean_auc = std::accumulate(row.aucs.begin(), row.aucs.end(), 0.0) /
                   static_cast<double>(row.aucs.size());
    rows.push_back(std::move(row));
  }
  for (auto& row : rows) row.delta = row.mean_auc - rows[0].mean_auc;
  io::write_file_atomic(root_ / "eval" / "ablation.csv", write_ablation_csv(rows));
  ledger_.entries.push_back({"ablation",
                             {{"omega_a", ca.fhash}, {"omega_e", ce.fhash}},
                             file_hash(root_ / "eval" / "ablation.csv"),
                             static_cast<int64_t>(defs.size()),
                             static_cast<int64_t>(rows.size()),
                             0.0,
                             cfg_.seed});
  return rows;
}

std::vector<SweepRow> Pipeline::sweep_thresholds(const std::vector<double>& taus,
                                                 const std::vector<double>& epses) {
  const Candidates& ca = interaug_candidates();
  const Candidates& ce = intraaug_candidates();
  const uint64_t rs = derive_seed(cfg_.seed, "sweep");
  std::vector<SweepRow> rows;
  for (double tau : taus) {
    const corpus::Manifest kept = prune_interaug(ca, tau, true);
    SweepRow row{"tau", tau, static_cast<int64_t>(kept.records.size()), 0.0};
    row.mean_auc = train_and_eval(kept.records, root_ / "synthetic", rs).mean_auc;
    rows.push_back(row);
  }
  for (double eps : epses) {
    const corpus::Manifest kept = prune_intraaug(ce, eps, true);
    SweepRow row{"eps", eps, static_cast<int64_t>(kept.records.size()), 0.0};
    row.mean_auc = train_and_eval(kept.records, root_ / "synthetic", rs).mean_auc;
    rows.push_back(row);
  }
  io::write_file_atomic(root_ / "eval" / "sweep.csv", write_sweep_csv(rows));
  ledger_.entries.push_back({"sweep",
                             {{"omega_a", ca.fhash}, {"omega_e", ce.fhash}},
                             file_hash(root_ / "eval" / "sweep.csv"),
                             static_cast<int64_t>(taus.size() + epses.size()),
                             static_cast<int64_t>(rows.size()),
                             0.0,
                             rs});
  return rows;
}

void Pipeline::emit_projection(const std::vector<fs::path>& manifest_paths, int per_provenance,
                               uint64_t seed, const fs::path& out_csv) {
  PAIRAUG_VALIDATE(per_provenance > 0, "per_provenance must be positive");
  scorer();
  StageTimer timer;
  std::vector<Tensor<float>> images;
  std::vector<std::vector<int32_t>> ids;
  std::vector<std::string> provs;
  for (const auto& path : manifest_paths) {
    const corpus::Manifest m = corpus::load_manifest(path);
    const fs::path base = path.parent_path();
    std::map<std::string, std::vector<size_t>> by_prov;
    for (size_t i = 0; i < m.records.size(); ++i) by_prov[m.records[i].provenance].push_back(i);
    for (auto& [prov, idxs] : by_prov) {
      Rng rng(derive_seed(seed, "proj-" + prov));
      for (size_t k = idxs.size(); k > 1; --k)
        std::swap(idxs[k - 1], idxs[static_cast<size_t>(rng.uniform_int(k))]);
      const size_t take = std::min<size_t>(idxs.size(), static_cast<size_t>(per_provenance));
      for (size_t k = 0; k < take; ++k) {
        const auto& rec = m.records[idxs[k]];
        images.push_back(corpus::load_case_image(base, rec));
        ids.push_back(encode_tokens(rec.report));
        provs.push_back(prov);
      }
    }
  }
  PAIRAUG_VALIDATE(!images.empty(), "projection needs at least one record");

  const Tensor<float> ie = vlp::embed_images(*scorer_, images);
  const Tensor<float> te = vlp::embed_texts(*scorer_, ids);
  const int64_t n = ie.dim(0), d = ie.dim(1);
  Eigen::MatrixXd x(2 * n, d);
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c) {
      x(r, c) = ie.data[static_cast<size_t>(r * d + c)];
      x(n + r, c) = te.data[static_cast<size_t>(r * d + c)];
    }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  PAIRAUG_CHECK(es.info() == Eigen::Success, NumericError, "eigensolver failed");
  Eigen::VectorXd pc1 = es.eigenvectors().col(d - 1);
  Eigen::VectorXd pc2 = es.eigenvectors().col(d - 2);
  for (Eigen::VectorXd* pc : {&pc1, &pc2}) {
    int64_t arg = 0;
    for (int64_t c = 1; c < d; ++c)
      if (std::abs((*pc)(c)) > std::abs((*pc)(arg))) arg = c;
    if ((*pc)(arg) < 0) *pc = -*pc;
  }

  std::string csv = "x,y,modality,provenance\n";
  for (int64_t r = 0; r < n; ++r) {
    const double xi = x.row(r).dot(pc1), yi = x.row(r).dot(pc2);
    const double xt = x.row(n + r).dot(pc1), yt = x.row(n + r).dot(pc2);
    csv += fmt_double(xi) + "," + fmt_double(yi) + ",image," + provs[static_cast<size_t>(r)] + "\n";
    csv += fmt_double(xt) + "," + fmt_double(yt) + ",text," + provs[static_cast<size_t>(r)] + "\n";
  }
  io::write_file_atomic(out_csv, csv);
  ledger_.entries.push_back({"projection",
                             {{"scorer", scorer_hash_}},
                             file_hash(out_csv),
                             static_cast<int64_t>(manifest_paths.size()),
                             2 * n,
                             timer.ms(),
                             seed});
}

RunSummary Pipeline::run_all() {
  train_manifest();
  t2i();
  scorer();
  RunSummary sum;

  corpus::Manifest pa;
  pa.name = "omega_hat_a";
  pa.split = "train";
  pa.seed = cfg_.seed;
  pa.image_size = corpus::kImageSize;
  corpus::Manifest pe;
  pe.name = "omega_e_prime";
  pe.split = "train";
  pe.seed = cfg_.seed;
  pe.image_size = corpus::kImageSize;
  if (cfg_.branches.interaug) {
    pa = run_interaug();
    sum.n_inter_raw = static_cast<int64_t>(inter_cand_->manifest.records.size());
  }
  if (cfg_.branches.intraaug) {
    pe = run_intraaug();
    sum.n_intra_raw = static_cast<int64_t>(intra_cand_->manifest.records.size());
  }
  sum.n_inter_kept = static_cast<int64_t>(pa.records.size());
  sum.n_intra_kept = static_cast<int64_t>(pe.records.size());

  const corpus::Manifest merged = merge_synthetic(pa, pe);
  sum.n_synthetic = static_cast<int64_t>(merged.records.size());
  save_synthetic(merged, "omega_s");
  ledger_.entries.push_back({"merge",
                             {{"omega_hat_a", Sha256::hex(cat(sum.n_inter_kept))},
                              {"omega_e_prime", Sha256::hex(cat(sum.n_intra_kept))}},
                             file_hash(root_ / "synthetic" / "omega_s.jsonl"),
                             sum.n_inter_kept + sum.n_intra_kept,
                             sum.n_synthetic,
                             0.0,
                             cfg_.seed});

  ordered_json extras = ordered_json::object();
  for (const std::string kind : {"aug-img", "aug-text"}) {
    const bool on = kind == "aug-img" ? cfg_.branches.baseline_img : cfg_.branches.baseline_text;
    if (!on) continue;
    const corpus::Manifest bm = run_baseline(kind);
    const EvalReport br =
        train_and_eval(bm.records, root_ / "baseline", derive_seed(cfg_.seed, "eval"));
    io::write_file_atomic(root_ / "eval" / ("baseline-" + kind + ".json"), br.to_json());
    extras["baseline-" + kind] = ordered_json::parse(br.to_json());
  }

  const uint64_t es = derive_seed(cfg_.seed, "eval");
  sum.base = train_and_eval({}, root_ / "corpus", es);
  sum.pairaug = train_and_eval(merged.records, root_ / "synthetic", es);
  sum.delta = sum.pairaug.mean_auc - sum.base.mean_auc;
  io::write_file_atomic(root_ / "eval" / "base.json", sum.base.to_json());
  io::write_file_atomic(root_ / "eval" / "pairaug.json", sum.pairaug.to_json());

  ordered_json sj{{"base", ordered_json::parse(sum.base.to_json())},
                  {"pairaug", ordered_json::parse(sum.pairaug.to_json())},
                  {"delta", sum.delta},
                  {"n_inter_raw", sum.n_inter_raw},
                  {"n_inter_kept", sum.n_inter_kept},
                  {"n_intra_raw", sum.n_intra_raw},
                  {"n_intra_kept", sum.n_intra_kept},
                  {"n_synthetic", sum.n_synthetic},
                  {"accounting_ok", sum.n_synthetic == sum.n_inter_kept + sum.n_intra_kept}};
  if (!extras.empty()) sj["baselines"] = extras;
  io::write_file_atomic(root_ / "eval" / "summary.json", sj.dump(2));
  io::write_file_atomic(root_ / "ledger.json", ledger_.to_json());
  return sum;
}

std::string Pipeline::write_ablation_csv(const std::vector<AblationRow>& rows) {
  std::string csv = "name,mean_auc,delta";
  const size_t k = rows.empty() ? 0 : rows[0].aucs.size();
  for (size_t s = 0; s < k; ++s) csv += ",auc_" + std::to_string(s);
  csv += "\n";
  for (const auto& row : rows) {
    csv += row.name + "," + fmt_double(row.mean_auc) + "," + fmt_double(row.delta);
    for (double a : row.aucs) csv += "," + fmt_double(a);
    csv += "\n";
  }
  return csv;
}

std::string Pipeline::write_sweep_csv(const std::vector<SweepRow>& rows) {
  std::string csv = "param,value,kept,mean_auc\n";
  for (const auto& row : rows)
    csv += row.param + "," + fmt_double(row.value) + "," + std::to_string(row.kept) + "," +
           fmt_double(row.mean_auc) + "\n";
  return csv;
}

}  // namespace pairaug::pipeline
