#include "pairaug/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pairaug/io.hpp"
#include "pairaug/rng.hpp"
#include "pairaug/sha256.hpp"

namespace pairaug::corpus {

namespace {

constexpr int kS = kImageSize;

// nominal geometry (x = column, y = row)
constexpr double kBodyCx = 32, kBodyCy = 34, kBodyRx = 26, kBodyRy = 28;
constexpr double kLungLx = 20.5, kLungRx0 = 43.5, kLungCy = 30, kLungRx = 10.5, kLungRy = 17;
constexpr double kHeartCx = 32, kHeartCy = 38, kHeartRx = 6.5, kHeartRy = 12;

double clamp01(double t) { return std::min(1.0, std::max(0.0, t)); }

double ell(double x, double y, double cx, double cy, double rx, double ry) {
  const double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return std::sqrt(dx * dx + dy * dy);
}

double esoft(double d, double w = 0.15) { return clamp01((1.0 - d) / w); }

struct Overlay {
  double weight;  // signed paint at severity 1
  double (*shape)(double x, double y, double s);
  bool (*mask)(double x, double y);  // max-extent support, pre-dilation
};

double shape_edema(double x, double y, double) {
  const double l = esoft(ell(x, y, kLungLx, kLungCy, kLungRx, kLungRy));
  const double r = esoft(ell(x, y, kLungRx0, kLungCy, kLungRx, kLungRy));
  return std::max(l, r);
}
bool mask_edema(double x, double y) {
  return ell(x, y, kLungLx, kLungCy, kLungRx, kLungRy) < 1.0 ||
         ell(x, y, kLungRx0, kLungCy, kLungRx, kLungRy) < 1.0;
}

double shape_consolidation(double x, double y, double) {
  const double d = std::hypot(x - 18.5, y - 24.0) / 5.0;
  return esoft(d, 0.2);
}
bool mask_consolidation(double x, double y) { return std::hypot(x - 18.5, y - 24.0) < 5.0; }

double shape_effusion(double x, double y, double) {
  const double lung = esoft(ell(x, y, kLungRx0, kLungCy, kLungRx, kLungRy));
  const double ramp = clamp01((y - 38.0) / 5.0);
  const double gate = clamp01((x - 40.0) / 1.5);
  return lung * ramp * gate;
}
bool mask_effusion(double x, double y) {
  return ell(x, y, kLungRx0, kLungCy, kLungRx, kLungRy) < 1.0 && y >= 37.5 && x >= 39.5;
}

double shape_cardiomegaly(double x, double y, double s) {
  const double grow = 1.0 + 0.35 * s;
  const double scaled = esoft(ell(x, y, kHeartCx, kHeartCy, kHeartRx * grow, kHeartRy * grow));
  const double base = esoft(ell(x, y, kHeartCx, kHeartCy, kHeartRx, kHeartRy));
  return std::max(0.0, scaled - base);
}
bool mask_cardiomegaly(double x, double y) {
  return ell(x, y, kHeartCx, kHeartCy, kHeartRx * 1.35, kHeartRy * 1.35) < 1.0;
}

double shape_pneumothorax(double x, double y, double) {
  const double d = ell(x, y, kLungRx0, kLungCy, kLungRx, kLungRy);
  const double band = clamp01((d - 0.62) / 0.12) * esoft(d);
  const double gx = clamp01((x - 43.5) / 1.5);
  const double gy = clamp01((32.0 - y) / 1.5);
  return band * gx * gy;
}
bool mask_pneumothorax(double x, double y) {
  const double d = ell(x, y, kLungRx0, kLungCy, kLungRx, kLungRy);
  return d > 0.58 && d < 1.0 && x > 43.0 && y < 32.5;
}

double shape_atelectasis(double x, double y, double) {
  const double lung = esoft(ell(x, y, kLungLx, kLungCy, kLungRx, kLungRy));
  const double band = clamp01((y - 36.5) / 1.0) * clamp01((41.0 - y) / 1.0);
  const double gate = clamp01((25.0 - x) / 1.5);
  return lung * band * gate;
}
bool mask_atelectasis(double x, double y) {
  return ell(x, y, kLungLx, kLungCy, kLungRx, kLungRy) < 1.0 && y >= 36.0 && y <= 41.5 &&
         x <= 25.5;
}

constexpr std::array<Overlay, kNumFindings> kOverlays{{
    {+0.16, shape_edema, mask_edema},
    {+0.28, shape_consolidation, mask_consolidation},
    {+0.28, shape_effusion, mask_effusion},
    {+0.22, shape_cardiomegaly, mask_cardiomegaly},
    {-0.35, shape_pneumothorax, mask_pneumothorax},
    {+0.26, shape_atelectasis, mask_atelectasis},
}};

constexpr const char* kFindingNames[kNumFindings] = {
    "edema", "consolidation", "effusion", "cardiomegaly", "pneumothorax", "atelectasis",
};

// ---------------------------------------------------------------------------
// grammar tables
// ---------------------------------------------------------------------------

const std::vector<std::string> kOpenings = {
    "the chest radiograph is reviewed .",
    "frontal chest image obtained .",
    "portable chest film assessed .",
};

const std::vector<std::string> kHealthy = {
    "the lungs are clear .",
    "no acute cardiopulmonary abnormality .",
};

// {adj} mild/moderate/severe, {adv} mildly/moderately/severely
const std::array<std::vector<std::string>, kNumFindings> kPositive = {{
    {"there is {adj} pulmonary edema .", "{adj} interstitial edema is present ."},
    {"{adj} consolidation is seen in the left lung .",
     "there is {adj} airspace consolidation in the left lung ."},
    {"a {adj} right pleural effusion is present .", "{adj} pleural fluid layers on the right ."},
    {"the cardiac silhouette is {adv} enlarged .", "{adj} cardiomegaly is noted ."},
    {"a {adj} right apical pneumothorax is seen .",
     "there is a {adj} pneumothorax on the right ."},
    {"{adj} atelectasis is noted in the left lower zone .",
     "there is {adj} left basilar atelectasis ."},
}};

const std::array<std::vector<std::string>, kNumFindings> kNegative = {{
    {"no pulmonary edema is seen .", "there is no evidence of edema ."},
    {"no focal consolidation is observed .", "the lungs are clear of consolidation ."},
    {"no pleural effusion is present .", "there is no pleural fluid ."},
    {"the heart size is normal .", "the cardiac silhouette is within normal limits ."},
    {"no pneumothorax is identified .", "there is no pneumothorax ."},
    {"no atelectasis is seen .", "the lung bases are well expanded ."},
}};

const std::array<std::vector<std::vector<std::string>>, kNumFindings> kKeywords = {{
    {{"edema"}},
    {{"consolidation"}},
    {{"effusion"}, {"pleural", "fluid"}},
    {{"cardiomegaly"}, {"cardiac", "silhouette"}, {"heart", "size"}},
    {{"pneumothorax"}},
    {{"atelectasis"}, {"basilar"}, {"bases"}, {"well", "expanded"}},
}};

const std::vector<std::vector<std::string>> kNegationCues = {
    {"no"}, {"not"}, {"without"}, {"clear"}, {"normal"}, {"well", "expanded"},
};

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::string adj_for(double severity) {
  if (severity < 0.55) return "mild";
  if (severity < 0.8) return "moderate";
  return "severe";
}

std::string adv_for(double severity) {
  if (severity < 0.55) return "mildly";
  if (severity < 0.8) return "moderately";
  return "severely";
}

std::string fill_template(std::string tpl, double severity) {
  const std::string adj = adj_for(severity), adv = adv_for(severity);
  for (const auto& [tag, word] : {std::pair{std::string("{adj}"), adj}, {std::string("{adv}"), adv}}) {
    const auto pos = tpl.find(tag);
    if (pos != std::string::npos) tpl.replace(pos, tag.size(), word);
  }
  return tpl;
}

bool contains_phrase(const std::vector<std::string>& words, const std::vector<std::string>& phrase) {
  if (phrase.size() > words.size()) return false;
  for (size_t i = 0; i + phrase.size() <= words.size(); ++i) {
    bool hit = true;
    for (size_t j = 0; j < phrase.size(); ++j)
      if (words[i + j] != phrase[j]) {
        hit = false;
        break;
      }
    if (hit) return true;
  }
  return false;
}

}  // namespace

const char* finding_name(Finding k) { return kFindingNames[static_cast<int>(k)]; }

Finding finding_from_name(const std::string& name) {
  for (int i = 0; i < kNumFindings; ++i)
    if (name == kFindingNames[i]) return static_cast<Finding>(i);
  throw ValidationError(cat("unknown finding name: ", name));
}

// ---------------------------------------------------------------------------
// renderer
// ---------------------------------------------------------------------------

nn::Tensor<float> render_case(const FindingStates& st, uint64_t render_seed) {
  for (int k = 0; k < kNumFindings; ++k) {
    if (st[static_cast<size_t>(k)].present) {
      PAIRAUG_VALIDATE(st[static_cast<size_t>(k)].severity >= 0.35 &&
                           st[static_cast<size_t>(k)].severity <= 1.0,
                       "severity of ", kFindingNames[k], " out of [0.35, 1]: ",
                       st[static_cast<size_t>(k)].severity);
    }
  }
  Rng rng(render_seed);
  // Anatomy jitter is drawn up front with a fixed draw count so the base
  // image is identical across renders of the same seed regardless of which
  // findings are present.
  const double body_dx = rng.uniform(-0.5, 0.5), body_dy = rng.uniform(-0.5, 0.5);
  const double lung_dx = rng.uniform(-0.8, 0.8), lung_dy = rng.uniform(-0.8, 0.8);
  const double heart_dx = rng.uniform(-0.5, 0.5), heart_dy = rng.uniform(-0.5, 0.5);
  const double rib_phase = rng.uniform(0.0, 7.3);
  const double rad_scale = 1.0 + rng.uniform(-0.03, 0.03);

  std::vector<double> acc(static_cast<size_t>(kS * kS), 0.05);
  for (int yi = 0; yi < kS; ++yi) {
    for (int xi = 0; xi < kS; ++xi) {
      const double x = xi, y = yi;
      double v = 0.0;
      v += 0.15 * esoft(ell(x, y, kBodyCx + body_dx, kBodyCy + body_dy, kBodyRx, kBodyRy), 0.08);
      const double dl = ell(x, y, kLungLx + lung_dx, kLungCy + lung_dy, kLungRx * rad_scale,
                            kLungRy * rad_scale);
      const double dr = ell(x, y, kLungRx0 + lung_dx, kLungCy + lung_dy, kLungRx * rad_scale,
                            kLungRy * rad_scale);
      const double lung = std::max(esoft(dl), esoft(dr));
      v += 0.30 * lung;
      v += 0.04 * lung * std::cos(2.0 * 3.14159265358979323846 * (y + rib_phase) / 7.3);
      v += 0.18 * esoft(ell(x, y, kHeartCx + heart_dx, kHeartCy + heart_dy, kHeartRx, kHeartRy), 0.12);
      for (int k = 0; k < kNumFindings; ++k) {
        const auto& f = st[static_cast<size_t>(k)];
        if (!f.present) continue;
        v += kOverlays[static_cast<size_t>(k)].weight * f.severity *
             kOverlays[static_cast<size_t>(k)].shape(x, y, f.severity);
      }
      acc[static_cast<size_t>(yi * kS + xi)] += v;
    }
  }
  for (auto& v : acc) v += rng.normal() * 0.015;

  // 3x3 box blur with edge replication, then clamp
  nn::Tensor<float> img({1, kS, kS});
  for (int yi = 0; yi < kS; ++yi) {
    for (int xi = 0; xi < kS; ++xi) {
      double s = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = std::clamp(yi + dy, 0, kS - 1), xx = std::clamp(xi + dx, 0, kS - 1);
          s += acc[static_cast<size_t>(yy * kS + xx)];
        }
      img.data[static_cast<size_t>(yi * kS + xi)] = static_cast<float>(clamp01(s / 9.0));
    }
  }
  return img;
}

const std::vector<uint8_t>& finding_mask(Finding k) {
  static const std::array<std::vector<uint8_t>, kNumFindings> masks = [] {
    std::array<std::vector<uint8_t>, kNumFindings> out;
    for (int f = 0; f < kNumFindings; ++f) {
      std::vector<uint8_t> raw(static_cast<size_t>(kS * kS), 0);
      for (int yi = 0; yi < kS; ++yi)
        for (int xi = 0; xi < kS; ++xi)
          raw[static_cast<size_t>(yi * kS + xi)] =
              kOverlays[static_cast<size_t>(f)].mask(xi, yi) ? 1 : 0;
      // dilate by 2 (Chebyshev) to absorb soft edges and the box blur
      std::vector<uint8_t> dil(static_cast<size_t>(kS * kS), 0);
      for (int yi = 0; yi < kS; ++yi)
        for (int xi = 0; xi < kS; ++xi) {
          uint8_t v = 0;
          for (int dy = -2; dy <= 2 && !v; ++dy)
            for (int dx = -2; dx <= 2 && !v; ++dx) {
              const int yy = yi + dy, xx = xi + dx;
              if (yy >= 0 && yy < kS && xx >= 0 && xx < kS &&
                  raw[static_cast<size_t>(yy * kS + xx)])
                v = 1;
            }
          dil[static_cast<size_t>(yi * kS + xi)] = v;
        }
      out[static_cast<size_t>(f)] = std::move(dil);
    }
    return out;
  }();
  return masks[static_cast<size_t>(static_cast<int>(k))];
}

int finding_sign(Finding k) {
  return kOverlays[static_cast<size_t>(static_cast<int>(k))].weight > 0 ? 1 : -1;
}

// ---------------------------------------------------------------------------
// grammar
// ---------------------------------------------------------------------------

std::string write_report(const FindingStates& st, uint64_t text_seed,
                         const std::vector<Finding>& forced_negations) {
  Rng rng(text_seed);
  std::set<int> forced;
  for (Finding f : forced_negations) {
    const int k = static_cast<int>(f);
    PAIRAUG_VALIDATE(!st[static_cast<size_t>(k)].present,
                     "forced negation for a present finding: ", kFindingNames[k]);
    PAIRAUG_VALIDATE(forced.insert(k).second, "duplicate forced negation: ", kFindingNames[k]);
  }

  const std::string opening = kOpenings[rng.uniform_int(kOpenings.size())];

  std::vector<std::string> positives;
  for (int k = 0; k < kNumFindings; ++k) {
    const auto& f = st[static_cast<size_t>(k)];
    if (!f.present) continue;
    const auto& variants = kPositive[static_cast<size_t>(k)];
    positives.push_back(fill_template(variants[rng.uniform_int(variants.size())], f.severity));
  }

  std::vector<std::string> negations;
  for (int k : forced) {
    const auto& variants = kNegative[static_cast<size_t>(k)];
    negations.push_back(variants[rng.uniform_int(variants.size())]);
  }

  // spontaneous pertinent negatives among the remaining absent findings
  std::vector<int> absent;
  for (int k = 0; k < kNumFindings; ++k)
    if (!st[static_cast<size_t>(k)].present && !forced.count(k)) absent.push_back(k);
  for (size_t i = absent.size(); i > 1; --i)
    std::swap(absent[i - 1], absent[rng.uniform_int(i)]);
  const size_t spontaneous = std::min(absent.size(), static_cast<size_t>(rng.uniform_int(3)));

  auto words_of = [](const std::vector<std::string>& sentences) {
    int n = 0;
    for (const auto& s : sentences) n += word_count(s);
    return n;
  };

  std::vector<std::string> body = positives;
  body.insert(body.end(), negations.begin(), negations.end());
  int budget_used = words_of(body);
  PAIRAUG_CHECK(budget_used <= kMaxReportWords, ValidationError,
                "report cannot fit in ", kMaxReportWords, " words: ", budget_used);

  std::vector<std::string> sentences;
  if (budget_used + word_count(opening) <= kMaxReportWords) sentences.push_back(opening);
  sentences.insert(sentences.end(), body.begin(), body.end());
  budget_used = words_of(sentences);
  for (size_t i = 0; i < spontaneous; ++i) {
    const auto& variants = kNegative[static_cast<size_t>(absent[i])];
    const std::string sent = variants[rng.uniform_int(variants.size())];
    if (budget_used + word_count(sent) > kMaxReportWords) break;
    sentences.push_back(sent);
    budget_used += word_count(sent);
  }

  if (positives.empty() && negations.empty() && sentences.size() <= 1) {
    sentences.push_back(kHealthy[rng.uniform_int(kHealthy.size())]);
  }

  std::string report;
  for (size_t i = 0; i < sentences.size(); ++i) {
    if (i) report += " ";
    report += sentences[i];
  }
  PAIRAUG_CHECK(word_count(report) <= kMaxReportWords, ValidationError,
                "report exceeds the word cap: ", report);
  return report;
}

std::array<int, kNumFindings> parse_report(const std::string& report) {
  std::array<int, kNumFindings> state{};
  const std::vector<std::string> words = split_words(report);
  std::vector<std::string> sentence;
  auto flush = [&] {
    if (sentence.empty()) return;
    bool negated = false;
    for (const auto& cue : kNegationCues)
      if (contains_phrase(sentence, cue)) negated = true;
    for (int k = 0; k < kNumFindings; ++k)
      for (const auto& phrase : kKeywords[static_cast<size_t>(k)])
        if (contains_phrase(sentence, phrase)) state[static_cast<size_t>(k)] = negated ? -1 : 1;
    sentence.clear();
  };
  for (const auto& w : words) {
    if (w == ".")
      flush();
    else
      sentence.push_back(w);
  }
  flush();
  return state;
}

int word_count(const std::string& report) {
  int n = 0;
  for (const auto& w : split_words(report))
    if (w != ".") ++n;
  return n;
}

std::vector<std::string> grammar_words() {
  std::set<std::string> vocab;
  auto add = [&](const std::string& tpl) {
    for (double sev : {0.4, 0.6, 0.9})
      for (const auto& w : split_words(fill_template(tpl, sev)))
        if (w != ".") vocab.insert(w);
  };
  for (const auto& s : kOpenings) add(s);
  for (const auto& s : kHealthy) add(s);
  for (const auto& table : {kPositive, kNegative})
    for (const auto& variants : table)
      for (const auto& s : variants) add(s);
  return {vocab.begin(), vocab.end()};
}

PromptPair prompt_pair(Finding k) {
  const auto idx = static_cast<size_t>(k);
  return {fill_template(kPositive[idx][0], 0.7), kNegative[idx][0]};
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

Manifest sample_corpus(const SampleConfig& cfg) {
  PAIRAUG_VALIDATE(cfg.count > 0, "corpus count must be positive");
  PAIRAUG_VALIDATE(cfg.healthy_frac >= 0 && cfg.healthy_frac <= 1, "healthy_frac out of [0, 1]");
  PAIRAUG_VALIDATE(!cfg.name.empty() && !cfg.split.empty(), "corpus name and split required");

  Manifest m;
  m.name = cfg.name;
  m.split = cfg.split;
  m.seed = cfg.seed;
  m.image_size = kImageSize;
  m.records.reserve(static_cast<size_t>(cfg.count));
  char buf[64];

  for (int i = 0; i < cfg.count; ++i) {
    Rng rng(derive_seed(cfg.seed, "case", static_cast<uint64_t>(i)));
    CaseRecord rec;
    std::snprintf(buf, sizeof buf, "%s-%s-%06d", cfg.name.c_str(), cfg.split.c_str(), i);
    rec.case_id = buf;
    std::snprintf(buf, sizeof buf, "%s-%s-pat-%06d", cfg.name.c_str(), cfg.split.c_str(), i);
    rec.patient_id = buf;

    if (!rng.bernoulli(cfg.healthy_frac)) {
      const int n_findings = 1 + (rng.bernoulli(cfg.second_finding_frac) ? 1 : 0);
      std::set<int> chosen;
      while (static_cast<int>(chosen.size()) < n_findings)
        chosen.insert(static_cast<int>(rng.uniform_int(kNumFindings)));
      for (int k : chosen) {
        rec.findings[static_cast<size_t>(k)].present = true;
        rec.findings[static_cast<size_t>(k)].severity = rng.uniform(0.35, 1.0);
      }
    }
    for (int k = 0; k < kNumFindings; ++k)
      rec.labels[static_cast<size_t>(k)] = rec.findings[static_cast<size_t>(k)].present ? 1 : 0;
    rec.report = write_report(rec.findings, derive_seed(cfg.seed, "report", static_cast<uint64_t>(i)));
    rec.provenance = "real";
    m.records.push_back(std::move(rec));
  }
  return m;
}

void materialize_images(const std::filesystem::path& dir, Manifest& m) {
  std::filesystem::create_directories(dir / "images");
  for (size_t i = 0; i < m.records.size(); ++i) {
    auto& rec = m.records[i];
    if (!rec.image_path.empty()) continue;
    const nn::Tensor<float> img = render_case(rec.findings, derive_seed(m.seed, "render", i));
    rec.image_path = "images/" + rec.case_id + ".patn";
    io::save_tensor(dir / rec.image_path, img);
  }
}

// ---------------------------------------------------------------------------
// manifest persistence
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kManifestKind = "pairaug.manifest";

nlohmann::ordered_json record_to_json(const CaseRecord& rec) {
  nlohmann::ordered_json j;
  j["case_id"] = rec.case_id;
  j["patient_id"] = rec.patient_id;
  j["report"] = rec.report;
  auto findings = nlohmann::ordered_json::array();
  for (const auto& f : rec.findings)
    findings.push_back(nlohmann::ordered_json::array({f.present ? 1 : 0, f.severity}));
  j["findings"] = std::move(findings);
  j["labels"] = rec.labels;
  j["provenance"] = rec.provenance;
  j["image_path"] = rec.image_path;
  j["scores"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : rec.scores) j["scores"][k] = v;
  if (!rec.source_case_id.empty()) j["source_case_id"] = rec.source_case_id;
  return j;
}

CaseRecord record_from_json(const nlohmann::json& j, size_t line_no) {
  auto fail = [line_no](const std::string& msg) -> SchemaError {
    return SchemaError(cat("manifest record ", line_no, ": ", msg));
  };
  try {
    CaseRecord rec;
    rec.case_id = j.at("case_id").get<std::string>();
    rec.patient_id = j.at("patient_id").get<std::string>();
    rec.report = j.at("report").get<std::string>();
    const auto& findings = j.at("findings");
    if (!findings.is_array() || findings.size() != kNumFindings)
      throw fail("findings must be an array of 6 entries");
    for (size_t k = 0; k < kNumFindings; ++k) {
      const auto& f = findings[k];
      if (!f.is_array() || f.size() != 2) throw fail("finding entries must be [present, severity]");
      const int present = f[0].get<int>();
      if (present != 0 && present != 1) throw fail("finding present flag must be 0 or 1");
      rec.findings[k].present = present == 1;
      rec.findings[k].severity = f[1].get<double>();
      if (!(rec.findings[k].severity >= 0.0 && rec.findings[k].severity <= 1.0))
        throw fail("finding severity out of [0, 1]");
    }
    const auto& labels = j.at("labels");
    if (!labels.is_array() || labels.size() != kNumFindings)
      throw fail("labels must be an array of 6 entries");
    for (size_t k = 0; k < kNumFindings; ++k) {
      rec.labels[k] = labels[k].get<int>();
      if (rec.labels[k] != 0 && rec.labels[k] != 1) throw fail("labels must be 0 or 1");
      if (rec.labels[k] != (rec.findings[k].present ? 1 : 0))
        throw fail(cat("label disagrees with finding state for ",
                       kFindingNames[k]));
    }
    rec.provenance = j.at("provenance").get<std::string>();
    rec.image_path = j.at("image_path").get<std::string>();
    for (const auto& [k, v] : j.at("scores").items()) rec.scores[k] = v.get<double>();
    if (j.contains("source_case_id")) rec.source_case_id = j.at("source_case_id").get<std::string>();
    if (rec.case_id.empty()) throw fail("case_id must not be empty");
    return rec;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(cat("manifest record ", line_no, ": ", e.what()));
  }
}

}  // namespace

void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  save_manifest(path, m, {});
}

void save_manifest(const std::filesystem::path& path, const Manifest& m,
                   const std::vector<std::map<std::string, std::string>>& extras) {
  PAIRAUG_VALIDATE(extras.empty() || extras.size() == m.records.size(), "got ", extras.size(),
                   " extra field sets for ", m.records.size(), " records");
  std::string records;
  for (size_t i = 0; i < m.records.size(); ++i) {
    auto j = record_to_json(m.records[i]);
    if (!extras.empty())
      for (const auto& [k, v] : extras[i]) {
        PAIRAUG_VALIDATE(!j.contains(k), "extra field '", k, "' collides with a record field");
        j[k] = v;
      }
    records += j.dump();
    records += "\n";
  }
  nlohmann::ordered_json header;
  header["schema_version"] = 1;
  header["kind"] = kManifestKind;
  header["name"] = m.name;
  header["split"] = m.split;
  header["seed"] = m.seed;
  header["image_size"] = m.image_size;
  header["count"] = m.records.size();
  header["checksum"] = Sha256::hex(records);
  io::write_file_atomic(path, header.dump() + "\n" + records);
}

Manifest load_manifest(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  const std::string what = path.string();

  std::vector<std::string> lines;
  size_t start = 0;
  while (start < text.size()) {
    const size_t nl = text.find('\n', start);
    const size_t end = nl == std::string::npos ? text.size() : nl;
    if (end > start) lines.push_back(text.substr(start, end - start));
    if (nl == std::string::npos) break;
    start = nl + 1;
  }
  PAIRAUG_CHECK(!lines.empty(), SchemaError, what, ": empty manifest");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(lines[0]);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(cat(what, ": malformed manifest header: ", e.what()));
  }
  try {
    PAIRAUG_CHECK(header.value("kind", "") == kManifestKind, SchemaError, what,
                  ": not a manifest file (kind mismatch)");
    PAIRAUG_CHECK(header.value("schema_version", 0) == 1, SchemaError, what,
                  ": unsupported manifest schema_version");
    Manifest m;
    m.name = header.at("name").get<std::string>();
    m.split = header.at("split").get<std::string>();
    m.seed = header.at("seed").get<uint64_t>();
    m.image_size = header.at("image_size").get<int>();
    const size_t count = header.at("count").get<size_t>();
    PAIRAUG_CHECK(lines.size() - 1 == count, SchemaError, what, ": header count ", count,
                  " but ", lines.size() - 1, " record lines");

    std::string records;
    for (size_t i = 1; i < lines.size(); ++i) {
      records += lines[i];
      records += "\n";
    }
    PAIRAUG_CHECK(Sha256::hex(records) == header.at("checksum").get<std::string>(), ChecksumError,
                  what, ": manifest checksum mismatch (records edited or truncated)");

    m.records.reserve(count);
    for (size_t i = 1; i < lines.size(); ++i) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(lines[i]);
      } catch (const nlohmann::json::exception& e) {
        throw SchemaError(cat(what, ": record line ", i, ": ", e.what()));
      }
      m.records.push_back(record_from_json(j, i));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(cat(what, ": manifest header: ", e.what()));
  }
}

nn::Tensor<float> load_case_image(const std::filesystem::path& base_dir, const CaseRecord& rec) {
  PAIRAUG_VALIDATE(!rec.image_path.empty(), "record ", rec.case_id, " has no image");
  nn::Tensor<float> img = io::load_tensor(base_dir / rec.image_path);
  PAIRAUG_CHECK((img.shape == std::vector<int64_t>{1, kImageSize, kImageSize}), SchemaError,
                rec.image_path, ": expected a 1x", kImageSize, "x", kImageSize, " image, got ",
                nn::shape_str(img.shape));
  return img;
}

std::vector<nn::Tensor<float>> load_images(const std::filesystem::path& base_dir,
                                           const Manifest& m) {
  std::vector<nn::Tensor<float>> out;
  out.reserve(m.records.size());
  for (const auto& rec : m.records) out.push_back(load_case_image(base_dir, rec));
  return out;
}

}  // namespace pairaug::corpus
