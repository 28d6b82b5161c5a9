#include "pairaug/textaug.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "pairaug/rng.hpp"
#include "pairaug/tokenizer.hpp"

namespace pairaug::textaug {

namespace {

using corpus::CaseRecord;
using corpus::Finding;
using corpus::FindingStates;
using corpus::kNumFindings;

std::string seed_tag(uint64_t seed) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%08x", static_cast<unsigned>(seed & 0xffffffffu));
  return buf;
}

CaseRecord derived_record(const CaseRecord& src, const FindingStates& states,
                          std::string report, const std::string& tag) {
  CaseRecord rec;
  rec.case_id = src.case_id + "-" + tag;
  rec.patient_id = rec.case_id + "-pat";
  rec.report = std::move(report);
  rec.findings = states;
  for (int k = 0; k < kNumFindings; ++k)
    rec.labels[static_cast<size_t>(k)] = states[static_cast<size_t>(k)].present ? 1 : 0;
  rec.provenance = "interaug";
  rec.source_case_id = src.case_id;
  return rec;
}

}  // namespace

FlipResult flip_findings(const CaseRecord& src, int k, uint64_t seed) {
  PAIRAUG_VALIDATE(k >= 1 && k <= kNumFindings, "flip count must be in [1, ", kNumFindings,
                   "], got ", k);
  Rng rng(derive_seed(seed, "flip"));

  std::array<int, kNumFindings> order{};
  for (int i = 0; i < kNumFindings; ++i) order[static_cast<size_t>(i)] = i;
  for (size_t i = kNumFindings; i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_int(i)]);
  std::vector<int> chosen(order.begin(), order.begin() + k);
  std::sort(chosen.begin(), chosen.end());

  FindingStates states = src.findings;
  std::vector<Finding> turned_off;
  FlipResult out;
  for (int idx : chosen) {
    auto& f = states[static_cast<size_t>(idx)];
    if (f.present) {
      f = {false, 0.0};
      turned_off.push_back(static_cast<Finding>(idx));
    } else {
      f = {true, rng.uniform(0.5, 0.9)};
    }
    out.flipped.push_back(static_cast<Finding>(idx));
  }

  const std::string report =
      corpus::write_report(states, derive_seed(seed, "report"), turned_off);
  out.record = derived_record(src, states, report, "fx" + seed_tag(seed));
  return out;
}

std::string paraphrase(const CaseRecord& src, uint64_t seed) {
  for (uint64_t attempt = 0; attempt < 32; ++attempt) {
    std::string candidate =
        corpus::write_report(src.findings, derive_seed(seed, "para", attempt));
    if (candidate != src.report) return candidate;
  }
  throw StateError(cat("paraphrase produced no variant for ", src.case_id));
}

// ---------------------------------------------------------------------------
// external rewriter
// ---------------------------------------------------------------------------

std::string sanitize_rewrite(const std::string& raw, double* oov_frac) {
  std::string norm;
  norm.reserve(raw.size() + 16);
  for (char ch : raw) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalpha(u)) {
      norm.push_back(static_cast<char>(std::tolower(u)));
    } else if (ch == '.') {
      norm += " . ";
    } else {
      norm.push_back(' ');
    }
  }

  static const text::Tokenizer tok;
  std::istringstream in(norm);
  std::string w;
  std::vector<std::vector<std::string>> sentences(1);
  int total = 0, dropped = 0;
  while (in >> w) {
    if (w == ".") {
      if (!sentences.back().empty()) sentences.emplace_back();
      continue;
    }
    ++total;
    if (!tok.in_vocab(w)) {
      ++dropped;
      continue;
    }
    sentences.back().push_back(w);
  }
  if (oov_frac) *oov_frac = total == 0 ? 0.0 : static_cast<double>(dropped) / total;

  std::string out;
  int words = 0;
  for (const auto& sent : sentences) {
    if (sent.empty()) continue;
    if (words + static_cast<int>(sent.size()) > corpus::kMaxReportWords) break;
    for (const auto& word : sent) {
      if (!out.empty()) out += " ";
      out += word;
      ++words;
    }
    out += " .";
  }
  return out;
}

RewriteOutcome external_rewrite(const CaseRecord& src, const LlmConfig& cfg, uint64_t seed) {
  PAIRAUG_VALIDATE(cfg.port > 0 && cfg.port < 65536, "rewrite endpoint port out of range: ",
                   cfg.port);
  httplib::Client cli(cfg.host, cfg.port);
  const time_t sec = cfg.timeout_ms / 1000;
  const time_t usec = (cfg.timeout_ms % 1000) * 1000;
  cli.set_connection_timeout(sec, usec);
  cli.set_read_timeout(sec, usec);
  cli.set_write_timeout(sec, usec);

  nlohmann::ordered_json req;
  req["report"] = src.report;
  req["instruction"] = kRewriteInstruction;
  req["seed"] = seed;
  const std::string body = req.dump();

  httplib::Result res;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    res = cli.Post(cfg.path, body, "application/json");
    if (res && res->status == 200) break;
  }
  if (!res) {
    throw IoError(cat("rewrite endpoint ", cfg.host, ":", cfg.port, cfg.path,
                      " unreachable after ", cfg.max_retries + 1, " attempts: ",
                      httplib::to_string(res.error())));
  }
  PAIRAUG_CHECK(res->status == 200, IoError, "rewrite endpoint returned status ", res->status,
                " after ", cfg.max_retries + 1, " attempts");

  nlohmann::json reply;
  try {
    reply = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(cat("rewrite reply is not JSON: ", e.what()));
  }
  PAIRAUG_CHECK(reply.contains("text") && reply["text"].is_string(), SchemaError,
                "rewrite reply missing string field \"text\"");

  RewriteOutcome out;
  out.sanitized = sanitize_rewrite(reply["text"].get<std::string>(), &out.oov_frac);
  if (out.sanitized.empty()) {
    out.reject_reason = "empty";
    return out;
  }
  if (out.oov_frac > 0.3) {
    out.reject_reason = "vocabulary";
    return out;
  }

  const auto parsed = corpus::parse_report(out.sanitized);
  FindingStates states{};
  Rng sev_rng(derive_seed(seed, "sev"));
  bool changed = false;
  for (int k = 0; k < kNumFindings; ++k) {
    const bool was = src.findings[static_cast<size_t>(k)].present;
    const bool now = parsed[static_cast<size_t>(k)] == 1;
    if (now) {
      states[static_cast<size_t>(k)] = {
          true, was ? src.findings[static_cast<size_t>(k)].severity : sev_rng.uniform(0.5, 0.9)};
    }
    changed = changed || was != now;
  }
  if (!changed) {
    out.reject_reason = "unchanged";
    return out;
  }

  out.accepted = true;
  out.record = derived_record(src, states, out.sanitized, "lx" + seed_tag(seed));
  return out;
}

}  // namespace pairaug::textaug
