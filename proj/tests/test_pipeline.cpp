#include "pairaug/pipeline.hpp"

#include <chrono>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "pairaug/corpus.hpp"
#include "pairaug/io.hpp"
#include "pairaug/pruning.hpp"
#include "pairaug/rng.hpp"

using namespace pairaug;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir() {
  // unique per process: stale caches from an earlier run must never mask
  // a regenerated stage
  static const uint64_t run_tag = static_cast<uint64_t>(
      std::chrono::steady_clock::now().time_since_epoch().count());
  static int counter = 0;
  fs::path p = fs::temp_directory_path() /
               ("pairaug_pipe_" + std::to_string(run_tag) + "_" + std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

/// A configuration small enough for the whole orchestrator to run in
/// seconds: tiny corpus, tiny UNet, one-epoch encoders.
pipeline::PipelineConfig tiny_cfg(const fs::path& root) {
  pipeline::PipelineConfig c;
  c.corpus_count = 10;
  c.eval_count = 8;
  c.corpus_seed = 5;
  c.diff_base = 4;
  c.diff_groups = 4;
  c.diff_T = 60;
  c.diff_train_steps = 30;
  c.diff_batch = 4;
  c.sample_steps = 4;
  c.sample_batch = 4;
  c.guidance = 2.0;
  c.vlp_d_model = 16;
  c.vlp_embed_dim = 16;
  c.vlp_blocks = 1;
  c.vlp_patch = 16;
  c.vlp_epochs = 1;
  c.vlp_batch = 8;
  c.scorer_epochs = 1;
  c.ablation_seeds = 1;
  c.bootstrap = 40;
  c.seed = 3;
  c.out_root = root.string();
  return c;
}

bool same_bits(const nn::Tensor<float>& a, const nn::Tensor<float>& b) {
  return a.shape == b.shape &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

corpus::CaseRecord stub_record(const std::string& id, const std::string& prov) {
  corpus::CaseRecord rec;
  rec.case_id = id;
  rec.patient_id = id + "-pat";
  rec.report = "No acute findings .";
  rec.provenance = prov;
  return rec;
}

}  // namespace

TEST_CASE("config: defaults, parse, dump round-trip, errors") {
  const pipeline::PipelineConfig def;
  CHECK(def.tau == 0.3);
  CHECK(def.epsilon == 0.003);
  CHECK(def.eta == 0.5);
  CHECK(def.guidance == 4.0);
  CHECK(def.corpus_count == 2000);
  CHECK(def.vlp_epochs == 10);
  CHECK(def.mult_inter == 1);
  CHECK(def.branches.interaug);
  CHECK_FALSE(def.branches.baseline_img);

  // empty text keeps every default
  CHECK(pipeline::dump_config(pipeline::parse_config("")) == pipeline::dump_config(def));

  // overrides, comments, blank lines, inline comments
  const auto cfg = pipeline::parse_config(
      "# run settings\n"
      "prune.tau = 0.45\n"
      "\n"
      "workers = 3\n"
      "branches.interaug = false\n"
      "branches.prune_e = 0\n"
      "textaug.mode = external\n"
      "seed = 9 # trailing comment\n"
      "out_root = runs/x\n"
      "diffusion.lr = 1e-3\n");
  CHECK(cfg.tau == 0.45);
  CHECK(cfg.workers == 3);
  CHECK_FALSE(cfg.branches.interaug);
  CHECK_FALSE(cfg.branches.prune_e);
  CHECK(cfg.branches.intraaug);  // untouched default
  CHECK(cfg.textaug_mode == "external");
  CHECK(cfg.seed == 9);
  CHECK(cfg.out_root == "runs/x");
  CHECK(cfg.diff_lr == 1e-3);

  // dump -> parse -> dump is exact, including doubles without a short
  // decimal form
  pipeline::PipelineConfig odd;
  odd.tau = 0.1 + 0.2;  // 0.30000000000000004
  odd.epsilon = 1e-9;
  odd.healthy_frac = 2.0 / 3.0;
  odd.seed = UINT64_MAX;
  odd.branches.baseline_text = true;
  const std::string dump = pipeline::dump_config(odd);
  const auto back = pipeline::parse_config(dump);
  CHECK(back.tau == odd.tau);
  CHECK(back.epsilon == odd.epsilon);
  CHECK(back.healthy_frac == odd.healthy_frac);
  CHECK(back.seed == odd.seed);
  CHECK(pipeline::dump_config(back) == dump);

  // dump is sorted one-key-per-line
  std::istringstream lines(dump);
  std::string prev, line;
  while (std::getline(lines, line)) {
    const std::string key = line.substr(0, line.find(" = "));
    CHECK(prev < key);
    prev = key;
  }

  CHECK_THROWS_AS((void)pipeline::parse_config("no_such_key = 1\n"), SchemaError);
  CHECK_THROWS_AS((void)pipeline::parse_config("workers\n"), SchemaError);
  CHECK_THROWS_AS((void)pipeline::parse_config("workers = abc\n"), SchemaError);
  CHECK_THROWS_AS((void)pipeline::parse_config("seed = 12x\n"), SchemaError);
  CHECK_THROWS_AS((void)pipeline::parse_config("branches.prune_a = maybe\n"), SchemaError);
}

TEST_CASE("gaussian_blur and augment_image properties") {
  Rng rng(41);
  nn::Tensor<float> img({1, 16, 16});
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());

  // sigma 0 is the identity, bit for bit
  CHECK(same_bits(pipeline::gaussian_blur(img, 0.0), img));

  // a constant image stays constant (kernel sums to one)
  nn::Tensor<float> flat({1, 8, 8});
  for (auto& v : flat.data) v = 0.37f;
  const auto blurred_flat = pipeline::gaussian_blur(flat, 1.1);
  for (float v : blurred_flat.data) CHECK(v == doctest::Approx(0.37).epsilon(1e-6));

  // blurring shrinks variance
  auto variance = [](const nn::Tensor<float>& t) {
    double mean = 0.0;
    for (float v : t.data) mean += v;
    mean /= static_cast<double>(t.numel());
    double var = 0.0;
    for (float v : t.data) var += (v - mean) * (v - mean);
    return var / static_cast<double>(t.numel());
  };
  const auto blurred = pipeline::gaussian_blur(img, 1.0);
  CHECK(blurred.shape == img.shape);
  CHECK(variance(blurred) < variance(img));

  nn::Tensor<float> flat2d({16, 16});
  CHECK_THROWS_AS((void)pipeline::gaussian_blur(flat2d, 1.0), ValidationError);
  CHECK_THROWS_AS((void)pipeline::gaussian_blur(img, -1.0), ValidationError);
  CHECK_THROWS_AS((void)pipeline::gaussian_blur(img, std::nan("")), ValidationError);

  // augment: shape-preserving, bounded, seeded
  nn::Tensor<float> frame({1, 64, 64});
  for (auto& v : frame.data) v = static_cast<float>(rng.uniform());
  const auto a1 = pipeline::augment_image(frame, 7);
  const auto a2 = pipeline::augment_image(frame, 7);
  const auto a3 = pipeline::augment_image(frame, 8);
  CHECK(a1.shape == frame.shape);
  CHECK(same_bits(a1, a2));
  CHECK_FALSE(same_bits(a1, a3));
  CHECK_FALSE(same_bits(a1, frame));
  for (float v : a1.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK_THROWS_AS((void)pipeline::augment_image(flat2d, 7), ValidationError);
}

TEST_CASE("merge_synthetic: concatenation, collisions") {
  corpus::Manifest a;
  a.name = "omega_hat_a";
  a.split = "train";
  a.seed = 3;
  a.records = {stub_record("a-1", "interaug"), stub_record("a-2", "interaug")};
  corpus::Manifest b;
  b.name = "omega_e_prime";
  b.split = "train";
  b.seed = 3;
  b.records = {stub_record("b-1", "intraaug")};

  const auto merged = pipeline::Pipeline::merge_synthetic(a, b);
  CHECK(merged.name == "omega_s");
  REQUIRE(merged.records.size() == 3);
  CHECK(merged.records[0].case_id == "a-1");
  CHECK(merged.records[1].case_id == "a-2");
  CHECK(merged.records[2].case_id == "b-1");
  CHECK(merged.records[0].provenance == "interaug");
  CHECK(merged.records[2].provenance == "intraaug");

  corpus::Manifest empty_a, empty_b;
  CHECK(pipeline::Pipeline::merge_synthetic(empty_a, empty_b).records.empty());

  corpus::Manifest clash = b;
  clash.records.push_back(stub_record("a-2", "intraaug"));
  CHECK_THROWS_AS((void)pipeline::Pipeline::merge_synthetic(a, clash), ValidationError);
}

TEST_CASE("baselines: aug-img keeps reports, aug-text keeps images") {
  auto cfg = tiny_cfg(temp_dir());
  cfg.workers = 2;
  pipeline::Pipeline p(cfg);
  const auto train = p.train_manifest();  // copy: later calls may not move it

  const auto bi = p.run_baseline("aug-img");
  REQUIRE(bi.records.size() == train.records.size());
  for (size_t i = 0; i < bi.records.size(); ++i) {
    const auto& src = train.records[i];
    const auto& rec = bi.records[i];
    CHECK(rec.report == src.report);  // the report never changes
    CHECK(rec.labels == src.labels);
    CHECK(rec.provenance == "baseline-img");
    CHECK(rec.source_case_id == src.case_id);
    CHECK(rec.case_id != src.case_id);
    const auto orig = corpus::load_case_image(p.root() / "corpus", src);
    const auto aug = corpus::load_case_image(p.root() / "baseline", rec);
    CHECK_FALSE(same_bits(aug, orig));
    for (float v : aug.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }

  const auto bt = p.run_baseline("aug-text");
  REQUIRE(bt.records.size() == train.records.size());
  for (size_t i = 0; i < bt.records.size(); ++i) {
    const auto& src = train.records[i];
    const auto& rec = bt.records[i];
    CHECK(rec.report != src.report);
    CHECK(rec.labels == src.labels);  // paraphrase preserves labels
    CHECK(rec.provenance == "baseline-text");
    const auto orig = corpus::load_case_image(p.root() / "corpus", src);
    const auto kept = corpus::load_case_image(p.root() / "baseline", rec);
    CHECK(same_bits(kept, orig));  // the image never changes
  }

  const auto bb = p.run_baseline("both");
  REQUIRE(bb.records.size() == train.records.size());
  CHECK(bb.records[0].provenance == "baseline-both");
  CHECK(bb.records[0].report != train.records[0].report);
  CHECK_FALSE(same_bits(corpus::load_case_image(p.root() / "baseline", bb.records[0]),
                        corpus::load_case_image(p.root() / "corpus", train.records[0])));

  // reruns reproduce records and pixels exactly
  const auto bi2 = p.run_baseline("aug-img");
  REQUIRE(bi2.records.size() == bi.records.size());
  for (size_t i = 0; i < bi.records.size(); ++i) {
    CHECK(bi2.records[i] == bi.records[i]);
    CHECK(same_bits(corpus::load_case_image(p.root() / "baseline", bi2.records[i]),
                    corpus::load_case_image(p.root() / "baseline", bi.records[i])));
  }

  CHECK_THROWS_AS((void)p.run_baseline("mixup"), ValidationError);
}

TEST_CASE("pipeline: end-to-end run, accounting, caching, determinism") {
  const fs::path r1 = temp_dir(), r2 = temp_dir();
  const auto cfg = tiny_cfg(r1);
  pipeline::Pipeline p1(cfg);
  // the resolved config lands in the run root on construction
  CHECK(io::read_file(r1 / "config.txt") == pipeline::dump_config(cfg));

  const auto sum = p1.run_all();

  // Eq.-1 accounting: the merged set is exactly both kept sets
  CHECK(sum.n_synthetic == sum.n_inter_kept + sum.n_intra_kept);
  CHECK(sum.n_inter_raw == cfg.corpus_count * cfg.mult_inter);
  CHECK(sum.n_intra_raw == cfg.corpus_count * cfg.mult_intra);
  CHECK(sum.n_inter_kept <= sum.n_inter_raw);
  CHECK(sum.n_intra_kept <= sum.n_intra_raw);
  CHECK(sum.delta == doctest::Approx(sum.pairaug.mean_auc - sum.base.mean_auc));

  CHECK(sum.base.n_train == cfg.corpus_count);
  CHECK(sum.base.n_eval == cfg.eval_count);
  CHECK(sum.pairaug.n_train == cfg.corpus_count + sum.n_synthetic);
  for (double a : sum.base.per_auc) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
  CHECK(sum.base.ci_lo <= sum.base.ci_hi);

  // ledger cross-checks: kept fractions match the stage rows
  const auto* pi = p1.ledger().find("prune-inter");
  REQUIRE(pi != nullptr);
  CHECK(pi->n_in == sum.n_inter_raw);
  CHECK(pi->n_out == sum.n_inter_kept);
  const auto* pe = p1.ledger().find("prune-intra");
  REQUIRE(pe != nullptr);
  CHECK(pe->n_in == sum.n_intra_raw);
  CHECK(pe->n_out == sum.n_intra_kept);
  const auto* mg = p1.ledger().find("merge");
  REQUIRE(mg != nullptr);
  CHECK(mg->n_in == sum.n_inter_kept + sum.n_intra_kept);
  CHECK(mg->n_out == sum.n_synthetic);
  for (const char* stage :
       {"corpus", "t2i", "scorer", "interaug-candidates", "intraaug-candidates", "train-eval"})
    CHECK(p1.ledger().find(stage) != nullptr);

  for (const char* rel :
       {"corpus/train.jsonl", "corpus/eval.jsonl", "synthetic/omega_a.jsonl",
        "synthetic/omega_hat_a.jsonl", "synthetic/omega_e.jsonl", "synthetic/omega_e_prime.jsonl",
        "synthetic/omega_s.jsonl", "eval/base.json", "eval/pairaug.json", "eval/summary.json",
        "ledger.json", "cache/t2i.ck", "cache/scorer.ck"})
    CHECK(fs::exists(r1 / rel));

  // the merged manifest: disjoint ids, branch provenances only, loadable
  // images, intact lineage
  const auto ms = corpus::load_manifest(r1 / "synthetic" / "omega_s.jsonl");
  REQUIRE(static_cast<int64_t>(ms.records.size()) == sum.n_synthetic);
  const auto train = corpus::load_manifest(r1 / "corpus" / "train.jsonl");
  std::map<std::string, const corpus::CaseRecord*> by_id;
  for (const auto& rec : train.records) by_id[rec.case_id] = &rec;
  std::set<std::string> ids;
  int64_t n_inter = 0, n_intra = 0;
  for (const auto& rec : ms.records) {
    CHECK(ids.insert(rec.case_id).second);
    REQUIRE(by_id.count(rec.source_case_id) == 1);
    const auto* src = by_id.at(rec.source_case_id);
    if (rec.provenance == "interaug") {
      ++n_inter;
      CHECK(rec.patient_id != src->patient_id);  // a new patient
      CHECK(rec.scores.count("s_align") == 1);
    } else if (rec.provenance == "intraaug") {
      ++n_intra;
      CHECK(rec.patient_id == src->patient_id);  // the same patient
      CHECK(rec.scores.count("s1") == 1);
      CHECK(rec.scores.count("s2") == 1);
      CHECK(rec.scores.count("s3") == 1);
    } else {
      FAIL("unexpected provenance " << rec.provenance);
    }
    const auto img = corpus::load_case_image(r1 / "synthetic", rec);
    CHECK(img.shape == std::vector<int64_t>{1, 64, 64});
  }
  CHECK(n_inter == sum.n_inter_kept);
  CHECK(n_intra == sum.n_intra_kept);

  // the kept interaug set equals a fresh prune of the persisted scores
  const auto omega_a = corpus::load_manifest(r1 / "synthetic" / "omega_a.jsonl");
  std::vector<double> persisted;
  for (const auto& rec : omega_a.records) persisted.push_back(rec.scores.at("s_align"));
  const auto keep = pruning::prune_inter(persisted, cfg.tau);
  const auto omega_hat = corpus::load_manifest(r1 / "synthetic" / "omega_hat_a.jsonl");
  REQUIRE(omega_hat.records.size() == keep.size());
  for (size_t k = 0; k < keep.size(); ++k)
    CHECK(omega_hat.records[k] == omega_a.records[keep[k]]);

  // intraaug reference images sit next to the edited ones
  const auto omega_e = corpus::load_manifest(r1 / "synthetic" / "omega_e.jsonl");
  for (const auto& rec : omega_e.records) {
    const auto ref_path = r1 / "synthetic" / "images" / (rec.case_id + "-ref.patn");
    REQUIRE(fs::exists(ref_path));
    CHECK_FALSE(same_bits(io::load_tensor(ref_path), corpus::load_case_image(r1 / "synthetic", rec)));
  }

  // each omega_e line stores the whole edit quadruple: the record's own
  // report (y') and image_path (x') plus the source report and reference
  // path as extra fields
  {
    std::istringstream in(io::read_file(r1 / "synthetic" / "omega_e.jsonl"));
    std::string line;
    REQUIRE(std::getline(in, line));  // header
    size_t k = 0;
    while (std::getline(in, line)) {
      REQUIRE(k < omega_e.records.size());
      const auto j = nlohmann::json::parse(line);
      CHECK(j.at("source_report").get<std::string>() ==
            by_id.at(omega_e.records[k].source_case_id)->report);
      CHECK(j.at("reference_path").get<std::string>() ==
            "images/" + omega_e.records[k].case_id + "-ref.patn");
      ++k;
    }
    CHECK(k == omega_e.records.size());
  }

  // a second root with a different worker count reproduces every
  // deliverable byte for byte
  auto cfg2 = tiny_cfg(r2);
  cfg2.workers = 2;
  pipeline::Pipeline p2(cfg2);
  const auto sum2 = p2.run_all();
  CHECK(sum2.n_synthetic == sum.n_synthetic);
  CHECK(sum2.base.mean_auc == sum.base.mean_auc);
  CHECK(sum2.pairaug.mean_auc == sum.pairaug.mean_auc);
  for (const char* rel :
       {"corpus/train.jsonl", "corpus/eval.jsonl", "synthetic/omega_a.jsonl",
        "synthetic/omega_hat_a.jsonl", "synthetic/omega_e.jsonl", "synthetic/omega_e_prime.jsonl",
        "synthetic/omega_s.jsonl", "eval/base.json", "eval/pairaug.json", "eval/summary.json"})
    CHECK(io::read_file(r1 / rel) == io::read_file(r2 / rel));
  for (const auto& rec : ms.records)
    CHECK(same_bits(corpus::load_case_image(r1 / "synthetic", rec),
                    corpus::load_case_image(r2 / "synthetic", rec)));

  // reopening the same root hits every cache: heavyweight artifacts are
  // reused, never rebuilt
  const auto t2i_time = fs::last_write_time(r1 / "cache" / "t2i.ck");
  const auto scorer_time = fs::last_write_time(r1 / "cache" / "scorer.ck");
  const auto omega_a_time = fs::last_write_time(r1 / "synthetic" / "omega_a.jsonl");
  pipeline::Pipeline p3(cfg);
  const auto sum3 = p3.run_all();
  CHECK(fs::last_write_time(r1 / "cache" / "t2i.ck") == t2i_time);
  CHECK(fs::last_write_time(r1 / "cache" / "scorer.ck") == scorer_time);
  CHECK(fs::last_write_time(r1 / "synthetic" / "omega_a.jsonl") == omega_a_time);
  CHECK(sum3.n_synthetic == sum.n_synthetic);
  CHECK(io::read_file(r1 / "eval" / "summary.json") == io::read_file(r2 / "eval" / "summary.json"));

  // the sweep re-prunes from the cache: kept counts are monotone in tau,
  // the cached candidates stay untouched, and tau rows precede eps rows
  const auto rows = p3.sweep_thresholds({0.0, cfg.tau, 1.0}, {cfg.epsilon});
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].param == "tau");
  CHECK(rows[1].param == "tau");
  CHECK(rows[2].param == "tau");
  CHECK(rows[3].param == "eps");
  CHECK(rows[0].kept >= rows[1].kept);
  CHECK(rows[1].kept >= rows[2].kept);
  CHECK(rows[2].kept == 0);  // cosine scores never exceed 1
  CHECK(rows[1].kept == sum.n_inter_kept);
  CHECK(rows[3].kept == sum.n_intra_kept);
  CHECK(fs::last_write_time(r1 / "synthetic" / "omega_a.jsonl") == omega_a_time);
  CHECK(pipeline::Pipeline::write_sweep_csv(rows) == io::read_file(r1 / "eval" / "sweep.csv"));

  // six ablation rows, deltas anchored at the base row
  const auto ab = p3.run_ablation();
  REQUIRE(ab.size() == 6);
  CHECK(ab[0].name == "base");
  CHECK(ab[1].name == "+InterAug");
  CHECK(ab[2].name == "+InterAug+Pr_a");
  CHECK(ab[3].name == "+IntraAug");
  CHECK(ab[4].name == "+IntraAug+Pr_e");
  CHECK(ab[5].name == "full");
  CHECK(ab[0].delta == 0.0);
  for (const auto& row : ab) {
    REQUIRE(row.aucs.size() == static_cast<size_t>(cfg.ablation_seeds));
    CHECK(row.mean_auc >= 0.0);
    CHECK(row.mean_auc <= 1.0);
    CHECK(row.delta == doctest::Approx(row.mean_auc - ab[0].mean_auc));
  }
  CHECK(pipeline::Pipeline::write_ablation_csv(ab) == io::read_file(r1 / "eval" / "ablation.csv"));

  // projection: header plus an image row and a text row per taken record
  const fs::path csv_path = r1 / "eval" / "proj.csv";
  p3.emit_projection({r1 / "corpus" / "train.jsonl", r1 / "synthetic" / "omega_s.jsonl"}, 4, 11,
                     csv_path);
  const std::string csv = io::read_file(csv_path);
  std::istringstream csv_in(csv);
  std::string line;
  REQUIRE(std::getline(csv_in, line));
  CHECK(line == "x,y,modality,provenance");
  int64_t rows_seen = 0, img_rows = 0;
  std::set<std::string> provs;
  while (std::getline(csv_in, line)) {
    ++rows_seen;
    std::istringstream cells(line);
    std::string x, y, modality, prov;
    REQUIRE(std::getline(cells, x, ','));
    REQUIRE(std::getline(cells, y, ','));
    REQUIRE(std::getline(cells, modality, ','));
    REQUIRE(std::getline(cells, prov, ','));
    CHECK(std::isfinite(std::stod(x)));
    CHECK(std::isfinite(std::stod(y)));
    CHECK((modality == "image" || modality == "text"));
    img_rows += modality == "image";
    provs.insert(prov);
  }
  const int64_t expect_taken = std::min<int64_t>(4, cfg.corpus_count) +
                               std::min<int64_t>(4, sum.n_inter_kept) +
                               std::min<int64_t>(4, sum.n_intra_kept);
  CHECK(rows_seen == 2 * expect_taken);
  CHECK(img_rows == expect_taken);
  CHECK(provs.count("real") == 1);
  if (sum.n_inter_kept > 0) CHECK(provs.count("interaug") == 1);
  if (sum.n_intra_kept > 0) CHECK(provs.count("intraaug") == 1);
  // deterministic re-emit
  const fs::path csv2_path = r1 / "eval" / "proj2.csv";
  p3.emit_projection({r1 / "corpus" / "train.jsonl", r1 / "synthetic" / "omega_s.jsonl"}, 4, 11,
                     csv2_path);
  CHECK(io::read_file(csv2_path) == csv);

  // tau = 1 prunes everything; disabled prune flags pass candidates through
  auto strict = cfg;
  strict.tau = 1.0;
  pipeline::Pipeline p4(strict);
  CHECK(p4.run_interaug().records.empty());
  auto off = cfg;
  off.branches.prune_a = false;
  off.branches.prune_e = false;
  pipeline::Pipeline p5(off);
  CHECK(p5.run_interaug().records.size() == static_cast<size_t>(sum.n_inter_raw));
  CHECK(p5.run_intraaug().records.size() == static_cast<size_t>(sum.n_intra_raw));

  // stage isolation: disabling a branch removes exactly its provenance
  auto iso = cfg;
  iso.branches.intraaug = false;
  pipeline::Pipeline p6(iso);
  const auto sum6 = p6.run_all();
  CHECK(sum6.n_intra_raw == 0);
  CHECK(sum6.n_intra_kept == 0);
  CHECK(sum6.n_synthetic == sum6.n_inter_kept);
  CHECK(sum6.n_inter_kept == sum.n_inter_kept);
  const auto ms6 = corpus::load_manifest(r1 / "synthetic" / "omega_s.jsonl");
  for (const auto& rec : ms6.records) CHECK(rec.provenance == "interaug");
}
