#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "trinet/experiment.hpp"
#include "trinet/metrics.hpp"

using namespace trinet;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("trinet_exp_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A small but complete config document; tests mutate copies of it.
std::string base_json(const std::string& out_dir) {
  return R"({
    "schema_version": 1,
    "dataset": {"kind": "synthetic", "n_per_class": 30, "dim": 5, "noise": 1.0, "data_seed": 4},
    "variants": ["nominal", "sparse"],
    "grid": {"learning_rate": [0.01], "layer_sizes": [[8]], "lambda": [0.001]},
    "train": {"batch": 16, "max_iterations": 40, "validate_every": 20},
    "seeds": [1, 2],
    "test_seed": 9,
    "attack": {"rhos": [0.05], "steps": 3, "restarts": 1, "val_sample": 32},
    "output_dir": ")" +
         out_dir + R"("
  })";
}

ExperimentConfig tiny_config(const std::string& out_dir) {
  return parse_config(base_json(out_dir));
}

SweepRecord fake_record(const std::string& fp, std::size_t grid_index, std::uint64_t seed,
                        double val_acc, double val_adv) {
  SweepRecord r;
  r.fingerprint = fp;
  r.grid_index = grid_index;
  r.variant = "nominal";
  r.precision_bits = 64;
  r.lr = 0.01;
  r.layers = {8};
  r.a_fraction = 0.7;
  r.seed = seed;
  r.best_iteration = 40;
  r.val_acc = val_acc;
  r.val_adv_rhos = {0.1};
  r.val_adv_accs = {val_adv};
  r.test_natural = val_acc;
  r.test_adv_rhos = {0.1};
  r.test_adv_accs = {val_adv};
  r.test_sparsity = 0.25;
  r.test_predictions = {0, 1, 0, 1};
  r.wall_seconds = 1.5;
  return r;
}

void drop_record(const fs::path& dir, const SweepRecord& r) {
  std::ofstream out(dir / record_filename(r.fingerprint, r.seed), std::ios::binary);
  out << record_to_json(r);
}

}  // namespace

TEST_CASE("config json parses into every field") {
  const ExperimentConfig cfg = tiny_config("/tmp/trinet_exp_unused");
  CHECK(cfg.schema_version == 1);
  CHECK(cfg.dataset.kind == "synthetic");
  CHECK(cfg.dataset.n_per_class == 30);
  CHECK(cfg.dataset.dim == 5);
  CHECK(cfg.dataset.noise == 1.0);
  CHECK(cfg.dataset.data_seed == 4);
  CHECK(cfg.variants == std::vector<std::string>{"nominal", "sparse"});
  CHECK(cfg.grid.learning_rate == std::vector<double>{0.01});
  REQUIRE(cfg.grid.layer_sizes.size() == 1);
  CHECK(cfg.grid.layer_sizes[0] == std::vector<std::int64_t>{8});
  CHECK(cfg.grid.lambda == std::vector<double>{0.001});
  CHECK(cfg.grid.weight_decay == std::vector<double>{0.0});  // default
  CHECK(cfg.batch == 16);
  CHECK(cfg.max_iterations == 40);
  CHECK(cfg.validate_every == 20);
  CHECK(cfg.a_fraction == 0.7);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(cfg.test_seed == 9);
  CHECK(cfg.attack_rhos == std::vector<double>{0.05});
  CHECK(cfg.attack_steps == 3);
  CHECK(cfg.attack_restarts == 1);
  CHECK(cfg.val_attack_sample == 32);
  CHECK(cfg.output_dir == "/tmp/trinet_exp_unused");
  // Gate constants come from the defaults when the document omits them.
  CHECK(cfg.gates.beta == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("config rejects unknown keys, bad versions, and bad values") {
  auto parse_mut = [](const std::string& from, const std::string& to) {
    std::string text = base_json("/tmp/x");
    const auto pos = text.find(from);
    REQUIRE(pos != std::string::npos);
    text.replace(pos, from.size(), to);
    return text;
  };
  CHECK_THROWS_WITH_AS(parse_config(parse_mut("\"seeds\"", "\"sseeds\"")),
                       doctest::Contains("unknown key 'sseeds'"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config(parse_mut("\"kind\"", "\"kindd\"")),
                       doctest::Contains("in dataset"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config(parse_mut("\"learning_rate\"", "\"lr\"")),
                       doctest::Contains("in grid"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config(parse_mut("\"batch\"", "\"minibatch\"")),
                       doctest::Contains("in train"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config(parse_mut("\"rhos\"", "\"radii\"")),
                       doctest::Contains("in attack"), std::runtime_error);
  CHECK_THROWS_WITH_AS(parse_config(parse_mut("\"schema_version\": 1", "\"schema_version\": 2")),
                       doctest::Contains("schema_version"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(parse_mut("\"nominal\"", "\"nominal-x\"")),
                       doctest::Contains("variant"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(parse_mut("[1, 2]", "[1, 1]")),
                       doctest::Contains("duplicate"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(parse_mut("\"sparse\"", "\"robust\"")),
                       doctest::Contains("grid.rho"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(parse_mut("[0.01]", "[-0.01]")),
                       doctest::Contains("learning rates"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("not json"), std::runtime_error);
  CHECK_THROWS_AS(parse_config("[1,2,3]"), std::runtime_error);
}

TEST_CASE("grid expansion is variant-major and collapses ignored axes") {
  ExperimentConfig cfg = tiny_config("/tmp/x");
  cfg.variants = {"nominal"};
  cfg.grid.learning_rate = {1e-3, 1e-2};
  cfg.grid.layer_sizes = {{8}, {16, 8}};
  cfg.grid.rho = {0.1, 0.2, 0.3, 0.4, 0.5};
  cfg.grid.lambda = {1.0, 2.0, 3.0};

  SUBCASE("irrelevant axes do not multiply") {
    const auto pts = expand_grid(cfg);
    REQUIRE(pts.size() == 4);  // 2 lr x 2 layers; rho/lambda collapsed
    CHECK(pts[0].train.lr == 1e-3);
    CHECK(pts[0].train.hidden == std::vector<std::int64_t>{8});
    CHECK(pts[1].train.lr == 1e-3);
    CHECK(pts[1].train.hidden == std::vector<std::int64_t>{16, 8});
    CHECK(pts[2].train.lr == 1e-2);
    CHECK(pts[3].train.lr == 1e-2);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      CHECK(pts[i].index == i);
      CHECK(pts[i].variant == "nominal");
      CHECK(pts[i].train.loss.rho == 0.0);
      CHECK(pts[i].train.loss.lambda == 0.0);
      CHECK(pts[i].train.loss.flags == VariantFlags{});
      CHECK(pts[i].train.batch == cfg.batch);
      CHECK(pts[i].train.loss.a_fraction == cfg.a_fraction);
    }
  }

  SUBCASE("active axes multiply out and variants come in declared blocks") {
    cfg.variants = {"nominal", "full"};
    cfg.grid.weight_decay = {0.0, 1e-4};
    cfg.grid.dropout = {0.0, 0.1};
    const auto pts = expand_grid(cfg);
    // nominal: 2*2*2*2 = 16; full: 16 * 5 rho * 3 lambda = 240.
    REQUIRE(pts.size() == 256);
    for (std::size_t i = 0; i < 16; ++i) CHECK(pts[i].variant == "nominal");
    for (std::size_t i = 16; i < 256; ++i) CHECK(pts[i].variant == "full");
    CHECK(pts[16].train.loss.flags == VariantFlags{true, true, true});
    // Innermost axis is lambda, then rho.
    CHECK(pts[16].train.loss.rho == 0.1);
    CHECK(pts[16].train.loss.lambda == 1.0);
    CHECK(pts[17].train.loss.lambda == 2.0);
    CHECK(pts[19].train.loss.rho == 0.2);
  }

  SUBCASE("protocol-sized grid for one three-penalty variant") {
    cfg.variants = {"full"};
    cfg.grid.learning_rate = {1e-3, 1e-2};
    cfg.grid.layer_sizes = {{32}, {64}, {128}, {128, 64}};
    cfg.grid.weight_decay = {0.0, 1e-5, 1e-4, 1e-3};
    cfg.grid.dropout = {0.0, 0.1};
    cfg.grid.rho = {1e-4, 1e-3, 1e-2, 1e-1, 1.0};
    cfg.grid.lambda = {1e-6, 1e-5, 1e-4};
    CHECK(expand_grid(cfg).size() == 2 * 4 * 4 * 2 * 5 * 3);
  }

  SUBCASE("expansion re-validates") {
    cfg.grid.learning_rate.clear();
    CHECK_THROWS_AS(expand_grid(cfg), std::invalid_argument);
  }
}

TEST_CASE("fingerprints are stable, seed-independent, and value-sensitive") {
  ExperimentConfig cfg = tiny_config("/tmp/x");
  const auto pts = expand_grid(cfg);
  REQUIRE(pts.size() == 2);

  const std::string fp = fingerprint(cfg, pts[0], 64);
  CHECK(fp.size() == 16);
  CHECK(fp.find_first_not_of("0123456789abcdef") == std::string::npos);
  CHECK(fingerprint(cfg, pts[0], 64) == fp);

  // Execution details that do not change record content leave it alone.
  ExperimentConfig same = cfg;
  same.seeds = {7, 8, 9};
  same.output_dir = "elsewhere";
  CHECK(fingerprint(same, pts[0], 64) == fp);

  // Anything that changes what a record would contain moves it.
  CHECK(fingerprint(cfg, pts[1], 64) != fp);
  CHECK(fingerprint(cfg, pts[0], 32) != fp);
  ExperimentConfig moved = cfg;
  moved.test_seed = 10;
  CHECK(fingerprint(moved, pts[0], 64) != fp);
  moved = cfg;
  moved.attack_steps = 4;
  CHECK(fingerprint(moved, pts[0], 64) != fp);
  moved = cfg;
  moved.dataset.noise = 1.5;
  CHECK(fingerprint(moved, pts[0], 64) != fp);
  GridPoint gp = pts[0];
  gp.train.lr = 0.02;
  CHECK(fingerprint(cfg, gp, 64) != fp);
}

TEST_CASE("sweep records round-trip through json") {
  SweepRecord r = fake_record("00aabbccddeeff11", 3, 42, 0.875, 0.5);
  r.variant = "robust_sparse";
  r.rho = 0.01;
  r.lambda = 1e-5;
  r.weight_decay = 1e-4;
  r.dropout = 0.1;
  r.error = "";
  const SweepRecord back = record_from_json(record_to_json(r));
  CHECK(record_to_json(back) == record_to_json(r));
  CHECK(back.fingerprint == r.fingerprint);
  CHECK(back.grid_index == 3);
  CHECK(back.variant == "robust_sparse");
  CHECK(back.seed == 42);
  CHECK(back.val_acc == 0.875);
  CHECK(back.val_adv_rhos == r.val_adv_rhos);
  CHECK(back.test_predictions == r.test_predictions);
  CHECK(back.wall_seconds == r.wall_seconds);
  CHECK(record_filename(r.fingerprint, r.seed) == "00aabbccddeeff11_s42.json");

  SweepRecord f = fake_record("00aabbccddeeff11", 0, 1, 0.0, 0.0);
  f.failed = true;
  f.error = "fit: non-finite loss at iteration 12";
  const SweepRecord fb = record_from_json(record_to_json(f));
  CHECK(fb.failed);
  CHECK(fb.error == f.error);
}

TEST_CASE("run_sweep executes every cell once and resumes for free") {
  const std::string out = tmp_dir("sweep_a");
  ExperimentConfig cfg = tiny_config(out);

  CHECK(run_sweep<double>(cfg, 2) == 4);  // 2 grid points x 2 seeds
  const fs::path records = fs::path(out) / "records";
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(records)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  REQUIRE(files.size() == 4);

  int sparse_seen = 0;
  for (const auto& f : files) {
    const SweepRecord rec = record_from_json(read_file(f));
    CHECK(f.filename().string() == record_filename(rec.fingerprint, rec.seed));
    CHECK_FALSE(rec.failed);
    CHECK(rec.precision_bits == 64);
    REQUIRE(rec.val_adv_rhos == std::vector<double>{0.05});
    REQUIRE(rec.val_adv_accs.size() == 1);
    REQUIRE(rec.test_adv_accs.size() == 1);
    // 60 examples; the fixed-test stage keeps 20% aside.
    CHECK(rec.test_predictions.size() == 12);
    CHECK(rec.test_natural >= 0.0);
    CHECK(rec.test_natural <= 1.0);
    CHECK(rec.test_adv_accs[0] <= rec.test_natural);
    CHECK(rec.wall_seconds > 0.0);
    sparse_seen += rec.variant == "sparse";
  }
  CHECK(sparse_seen == 2);

  // Everything on disk already: nothing left to run.
  CHECK(run_sweep<double>(cfg, 2) == 0);

  SUBCASE("record contents do not depend on the job count") {
    const std::string out1 = tmp_dir("sweep_b");
    ExperimentConfig serial = cfg;
    serial.output_dir = out1;
    CHECK(run_sweep<double>(serial, 1) == 4);
    for (const auto& f : files) {
      SweepRecord a = record_from_json(read_file(f));
      SweepRecord b = record_from_json(read_file(fs::path(out1) / "records" / f.filename()));
      a.wall_seconds = 0.0;
      b.wall_seconds = 0.0;
      CHECK(record_to_json(a) == record_to_json(b));
    }
  }

  SUBCASE("a diverging cell is recorded as failed, not fatal") {
    const std::string out2 = tmp_dir("sweep_c");
    ExperimentConfig bad = cfg;
    bad.output_dir = out2;
    bad.variants = {"nominal"};
    bad.seeds = {1};
    bad.grid.learning_rate = {1e154};
    CHECK(run_sweep<double>(bad, 1) == 1);
    std::vector<fs::path> bad_files;
    for (const auto& e : fs::directory_iterator(fs::path(out2) / "records")) {
      bad_files.push_back(e.path());
    }
    REQUIRE(bad_files.size() == 1);
    const SweepRecord rec = record_from_json(read_file(bad_files[0]));
    CHECK(rec.failed);
    CHECK(rec.error.find("iteration") != std::string::npos);
    // Failed cells are recorded and not retried.
    CHECK(run_sweep<double>(bad, 1) == 0);
  }
}

TEST_CASE("reduce picks the best grid point per variant and reports are stable") {
  const std::string out = tmp_dir("sweep_reduce");
  ExperimentConfig cfg = tiny_config(out);
  REQUIRE(run_sweep<double>(cfg, 2) == 4);
  const std::string records = (fs::path(out) / "records").string();

  const ReportMode natural{ReportCriterion::best_by_natural, 0.0};
  const auto best = reduce_records(records, natural);
  REQUIRE(best.size() == 2);
  CHECK(best[0].variant == "nominal");  // canonical order
  CHECK(best[1].variant == "sparse");
  for (const auto& vb : best) {
    CHECK(vb.n_seeds == 2);
    CHECK(vb.adv_rhos == std::vector<double>{0.05});
    CHECK_FALSE(std::isnan(vb.stability));
    CHECK(vb.stability >= 0.0);
    CHECK(vb.stability <= 0.5);  // two classes
    CHECK(vb.sparsity >= 0.0);
  }
  CHECK(best[1].lambda == 0.001);

  // The mean over seeds matches a by-hand reduction of the raw records.
  {
    double acc = 0.0, sel = 0.0;
    int n = 0;
    for (const auto& e : fs::directory_iterator(records)) {
      const SweepRecord rec = record_from_json(read_file(e.path()));
      if (rec.variant != "nominal") continue;
      acc += rec.test_natural;
      sel += rec.val_acc;
      ++n;
    }
    REQUIRE(n == 2);
    CHECK(best[0].natural_acc == doctest::Approx(acc / 2).epsilon(1e-15));
    CHECK(best[0].selection == doctest::Approx(sel / 2).epsilon(1e-15));
  }

  SUBCASE("adversarial criterion needs an evaluated radius") {
    const auto adv = reduce_records(records, {ReportCriterion::best_by_adv, 0.05});
    REQUIRE(adv.size() == 2);
    CHECK(adv[0].variant == "nominal");
    CHECK_THROWS_WITH_AS(reduce_records(records, {ReportCriterion::best_by_adv, 0.123}),
                         doctest::Contains("available"), std::runtime_error);
  }

  SUBCASE("report files are byte-identical across reruns") {
    const std::string ra = tmp_dir("report_a");
    const std::string rb = tmp_dir("report_b");
    write_reports(best, natural, ra);
    write_reports(best, natural, rb);
    const std::string csv = read_file(fs::path(ra) / "report.csv");
    const std::string txt = read_file(fs::path(ra) / "report.txt");
    CHECK(csv == read_file(fs::path(rb) / "report.csv"));
    CHECK(txt == read_file(fs::path(rb) / "report.txt"));
    CHECK(csv.rfind("variant,", 0) == 0);
    CHECK(csv.find("adv@0.05") != std::string::npos);
    CHECK(csv.find("\nnominal,") != std::string::npos);
    CHECK(csv.find("\nsparse,") != std::string::npos);
    CHECK(txt.find("selection: best_by_natural") != std::string::npos);
    CHECK(txt.find("Adv. Accuracy (rho=0.05)") != std::string::npos);
    CHECK(txt.find("wins per variant:") != std::string::npos);
    CHECK(txt.find("improvement captured vs nominal") != std::string::npos);
  }

  SUBCASE("empty records directory is an error") {
    CHECK_THROWS_AS(reduce_records(tmp_dir("empty_records"), natural), std::runtime_error);
  }
}

TEST_CASE("reduce honors the criterion, breaks ties low, and skips failures") {
  const fs::path dir = tmp_dir("synth_records");

  // Grid point A (index 0) loses to B (index 1) on mean validation accuracy.
  drop_record(dir, fake_record("aaaaaaaaaaaaaaaa", 0, 1, 0.50, 0.30));
  drop_record(dir, fake_record("aaaaaaaaaaaaaaaa", 0, 2, 0.70, 0.40));
  drop_record(dir, fake_record("bbbbbbbbbbbbbbbb", 1, 1, 0.90, 0.10));
  drop_record(dir, fake_record("bbbbbbbbbbbbbbbb", 1, 2, 0.50, 0.20));
  // A failed record and a whole failed grid point are both skipped.
  {
    SweepRecord f = fake_record("cccccccccccccccc", 2, 1, 0.99, 0.99);
    f.failed = true;
    f.error = "boom";
    drop_record(dir, f);
  }

  const auto by_nat = reduce_records(dir.string(), {ReportCriterion::best_by_natural, 0.0});
  REQUIRE(by_nat.size() == 1);
  CHECK(by_nat[0].variant == "nominal");
  CHECK(by_nat[0].fingerprint == "bbbbbbbbbbbbbbbb");  // mean 0.70 beats 0.60
  CHECK(by_nat[0].selection == doctest::Approx(0.70));
  CHECK(by_nat[0].n_seeds == 2);

  // Same records under the adversarial criterion choose the other point.
  const auto by_adv = reduce_records(dir.string(), {ReportCriterion::best_by_adv, 0.1});
  REQUIRE(by_adv.size() == 1);
  CHECK(by_adv[0].fingerprint == "aaaaaaaaaaaaaaaa");  // mean 0.35 beats 0.15

  SUBCASE("exact ties go to the lower grid index") {
    drop_record(dir, fake_record("bbbbbbbbbbbbbbbb", 1, 1, 0.50, 0.30));
    drop_record(dir, fake_record("bbbbbbbbbbbbbbbb", 1, 2, 0.70, 0.40));
    const auto tied = reduce_records(dir.string(), {ReportCriterion::best_by_natural, 0.0});
    REQUIRE(tied.size() == 1);
    CHECK(tied[0].fingerprint == "aaaaaaaaaaaaaaaa");
  }

  SUBCASE("single-seed groups have no stability score but still report") {
    const fs::path solo = tmp_dir("solo_records");
    drop_record(solo, fake_record("dddddddddddddddd", 0, 1, 0.8, 0.4));
    const auto one = reduce_records(solo.string(), {ReportCriterion::best_by_natural, 0.0});
    REQUIRE(one.size() == 1);
    CHECK(one[0].n_seeds == 1);
    CHECK(std::isnan(one[0].stability));
    const std::string rdir = tmp_dir("solo_report");
    write_reports(one, {ReportCriterion::best_by_natural, 0.0}, rdir);
    const std::string csv = read_file(fs::path(rdir) / "report.csv");
    CHECK(csv.find("nominal,") != std::string::npos);
  }
}
