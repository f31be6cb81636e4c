#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "trinet/experiment.hpp"
#include "trinet/metrics.hpp"

using namespace trinet;
namespace fs = std::filesystem;

namespace {

// The sweep owns grids; train/stability/attack-eval want exactly one point.
GridPoint single_point(const ExperimentConfig& cfg) {
  const auto pts = expand_grid(cfg);
  if (pts.size() != 1) {
    throw std::runtime_error("this subcommand needs a config whose grid resolves to exactly "
                             "one point; got " +
                             std::to_string(pts.size()));
  }
  return pts[0];
}

template <typename T>
Dataset<T> prepared_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  Dataset<T> ds = load_dataset<T>(cfg.dataset);
  ds.split = make_split_fixed_test(ds.y, ds.n_classes, cfg.test_seed, seed);
  if (cfg.dataset.normalize && cfg.dataset.kind != "mnist") normalize(ds);
  return ds;
}

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& history) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "iteration,train_loss,val_acc,expected_l0,theta\n";
  char buf[160];
  for (const auto& row : history) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(row.iteration), row.train_loss, row.val_acc,
                  row.expected_l0, row.theta);
    out << buf;
  }
}

template <typename T>
int cmd_train(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_path) {
  const GridPoint gp = single_point(cfg);
  Dataset<T> ds = prepared_dataset<T>(cfg, seed);
  TrainConfig tc = gp.train;
  tc.seed = seed;
  const FitResult<T> fr = fit(ds, tc);

  const auto& gcfg = tc.loss.gates;
  const Tensor<T> Xt = detail::gather_rows(ds.X, ds.split.test);
  const std::vector<int> yt = detail::gather_labels(ds.y, ds.split.test);
  const double test_acc = natural_accuracy(fr.best.params, Xt, yt, gcfg);

  std::printf("variant: %s  seed: %llu\n", gp.variant.c_str(),
              static_cast<unsigned long long>(seed));
  std::printf("best iteration: %lld  val accuracy: %.6f\n",
              static_cast<long long>(fr.best.iteration), fr.best.val_acc);
  std::printf("test natural accuracy: %.6f\n", test_acc);
  std::printf("sparsity: %.6f\n", sparsity_fraction(fr.best.params, gcfg));
  if (!cfg.attack_rhos.empty()) {
    const auto accs = adversarial_accuracy_curve(
        fr.best.params, Xt, yt, cfg.attack_rhos, cfg.attack_steps, cfg.attack_restarts,
        derive_stream(seed, "test-attack", 0), cfg.dataset.kind == "mnist", gcfg);
    for (std::size_t i = 0; i < accs.size(); ++i) {
      std::printf("test adv accuracy rho=%g: %.6f\n", cfg.attack_rhos[i], accs[i]);
    }
  }
  if (!out_path.empty()) {
    save_checkpoint(out_path, fr.best.params);
    write_history_csv(out_path + ".history.csv", fr.history);
    std::printf("checkpoint: %s\nhistory: %s.history.csv\n", out_path.c_str(),
                out_path.c_str());
  }
  return 0;
}

template <typename T>
int cmd_sweep(const ExperimentConfig& cfg, int jobs) {
  const int ran = run_sweep<T>(cfg, jobs);
  std::printf("executed %d cell(s); records under %s/records\n", ran, cfg.output_dir.c_str());
  const ReportMode mode{ReportCriterion::best_by_natural, 0.0};
  const auto best = reduce_records((fs::path(cfg.output_dir) / "records").string(), mode);
  write_reports(best, mode, cfg.output_dir);
  std::printf("reports: %s/report.csv %s/report.txt\n", cfg.output_dir.c_str(),
              cfg.output_dir.c_str());
  return 0;
}

template <typename T>
int cmd_attack_eval(const ExperimentConfig& cfg, const std::string& ckpt_path,
                    std::uint64_t seed) {
  const MlpParams<T> p = load_checkpoint<T>(ckpt_path);
  Dataset<T> ds = prepared_dataset<T>(cfg, seed);
  if (ds.X.cols() != p.layer_sizes.front()) {
    throw std::runtime_error("checkpoint expects " + std::to_string(p.layer_sizes.front()) +
                             " features but the dataset has " + std::to_string(ds.X.cols()));
  }
  const GateConfig gcfg = cfg.gates;
  const Tensor<T> Xt = detail::gather_rows(ds.X, ds.split.test);
  const std::vector<int> yt = detail::gather_labels(ds.y, ds.split.test);
  std::printf("test natural accuracy: %.6f\n", natural_accuracy(p, Xt, yt, gcfg));
  if (cfg.attack_rhos.empty()) {
    std::printf("no attack radii configured\n");
    return 0;
  }
  const auto accs = adversarial_accuracy_curve(
      p, Xt, yt, cfg.attack_rhos, cfg.attack_steps, cfg.attack_restarts,
      derive_stream(seed, "test-attack", 0), cfg.dataset.kind == "mnist", gcfg);
  for (std::size_t i = 0; i < accs.size(); ++i) {
    std::printf("test adv accuracy rho=%g: %.6f\n", cfg.attack_rhos[i], accs[i]);
  }
  return 0;
}

int cmd_report(const std::string& records_dir, const std::string& mode_name, double rho,
               const std::string& out_dir) {
  ReportMode mode;
  if (mode_name == "best_by_natural") {
    mode.criterion = ReportCriterion::best_by_natural;
  } else if (mode_name == "best_by_adv") {
    mode.criterion = ReportCriterion::best_by_adv;
    mode.rho = rho;
  } else {
    throw std::runtime_error("unknown report mode '" + mode_name + "'");
  }
  const auto best = reduce_records(records_dir, mode);
  write_reports(best, mode, out_dir);
  std::printf("reports: %s/report.csv %s/report.txt\n", out_dir.c_str(), out_dir.c_str());
  return 0;
}

// Per-seed retrain of one grid point; the shared test block makes the
// cross-seed prediction-churn score well defined.
template <typename T>
int cmd_stability(const ExperimentConfig& cfg) {
  const GridPoint gp = single_point(cfg);
  std::vector<std::vector<int>> preds;
  double acc_sum = 0.0, sp_sum = 0.0;
  int n_classes = 0;
  for (std::uint64_t seed : cfg.seeds) {
    Dataset<T> ds = prepared_dataset<T>(cfg, seed);
    n_classes = ds.n_classes;
    TrainConfig tc = gp.train;
    tc.seed = seed;
    const FitResult<T> fr = fit(ds, tc);
    const Tensor<T> Xt = detail::gather_rows(ds.X, ds.split.test);
    const std::vector<int> yt = detail::gather_labels(ds.y, ds.split.test);
    const auto pr = predict_all(fr.best.params, Xt, tc.loss.gates);
    std::int64_t hit = 0;
    for (std::size_t i = 0; i < yt.size(); ++i) hit += pr[i] == yt[i];
    const double acc = static_cast<double>(hit) / static_cast<double>(yt.size());
    std::printf("seed %llu: test natural accuracy %.6f\n",
                static_cast<unsigned long long>(seed), acc);
    acc_sum += acc;
    sp_sum += sparsity_fraction(fr.best.params, tc.loss.gates);
    preds.push_back(pr);
  }
  const double n = static_cast<double>(cfg.seeds.size());
  std::printf("mean test natural accuracy: %.6f\n", acc_sum / n);
  std::printf("mean sparsity: %.6f\n", sp_sum / n);
  if (preds.size() >= 2) {
    std::printf("stability score: %.6f\n", stability_score(preds, n_classes));
  } else {
    std::printf("stability score: needs at least 2 seeds\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feed-forward classifier lab: training, attacks, sweeps, reports"};
  app.require_subcommand(1);

  std::string config_path, out_path, ckpt_path, records_dir;
  std::string precision = "f32";
  std::string mode_name = "best_by_natural";
  std::uint64_t seed = 0;
  bool seed_given = false;
  int jobs = 1;
  double rho = 0.0;

  auto add_precision = [&](CLI::App* cmd) {
    cmd->add_option("--precision", precision, "numeric precision")
        ->check(CLI::IsMember({"f32", "f64"}));
  };

  CLI::App* train = app.add_subcommand("train", "train one configuration");
  train->add_option("--config", config_path, "experiment config (json)")->required();
  train->add_option("--seed", seed, "training seed (default: first config seed)");
  train->add_option("--out", out_path, "checkpoint path (also writes <out>.history.csv)");
  add_precision(train);

  CLI::App* sweep = app.add_subcommand("sweep", "run the hyperparameter grid");
  sweep->add_option("--config", config_path, "experiment config (json)")->required();
  sweep->add_option("--jobs", jobs, "parallel workers")->check(CLI::PositiveNumber);
  add_precision(sweep);

  CLI::App* attack = app.add_subcommand("attack-eval", "attack a saved checkpoint");
  attack->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
  attack->add_option("--config", config_path, "experiment config (json)")->required();
  attack->add_option("--seed", seed, "split seed (default: first config seed)");

  CLI::App* report = app.add_subcommand("report", "reduce sweep records to report files");
  report->add_option("records", records_dir, "records directory")->required();
  report->add_option("--mode", mode_name, "selection criterion")
      ->check(CLI::IsMember({"best_by_natural", "best_by_adv"}));
  report->add_option("--rho", rho, "selection radius for best_by_adv");
  report->add_option("--out", out_path, "report directory (default: records parent)");

  CLI::App* stability = app.add_subcommand("stability", "multi-seed prediction churn");
  stability->add_option("--config", config_path, "experiment config (json)")->required();
  add_precision(stability);

  CLI11_PARSE(app, argc, argv);
  train->get_option("--seed");  // touch to silence unused warnings on some toolchains
  seed_given = train->count("--seed") > 0 || attack->count("--seed") > 0;

  try {
    if (report->parsed()) {
      if (mode_name == "best_by_adv" && report->count("--rho") == 0) {
        throw std::runtime_error("--mode best_by_adv needs --rho");
      }
      std::string out = out_path;
      if (out.empty()) {
        const fs::path parent = fs::path(records_dir).parent_path();
        out = parent.empty() ? "." : parent.string();
      }
      return cmd_report(records_dir, mode_name, rho, out);
    }

    const ExperimentConfig cfg = load_config(config_path);
    if (!seed_given) seed = cfg.seeds.front();

    if (train->parsed()) {
      return precision == "f64" ? cmd_train<double>(cfg, seed, out_path)
                                : cmd_train<float>(cfg, seed, out_path);
    }
    if (sweep->parsed()) {
      return precision == "f64" ? cmd_sweep<double>(cfg, jobs) : cmd_sweep<float>(cfg, jobs);
    }
    if (attack->parsed()) {
      const int width = checkpoint_precision(ckpt_path);
      return width == 8 ? cmd_attack_eval<double>(cfg, ckpt_path, seed)
                        : cmd_attack_eval<float>(cfg, ckpt_path, seed);
    }
    if (stability->parsed()) {
      return precision == "f64" ? cmd_stability<double>(cfg) : cmd_stability<float>(cfg);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
