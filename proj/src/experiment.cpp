#include "trinet/experiment.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "trinet/metrics.hpp"

namespace trinet {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void check_keys(const json& j, const std::string& where,
                const std::set<std::string>& allowed) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key)) {
      throw std::runtime_error("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <typename V>
void read_into(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

template <typename V>
void reject_duplicates(const std::vector<V>& xs, const char* axis) {
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t k = i + 1; k < xs.size(); ++k) {
      if (xs[i] == xs[k]) {
        throw std::invalid_argument(std::string("config: duplicate value in ") + axis);
      }
    }
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (schema_version != 1) {
    throw std::invalid_argument("config: unsupported schema_version " +
                                std::to_string(schema_version));
  }
  if (dataset.kind != "csv" && dataset.kind != "mnist" && dataset.kind != "synthetic") {
    throw std::invalid_argument("config: dataset.kind must be csv, mnist, or synthetic");
  }
  if (dataset.kind == "csv" && (dataset.path.empty() || dataset.label_column.empty())) {
    throw std::invalid_argument("config: csv dataset needs path and label_column");
  }
  if (dataset.kind == "mnist" && dataset.path.empty()) {
    throw std::invalid_argument("config: mnist dataset needs path");
  }
  if (dataset.kind == "synthetic" &&
      (dataset.n_per_class < 3 || dataset.dim < 1 || !(dataset.noise >= 0.0))) {
    throw std::invalid_argument("config: bad synthetic dataset parameters");
  }
  if (variants.empty()) throw std::invalid_argument("config: variants must be non-empty");
  bool any_robust = false, any_sparse = false;
  std::set<std::string> seen;
  for (const auto& v : variants) {
    VariantFlags f = parse_variant(v);  // throws on unknown
    if (!seen.insert(variant_name(f)).second) {
      throw std::invalid_argument("config: duplicate variant '" + v + "'");
    }
    any_robust = any_robust || f.robust;
    any_sparse = any_sparse || f.sparse;
  }
  if (grid.learning_rate.empty()) {
    throw std::invalid_argument("config: grid.learning_rate is empty");
  }
  if (grid.layer_sizes.empty()) throw std::invalid_argument("config: grid.layer_sizes is empty");
  for (const auto& ls : grid.layer_sizes) {
    if (ls.empty()) throw std::invalid_argument("config: empty entry in grid.layer_sizes");
    for (auto h : ls) {
      if (h <= 0) throw std::invalid_argument("config: layer sizes must be positive");
    }
  }
  if (grid.weight_decay.empty()) throw std::invalid_argument("config: grid.weight_decay is empty");
  if (grid.dropout.empty()) throw std::invalid_argument("config: grid.dropout is empty");
  if (any_robust && grid.rho.empty()) {
    throw std::invalid_argument("config: a robust variant needs a non-empty grid.rho");
  }
  if (any_sparse && grid.lambda.empty()) {
    throw std::invalid_argument("config: a sparse variant needs a non-empty grid.lambda");
  }
  reject_duplicates(grid.learning_rate, "grid.learning_rate");
  reject_duplicates(grid.layer_sizes, "grid.layer_sizes");
  reject_duplicates(grid.weight_decay, "grid.weight_decay");
  reject_duplicates(grid.dropout, "grid.dropout");
  reject_duplicates(grid.rho, "grid.rho");
  reject_duplicates(grid.lambda, "grid.lambda");
  for (double r : grid.rho) {
    if (!(r >= 0.0)) throw std::invalid_argument("config: grid.rho values must be >= 0");
  }
  for (double l : grid.lambda) {
    if (!(l >= 0.0)) throw std::invalid_argument("config: grid.lambda values must be >= 0");
  }
  for (double lr : grid.learning_rate) {
    if (!(lr > 0.0)) throw std::invalid_argument("config: learning rates must be > 0");
  }
  for (double wd : grid.weight_decay) {
    if (!(wd >= 0.0)) throw std::invalid_argument("config: weight decay must be >= 0");
  }
  for (double dr : grid.dropout) {
    if (!(dr >= 0.0 && dr < 1.0)) {
      throw std::invalid_argument("config: dropout must be in [0,1)");
    }
  }
  if (batch < 1 || max_iterations < 0 || validate_every < 1) {
    throw std::invalid_argument("config: bad training budget");
  }
  if (!(a_fraction > 0.0 && a_fraction <= 1.0)) {
    throw std::invalid_argument("config: a_fraction must be in (0,1]");
  }
  gates.validate();
  if (seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
  reject_duplicates(seeds, "seeds");
  for (double r : attack_rhos) {
    if (!(r >= 0.0)) throw std::invalid_argument("config: attack rhos must be >= 0");
  }
  reject_duplicates(attack_rhos, "attack.rhos");
  if (attack_steps < 1 || attack_restarts < 1 || val_attack_sample < 1) {
    throw std::invalid_argument("config: bad attack parameters");
  }
  if (output_dir.empty()) throw std::invalid_argument("config: output_dir is empty");
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("config: top level must be an object");
  check_keys(j, "top level",
             {"schema_version", "dataset", "variants", "grid", "train", "gates", "seeds",
              "test_seed", "attack", "output_dir"});
  ExperimentConfig cfg;
  read_into(j, "schema_version", cfg.schema_version);
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d, "dataset",
               {"kind", "path", "label_column", "categorical_columns", "normalize",
                "n_per_class", "dim", "noise", "data_seed"});
    read_into(d, "kind", cfg.dataset.kind);
    read_into(d, "path", cfg.dataset.path);
    read_into(d, "label_column", cfg.dataset.label_column);
    read_into(d, "categorical_columns", cfg.dataset.categorical_columns);
    read_into(d, "normalize", cfg.dataset.normalize);
    read_into(d, "n_per_class", cfg.dataset.n_per_class);
    read_into(d, "dim", cfg.dataset.dim);
    read_into(d, "noise", cfg.dataset.noise);
    read_into(d, "data_seed", cfg.dataset.data_seed);
  }
  read_into(j, "variants", cfg.variants);
  if (j.contains("grid")) {
    const json& g = j.at("grid");
    check_keys(g, "grid",
               {"learning_rate", "layer_sizes", "weight_decay", "dropout", "rho", "lambda"});
    read_into(g, "learning_rate", cfg.grid.learning_rate);
    read_into(g, "layer_sizes", cfg.grid.layer_sizes);
    read_into(g, "weight_decay", cfg.grid.weight_decay);
    read_into(g, "dropout", cfg.grid.dropout);
    read_into(g, "rho", cfg.grid.rho);
    read_into(g, "lambda", cfg.grid.lambda);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train", {"batch", "max_iterations", "validate_every", "a_fraction"});
    read_into(t, "batch", cfg.batch);
    read_into(t, "max_iterations", cfg.max_iterations);
    read_into(t, "validate_every", cfg.validate_every);
    read_into(t, "a_fraction", cfg.a_fraction);
  }
  if (j.contains("gates")) {
    const json& g = j.at("gates");
    check_keys(g, "gates", {"beta", "gamma", "zeta"});
    read_into(g, "beta", cfg.gates.beta);
    read_into(g, "gamma", cfg.gates.gamma);
    read_into(g, "zeta", cfg.gates.zeta);
  }
  read_into(j, "seeds", cfg.seeds);
  read_into(j, "test_seed", cfg.test_seed);
  if (j.contains("attack")) {
    const json& a = j.at("attack");
    check_keys(a, "attack", {"rhos", "steps", "restarts", "val_sample"});
    read_into(a, "rhos", cfg.attack_rhos);
    read_into(a, "steps", cfg.attack_steps);
    read_into(a, "restarts", cfg.attack_restarts);
    read_into(a, "val_sample", cfg.val_attack_sample);
  }
  read_into(j, "output_dir", cfg.output_dir);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::vector<GridPoint> expand_grid(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<GridPoint> out;
  const std::vector<double> zero = {0.0};
  for (const auto& vname : cfg.variants) {
    const VariantFlags flags = parse_variant(vname);
    const auto& rho_axis = flags.robust ? cfg.grid.rho : zero;
    const auto& lam_axis = flags.sparse ? cfg.grid.lambda : zero;
    for (double lr : cfg.grid.learning_rate) {
      for (const auto& layers : cfg.grid.layer_sizes) {
        for (double wd : cfg.grid.weight_decay) {
          for (double dr : cfg.grid.dropout) {
            for (double rho : rho_axis) {
              for (double lam : lam_axis) {
                GridPoint gp;
                gp.variant = variant_name(flags);
                gp.index = out.size();
                gp.train.hidden = layers;
                gp.train.lr = lr;
                gp.train.batch = cfg.batch;
                gp.train.max_iterations = cfg.max_iterations;
                gp.train.validate_every = cfg.validate_every;
                gp.train.dropout = dr;
                gp.train.loss.flags = flags;
                gp.train.loss.rho = rho;
                gp.train.loss.lambda = lam;
                gp.train.loss.a_fraction = cfg.a_fraction;
                gp.train.loss.weight_decay = wd;
                gp.train.loss.gates = cfg.gates;
                out.push_back(std::move(gp));
              }
            }
          }
        }
      }
    }
  }
  return out;
}

std::string fingerprint(const ExperimentConfig& cfg, const GridPoint& gp, int precision_bits) {
  std::string s = "v=" + gp.variant;
  s += ";lr=" + g17(gp.train.lr) + ";layers=";
  for (std::size_t i = 0; i < gp.train.hidden.size(); ++i) {
    if (i) s += "-";
    s += std::to_string(gp.train.hidden[i]);
  }
  s += ";wd=" + g17(gp.train.loss.weight_decay) + ";do=" + g17(gp.train.dropout);
  s += ";rho=" + g17(gp.train.loss.rho) + ";lam=" + g17(gp.train.loss.lambda);
  s += ";a=" + g17(gp.train.loss.a_fraction);
  s += ";batch=" + std::to_string(gp.train.batch);
  s += ";iters=" + std::to_string(gp.train.max_iterations);
  s += ";valevery=" + std::to_string(gp.train.validate_every);
  s += ";gates=" + g17(cfg.gates.beta) + "," + g17(cfg.gates.gamma) + "," + g17(cfg.gates.zeta);
  s += ";testseed=" + std::to_string(cfg.test_seed);
  s += ";attack=" + std::to_string(cfg.attack_steps) + "," +
       std::to_string(cfg.attack_restarts) + "," + std::to_string(cfg.val_attack_sample);
  s += ";rhos=";
  for (std::size_t i = 0; i < cfg.attack_rhos.size(); ++i) {
    if (i) s += ",";
    s += g17(cfg.attack_rhos[i]);
  }
  s += ";data=" + cfg.dataset.kind + "," + cfg.dataset.path + "," + cfg.dataset.label_column;
  for (const auto& c : cfg.dataset.categorical_columns) s += "," + c;
  s += ",norm=" + std::to_string(cfg.dataset.normalize ? 1 : 0);
  if (cfg.dataset.kind == "synthetic") {
    s += ",n=" + std::to_string(cfg.dataset.n_per_class) + ",d=" +
         std::to_string(cfg.dataset.dim) + ",noise=" + g17(cfg.dataset.noise) + ",ds=" +
         std::to_string(cfg.dataset.data_seed);
  }
  s += ";prec=" + std::to_string(precision_bits);
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(s)));
  return buf;
}

std::string record_filename(const std::string& fp, std::uint64_t seed) {
  return fp + "_s" + std::to_string(seed) + ".json";
}

std::string record_to_json(const SweepRecord& rec) {
  json j;
  j["fingerprint"] = rec.fingerprint;
  j["grid_index"] = rec.grid_index;
  j["variant"] = rec.variant;
  j["precision"] = rec.precision_bits;
  j["hyper"] = {{"lr", rec.lr},
                {"layers", rec.layers},
                {"weight_decay", rec.weight_decay},
                {"dropout", rec.dropout},
                {"rho", rec.rho},
                {"lambda", rec.lambda},
                {"a_fraction", rec.a_fraction}};
  j["seed"] = rec.seed;
  j["failed"] = rec.failed;
  j["error"] = rec.error;
  j["best_iteration"] = rec.best_iteration;
  j["val_acc"] = rec.val_acc;
  j["val_adv_rhos"] = rec.val_adv_rhos;
  j["val_adv_accs"] = rec.val_adv_accs;
  j["test_natural"] = rec.test_natural;
  j["test_adv_rhos"] = rec.test_adv_rhos;
  j["test_adv_accs"] = rec.test_adv_accs;
  j["test_sparsity"] = rec.test_sparsity;
  j["test_predictions"] = rec.test_predictions;
  j["wall_seconds"] = rec.wall_seconds;
  return j.dump();
}

SweepRecord record_from_json(const std::string& text) {
  json j = json::parse(text);
  SweepRecord rec;
  rec.fingerprint = j.at("fingerprint").get<std::string>();
  rec.grid_index = j.at("grid_index").get<std::size_t>();
  rec.variant = j.at("variant").get<std::string>();
  rec.precision_bits = j.at("precision").get<int>();
  const json& h = j.at("hyper");
  rec.lr = h.at("lr").get<double>();
  rec.layers = h.at("layers").get<std::vector<std::int64_t>>();
  rec.weight_decay = h.at("weight_decay").get<double>();
  rec.dropout = h.at("dropout").get<double>();
  rec.rho = h.at("rho").get<double>();
  rec.lambda = h.at("lambda").get<double>();
  rec.a_fraction = h.at("a_fraction").get<double>();
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.failed = j.at("failed").get<bool>();
  rec.error = j.at("error").get<std::string>();
  rec.best_iteration = j.at("best_iteration").get<std::int64_t>();
  rec.val_acc = j.at("val_acc").get<double>();
  rec.val_adv_rhos = j.at("val_adv_rhos").get<std::vector<double>>();
  rec.val_adv_accs = j.at("val_adv_accs").get<std::vector<double>>();
  rec.test_natural = j.at("test_natural").get<double>();
  rec.test_adv_rhos = j.at("test_adv_rhos").get<std::vector<double>>();
  rec.test_adv_accs = j.at("test_adv_accs").get<std::vector<double>>();
  rec.test_sparsity = j.at("test_sparsity").get<double>();
  rec.test_predictions = j.at("test_predictions").get<std::vector<int>>();
  rec.wall_seconds = j.at("wall_seconds").get<double>();
  return rec;
}

template <typename T>
Dataset<T> load_dataset(const DatasetSpec& spec) {
  if (spec.kind == "csv") {
    CsvSchema schema;
    schema.label_column = spec.label_column;
    schema.categorical_columns = spec.categorical_columns;
    std::int64_t dropped = 0;
    Dataset<T> ds = load_csv<T>(spec.path, schema, &dropped);
    if (dropped > 0) {
      std::fprintf(stderr, "note: dropped %lld rows with missing values from %s\n",
                   static_cast<long long>(dropped), spec.path.c_str());
    }
    return ds;
  }
  if (spec.kind == "mnist") return load_mnist<T>(spec.path);
  if (spec.kind == "synthetic") {
    Dataset<T> ds;
    const std::int64_t n = 2 * spec.n_per_class;
    ds.X = Tensor<T>::zeros(n, spec.dim);
    ds.y.resize(static_cast<std::size_t>(n));
    ds.n_classes = 2;
    Rng rng(spec.data_seed, "synthetic");
    for (std::int64_t i = 0; i < n; ++i) {
      const int c = i < spec.n_per_class ? 0 : 1;
      ds.y[static_cast<std::size_t>(i)] = c;
      for (std::int64_t j = 0; j < spec.dim; ++j) {
        ds.X.at(i, j) = static_cast<T>((c ? 1.0 : -1.0) + spec.noise * rng.normal(0.0, 1.0));
      }
    }
    for (std::int64_t j = 0; j < spec.dim; ++j) {
      ds.feature_names.push_back("f" + std::to_string(j));
    }
    return ds;
  }
  throw std::invalid_argument("load_dataset: unknown kind '" + spec.kind + "'");
}

namespace {

template <typename T>
SweepRecord run_one(const ExperimentConfig& cfg, const Dataset<T>& base, const GridPoint& gp,
                    std::uint64_t seed, int precision_bits) {
  SweepRecord rec;
  rec.fingerprint = fingerprint(cfg, gp, precision_bits);
  rec.grid_index = gp.index;
  rec.variant = gp.variant;
  rec.precision_bits = precision_bits;
  rec.lr = gp.train.lr;
  rec.layers = gp.train.hidden;
  rec.weight_decay = gp.train.loss.weight_decay;
  rec.dropout = gp.train.dropout;
  rec.rho = gp.train.loss.rho;
  rec.lambda = gp.train.loss.lambda;
  rec.a_fraction = gp.train.loss.a_fraction;
  rec.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    Dataset<T> work = base;
    work.split = make_split_fixed_test(work.y, work.n_classes, cfg.test_seed, seed);
    if (cfg.dataset.normalize && cfg.dataset.kind != "mnist") normalize(work);
    TrainConfig tc = gp.train;
    tc.seed = seed;
    FitResult<T> fr = fit(work, tc);
    rec.best_iteration = fr.best.iteration;
    rec.val_acc = fr.best.val_acc;

    const bool clip = cfg.dataset.kind == "mnist";
    const auto& gcfg = tc.loss.gates;
    if (!cfg.attack_rhos.empty()) {
      const auto n_sub = std::min<std::int64_t>(
          cfg.val_attack_sample, static_cast<std::int64_t>(work.split.val.size()));
      const std::vector<std::int64_t> sub(work.split.val.begin(),
                                          work.split.val.begin() + n_sub);
      rec.val_adv_rhos = cfg.attack_rhos;
      rec.val_adv_accs = adversarial_accuracy_curve(
          fr.best.params, detail::gather_rows(work.X, sub), detail::gather_labels(work.y, sub),
          cfg.attack_rhos, cfg.attack_steps, cfg.attack_restarts,
          derive_stream(seed, "val-attack", 0), clip, gcfg);
    }
    const Tensor<T> Xt = detail::gather_rows(work.X, work.split.test);
    const std::vector<int> yt = detail::gather_labels(work.y, work.split.test);
    rec.test_predictions = predict_all(fr.best.params, Xt, gcfg);
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < yt.size(); ++i) hits += rec.test_predictions[i] == yt[i];
    rec.test_natural = static_cast<double>(hits) / static_cast<double>(yt.size());
    if (!cfg.attack_rhos.empty()) {
      rec.test_adv_rhos = cfg.attack_rhos;
      rec.test_adv_accs = adversarial_accuracy_curve(
          fr.best.params, Xt, yt, cfg.attack_rhos, cfg.attack_steps, cfg.attack_restarts,
          derive_stream(seed, "test-attack", 0), clip, gcfg);
    }
    rec.test_sparsity = sparsity_fraction(fr.best.params, gcfg);
  } catch (const std::exception& e) {
    rec.failed = true;
    rec.error = e.what();
  }
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

}  // namespace

template <typename T>
int run_sweep(const ExperimentConfig& cfg, int jobs) {
  cfg.validate();
  if (jobs < 1) throw std::invalid_argument("run_sweep: jobs must be >= 1");
  const auto points = expand_grid(cfg);
  const Dataset<T> base = load_dataset<T>(cfg.dataset);
  const int precision_bits = static_cast<int>(sizeof(T) * 8);

  const fs::path records_dir = fs::path(cfg.output_dir) / "records";
  fs::create_directories(records_dir);

  struct Job {
    const GridPoint* gp;
    std::uint64_t seed;
    fs::path path;
  };
  std::vector<Job> todo;
  for (const auto& gp : points) {
    const std::string fp = fingerprint(cfg, gp, precision_bits);
    for (std::uint64_t seed : cfg.seeds) {
      fs::path p = records_dir / record_filename(fp, seed);
      if (!fs::exists(p)) todo.push_back({&gp, seed, std::move(p)});
    }
  }

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= todo.size()) break;
      const Job& job = todo[i];
      SweepRecord rec = run_one(cfg, base, *job.gp, job.seed, precision_bits);
      const fs::path tmp = job.path.string() + ".tmp";
      {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << record_to_json(rec) << "\n";
        if (!out) throw std::runtime_error("run_sweep: cannot write " + tmp.string());
      }
      fs::rename(tmp, job.path);
      const std::size_t k = done.fetch_add(1) + 1;
      std::fprintf(stderr, "[%zu/%zu] %s seed=%llu%s\n", k, todo.size(),
                   job.gp->variant.c_str(), static_cast<unsigned long long>(job.seed),
                   rec.failed ? (" FAILED: " + rec.error).c_str() : "");
    }
  };
  const int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(todo.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  return static_cast<int>(todo.size());
}

template Dataset<float> load_dataset<float>(const DatasetSpec&);
template Dataset<double> load_dataset<double>(const DatasetSpec&);
template int run_sweep<float>(const ExperimentConfig&, int);
template int run_sweep<double>(const ExperimentConfig&, int);

}  // namespace trinet
