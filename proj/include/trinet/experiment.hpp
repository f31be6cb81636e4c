#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "trinet/data.hpp"
#include "trinet/train.hpp"

namespace trinet {

// Where the sweep's examples come from. "csv" and "mnist" read files;
// "synthetic" draws two Gaussian blobs so harness tests need no fixtures.
struct DatasetSpec {
  std::string kind = "csv";  // csv | mnist | synthetic
  std::string path;          // csv file, or directory of the four idx files
  std::string label_column;
  std::vector<std::string> categorical_columns;
  bool normalize = true;  // z-score with train stats (ignored for mnist)
  std::int64_t n_per_class = 250;
  std::int64_t dim = 20;
  double noise = 1.0;
  std::uint64_t data_seed = 0;
};

struct GridSpec {
  std::vector<double> learning_rate;
  std::vector<std::vector<std::int64_t>> layer_sizes;
  std::vector<double> weight_decay = {0.0};
  std::vector<double> dropout = {0.0};
  std::vector<double> rho;     // consulted only by robust variants
  std::vector<double> lambda;  // consulted only by sparse variants
};

// One structured config document drives every subcommand. Versioned schema;
// unknown keys are rejected rather than ignored.
struct ExperimentConfig {
  int schema_version = 1;
  DatasetSpec dataset;
  std::vector<std::string> variants;
  GridSpec grid;
  std::int64_t batch = 128;
  std::int64_t max_iterations = 50000;
  std::int64_t validate_every = 1000;
  double a_fraction = 0.7;
  GateConfig gates;
  std::vector<std::uint64_t> seeds;
  std::uint64_t test_seed = 0;
  std::vector<double> attack_rhos;
  int attack_steps = 40;
  int attack_restarts = 1;
  std::int64_t val_attack_sample = 2048;  // deterministic val subsample for selection
  std::string output_dir = "out";

  void validate() const;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

// One resolved hyperparameter combination. `index` is the position in the
// deterministic expansion order and breaks selection ties.
struct GridPoint {
  std::string variant;
  TrainConfig train;  // seed left for the runner to fill
  std::size_t index = 0;
};

// Cartesian product over the declared axes, variant-major, with axes a
// variant ignores collapsed to a single neutral value.
std::vector<GridPoint> expand_grid(const ExperimentConfig& cfg);

// Stable hex digest of the resolved hyperparameters (variant, grid values,
// budget, gate constants, precision). Identical configs fingerprint
// identically across processes; the seed is deliberately excluded.
std::string fingerprint(const ExperimentConfig& cfg, const GridPoint& gp, int precision_bits);

// Everything one (config, seed) execution persists. Failures are recorded
// with the error text instead of aborting the sweep.
struct SweepRecord {
  std::string fingerprint;
  std::size_t grid_index = 0;
  std::string variant;
  int precision_bits = 64;
  double lr = 0.0;
  std::vector<std::int64_t> layers;
  double weight_decay = 0.0;
  double dropout = 0.0;
  double rho = 0.0;
  double lambda = 0.0;
  double a_fraction = 0.7;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  std::int64_t best_iteration = 0;
  double val_acc = 0.0;
  std::vector<double> val_adv_rhos, val_adv_accs;  // on the val subsample
  double test_natural = 0.0;
  std::vector<double> test_adv_rhos, test_adv_accs;
  double test_sparsity = 0.0;
  std::vector<int> test_predictions;  // shared test set, input order
  double wall_seconds = 0.0;
};

std::string record_to_json(const SweepRecord& rec);
SweepRecord record_from_json(const std::string& text);

// Record file name for one (config, seed) cell; lives under <out>/records/.
std::string record_filename(const std::string& fp, std::uint64_t seed);

// Execute every (grid point, seed) cell not already recorded under
// cfg.output_dir/records, `jobs` at a time. Returns the number of cells
// executed (skipped cells excluded). Record contents do not depend on
// `jobs`.
template <typename T>
int run_sweep(const ExperimentConfig& cfg, int jobs);

// Load a dataset per its spec. Split/normalization are applied later,
// per seed.
template <typename T>
Dataset<T> load_dataset(const DatasetSpec& spec);

enum class ReportCriterion { best_by_natural, best_by_adv };

struct ReportMode {
  ReportCriterion criterion = ReportCriterion::best_by_natural;
  double rho = 0.0;  // selection radius for best_by_adv
};

// Aggregated view of one grid point across seeds, after the reduce.
struct VariantBest {
  std::string variant;
  std::string fingerprint;
  std::size_t grid_index = 0;
  double lr = 0.0;
  std::vector<std::int64_t> layers;
  double weight_decay = 0.0;
  double dropout = 0.0;
  double rho = 0.0;
  double lambda = 0.0;
  int n_seeds = 0;
  double selection = 0.0;  // mean criterion value that won
  double natural_acc = 0.0;
  std::vector<double> adv_rhos, adv_accs;
  double stability = 0.0;  // NaN below 2 seeds
  double sparsity = 0.0;
};

// Reduce all records under `records_dir` to the per-variant best by the
// criterion (mean over seeds; ties break to the lower grid index). Variants
// among the canonical eight with no usable records are skipped with a
// warning on stderr.
std::vector<VariantBest> reduce_records(const std::string& records_dir,
                                        const ReportMode& mode);

// Byte-deterministic report files: report.csv (one row per variant) and
// report.txt (metric rows by variant columns, improvement-captured and
// win-count summaries).
void write_reports(const std::vector<VariantBest>& best, const ReportMode& mode,
                   const std::string& out_dir);

}  // namespace trinet
