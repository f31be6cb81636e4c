#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trinet/tensor.hpp"

namespace trinet {

struct SplitIndices {
  std::vector<std::int64_t> train, val, test;
  bool empty() const { return train.empty() && val.empty() && test.empty(); }
};

// Immutable after loading. Normalization statistics are computed on the
// train split only and kept for inference-time reuse.
template <typename T>
struct Dataset {
  Tensor<T> X{{0, 0}, {}};
  std::vector<int> y;
  int n_classes = 0;
  std::vector<std::string> feature_names;
  std::vector<T> mean, sd;  // filled by normalize()
  SplitIndices split;

  std::int64_t n() const { return X.rows(); }
  std::int64_t dim() const { return X.cols(); }
  bool normalized() const { return !mean.empty(); }
};

// Columns are matched against the header by name. Cells that are empty or
// "?" after trimming count as missing; the whole row is dropped.
struct CsvSchema {
  std::string label_column;
  std::vector<std::string> categorical_columns;
  char delimiter = ',';
};

// Header-based delimiter-separated loader. Numeric columns become features
// in file order; each categorical column appends one-hot features (levels in
// first-appearance order, named "column=level"); labels map to contiguous
// integers in first-appearance order. `dropped` reports rows removed for
// missing values.
template <typename T>
Dataset<T> load_csv(const std::string& path, const CsvSchema& schema,
                    std::int64_t* dropped = nullptr);

// Big-endian IDX pair: image magic 0x803 with dims (n, r, c), label magic
// 0x801 with n entries. Pixels scale to [0,1]; images flatten row-major.
template <typename T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path);

// Row-wise concatenation of two compatible datasets (same feature count).
template <typename T>
Dataset<T> concat_datasets(const Dataset<T>& a, const Dataset<T>& b);

// The four standard MNIST files under `dir`, train and test pooled into one
// 70000-row dataset; splitting is the caller's choice.
template <typename T>
Dataset<T> load_mnist(const std::string& dir);

// Seeded 60/20/20 split, stratified per class with carry-corrected rounding
// so total sizes stay within one example of the targets. Any class with
// fewer than 3 examples triggers an unstratified fallback with a warning on
// stderr; `stratified` reports which path ran. Requires n >= 5.
SplitIndices make_split(const std::vector<int>& y, int n_classes, std::uint64_t seed,
                        bool* stratified = nullptr);

// Same contract, but the 20% test block depends only on `test_seed`;
// `run_seed` re-deals the remaining 80% into train/val (75/25). Repeated
// runs that share test_seed therefore score against one fixed test set.
SplitIndices make_split_fixed_test(const std::vector<int>& y, int n_classes,
                                   std::uint64_t test_seed, std::uint64_t run_seed,
                                   bool* stratified = nullptr);

template <typename T>
void assign_split(Dataset<T>& ds, std::uint64_t seed);

// Z-score every feature with mean/sd measured on the train rows only;
// sd == 0 features map to 0 everywhere. Requires an assigned split and a
// not-yet-normalized dataset.
template <typename T>
void normalize(Dataset<T>& ds);

// Versioned binary cache (see README for the layout). Round-trips X, y,
// names, stats, and splits bit-identically.
template <typename T>
void save_cache(const std::string& path, const Dataset<T>& ds);
template <typename T>
Dataset<T> load_cache(const std::string& path);

}  // namespace trinet
