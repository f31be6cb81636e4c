#include "trinet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "trinet/rng.hpp"

namespace trinet {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_cells(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = line.find(delim, pos);
    out.push_back(trim(line.substr(pos, next == std::string::npos ? next : next - pos)));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

bool is_missing(const std::string& cell) { return cell.empty() || cell == "?"; }

double parse_numeric(const std::string& cell, std::size_t row, const std::string& col) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = first + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw std::runtime_error("load_csv: non-numeric value '" + cell + "' in column '" +
                             col + "', data row " + std::to_string(row + 1));
  }
  return v;
}

std::vector<unsigned char> read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  std::streamoff size = in.tellg();
  in.seekg(0);
  std::vector<unsigned char> buf(static_cast<std::size_t>(size));
  if (size > 0 && !in.read(reinterpret_cast<char*>(buf.data()), size)) {
    throw std::runtime_error("cannot read '" + path + "'");
  }
  return buf;
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

// Stratified allocation with carry-corrected rounding: per group, the exact
// share of each part accumulates the deficit left by earlier groups, so the
// grand totals stay within one example of the global targets.
std::vector<std::vector<std::int64_t>> allocate_groups(
    const std::vector<std::vector<std::int64_t>>& groups, const std::vector<double>& fracs,
    std::uint64_t seed, const char* purpose) {
  const std::size_t P = fracs.size();
  std::vector<std::vector<std::int64_t>> parts(P);
  std::vector<double> carry(P, 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    std::vector<std::int64_t> idx = groups[g];
    Rng rng(seed, purpose, g);
    shuffle(idx, rng);
    const auto n = static_cast<std::int64_t>(idx.size());
    std::vector<double> exact(P);
    std::vector<std::int64_t> take(P);
    std::int64_t assigned = 0;
    for (std::size_t s = 0; s < P; ++s) {
      exact[s] = fracs[s] * static_cast<double>(n) + carry[s];
      take[s] = static_cast<std::int64_t>(std::floor(std::max(0.0, exact[s])));
      assigned += take[s];
    }
    // Settle rounding by deficit; ties go to the earlier part (train first).
    while (assigned < n) {
      std::size_t best = 0;
      for (std::size_t s = 1; s < P; ++s) {
        if (exact[s] - static_cast<double>(take[s]) >
            exact[best] - static_cast<double>(take[best])) {
          best = s;
        }
      }
      ++take[best];
      ++assigned;
    }
    while (assigned > n) {
      std::size_t best = P;
      for (std::size_t s = 0; s < P; ++s) {
        if (take[s] > 0 && (best == P || exact[s] - static_cast<double>(take[s]) <
                                             exact[best] - static_cast<double>(take[best]))) {
          best = s;
        }
      }
      --take[best];
      --assigned;
    }
    for (std::size_t s = 0; s < P; ++s) carry[s] = exact[s] - static_cast<double>(take[s]);
    std::size_t pos = 0;
    for (std::size_t s = 0; s < P; ++s) {
      for (std::int64_t i = 0; i < take[s]; ++i) parts[s].push_back(idx[pos++]);
    }
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

std::vector<std::vector<std::int64_t>> strata(const std::vector<int>& y, int n_classes,
                                              bool* stratified, const char* stage) {
  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || y[i] >= n_classes) {
      throw std::invalid_argument("split: label " + std::to_string(y[i]) +
                                  " outside [0," + std::to_string(n_classes) + ")");
    }
    by_class[static_cast<std::size_t>(y[i])].push_back(static_cast<std::int64_t>(i));
  }
  for (const auto& c : by_class) {
    if (c.size() < 3) {
      std::fprintf(stderr,
                   "warning: %s split falling back to unstratified sampling "
                   "(a class has %zu < 3 examples)\n",
                   stage, c.size());
      if (stratified) *stratified = false;
      std::vector<std::int64_t> all(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) all[i] = static_cast<std::int64_t>(i);
      return {all};
    }
  }
  if (stratified) *stratified = true;
  return by_class;
}

template <typename V>
void write_raw(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_raw(std::ifstream& in, const std::string& path) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(V))) {
    throw std::runtime_error("cache file '" + path + "' is truncated");
  }
  return v;
}

constexpr char kCacheMagic[8] = {'T', 'R', 'N', 'D', 'A', 'T', 'A', '1'};

}  // namespace

template <typename T>
Dataset<T> load_csv(const std::string& path, const CsvSchema& schema,
                    std::int64_t* dropped) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_csv: '" + path + "' is empty");
  const std::vector<std::string> header = split_cells(line, schema.delimiter);

  auto col_of = [&](const std::string& name) {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c] == name) return c;
    }
    throw std::runtime_error("load_csv: column '" + name + "' not in header");
  };
  const std::size_t label_col = col_of(schema.label_column);
  std::vector<bool> is_cat(header.size(), false);
  for (const auto& name : schema.categorical_columns) {
    std::size_t c = col_of(name);
    if (c == label_col) {
      throw std::runtime_error("load_csv: label column '" + name +
                               "' also listed as categorical");
    }
    is_cat[c] = true;
  }
  std::vector<std::size_t> numeric_cols, cat_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == label_col) continue;
    (is_cat[c] ? cat_cols : numeric_cols).push_back(c);
  }

  std::vector<std::vector<double>> numeric_rows;
  std::vector<std::vector<std::size_t>> cat_rows;  // level index per categorical column
  std::vector<int> labels;
  std::vector<std::string> label_levels;
  std::vector<std::vector<std::string>> cat_levels(cat_cols.size());
  std::int64_t n_dropped = 0;
  std::size_t row = 0;

  auto level_index = [](std::vector<std::string>& levels, const std::string& v) {
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (levels[i] == v) return i;
    }
    levels.push_back(v);
    return levels.size() - 1;
  };

  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split_cells(line, schema.delimiter);
    if (cells.size() != header.size()) {
      throw std::runtime_error("load_csv: data row " + std::to_string(row + 1) + " has " +
                               std::to_string(cells.size()) + " cells, expected " +
                               std::to_string(header.size()));
    }
    bool missing = false;
    for (const auto& cell : cells) missing = missing || is_missing(cell);
    if (missing) {
      ++n_dropped;
      ++row;
      continue;
    }
    std::vector<double> nums;
    nums.reserve(numeric_cols.size());
    for (std::size_t c : numeric_cols) nums.push_back(parse_numeric(cells[c], row, header[c]));
    std::vector<std::size_t> cats;
    cats.reserve(cat_cols.size());
    for (std::size_t j = 0; j < cat_cols.size(); ++j) {
      cats.push_back(level_index(cat_levels[j], cells[cat_cols[j]]));
    }
    labels.push_back(static_cast<int>(level_index(label_levels, cells[label_col])));
    numeric_rows.push_back(std::move(nums));
    cat_rows.push_back(std::move(cats));
    ++row;
  }
  if (labels.empty()) {
    throw std::runtime_error("load_csv: '" + path + "' has no usable data rows");
  }

  Dataset<T> ds;
  for (std::size_t c : numeric_cols) ds.feature_names.push_back(header[c]);
  std::vector<std::size_t> cat_offsets;
  std::size_t M = numeric_cols.size();
  for (std::size_t j = 0; j < cat_cols.size(); ++j) {
    cat_offsets.push_back(M);
    for (const auto& level : cat_levels[j]) {
      ds.feature_names.push_back(header[cat_cols[j]] + "=" + level);
    }
    M += cat_levels[j].size();
  }
  const auto n = static_cast<std::int64_t>(labels.size());
  ds.X = Tensor<T>::zeros(n, static_cast<std::int64_t>(M));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    for (std::size_t j = 0; j < numeric_rows[ui].size(); ++j) {
      ds.X.at(i, static_cast<std::int64_t>(j)) = static_cast<T>(numeric_rows[ui][j]);
    }
    for (std::size_t j = 0; j < cat_rows[ui].size(); ++j) {
      ds.X.at(i, static_cast<std::int64_t>(cat_offsets[j] + cat_rows[ui][j])) = T(1);
    }
  }
  ds.y = std::move(labels);
  ds.n_classes = static_cast<int>(label_levels.size());
  if (dropped) *dropped = n_dropped;
  return ds;
}

template <typename T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_binary(images_path);
  if (img.size() < 16) throw std::runtime_error("load_idx: '" + images_path + "' truncated");
  if (be32(img.data()) != 0x803u) {
    throw std::runtime_error("load_idx: '" + images_path +
                             "' image magic mismatch (want 0x00000803)");
  }
  const std::uint32_t n = be32(img.data() + 4);
  const std::uint32_t rows = be32(img.data() + 8);
  const std::uint32_t cols = be32(img.data() + 12);
  const std::size_t pixels = std::size_t(n) * rows * cols;
  if (img.size() != 16 + pixels) {
    throw std::runtime_error("load_idx: '" + images_path + "' size mismatch");
  }

  const auto lab = read_binary(labels_path);
  if (lab.size() < 8) throw std::runtime_error("load_idx: '" + labels_path + "' truncated");
  if (be32(lab.data()) != 0x801u) {
    throw std::runtime_error("load_idx: '" + labels_path +
                             "' label magic mismatch (want 0x00000801)");
  }
  if (be32(lab.data() + 4) != n) {
    throw std::runtime_error("load_idx: image/label counts differ (" + std::to_string(n) +
                             " vs " + std::to_string(be32(lab.data() + 4)) + ")");
  }
  if (lab.size() != 8 + n) {
    throw std::runtime_error("load_idx: '" + labels_path + "' size mismatch");
  }

  Dataset<T> ds;
  const std::int64_t M = std::int64_t(rows) * cols;
  ds.X = Tensor<T>::zeros(n, M);
  for (std::size_t i = 0; i < pixels; ++i) {
    ds.X.data[i] = static_cast<T>(img[16 + i]) / T(255);
  }
  ds.y.resize(n);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.y[i] = lab[8 + i];
    max_label = std::max(max_label, ds.y[i]);
  }
  ds.n_classes = max_label + 1;
  ds.feature_names.reserve(static_cast<std::size_t>(M));
  for (std::int64_t j = 0; j < M; ++j) ds.feature_names.push_back("px" + std::to_string(j));
  return ds;
}

template <typename T>
Dataset<T> concat_datasets(const Dataset<T>& a, const Dataset<T>& b) {
  if (a.dim() != b.dim()) {
    throw std::invalid_argument("concat_datasets: feature counts differ");
  }
  if (a.normalized() || b.normalized() || !a.split.empty() || !b.split.empty()) {
    throw std::invalid_argument("concat_datasets: concat before normalize/split");
  }
  Dataset<T> out;
  out.X = Tensor<T>::zeros(a.n() + b.n(), a.dim());
  std::copy(a.X.data.begin(), a.X.data.end(), out.X.data.begin());
  std::copy(b.X.data.begin(), b.X.data.end(), out.X.data.begin() + a.X.data.size());
  out.y = a.y;
  out.y.insert(out.y.end(), b.y.begin(), b.y.end());
  out.n_classes = std::max(a.n_classes, b.n_classes);
  out.feature_names = a.feature_names;
  return out;
}

template <typename T>
Dataset<T> load_mnist(const std::string& dir) {
  Dataset<T> train = load_idx<T>(dir + "/train-images-idx3-ubyte",
                                 dir + "/train-labels-idx1-ubyte");
  Dataset<T> test = load_idx<T>(dir + "/t10k-images-idx3-ubyte",
                                dir + "/t10k-labels-idx1-ubyte");
  return concat_datasets(train, test);
}

SplitIndices make_split(const std::vector<int>& y, int n_classes, std::uint64_t seed,
                        bool* stratified) {
  if (y.size() < 5) throw std::invalid_argument("split: need at least 5 examples");
  auto groups = strata(y, n_classes, stratified, "60/20/20");
  auto parts = allocate_groups(groups, {0.6, 0.2, 0.2}, seed, "split");
  return {std::move(parts[0]), std::move(parts[1]), std::move(parts[2])};
}

SplitIndices make_split_fixed_test(const std::vector<int>& y, int n_classes,
                                   std::uint64_t test_seed, std::uint64_t run_seed,
                                   bool* stratified) {
  if (y.size() < 5) throw std::invalid_argument("split: need at least 5 examples");
  bool strat1 = true, strat2 = true;
  auto groups = strata(y, n_classes, &strat1, "test");
  auto stage1 = allocate_groups(groups, {0.8, 0.2}, test_seed, "split-test");

  const std::vector<std::int64_t>& rest = stage1[0];
  std::vector<int> y_rest(rest.size());
  for (std::size_t i = 0; i < rest.size(); ++i) y_rest[i] = y[static_cast<std::size_t>(rest[i])];
  auto groups2 = strata(y_rest, n_classes, &strat2, "train/val");
  auto stage2 = allocate_groups(groups2, {0.75, 0.25}, run_seed, "split-run");

  SplitIndices out;
  out.test = stage1[1];
  out.train.reserve(stage2[0].size());
  for (std::int64_t i : stage2[0]) out.train.push_back(rest[static_cast<std::size_t>(i)]);
  out.val.reserve(stage2[1].size());
  for (std::int64_t i : stage2[1]) out.val.push_back(rest[static_cast<std::size_t>(i)]);
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  if (stratified) *stratified = strat1 && strat2;
  return out;
}

template <typename T>
void assign_split(Dataset<T>& ds, std::uint64_t seed) {
  ds.split = make_split(ds.y, ds.n_classes, seed);
}

template <typename T>
void normalize(Dataset<T>& ds) {
  if (ds.split.empty()) throw std::logic_error("normalize: split not assigned");
  if (ds.normalized()) throw std::logic_error("normalize: already normalized");
  const std::int64_t M = ds.dim();
  std::vector<double> mean(static_cast<std::size_t>(M), 0.0);
  std::vector<double> sq(static_cast<std::size_t>(M), 0.0);
  const auto n_train = static_cast<double>(ds.split.train.size());
  for (std::int64_t i : ds.split.train) {
    for (std::int64_t j = 0; j < M; ++j) mean[static_cast<std::size_t>(j)] += ds.X.at(i, j);
  }
  for (auto& m : mean) m /= n_train;
  for (std::int64_t i : ds.split.train) {
    for (std::int64_t j = 0; j < M; ++j) {
      double d = ds.X.at(i, j) - mean[static_cast<std::size_t>(j)];
      sq[static_cast<std::size_t>(j)] += d * d;
    }
  }
  ds.mean.resize(static_cast<std::size_t>(M));
  ds.sd.resize(static_cast<std::size_t>(M));
  for (std::int64_t j = 0; j < M; ++j) {
    const auto uj = static_cast<std::size_t>(j);
    ds.mean[uj] = static_cast<T>(mean[uj]);
    ds.sd[uj] = static_cast<T>(std::sqrt(sq[uj] / n_train));
  }
  for (std::int64_t i = 0; i < ds.n(); ++i) {
    for (std::int64_t j = 0; j < M; ++j) {
      const auto uj = static_cast<std::size_t>(j);
      ds.X.at(i, j) = ds.sd[uj] == T(0) ? T(0) : (ds.X.at(i, j) - ds.mean[uj]) / ds.sd[uj];
    }
  }
}

template <typename T>
void save_cache(const std::string& path, const Dataset<T>& ds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_cache: cannot open '" + path + "'");
  out.write(kCacheMagic, sizeof(kCacheMagic));
  write_raw(out, std::uint32_t(sizeof(T)));
  write_raw(out, std::int64_t(ds.n()));
  write_raw(out, std::int64_t(ds.dim()));
  write_raw(out, std::int32_t(ds.n_classes));
  write_raw(out, std::uint8_t(ds.normalized() ? 1 : 0));
  write_raw(out, std::uint8_t(ds.split.empty() ? 0 : 1));
  for (const auto& name : ds.feature_names) {
    write_raw(out, std::uint32_t(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  out.write(reinterpret_cast<const char*>(ds.X.data.data()),
            static_cast<std::streamsize>(ds.X.data.size() * sizeof(T)));
  for (int v : ds.y) write_raw(out, std::int32_t(v));
  if (ds.normalized()) {
    out.write(reinterpret_cast<const char*>(ds.mean.data()),
              static_cast<std::streamsize>(ds.mean.size() * sizeof(T)));
    out.write(reinterpret_cast<const char*>(ds.sd.data()),
              static_cast<std::streamsize>(ds.sd.size() * sizeof(T)));
  }
  if (!ds.split.empty()) {
    for (const auto* part : {&ds.split.train, &ds.split.val, &ds.split.test}) {
      write_raw(out, std::int64_t(part->size()));
      out.write(reinterpret_cast<const char*>(part->data()),
                static_cast<std::streamsize>(part->size() * sizeof(std::int64_t)));
    }
  }
  if (!out) throw std::runtime_error("save_cache: write to '" + path + "' failed");
}

template <typename T>
Dataset<T> load_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_cache: cannot open '" + path + "'");
  char magic[sizeof(kCacheMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("load_cache: '" + path + "' is not a dataset cache");
  }
  const auto width = read_raw<std::uint32_t>(in, path);
  if (width != sizeof(T)) {
    throw std::runtime_error("load_cache: '" + path + "' stores " +
                             std::to_string(width * 8) + "-bit values, expected " +
                             std::to_string(sizeof(T) * 8) + "-bit");
  }
  const auto n = read_raw<std::int64_t>(in, path);
  const auto M = read_raw<std::int64_t>(in, path);
  const auto K = read_raw<std::int32_t>(in, path);
  const auto normalized = read_raw<std::uint8_t>(in, path);
  const auto has_split = read_raw<std::uint8_t>(in, path);
  if (n < 0 || M < 0 || K < 0) throw std::runtime_error("load_cache: corrupt header");

  Dataset<T> ds;
  ds.n_classes = K;
  ds.feature_names.resize(static_cast<std::size_t>(M));
  for (auto& name : ds.feature_names) {
    const auto len = read_raw<std::uint32_t>(in, path);
    name.resize(len);
    if (len > 0 && !in.read(name.data(), len)) {
      throw std::runtime_error("cache file '" + path + "' is truncated");
    }
  }
  ds.X = Tensor<T>::zeros(n, M);
  if (!in.read(reinterpret_cast<char*>(ds.X.data.data()),
               static_cast<std::streamsize>(ds.X.data.size() * sizeof(T)))) {
    throw std::runtime_error("cache file '" + path + "' is truncated");
  }
  ds.y.resize(static_cast<std::size_t>(n));
  for (auto& v : ds.y) v = read_raw<std::int32_t>(in, path);
  if (normalized) {
    ds.mean.resize(static_cast<std::size_t>(M));
    ds.sd.resize(static_cast<std::size_t>(M));
    if (!in.read(reinterpret_cast<char*>(ds.mean.data()),
                 static_cast<std::streamsize>(ds.mean.size() * sizeof(T))) ||
        !in.read(reinterpret_cast<char*>(ds.sd.data()),
                 static_cast<std::streamsize>(ds.sd.size() * sizeof(T)))) {
      throw std::runtime_error("cache file '" + path + "' is truncated");
    }
  }
  if (has_split) {
    for (auto* part : {&ds.split.train, &ds.split.val, &ds.split.test}) {
      const auto count = read_raw<std::int64_t>(in, path);
      if (count < 0 || count > n) throw std::runtime_error("load_cache: corrupt split");
      part->resize(static_cast<std::size_t>(count));
      if (count > 0 && !in.read(reinterpret_cast<char*>(part->data()),
                                static_cast<std::streamsize>(count * 8))) {
        throw std::runtime_error("cache file '" + path + "' is truncated");
      }
    }
  }
  return ds;
}

template Dataset<float> load_csv<float>(const std::string&, const CsvSchema&, std::int64_t*);
template Dataset<double> load_csv<double>(const std::string&, const CsvSchema&, std::int64_t*);
template Dataset<float> load_idx<float>(const std::string&, const std::string&);
template Dataset<double> load_idx<double>(const std::string&, const std::string&);
template Dataset<float> concat_datasets<float>(const Dataset<float>&, const Dataset<float>&);
template Dataset<double> concat_datasets<double>(const Dataset<double>&, const Dataset<double>&);
template Dataset<float> load_mnist<float>(const std::string&);
template Dataset<double> load_mnist<double>(const std::string&);
template void assign_split<float>(Dataset<float>&, std::uint64_t);
template void assign_split<double>(Dataset<double>&, std::uint64_t);
template void normalize<float>(Dataset<float>&);
template void normalize<double>(Dataset<double>&);
template void save_cache<float>(const std::string&, const Dataset<float>&);
template void save_cache<double>(const std::string&, const Dataset<double>&);
template Dataset<float> load_cache<float>(const std::string&);
template Dataset<double> load_cache<double>(const std::string&);

}  // namespace trinet
