// Model checkpoint container.
//
// Layout (little-endian, versioned by magic):
//   bytes 0-7   magic "TRNCKPT1"
//   u32         scalar width in bytes: 4 (f32) or 8 (f64)
//   u32         gated flag: 0 or 1
//   u32         layer-size count S
//   i64 * S     layer sizes [input, hidden..., classes]
//   f64         theta
//   then per layer l = 0..S-2, in order:
//   scalar * (r_l * r_{l+1})   W[l], row-major
//   scalar * r_{l+1}           b[l]
//   scalar * (r_l * r_{l+1})   log_alpha[l]   (gated files only)
// Scalars are stored at their native width, so round-trips are bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trinet/net.hpp"

namespace trinet {

namespace {

constexpr char kMagic[8] = {'T', 'R', 'N', 'C', 'K', 'P', 'T', '1'};

void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& is, void* p, std::size_t n, const std::string& path) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) {
    throw std::runtime_error("checkpoint: truncated file: " + path);
  }
}

template <typename T>
void save_impl(const std::string& path, const MlpParams<T>& p) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  write_bytes(os, kMagic, sizeof(kMagic));
  std::uint32_t width = sizeof(T);
  std::uint32_t gated = p.gated() ? 1 : 0;
  std::uint32_t S = static_cast<std::uint32_t>(p.layer_sizes.size());
  write_bytes(os, &width, 4);
  write_bytes(os, &gated, 4);
  write_bytes(os, &S, 4);
  write_bytes(os, p.layer_sizes.data(), S * sizeof(std::int64_t));
  double theta = static_cast<double>(p.theta);
  write_bytes(os, &theta, 8);
  for (int l = 0; l < p.n_layers(); ++l) {
    const auto& W = p.W[static_cast<std::size_t>(l)];
    const auto& b = p.b[static_cast<std::size_t>(l)];
    write_bytes(os, W.data.data(), W.data.size() * sizeof(T));
    write_bytes(os, b.data.data(), b.data.size() * sizeof(T));
    if (gated) {
      const auto& la = p.log_alpha[static_cast<std::size_t>(l)];
      write_bytes(os, la.data.data(), la.data.size() * sizeof(T));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

struct Header {
  std::uint32_t width = 0;
  bool gated = false;
  std::vector<std::int64_t> layer_sizes;
  double theta = 0.0;
};

Header read_header(std::ifstream& is, const std::string& path) {
  char magic[8];
  read_bytes(is, magic, 8, path);
  if (std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic (not a checkpoint file): " + path);
  }
  Header h;
  std::uint32_t gated = 0, S = 0;
  read_bytes(is, &h.width, 4, path);
  read_bytes(is, &gated, 4, path);
  read_bytes(is, &S, 4, path);
  if (h.width != 4 && h.width != 8) {
    throw std::runtime_error("checkpoint: unsupported precision width: " + path);
  }
  if (S < 2 || S > 64) throw std::runtime_error("checkpoint: implausible layer count: " + path);
  h.gated = gated != 0;
  h.layer_sizes.resize(S);
  read_bytes(is, h.layer_sizes.data(), S * sizeof(std::int64_t), path);
  for (auto s : h.layer_sizes) {
    if (s <= 0) throw std::runtime_error("checkpoint: invalid layer size: " + path);
  }
  read_bytes(is, &h.theta, 8, path);
  return h;
}

template <typename T>
MlpParams<T> load_impl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  Header h = read_header(is, path);
  if (h.width != sizeof(T)) {
    throw std::runtime_error("checkpoint: stored precision (" +
                             std::string(h.width == 4 ? "f32" : "f64") +
                             ") does not match requested type: " + path);
  }
  MlpParams<T> p;
  p.layer_sizes = h.layer_sizes;
  p.theta = static_cast<T>(h.theta);
  const int L = static_cast<int>(h.layer_sizes.size()) - 1;
  for (int l = 0; l < L; ++l) {
    const std::int64_t rin = h.layer_sizes[static_cast<std::size_t>(l)];
    const std::int64_t rout = h.layer_sizes[static_cast<std::size_t>(l) + 1];
    Tensor<T> W = Tensor<T>::zeros(rin, rout);
    Tensor<T> b = Tensor<T>::zeros(1, rout);
    read_bytes(is, W.data.data(), W.data.size() * sizeof(T), path);
    read_bytes(is, b.data.data(), b.data.size() * sizeof(T), path);
    p.W.push_back(std::move(W));
    p.b.push_back(std::move(b));
    if (h.gated) {
      Tensor<T> la = Tensor<T>::zeros(rin, rout);
      read_bytes(is, la.data.data(), la.data.size() * sizeof(T), path);
      p.log_alpha.push_back(std::move(la));
    }
  }
  return p;
}

}  // namespace

void save_checkpoint(const std::string& path, const MlpParams<float>& p) {
  save_impl(path, p);
}
void save_checkpoint(const std::string& path, const MlpParams<double>& p) {
  save_impl(path, p);
}

template <typename T>
MlpParams<T> load_checkpoint(const std::string& path) {
  return load_impl<T>(path);
}
template MlpParams<float> load_checkpoint<float>(const std::string&);
template MlpParams<double> load_checkpoint<double>(const std::string&);

int checkpoint_precision(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  Header h = read_header(is, path);
  return static_cast<int>(h.width);
}

}  // namespace trinet
