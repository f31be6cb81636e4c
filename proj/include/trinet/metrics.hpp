#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "trinet/attack.hpp"
#include "trinet/net.hpp"
#include "trinet/tensor.hpp"

namespace trinet {

// Everything a run report quotes for one model (stability is cross-run, so
// it is filled at aggregation time; NaN until then).
struct MetricBundle {
  double natural_acc = 0.0;
  std::map<double, double> adv_acc;
  double sparsity = 0.0;
  double stability = std::numeric_limits<double>::quiet_NaN();

  void validate(int n_classes) const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in01(natural_acc)) throw std::invalid_argument("MetricBundle: natural_acc range");
    if (!in01(sparsity)) throw std::invalid_argument("MetricBundle: sparsity range");
    for (const auto& [rho, acc] : adv_acc) {
      if (!(rho >= 0.0) || !in01(acc)) {
        throw std::invalid_argument("MetricBundle: adv_acc range");
      }
    }
    if (!std::isnan(stability) &&
        !(stability >= 0.0 && stability <= 1.0 - 1.0 / n_classes)) {
      throw std::invalid_argument("MetricBundle: stability range");
    }
  }
};

// Prediction-dispersion score over repeated training runs: with p-hat_ik the
// fraction of the s models assigning point i to class k, the score is
// (1/n) sum_i sum_k p_ik (1 - p_ik) = (1/n) sum_i (1 - sum_k p_ik^2).
// 0 iff all models agree everywhere; at most 1 - 1/K.
inline double stability_score(const std::vector<std::vector<int>>& predictions, int K) {
  const std::size_t s = predictions.size();
  if (s < 2) throw std::invalid_argument("stability_score: needs at least 2 runs");
  if (K < 1) throw std::invalid_argument("stability_score: K must be positive");
  const std::size_t n = predictions.front().size();
  for (const auto& row : predictions) {
    if (row.size() != n) {
      throw std::invalid_argument("stability_score: ragged prediction rows");
    }
  }
  if (n == 0) throw std::invalid_argument("stability_score: no points");
  double total = 0.0;
  std::vector<int> counts(static_cast<std::size_t>(K));
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t m = 0; m < s; ++m) {
      int c = predictions[m][i];
      if (c < 0 || c >= K) {
        throw std::invalid_argument("stability_score: prediction out of range");
      }
      ++counts[static_cast<std::size_t>(c)];
    }
    double sq = 0.0;
    for (int c : counts) {
      double p = static_cast<double>(c) / static_cast<double>(s);
      sq += p * p;
    }
    total += 1.0 - sq;
  }
  return total / static_cast<double>(n);
}

// Fraction of connections that are 0 at evaluation time: gated models count
// zero test masks, ungated models count exactly-zero stored weights. Biases
// are not connections and are excluded.
template <typename T>
double sparsity_fraction(const MlpParams<T>& p, const GateConfig& gcfg = {}) {
  std::int64_t zeros = 0, total = 0;
  for (int l = 0; l < p.n_layers(); ++l) {
    if (p.gated()) {
      Tensor<T> m = test_mask(p.log_alpha[static_cast<std::size_t>(l)], gcfg);
      for (T v : m.data) zeros += (v == T(0)) ? 1 : 0;
      total += m.numel();
    } else {
      for (T v : p.W[static_cast<std::size_t>(l)].data) zeros += (v == T(0)) ? 1 : 0;
      total += p.W[static_cast<std::size_t>(l)].numel();
    }
  }
  if (total == 0) throw std::invalid_argument("sparsity_fraction: empty model");
  return static_cast<double>(zeros) / static_cast<double>(total);
}

// Share of the error still open under the baseline that the candidate
// removes: (candidate - baseline) / (1 - baseline). Undefined at a perfect
// baseline.
inline double improvement_captured(double nominal_acc, double hdl_acc) {
  if (!(nominal_acc < 1.0)) {
    throw std::invalid_argument("improvement_captured: baseline accuracy must be < 1");
  }
  return (hdl_acc - nominal_acc) / (1.0 - nominal_acc);
}

template <typename T>
std::vector<int> predict_all(const MlpParams<T>& p, const Tensor<T>& X,
                             const GateConfig& gcfg = {}) {
  FrozenNet<T> f = freeze(p, gcfg);
  constexpr std::int64_t kChunk = 4096;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(X.rows()));
  for (std::int64_t begin = 0; begin < X.rows(); begin += kChunk) {
    const std::int64_t end = std::min(X.rows(), begin + kChunk);
    auto part = detail::predict_frozen(f, detail::rows_of(X, begin, end));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

template <typename T>
double natural_accuracy(const MlpParams<T>& p, const Tensor<T>& X,
                        const std::vector<int>& y, const GateConfig& gcfg = {}) {
  if (X.rows() != static_cast<std::int64_t>(y.size()) || y.empty()) {
    throw std::invalid_argument("natural_accuracy: labels do not match batch");
  }
  auto pred = predict_all(p, X, gcfg);
  std::int64_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += (pred[i] == y[i]) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

// Fraction of points still classified correctly after a per-point attack.
template <typename T>
double adversarial_accuracy(const MlpParams<T>& p, const Tensor<T>& X,
                            const std::vector<int>& y, const AttackConfig& cfg,
                            const GateConfig& gcfg = {}) {
  Tensor<T> xadv = pgd(p, X, y, cfg, gcfg);
  auto pred = predict_all(p, xadv, gcfg);
  std::int64_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += (pred[i] == y[i]) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

// Adversarial accuracy across several radii with one model. Radii are
// processed in increasing order and an example defeated at a smaller radius
// stays defeated at every larger one (its perturbation remains feasible), so
// the curve is non-increasing by construction; only survivors are
// re-attacked. Results align with the order of `rhos` as given.
template <typename T>
std::vector<double> adversarial_accuracy_curve(const MlpParams<T>& p, const Tensor<T>& X,
                                               const std::vector<int>& y,
                                               const std::vector<double>& rhos, int steps,
                                               int restarts, std::uint64_t seed,
                                               bool clip01 = false,
                                               const GateConfig& gcfg = {}) {
  if (X.rows() != static_cast<std::int64_t>(y.size()) || y.empty()) {
    throw std::invalid_argument("adversarial_accuracy_curve: labels do not match batch");
  }
  const std::size_t N = y.size();
  std::vector<std::size_t> order(rhos.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return rhos[a] < rhos[b]; });

  std::vector<char> fooled(N, 0);
  {
    auto pred = predict_all(p, X, gcfg);
    for (std::size_t i = 0; i < N; ++i) fooled[i] = pred[i] != y[i];
  }

  std::vector<double> acc(rhos.size(), 0.0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const double rho = rhos[order[oi]];
    if (!(rho >= 0.0)) {
      throw std::invalid_argument("adversarial_accuracy_curve: rho must be >= 0");
    }
    std::vector<std::int64_t> survivors;
    for (std::size_t i = 0; i < N; ++i) {
      if (!fooled[i]) survivors.push_back(static_cast<std::int64_t>(i));
    }
    if (rho > 0.0 && !survivors.empty()) {
      Tensor<T> Xs = Tensor<T>::zeros(static_cast<std::int64_t>(survivors.size()), X.cols());
      std::vector<int> ys(survivors.size());
      for (std::size_t i = 0; i < survivors.size(); ++i) {
        for (std::int64_t j = 0; j < X.cols(); ++j) Xs.at(static_cast<std::int64_t>(i), j) = X.at(survivors[i], j);
        ys[i] = y[static_cast<std::size_t>(survivors[i])];
      }
      AttackConfig cfg = default_attack(rho, derive_stream(seed, "attack-rho", oi));
      cfg.steps = steps;
      cfg.step_size = 2.5 * rho / steps;
      cfg.restarts = restarts;
      cfg.clip01 = clip01;
      Tensor<T> xadv = pgd(p, Xs, ys, cfg, gcfg);
      auto pred = predict_all(p, xadv, gcfg);
      for (std::size_t i = 0; i < survivors.size(); ++i) {
        if (pred[i] != ys[i]) fooled[static_cast<std::size_t>(survivors[i])] = 1;
      }
    }
    std::int64_t still = 0;
    for (char v : fooled) still += v ? 0 : 1;
    acc[order[oi]] = static_cast<double>(still) / static_cast<double>(N);
  }
  return acc;
}

}  // namespace trinet
