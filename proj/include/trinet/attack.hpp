#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "trinet/loss.hpp"
#include "trinet/net.hpp"
#include "trinet/rng.hpp"
#include "trinet/tensor.hpp"

namespace trinet {

// L-infinity attack settings. step_size and radius are absolute; the standard
// evaluation attack is default_attack(rho, seed).
struct AttackConfig {
  double radius = 0.0;
  int steps = 40;
  double step_size = 0.0;
  int restarts = 1;
  std::uint64_t seed = 0;
  bool random_start = true;  // uniform start in the ball; false starts at the clean point
  bool clip01 = false;       // additionally clamp iterates to [0,1] (image data)

  void validate() const {
    if (!(radius >= 0.0)) throw std::invalid_argument("AttackConfig: radius must be >= 0");
    if (steps < 1) throw std::invalid_argument("AttackConfig: steps must be >= 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("AttackConfig: step_size must be > 0");
    if (restarts < 1) throw std::invalid_argument("AttackConfig: restarts must be >= 1");
  }
};

// 40 steps of 2.5*rho/40 with one random restart. A degenerate radius keeps a
// positive (irrelevant) step so the config stays valid.
inline AttackConfig default_attack(double rho, std::uint64_t seed = 0) {
  AttackConfig cfg;
  cfg.radius = rho;
  cfg.steps = 40;
  cfg.step_size = rho > 0.0 ? 2.5 * rho / 40.0 : 1.0;
  cfg.restarts = 1;
  cfg.seed = seed;
  return cfg;
}

// Exact maximum of delta . g over the corners of the rho-box, found by
// enumerating all 2^M sign patterns. Small-dimension ground truth for the
// closed form rho*||g||_1; the argmax corner uses +rho where g is 0.
inline std::pair<double, std::vector<double>> corner_oracle(const std::vector<double>& g,
                                                            double rho) {
  if (g.size() > 20) {
    throw std::invalid_argument("corner_oracle: enumeration supports at most 20 dims");
  }
  if (!(rho >= 0.0)) throw std::invalid_argument("corner_oracle: rho must be >= 0");
  const std::size_t m = g.size();
  double best = -std::numeric_limits<double>::infinity();
  std::uint64_t best_bits = 0;
  for (std::uint64_t bits = 0; bits < (1ull << m); ++bits) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += ((bits >> i) & 1u ? rho : -rho) * g[i];
    if (s > best) {
      best = s;
      best_bits = bits;
    }
  }
  std::vector<double> corner(m);
  for (std::size_t i = 0; i < m; ++i) {
    corner[i] = (g[i] == 0.0) ? rho : (((best_bits >> i) & 1u) ? rho : -rho);
  }
  return {best, std::move(corner)};
}

// Evaluation-time view of a model: effective weights with gates folded in,
// as plain tensors staged as constants per attack step.
template <typename T>
struct FrozenNet {
  std::vector<Tensor<T>> W_eff;
  std::vector<Tensor<T>> b;
};

template <typename T>
FrozenNet<T> freeze(const MlpParams<T>& p, const GateConfig& gcfg = {}) {
  FrozenNet<T> f;
  for (int l = 0; l < p.n_layers(); ++l) {
    if (p.gated()) {
      Tensor<T> m = test_mask(p.log_alpha[static_cast<std::size_t>(l)], gcfg);
      Tensor<T> w = p.W[static_cast<std::size_t>(l)];
      for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] *= m.data[i];
      f.W_eff.push_back(std::move(w));
    } else {
      f.W_eff.push_back(p.W[static_cast<std::size_t>(l)]);
    }
    f.b.push_back(p.b[static_cast<std::size_t>(l)]);
  }
  return f;
}

namespace detail {

template <typename T>
Staged<T> stage_frozen(Tape<T>& tape, const FrozenNet<T>& f) {
  Staged<T> s;
  for (std::size_t l = 0; l < f.W_eff.size(); ++l) {
    NodeId w = tape.constant(f.W_eff[l]);
    s.W.push_back(w);
    s.W_eff.push_back(w);
    s.b.push_back(tape.constant(f.b[l]));
  }
  return s;
}

// Per-example cross-entropy at X, and optionally its input gradient.
template <typename T>
std::vector<T> ce_rows(const FrozenNet<T>& f, const Tensor<T>& X,
                       const std::vector<int>& y, Tensor<T>* grad_x = nullptr) {
  Tape<T> tape;
  Staged<T> s = stage_frozen(tape, f);
  NodeId Xp = tape.leaf(X, /*is_param=*/grad_x != nullptr);
  ForwardTrace<T> tr = forward(tape, s, Xp);
  NodeId ce = cross_entropy(tape, tr.logits, y);
  std::vector<T> out = tape.val(ce).data;
  if (grad_x != nullptr) {
    tape.backward(tape.sum(ce));
    *grad_x = tape.grad_or_zero(Xp);
  }
  return out;
}

template <typename T>
std::vector<int> predict_frozen(const FrozenNet<T>& f, const Tensor<T>& X) {
  Tape<T> tape;
  Staged<T> s = stage_frozen(tape, f);
  ForwardTrace<T> tr = forward(tape, s, tape.constant(X));
  return predict_rows(tape.val(tr.logits));
}

template <typename T>
Tensor<T> rows_of(const Tensor<T>& X, std::int64_t begin, std::int64_t end) {
  Tensor<T> out = Tensor<T>::zeros(end - begin, X.cols());
  std::copy(X.data.begin() + begin * X.cols(), X.data.begin() + end * X.cols(),
            out.data.begin());
  return out;
}

}  // namespace detail

// Single step x + rho * sign(grad_x CE); sign(0) = 0, so a flat input stays
// put. With clip01, iterates are clamped to [0,1] after the step.
template <typename T>
Tensor<T> fgsm(const MlpParams<T>& p, const Tensor<T>& X, const std::vector<int>& y,
               double rho, bool clip01 = false, const GateConfig& gcfg = {}) {
  if (!(rho >= 0.0)) throw std::invalid_argument("fgsm: rho must be >= 0");
  FrozenNet<T> f = freeze(p, gcfg);
  Tensor<T> g;
  detail::ce_rows(f, X, y, &g);
  Tensor<T> out = X;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    T gi = g.data[i];
    T s = gi > T(0) ? T(1) : (gi < T(0) ? T(-1) : T(0));
    out.data[i] += static_cast<T>(rho) * s;
    if (clip01) out.data[i] = std::min(T(1), std::max(T(0), out.data[i]));
  }
  return out;
}

// Projected gradient ascent on the cross-entropy inside the rho-ball around
// each row. Returns, per example, the candidate with the highest loss among
// the clean point and every iterate of every restart (ties keep the earliest),
// so the attack never returns a point easier than the input.
template <typename T>
Tensor<T> pgd(const MlpParams<T>& p, const Tensor<T>& X, const std::vector<int>& y,
              const AttackConfig& cfg, const GateConfig& gcfg = {}) {
  cfg.validate();
  if (X.rows() != static_cast<std::int64_t>(y.size())) {
    throw std::invalid_argument("pgd: labels do not match batch");
  }
  FrozenNet<T> f = freeze(p, gcfg);
  const std::int64_t B = X.rows(), M = X.cols();
  const T r = static_cast<T>(cfg.radius);
  constexpr std::int64_t kChunk = 1024;

  Tensor<T> best_x = X;
  std::vector<T> best_loss = detail::ce_rows(f, X, y);

  for (std::int64_t begin = 0; begin < B; begin += kChunk) {
    const std::int64_t end = std::min(B, begin + kChunk);
    const std::int64_t C = end - begin;
    Tensor<T> Xc = detail::rows_of(X, begin, end);
    std::vector<int> yc(y.begin() + begin, y.begin() + end);

    for (int restart = 0; restart < cfg.restarts; ++restart) {
      Tensor<T> delta = Tensor<T>::zeros(C, M);
      if (cfg.random_start && r > T(0)) {
        // Per-example streams keep the draw independent of chunking.
        for (std::int64_t n = 0; n < C; ++n) {
          Rng rng(cfg.seed, "pgd-start",
                  static_cast<std::uint64_t>(restart) * static_cast<std::uint64_t>(B) +
                      static_cast<std::uint64_t>(begin + n));
          for (std::int64_t j = 0; j < M; ++j) {
            delta.at(n, j) = static_cast<T>(rng.uniform(-cfg.radius, cfg.radius));
          }
        }
        if (cfg.clip01) {
          for (std::size_t i = 0; i < delta.data.size(); ++i) {
            T v = Xc.data[i] + delta.data[i];
            delta.data[i] = std::min(T(1), std::max(T(0), v)) - Xc.data[i];
          }
        }
      }
      for (int t = 0; t <= cfg.steps; ++t) {
        Tensor<T> Xadv = Xc;
        for (std::size_t i = 0; i < Xadv.data.size(); ++i) Xadv.data[i] += delta.data[i];
        Tensor<T> g;
        std::vector<T> loss =
            detail::ce_rows(f, Xadv, yc, t < cfg.steps ? &g : nullptr);
        for (std::int64_t n = 0; n < C; ++n) {
          if (loss[static_cast<std::size_t>(n)] >
              best_loss[static_cast<std::size_t>(begin + n)]) {
            best_loss[static_cast<std::size_t>(begin + n)] =
                loss[static_cast<std::size_t>(n)];
            for (std::int64_t j = 0; j < M; ++j) best_x.at(begin + n, j) = Xadv.at(n, j);
          }
        }
        if (t == cfg.steps) break;
        for (std::size_t i = 0; i < delta.data.size(); ++i) {
          T gi = g.data[i];
          T s = gi > T(0) ? T(1) : (gi < T(0) ? T(-1) : T(0));
          T v = delta.data[i] + static_cast<T>(cfg.step_size) * s;
          delta.data[i] = std::min(r, std::max(-r, v));
        }
        if (cfg.clip01) {
          for (std::size_t i = 0; i < delta.data.size(); ++i) {
            T v = Xc.data[i] + delta.data[i];
            delta.data[i] = std::min(T(1), std::max(T(0), v)) - Xc.data[i];
          }
        }
      }
    }
  }
  return best_x;
}

}  // namespace trinet
