#pragma once

#include <cmath>
#include <stdexcept>

#include "trinet/graph.hpp"
#include "trinet/rng.hpp"
#include "trinet/tensor.hpp"

namespace trinet {

// Hard-concrete stochastic gates: one gate per weight. A sampled gate is a
// stretched sigmoid of (log_alpha + logit(u))/beta clamped to [0,1], so it is
// exactly 0 or exactly 1 with positive probability. The expected-L0 penalty
// and the probability a sampled gate is nonzero share one closed form.
struct GateConfig {
  double beta = 2.0 / 3.0;
  double gamma = -0.1;
  double zeta = 1.1;
  bool per_example = false;  // sample fresh gates per example instead of per batch step

  void validate() const {
    if (!(beta > 0.0)) throw std::invalid_argument("GateConfig: beta must be > 0");
    if (!(gamma < 0.0)) throw std::invalid_argument("GateConfig: gamma must be < 0");
    if (!(zeta > 1.0)) throw std::invalid_argument("GateConfig: zeta must be > 1");
  }
  // beta * log(-gamma/zeta), the shift inside the L0 penalty sigmoid.
  double shift() const { return beta * std::log(-gamma / zeta); }
};

namespace detail {
inline double sigmoid_d(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

// m = clamp(gamma + (zeta-gamma)*sigmoid((log_alpha + logit(u))/beta), 0, 1)
// built from tape primitives so gradients flow to log_alpha. clamp is
// min(1, max(0, s)) = 1 - [1 - [s]^+]^+, which inherits the 0-subgradient
// convention at both boundaries. `u` must lie in (0,1).
template <typename T>
NodeId sample_gates(Tape<T>& tape, NodeId log_alpha, const Tensor<T>& u,
                    const GateConfig& cfg) {
  cfg.validate();
  if (!tape.val(log_alpha).same_shape(u)) {
    throw std::invalid_argument("sample_gates: u shape " + u.shape_str() +
                                " does not match log_alpha " +
                                tape.val(log_alpha).shape_str());
  }
  // Copied out: references from tape.val() do not survive op pushes.
  const std::vector<std::int64_t> shape = u.shape;
  const std::size_t count = u.data.size();
  Tensor<T> logit_u = u;
  for (auto& v : logit_u.data) {
    double uv = static_cast<double>(v);
    if (!(uv > 0.0 && uv < 1.0)) {
      throw std::invalid_argument("sample_gates: u must be in (0,1)");
    }
    v = static_cast<T>(std::log(uv) - std::log1p(-uv));
  }
  NodeId pre = tape.scale(tape.add(log_alpha, tape.constant(std::move(logit_u))),
                          1.0 / cfg.beta);
  NodeId stretched = tape.add(
      tape.scale(tape.sigmoid(pre), cfg.zeta - cfg.gamma),
      tape.constant(Tensor<T>(shape, std::vector<T>(count, static_cast<T>(cfg.gamma)))));
  Tensor<T> ones(shape, std::vector<T>(count, T(1)));
  NodeId clipped_low = tape.hinge_pos(stretched);
  NodeId one_a = tape.constant(ones);
  NodeId one_b = tape.constant(std::move(ones));
  return tape.add(one_b,
                  tape.scale(tape.hinge_pos(tape.add(one_a, tape.scale(clipped_low, -1.0))),
                             -1.0));
}

// Deterministic evaluation-time mask: the sampler with the noise integrated
// out, clamp(gamma + (zeta-gamma)*sigmoid(log_alpha), 0, 1).
template <typename T>
Tensor<T> test_mask(const Tensor<T>& log_alpha, const GateConfig& cfg) {
  cfg.validate();
  Tensor<T> m = log_alpha;
  for (auto& v : m.data) {
    double s = cfg.gamma + (cfg.zeta - cfg.gamma) * detail::sigmoid_d(static_cast<double>(v));
    v = static_cast<T>(std::min(1.0, std::max(0.0, s)));
  }
  return m;
}

// P(sampled gate != 0) = sigmoid(log_alpha - beta*log(-gamma/zeta)).
inline double prob_nonzero(double log_alpha, const GateConfig& cfg) {
  cfg.validate();
  return detail::sigmoid_d(log_alpha - cfg.shift());
}

// Expected-L0 penalty node: sum_j sigmoid(log_alpha_j - beta*log(-gamma/zeta))
// accumulated over the given layers.
template <typename T>
NodeId l0_penalty(Tape<T>& tape, const std::vector<NodeId>& log_alphas,
                  const GateConfig& cfg) {
  cfg.validate();
  if (log_alphas.empty()) throw std::invalid_argument("l0_penalty: no gate parameters");
  NodeId total = -1;
  for (NodeId la : log_alphas) {
    const Tensor<T>& v = tape.val(la);
    Tensor<T> shift(v.shape,
                    std::vector<T>(v.data.size(), static_cast<T>(-cfg.shift())));
    NodeId s = tape.sum(tape.sigmoid(tape.add(la, tape.constant(std::move(shift)))));
    total = (total < 0) ? s : tape.add(total, s);
  }
  return total;
}

// Fill a uniform-noise tensor for one sampling step. Rejection happens after
// the cast: a double close to 1 can round to 1.0f in single precision.
template <typename T>
Tensor<T> gate_noise(const Tensor<T>& like, Rng& rng) {
  Tensor<T> u = like;
  for (auto& v : u.data) {
    T x;
    do {
      x = static_cast<T>(rng.uniform_open());
    } while (!(x > T(0) && x < T(1)));
    v = x;
  }
  return u;
}

}  // namespace trinet
