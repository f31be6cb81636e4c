#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "trinet/gates.hpp"
#include "trinet/graph.hpp"
#include "trinet/net.hpp"
#include "trinet/tensor.hpp"

namespace trinet {

// Which penalties are active. The eight supported variants are the cartesian
// combinations; canonical report order matches the composition ladder:
// plain CE, each single penalty, each pair, then all three ("full").
struct VariantFlags {
  bool robust = false;
  bool sparse = false;
  bool stable = false;
  bool operator==(const VariantFlags&) const = default;
};

inline std::string variant_name(const VariantFlags& f) {
  if (!f.robust && !f.sparse && !f.stable) return "nominal";
  if (f.robust && !f.sparse && !f.stable) return "robust";
  if (!f.robust && !f.sparse && f.stable) return "stable";
  if (!f.robust && f.sparse && !f.stable) return "sparse";
  if (f.robust && f.sparse && !f.stable) return "robust_sparse";
  if (!f.robust && f.sparse && f.stable) return "stable_sparse";
  if (f.robust && !f.sparse && f.stable) return "stable_robust";
  return "full";
}

inline std::vector<std::string> canonical_variants() {
  return {"nominal",       "robust",        "stable",        "sparse",
          "robust_sparse", "stable_sparse", "stable_robust", "full"};
}

inline VariantFlags parse_variant(const std::string& name) {
  for (int r = 0; r < 2; ++r)
    for (int s = 0; s < 2; ++s)
      for (int t = 0; t < 2; ++t) {
        VariantFlags f{r != 0, s != 0, t != 0};
        if (variant_name(f) == name) return f;
      }
  // Accept flag order variants like "robust_stable" as a convenience.
  VariantFlags f;
  std::size_t pos = 0;
  std::string n = name;
  bool any = false, bad = false;
  while (pos < n.size()) {
    std::size_t next = n.find('_', pos);
    std::string part = n.substr(pos, next == std::string::npos ? next : next - pos);
    if (part == "robust") f.robust = true;
    else if (part == "sparse") f.sparse = true;
    else if (part == "stable") f.stable = true;
    else bad = true;
    any = true;
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  if (!any || bad) {
    throw std::invalid_argument("unknown loss variant '" + name + "'");
  }
  return f;
}

// Full description of one training objective.
struct LossSpec {
  VariantFlags flags;
  double rho = 0.0;         // robust penalty radius
  double lambda = 0.0;      // expected-L0 coefficient
  double a_fraction = 0.7;  // CVaR tail fraction
  double weight_decay = 0.0;  // applied in the optimizer, never in the graph
  GateConfig gates;

  void validate() const {
    if (flags.robust && !(rho >= 0.0)) {
      throw std::invalid_argument("LossSpec: rho must be >= 0");
    }
    if (flags.sparse && !(lambda >= 0.0)) {
      throw std::invalid_argument("LossSpec: lambda must be >= 0");
    }
    if (flags.stable && !(a_fraction > 0.0 && a_fraction <= 1.0)) {
      throw std::invalid_argument("LossSpec: a_fraction must be in (0,1]");
    }
    if (!(weight_decay >= 0.0)) {
      throw std::invalid_argument("LossSpec: weight_decay must be >= 0");
    }
    if (flags.sparse) gates.validate();
  }
};

// CVaR batch count: a_B = max(1, round(a_fraction * B)).
inline int cvar_count(double a_fraction, std::int64_t batch) {
  if (batch <= 0) throw std::invalid_argument("cvar_count: empty batch");
  auto a = static_cast<std::int64_t>(std::llround(a_fraction * static_cast<double>(batch)));
  return static_cast<int>(std::max<std::int64_t>(1, std::min(batch, a)));
}

// Per-row margins z_k - z_{y_n} as a (B x K) node. The label column is
// broadcast by multiplying the one-hot-masked logits with a ones matrix, so
// everything stays inside the primitive set and stays differentiable.
template <typename T>
NodeId margin_rows(Tape<T>& tape, NodeId logits, const std::vector<int>& labels) {
  const Tensor<T>& Z = tape.val(logits);
  const std::int64_t B = Z.rows(), K = Z.cols();
  if (static_cast<std::int64_t>(labels.size()) != B) {
    throw std::invalid_argument("margin_rows: labels do not match batch");
  }
  Tensor<T> onehot = Tensor<T>::zeros(B, K);
  for (std::int64_t n = 0; n < B; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= K) throw std::invalid_argument("margin_rows: label out of range");
    onehot.at(n, y) = T(1);
  }
  NodeId zy = tape.matmul(tape.mul(logits, tape.constant(std::move(onehot))),
                          tape.constant(Tensor<T>::full(K, K, T(1))));
  return tape.add(logits, tape.scale(zy, -1.0));
}

// Multiclass cross-entropy per example, logsumexp(z) - z_y, as a (B x 1)
// node. Computed as logsumexp over margins, which subtracts z_y inside the
// shift-stable reduction.
template <typename T>
NodeId cross_entropy(Tape<T>& tape, NodeId logits, const std::vector<int>& labels) {
  return tape.logsumexp_rows(margin_rows(tape, logits, labels));
}

// Linearized-robust cross-entropy per example:
// log sum_k exp( z_k - z_y + rho * ||grad_x (z_k - z_y)||_1 ), (B x 1).
// The y term's exponent is exactly 0, so this dominates plain CE pointwise
// and reduces to it at rho = 0.
template <typename T>
NodeId robust_cross_entropy(Tape<T>& tape, const Staged<T>& s, const ForwardTrace<T>& tr,
                            const std::vector<int>& labels, double rho) {
  if (!(rho >= 0.0)) throw std::invalid_argument("robust_cross_entropy: rho must be >= 0");
  NodeId margins = margin_rows(tape, tr.logits, labels);
  NodeId penalty = tape.scale(margin_l1_rows(tape, s, tr, labels), rho);
  return tape.logsumexp_rows(tape.add(margins, penalty));
}

// CVaR-of-losses wrapper: theta + (1/a) * sum [l_n - theta]^+ over the given
// per-example loss columns. `theta` must be a staged scalar parameter.
template <typename T>
NodeId cvar_wrap(Tape<T>& tape, NodeId per_example, NodeId theta, int a) {
  const Tensor<T>& pe = tape.val(per_example);
  if (pe.rank() != 2 || pe.cols() != 1) {
    throw std::invalid_argument("cvar_wrap: per-example losses must be (B x 1), got " +
                                pe.shape_str());
  }
  if (a < 1 || a > pe.rows()) {
    throw std::invalid_argument("cvar_wrap: a must be in [1, B]");
  }
  if (!tape.val(theta).is_scalar()) {
    throw std::invalid_argument("cvar_wrap: theta must be scalar");
  }
  NodeId excess = tape.hinge_pos(tape.add(per_example, tape.scale(theta, -1.0)));
  return tape.add(tape.scale(tape.sum(excess), 1.0 / static_cast<double>(a)), theta);
}

template <typename T>
struct ComposeOpts {
  RunMode mode = RunMode::train;
  double dropout = 0.0;
  Rng* dropout_rng = nullptr;
  Rng* gate_rng = nullptr;
  int a_override = 0;  // >0 replaces the a_B computed from the batch size
  // Pinned stochastic draws for gradient checking: per-layer gate noise and
  // per-hidden-layer dropout masks.
  const std::vector<Tensor<T>>* gate_u = nullptr;
  const std::vector<Tensor<T>>* dropout_masks = nullptr;
};

template <typename T>
struct ComposeResult {
  Staged<T> staged;
  ForwardTrace<T> trace;
  NodeId per_example = -1;  // (B x 1), or -1 in per-example-gate mode
  NodeId loss = -1;         // scalar objective
  NodeId l0 = -1;           // expected-L0 node when sparse, else -1
  int a_count = 0;          // CVaR count actually used (0 when not stable)
};

namespace detail {

template <typename T>
NodeId add_chain(Tape<T>& tape, const std::vector<NodeId>& xs) {
  NodeId t = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) t = tape.add(t, xs[i]);
  return t;
}

}  // namespace detail

// Build the full training objective for one batch on a fresh tape:
//   [CVaR of] per-example [robust] CE  +  lambda * expected-L0   (as active).
// Weight decay is deliberately absent here; the optimizer applies it.
template <typename T>
ComposeResult<T> compose(Tape<T>& tape, const MlpParams<T>& params, const Tensor<T>& X,
                         const std::vector<int>& labels, const LossSpec& spec,
                         const ComposeOpts<T>& opts = {}) {
  spec.validate();
  if (spec.flags.sparse != params.gated()) {
    throw std::invalid_argument(spec.flags.sparse
                                    ? "compose: sparse loss requires gated parameters"
                                    : "compose: gated parameters require a sparse loss");
  }
  const std::int64_t B = X.rows();
  if (static_cast<std::int64_t>(labels.size()) != B || B == 0) {
    throw std::invalid_argument("compose: labels do not match batch");
  }
  const bool train = opts.mode == RunMode::train;
  if (spec.flags.sparse && train && opts.gate_rng == nullptr && opts.gate_u == nullptr) {
    throw std::invalid_argument("compose: sparse training needs a gate rng");
  }

  ComposeResult<T> res;
  ForwardOpts<T> fo;
  fo.mode = opts.mode;
  fo.dropout = opts.dropout;
  fo.dropout_rng = opts.dropout_rng;
  fo.dropout_masks = opts.dropout_masks;

  const bool per_ex_gates = spec.flags.sparse && spec.gates.per_example && train;
  std::vector<NodeId> scalar_losses;
  if (!per_ex_gates) {
    if (spec.flags.sparse && train && opts.gate_u != nullptr) {
      // Pinned noise path: stage leaves, then gate with the caller's draws.
      res.staged = stage_params(tape, params, RunMode::eval, spec.gates, nullptr);
      if (opts.gate_u->size() != static_cast<std::size_t>(params.n_layers())) {
        throw std::invalid_argument("compose: gate_u layer count mismatch");
      }
      res.staged.W_eff.clear();
      for (int l = 0; l < params.n_layers(); ++l) {
        NodeId m = sample_gates(tape, res.staged.log_alpha[static_cast<std::size_t>(l)],
                                opts.gate_u->at(static_cast<std::size_t>(l)), spec.gates);
        res.staged.W_eff.push_back(tape.mul(res.staged.W[static_cast<std::size_t>(l)], m));
      }
    } else {
      res.staged = stage_params(tape, params, opts.mode, spec.gates, opts.gate_rng);
    }
    NodeId Xn = tape.constant(X);
    res.trace = forward(tape, res.staged, Xn, fo);
    res.per_example = spec.flags.robust
                          ? robust_cross_entropy(tape, res.staged, res.trace, labels, spec.rho)
                          : cross_entropy(tape, res.trace.logits, labels);
  } else {
    // Fresh hard-concrete sample per example: each example gets its own
    // effective weights and a scalar loss node; the parameter leaves and the
    // CVaR count stay batch-level.
    res.staged = stage_params(tape, params, RunMode::eval, spec.gates, nullptr);
    // Rebuild effective weights per example below; keep the leaf ids.
    for (std::int64_t n = 0; n < B; ++n) {
      Staged<T> sn = res.staged;
      sn.W_eff.clear();
      for (int l = 0; l < params.n_layers(); ++l) {
        Tensor<T> u = gate_noise(params.log_alpha[static_cast<std::size_t>(l)],
                                 *opts.gate_rng);
        NodeId m = sample_gates(tape, sn.log_alpha[static_cast<std::size_t>(l)], u,
                                spec.gates);
        sn.W_eff.push_back(tape.mul(sn.W[static_cast<std::size_t>(l)], m));
      }
      Tensor<T> xrow = Tensor<T>::zeros(1, X.cols());
      for (std::int64_t c = 0; c < X.cols(); ++c) xrow.at(0, c) = X.at(n, c);
      ForwardTrace<T> trn = forward(tape, sn, tape.constant(std::move(xrow)), fo);
      std::vector<int> yn{labels[static_cast<std::size_t>(n)]};
      NodeId ln = spec.flags.robust
                      ? robust_cross_entropy(tape, sn, trn, yn, spec.rho)
                      : cross_entropy(tape, trn.logits, yn);
      scalar_losses.push_back(ln);
      if (n == 0) res.trace = trn;
    }
  }

  NodeId data_term;
  if (spec.flags.stable) {
    res.staged.theta = tape.leaf(Tensor<T>::scalar(params.theta), /*is_param=*/true);
    res.a_count = opts.a_override > 0 ? opts.a_override
                                      : cvar_count(spec.a_fraction, B);
    if (res.a_count > B) throw std::invalid_argument("compose: a exceeds batch size");
    if (!per_ex_gates) {
      data_term = cvar_wrap(tape, res.per_example, res.staged.theta, res.a_count);
    } else {
      std::vector<NodeId> hinged;
      for (NodeId ln : scalar_losses) {
        hinged.push_back(tape.hinge_pos(tape.add(ln, tape.scale(res.staged.theta, -1.0))));
      }
      data_term = tape.add(
          tape.scale(detail::add_chain(tape, hinged), 1.0 / static_cast<double>(res.a_count)),
          res.staged.theta);
    }
  } else {
    data_term = per_ex_gates
                    ? tape.scale(detail::add_chain(tape, scalar_losses),
                                 1.0 / static_cast<double>(B))
                    : tape.mean(res.per_example);
  }

  if (spec.flags.sparse && spec.lambda > 0.0) {
    res.l0 = l0_penalty(tape, res.staged.log_alpha, spec.gates);
    res.loss = tape.add(data_term, tape.scale(res.l0, spec.lambda));
  } else {
    if (spec.flags.sparse) res.l0 = l0_penalty(tape, res.staged.log_alpha, spec.gates);
    res.loss = data_term;
  }
  return res;
}

// ----- closed-form CVaR helpers (no tape) -----

// theta + (1/a) * sum [l - theta]^+.
inline double cvar_hinge_value(const std::vector<double>& losses, int a, double theta) {
  if (a < 1 || a > static_cast<int>(losses.size())) {
    throw std::invalid_argument("cvar_hinge_value: a out of range");
  }
  double s = 0.0;
  for (double l : losses) s += std::max(0.0, l - theta);
  return theta + s / static_cast<double>(a);
}

// Mean of the a largest entries.
inline double cvar_topk_mean(std::vector<double> losses, int a) {
  if (a < 1 || a > static_cast<int>(losses.size())) {
    throw std::invalid_argument("cvar_topk_mean: a out of range");
  }
  std::nth_element(losses.begin(), losses.begin() + (a - 1), losses.end(),
                   std::greater<double>());
  double s = 0.0;
  for (int i = 0; i < a; ++i) s += losses[static_cast<std::size_t>(i)];
  return s / static_cast<double>(a);
}

// Exact min over theta of the hinge form. The objective is piecewise linear
// with breakpoints at the losses, so the minimum sits on one of them; the
// minimizing theta (the a-th largest loss) is also reported.
inline double cvar_min_theta(const std::vector<double>& losses, int a,
                             double* theta_out = nullptr) {
  if (a < 1 || a > static_cast<int>(losses.size())) {
    throw std::invalid_argument("cvar_min_theta: a out of range");
  }
  double best = std::numeric_limits<double>::infinity();
  double best_theta = 0.0;
  for (double t : losses) {
    double v = cvar_hinge_value(losses, a, t);
    if (v < best) {
      best = v;
      best_theta = t;
    }
  }
  if (theta_out) *theta_out = best_theta;
  return best;
}

}  // namespace trinet
