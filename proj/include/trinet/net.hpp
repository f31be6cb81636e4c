#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "trinet/gates.hpp"
#include "trinet/graph.hpp"
#include "trinet/rng.hpp"
#include "trinet/tensor.hpp"

namespace trinet {

// Feed-forward ReLU classifier. layer_sizes = [input, hidden..., classes];
// W[l] maps r_l -> r_{l+1} in row-batch convention (z = h W + b). When gated,
// log_alpha[l] holds one hard-concrete parameter per weight; biases carry no
// gates. theta is the CVaR threshold, optimized jointly when the stability
// term is active.
template <typename T>
struct MlpParams {
  std::vector<std::int64_t> layer_sizes;
  std::vector<Tensor<T>> W;
  std::vector<Tensor<T>> b;
  std::vector<Tensor<T>> log_alpha;  // empty when ungated
  T theta = T(0);

  int n_layers() const { return static_cast<int>(W.size()); }
  bool gated() const { return !log_alpha.empty(); }
  std::int64_t input_dim() const { return layer_sizes.front(); }
  std::int64_t n_classes() const { return layer_sizes.back(); }
};

// Glorot-uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases,
// log_alpha ~ Normal(2.0, 0.1) when gated. Same seed, same bits.
template <typename T>
MlpParams<T> init_mlp(const std::vector<std::int64_t>& layer_sizes, std::uint64_t seed,
                      bool gated = false) {
  if (layer_sizes.size() < 2) {
    throw std::invalid_argument("init_mlp: need at least input and output sizes");
  }
  for (auto s : layer_sizes) {
    if (s <= 0) throw std::invalid_argument("init_mlp: layer sizes must be positive");
  }
  MlpParams<T> p;
  p.layer_sizes = layer_sizes;
  const int L = static_cast<int>(layer_sizes.size()) - 1;
  for (int l = 0; l < L; ++l) {
    const std::int64_t fan_in = layer_sizes[l], fan_out = layer_sizes[l + 1];
    Rng rng(seed, "init", static_cast<std::uint64_t>(l));
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor<T> w = Tensor<T>::zeros(fan_in, fan_out);
    for (auto& v : w.data) v = static_cast<T>(rng.uniform(-limit, limit));
    p.W.push_back(std::move(w));
    p.b.push_back(Tensor<T>::zeros(1, fan_out));
    if (gated) {
      Rng grng(seed, "gates", static_cast<std::uint64_t>(l));
      Tensor<T> la = Tensor<T>::zeros(fan_in, fan_out);
      for (auto& v : la.data) v = static_cast<T>(grng.normal(2.0, 0.1));
      p.log_alpha.push_back(std::move(la));
    }
  }
  return p;
}

enum class RunMode { train, eval };

// Parameter leaves staged onto a tape, with effective (gated) weights.
template <typename T>
struct Staged {
  std::vector<NodeId> W, b, log_alpha;
  std::vector<NodeId> W_eff;  // equals W when ungated
  NodeId theta = -1;          // staged only when the loss asks for it
  bool gated = false;
  int n_layers() const { return static_cast<int>(W.size()); }
};

// Stage parameters as leaves. Gated training samples one shared gate tensor
// per layer from `gate_rng`; gated evaluation applies the deterministic test
// mask. Ungated nets alias W_eff to W.
template <typename T>
Staged<T> stage_params(Tape<T>& tape, const MlpParams<T>& p, RunMode mode,
                       const GateConfig& gcfg = GateConfig{}, Rng* gate_rng = nullptr) {
  Staged<T> s;
  s.gated = p.gated();
  for (int l = 0; l < p.n_layers(); ++l) {
    s.W.push_back(tape.leaf(p.W[l], /*is_param=*/true));
    s.b.push_back(tape.leaf(p.b[l], /*is_param=*/true));
    if (!p.gated()) {
      s.W_eff.push_back(s.W[l]);
      continue;
    }
    s.log_alpha.push_back(tape.leaf(p.log_alpha[l], /*is_param=*/true));
    if (mode == RunMode::train) {
      if (gate_rng == nullptr) {
        throw std::invalid_argument("stage_params: gated training needs a gate rng");
      }
      Tensor<T> u = gate_noise(p.log_alpha[l], *gate_rng);
      NodeId m = sample_gates(tape, s.log_alpha[l], u, gcfg);
      s.W_eff.push_back(tape.mul(s.W[l], m));
    } else {
      NodeId m = tape.constant(test_mask(p.log_alpha[l], gcfg));
      s.W_eff.push_back(tape.mul(s.W[l], m));
    }
  }
  return s;
}

template <typename T>
struct ForwardOpts {
  RunMode mode = RunMode::eval;
  double dropout = 0.0;  // drop probability on hidden activations, train only
  Rng* dropout_rng = nullptr;
  // Pre-drawn inverted-dropout masks (entries 0 or 1/(1-p)), one per hidden
  // layer. Lets tests pin the stochastic part of the objective.
  const std::vector<Tensor<T>>* dropout_masks = nullptr;
};

// Forward trace: logits plus the constants later passes need. relu_masks[l]
// is the 0/1 activation pattern of hidden layer l+1 (B x r_{l+1}); the
// pre-activation node ids allow boundary checks.
template <typename T>
struct ForwardTrace {
  NodeId logits = -1;
  std::vector<Tensor<T>> relu_masks;
  std::vector<NodeId> pre;
};

template <typename T>
ForwardTrace<T> forward(Tape<T>& tape, const Staged<T>& s, NodeId X,
                        const ForwardOpts<T>& opts = {}) {
  const int L = s.n_layers();
  ForwardTrace<T> tr;
  NodeId h = X;
  for (int l = 0; l < L; ++l) {
    NodeId z = tape.add(tape.matmul(h, s.W_eff[l]), s.b[l]);
    tr.pre.push_back(z);
    if (l == L - 1) {
      tr.logits = z;
      break;
    }
    const Tensor<T>& zv = tape.val(z);
    Tensor<T> mask = zv;
    for (auto& v : mask.data) v = v > T(0) ? T(1) : T(0);
    tr.relu_masks.push_back(std::move(mask));
    h = tape.relu(z);
    if (opts.mode == RunMode::train && opts.dropout > 0.0) {
      if (!(opts.dropout < 1.0)) {
        throw std::invalid_argument("forward: dropout must be in [0,1)");
      }
      if (opts.dropout_masks != nullptr) {
        h = tape.mul(h, tape.constant(opts.dropout_masks->at(static_cast<std::size_t>(l))));
      } else {
        if (opts.dropout_rng == nullptr) {
          throw std::invalid_argument("forward: dropout needs an rng in train mode");
        }
        const Tensor<T>& hv = tape.val(h);
        Tensor<T> dmask = hv;
        const T keep_scale = static_cast<T>(1.0 / (1.0 - opts.dropout));
        for (auto& v : dmask.data) {
          v = (opts.dropout_rng->uniform() < opts.dropout) ? T(0) : keep_scale;
        }
        h = tape.mul(h, tape.constant(std::move(dmask)));
      }
    }
  }
  return tr;
}

// Argmax class per row; ties resolve to the lowest index.
template <typename T>
std::vector<int> predict_rows(const Tensor<T>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (std::int64_t r = 0; r < logits.rows(); ++r) {
    int best = 0;
    for (std::int64_t c = 1; c < logits.cols(); ++c) {
      if (logits.at(r, c) > logits.at(r, best)) best = static_cast<int>(c);
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

// Input Jacobian of the logits for one example, as a graph node (K x M).
// The chain W1 diag(d1) W2 ... WL uses the traced activation patterns as
// constants, so the node is linear in the staged weights and differentiable
// through them, while matching the network's local linearization exactly.
template <typename T>
NodeId input_jacobian(Tape<T>& tape, const Staged<T>& s, const ForwardTrace<T>& tr,
                      std::int64_t example) {
  const int L = s.n_layers();
  if (static_cast<int>(tr.relu_masks.size()) != L - 1) {
    throw std::invalid_argument("input_jacobian: trace does not match network depth");
  }
  NodeId t = s.W_eff[L - 1];
  const std::int64_t K = tape.val(t).shape[1];
  for (int l = L - 2; l >= 0; --l) {
    const Tensor<T>& mask = tr.relu_masks[static_cast<std::size_t>(l)];
    if (example < 0 || example >= mask.rows()) {
      throw std::invalid_argument("input_jacobian: example index out of range");
    }
    const std::int64_t r = mask.cols();
    Tensor<T> d = Tensor<T>::zeros(r, K);
    for (std::int64_t i = 0; i < r; ++i) {
      T m = mask.at(example, i);
      for (std::int64_t k = 0; k < K; ++k) d.at(i, k) = m;
    }
    t = tape.matmul(s.W_eff[l], tape.mul(tape.constant(std::move(d)), t));
  }
  return tape.transpose(t);
}

// Batched l1 norms of the margin-difference Jacobian rows:
// out[n,k] = || grad_x (z_k - z_{y_n}) ||_1 as a (B x K) node.
//
// One matmul chain serves the whole batch: the last layer is seeded with
// [W_L S_1 | ... | W_L S_B], S_n = I - e_{y_n} 1^T, and each earlier layer
// applies its per-example activation pattern as a constant elementwise
// factor before the shared weight multiplies in. Column n*K+k of the result
// is grad_x (z_k - z_{y_n}); absolute column sums then land in row-major
// (B x K) order, so the final reshape is pure bookkeeping.
template <typename T>
NodeId margin_l1_rows(Tape<T>& tape, const Staged<T>& s, const ForwardTrace<T>& tr,
                      const std::vector<int>& labels) {
  const int L = s.n_layers();
  const std::int64_t B = static_cast<std::int64_t>(labels.size());
  const std::int64_t K = tape.val(s.W_eff[L - 1]).shape[1];
  const std::int64_t M = tape.val(s.W_eff[0]).shape[0];
  for (int y : labels) {
    if (y < 0 || y >= K) throw std::invalid_argument("margin_l1_rows: label out of range");
  }

  Tensor<T> S = Tensor<T>::zeros(K, K * B);
  for (std::int64_t n = 0; n < B; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    for (std::int64_t j = 0; j < K; ++j) {
      S.at(j, n * K + j) += T(1);
      S.at(y, n * K + j) -= T(1);
    }
  }
  NodeId t = tape.matmul(s.W_eff[L - 1], tape.constant(std::move(S)));
  for (int l = L - 2; l >= 0; --l) {
    const Tensor<T>& mask = tr.relu_masks[static_cast<std::size_t>(l)];
    if (mask.rows() != B) {
      throw std::invalid_argument("margin_l1_rows: trace batch does not match labels");
    }
    const std::int64_t r = mask.cols();
    Tensor<T> d = Tensor<T>::zeros(r, K * B);
    for (std::int64_t n = 0; n < B; ++n)
      for (std::int64_t i = 0; i < r; ++i) {
        T m = mask.at(n, i);
        for (std::int64_t k = 0; k < K; ++k) d.at(i, n * K + k) = m;
      }
    t = tape.matmul(s.W_eff[l], tape.mul(tape.constant(std::move(d)), t));
  }
  NodeId col_l1 = tape.matmul(tape.constant(Tensor<T>::full(1, M, T(1))), tape.abs(t));
  return tape.reshape(col_l1, {B, K});
}

// Checkpoint container (versioned binary, see README). Implemented in
// src/checkpoint.cpp.
void save_checkpoint(const std::string& path, const MlpParams<float>& p);
void save_checkpoint(const std::string& path, const MlpParams<double>& p);
// Reads a checkpoint whose stored precision matches T (error otherwise).
template <typename T>
MlpParams<T> load_checkpoint(const std::string& path);
// Stored precision width in bytes (4 or 8) without loading the tensors.
int checkpoint_precision(const std::string& path);

}  // namespace trinet
