#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "trinet/tensor.hpp"

namespace trinet {

using NodeId = std::int32_t;

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  relu,
  sigmoid,
  exp,
  log,
  logsumexp_rows,
  abs,
  sum,
  mean,
  elemwise_mul,
  hinge_pos,
  scale,
  // Structural kinds used internally by the Jacobian assembly. Pure data
  // movement; not reachable through forward_op.
  transpose,
  reshape,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::logsumexp_rows: return "logsumexp_rows";
    case OpKind::abs: return "abs";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::elemwise_mul: return "elemwise_mul";
    case OpKind::hinge_pos: return "hinge_pos";
    case OpKind::scale: return "scale";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
  }
  return "?";
}

// Reverse-mode tape. Append-only, single use: build the graph for one
// minibatch, call backward once, then discard. Gradients accumulate into
// per-node adjoints in one reverse sweep; only subtrees that reach a
// parameter leaf are propagated into.
template <typename T>
class Tape {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using CMatMap = Eigen::Map<const Mat>;

  struct Node {
    OpKind kind;
    NodeId a = -1, b = -1;
    Tensor<T> value;
    double attr = 0.0;  // scale factor
    bool is_param = false;
    bool needs_grad = false;
  };

  NodeId leaf(Tensor<T> v, bool is_param = false) {
    check_open("leaf");
    Node n;
    n.kind = OpKind::leaf;
    n.value = std::move(v);
    n.is_param = is_param;
    n.needs_grad = is_param;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }
  NodeId constant(Tensor<T> v) { return leaf(std::move(v), false); }

  // Public dispatcher over the supported op kinds. `inputs` arity must match
  // the kind; `attr` is the factor for scale and ignored elsewhere.
  NodeId forward_op(OpKind kind, const std::vector<NodeId>& inputs, double attr = 0.0) {
    switch (kind) {
      case OpKind::matmul: return matmul(arg2(kind, inputs, 0), arg2(kind, inputs, 1));
      case OpKind::add: return add(arg2(kind, inputs, 0), arg2(kind, inputs, 1));
      case OpKind::elemwise_mul: return mul(arg2(kind, inputs, 0), arg2(kind, inputs, 1));
      case OpKind::relu: return relu(arg1(kind, inputs));
      case OpKind::sigmoid: return sigmoid(arg1(kind, inputs));
      case OpKind::exp: return exp(arg1(kind, inputs));
      case OpKind::log: return log(arg1(kind, inputs));
      case OpKind::logsumexp_rows: return logsumexp_rows(arg1(kind, inputs));
      case OpKind::abs: return abs(arg1(kind, inputs));
      case OpKind::sum: return sum(arg1(kind, inputs));
      case OpKind::mean: return mean(arg1(kind, inputs));
      case OpKind::hinge_pos: return hinge_pos(arg1(kind, inputs));
      case OpKind::scale: return scale(arg1(kind, inputs), attr);
      default:
        throw std::invalid_argument(std::string("forward_op: unsupported op kind '") +
                                    op_name(kind) + "'");
    }
  }

  NodeId matmul(NodeId a, NodeId b) {
    check_open("matmul");
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    require(A.rank() == 2 && B.rank() == 2, "matmul", A, B, "operands must be rank 2");
    require(A.shape[1] == B.shape[0], "matmul", A, B, "inner dimensions differ");
    Tensor<T> C = Tensor<T>::zeros(A.shape[0], B.shape[1]);
    CMatMap ma(A.data.data(), A.shape[0], A.shape[1]);
    CMatMap mb(B.data.data(), B.shape[0], B.shape[1]);
    MatMap mc(C.data.data(), C.shape[0], C.shape[1]);
    mc.noalias() = ma * mb;
    return push(OpKind::matmul, a, b, std::move(C));
  }

  // Equal shapes, or matrix + broadcast row vector (1 x n against m x n);
  // that covers bias addition and scalar-against-column cases.
  NodeId add(NodeId a, NodeId b) {
    check_open("add");
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    Tensor<T> C;
    if (A.same_shape(B)) {
      C = A;
      for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] += B.data[i];
    } else if (A.rank() == 2 && B.rank() == 2 && B.shape[0] == 1 &&
               A.shape[1] == B.shape[1]) {
      C = A;
      for (std::int64_t r = 0; r < A.shape[0]; ++r)
        for (std::int64_t c = 0; c < A.shape[1]; ++c) C.at(r, c) += B.at(0, c);
    } else {
      require(false, "add", A, B, "shapes must match, or rhs must be a broadcast row");
    }
    return push(OpKind::add, a, b, std::move(C));
  }

  NodeId mul(NodeId a, NodeId b) {
    check_open("elemwise_mul");
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    require(A.same_shape(B), "elemwise_mul", A, B, "shapes must match");
    Tensor<T> C = A;
    for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] *= B.data[i];
    return push(OpKind::elemwise_mul, a, b, std::move(C));
  }

  NodeId relu(NodeId a) { return unary(OpKind::relu, a, [](T x) { return x > T(0) ? x : T(0); }); }
  NodeId hinge_pos(NodeId a) {
    return unary(OpKind::hinge_pos, a, [](T x) { return x > T(0) ? x : T(0); });
  }
  NodeId sigmoid(NodeId a) {
    return unary(OpKind::sigmoid, a, [](T x) {
      // Branch keeps exp argument non-positive for stability at both tails.
      if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
      T e = std::exp(x);
      return e / (T(1) + e);
    });
  }
  NodeId exp(NodeId a) { return unary(OpKind::exp, a, [](T x) { return std::exp(x); }); }
  NodeId log(NodeId a) { return unary(OpKind::log, a, [](T x) { return std::log(x); }); }
  NodeId abs(NodeId a) { return unary(OpKind::abs, a, [](T x) { return std::abs(x); }); }
  NodeId scale(NodeId a, double c) {
    check_open("scale");
    Tensor<T> C = val(a);
    for (auto& v : C.data) v *= static_cast<T>(c);
    NodeId id = push(OpKind::scale, a, -1, std::move(C));
    nodes_[id].attr = c;
    return id;
  }

  // Row-wise log(sum(exp(.))): (m x n) -> (m x 1). Max-shifted.
  NodeId logsumexp_rows(NodeId a) {
    check_open("logsumexp_rows");
    const Tensor<T>& A = val(a);
    require(A.rank() == 2, "logsumexp_rows", A, A, "operand must be rank 2");
    Tensor<T> C = Tensor<T>::zeros(A.shape[0], 1);
    for (std::int64_t r = 0; r < A.shape[0]; ++r) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::int64_t c = 0; c < A.shape[1]; ++c) m = std::max(m, A.at(r, c));
      T s = T(0);
      for (std::int64_t c = 0; c < A.shape[1]; ++c) s += std::exp(A.at(r, c) - m);
      C.at(r, 0) = m + std::log(s);
    }
    return push(OpKind::logsumexp_rows, a, -1, std::move(C));
  }

  NodeId sum(NodeId a) {
    check_open("sum");
    const Tensor<T>& A = val(a);
    T s = T(0);
    for (T v : A.data) s += v;
    return push(OpKind::sum, a, -1, Tensor<T>::scalar(s));
  }
  NodeId mean(NodeId a) {
    check_open("mean");
    const Tensor<T>& A = val(a);
    T s = T(0);
    for (T v : A.data) s += v;
    return push(OpKind::mean, a, -1, Tensor<T>::scalar(s / static_cast<T>(A.numel())));
  }

  NodeId transpose(NodeId a) {
    check_open("transpose");
    const Tensor<T>& A = val(a);
    require(A.rank() == 2, "transpose", A, A, "operand must be rank 2");
    Tensor<T> C = Tensor<T>::zeros(A.shape[1], A.shape[0]);
    for (std::int64_t r = 0; r < A.shape[0]; ++r)
      for (std::int64_t c = 0; c < A.shape[1]; ++c) C.at(c, r) = A.at(r, c);
    return push(OpKind::transpose, a, -1, std::move(C));
  }

  NodeId reshape(NodeId a, std::vector<std::int64_t> shape) {
    check_open("reshape");
    Tensor<T> C(std::move(shape), val(a).data);
    if (C.numel() != val(a).numel()) {
      require(false, "reshape", val(a), C, "element counts differ");
    }
    return push(OpKind::reshape, a, -1, std::move(C));
  }

  // Invalidated by the next op push (nodes live in a growing vector); copy
  // out anything needed across further graph building.
  const Tensor<T>& val(NodeId id) const { return nodes_.at(check_id(id)).value; }
  std::size_t size() const { return nodes_.size(); }

  // One reverse accumulation sweep from a scalar root. The tape is spent
  // afterwards: no further ops, no second backward.
  void backward(NodeId root) {
    if (spent_) throw std::logic_error("backward: tape already used");
    const Tensor<T>& rv = val(root);
    if (!rv.is_scalar()) {
      throw std::invalid_argument("backward: root must be scalar, got shape " + rv.shape_str());
    }
    spent_ = true;
    adj_.assign(nodes_.size(), std::optional<Tensor<T>>());
    if (!nodes_[root].needs_grad) return;  // no parameter reaches the root
    adj_[root] = Tensor<T>(rv.shape, std::vector<T>(1, T(1)));
    for (NodeId i = root; i >= 0; --i) {
      if (!adj_[i].has_value()) continue;
      propagate(i);
    }
  }

  bool has_grad(NodeId id) const {
    return spent_ && adj_.at(check_id(id)).has_value();
  }
  // dRoot/dNode for nodes on a parameter path (any other id is an error).
  const Tensor<T>& grad(NodeId id) const {
    if (!spent_) throw std::logic_error("grad: backward has not run");
    const auto& g = adj_.at(check_id(id));
    if (!g.has_value()) {
      throw std::invalid_argument("grad: node " + std::to_string(id) +
                                  " is not on a parameter path");
    }
    return *g;
  }
  // Parameter leaves that do not influence the root get an explicit zero.
  Tensor<T> grad_or_zero(NodeId id) const {
    if (has_grad(id)) return grad(id);
    if (!spent_) throw std::logic_error("grad_or_zero: backward has not run");
    const Tensor<T>& v = val(id);
    return Tensor<T>(v.shape, std::vector<T>(v.data.size(), T(0)));
  }

 private:
  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor<T>>> adj_;
  bool spent_ = false;

  std::size_t check_id(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
      throw std::out_of_range("node id " + std::to_string(id) + " out of range");
    }
    return static_cast<std::size_t>(id);
  }
  void check_open(const char* what) const {
    if (spent_) throw std::logic_error(std::string(what) + ": tape already used");
  }
  static NodeId arg1(OpKind k, const std::vector<NodeId>& in) {
    if (in.size() != 1) {
      throw std::invalid_argument(std::string("forward_op: ") + op_name(k) +
                                  " takes 1 input, got " + std::to_string(in.size()));
    }
    return in[0];
  }
  static NodeId arg2(OpKind k, const std::vector<NodeId>& in, int i) {
    if (in.size() != 2) {
      throw std::invalid_argument(std::string("forward_op: ") + op_name(k) +
                                  " takes 2 inputs, got " + std::to_string(in.size()));
    }
    return in[static_cast<std::size_t>(i)];
  }

  void require(bool ok, const char* op, const Tensor<T>& A, const Tensor<T>& B,
               const char* msg) const {
    if (!ok) {
      throw std::invalid_argument(std::string(op) + ": " + msg + ": " + A.shape_str() +
                                  " vs " + B.shape_str());
    }
  }

  template <typename F>
  NodeId unary(OpKind k, NodeId a, F f) {
    check_open(op_name(k));
    Tensor<T> C = val(a);
    for (auto& v : C.data) v = f(v);
    return push(k, a, -1, std::move(C));
  }

  NodeId push(OpKind k, NodeId a, NodeId b, Tensor<T> v) {
    Node n;
    n.kind = k;
    n.a = a;
    n.b = b;
    n.value = std::move(v);
    n.needs_grad = (a >= 0 && nodes_[a].needs_grad) || (b >= 0 && nodes_[b].needs_grad);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  void acc(NodeId id, Tensor<T>&& g) {
    if (id < 0 || !nodes_[id].needs_grad) return;
    auto& slot = adj_[id];
    if (!slot.has_value()) {
      slot = std::move(g);
    } else {
      for (std::size_t i = 0; i < slot->data.size(); ++i) slot->data[i] += g.data[i];
    }
  }

  void propagate(NodeId i) {
    const Node& n = nodes_[i];
    const Tensor<T>& G = *adj_[i];
    switch (n.kind) {
      case OpKind::leaf:
        return;
      case OpKind::matmul: {
        const Tensor<T>& A = nodes_[n.a].value;
        const Tensor<T>& B = nodes_[n.b].value;
        CMatMap mg(G.data.data(), G.shape[0], G.shape[1]);
        if (nodes_[n.a].needs_grad) {
          Tensor<T> gA = Tensor<T>::zeros(A.shape[0], A.shape[1]);
          CMatMap mb(B.data.data(), B.shape[0], B.shape[1]);
          MatMap m(gA.data.data(), gA.shape[0], gA.shape[1]);
          m.noalias() = mg * mb.transpose();
          acc(n.a, std::move(gA));
        }
        if (nodes_[n.b].needs_grad) {
          Tensor<T> gB = Tensor<T>::zeros(B.shape[0], B.shape[1]);
          CMatMap ma(A.data.data(), A.shape[0], A.shape[1]);
          MatMap m(gB.data.data(), gB.shape[0], gB.shape[1]);
          m.noalias() = ma.transpose() * mg;
          acc(n.b, std::move(gB));
        }
        return;
      }
      case OpKind::add: {
        const Tensor<T>& A = nodes_[n.a].value;
        const Tensor<T>& B = nodes_[n.b].value;
        if (nodes_[n.a].needs_grad) acc(n.a, Tensor<T>(G));
        if (nodes_[n.b].needs_grad) {
          if (A.same_shape(B)) {
            acc(n.b, Tensor<T>(G));
          } else {
            Tensor<T> gB = Tensor<T>::zeros(1, B.shape[1]);
            for (std::int64_t r = 0; r < G.shape[0]; ++r)
              for (std::int64_t c = 0; c < G.shape[1]; ++c) gB.at(0, c) += G.at(r, c);
            acc(n.b, std::move(gB));
          }
        }
        return;
      }
      case OpKind::elemwise_mul: {
        const Tensor<T>& A = nodes_[n.a].value;
        const Tensor<T>& B = nodes_[n.b].value;
        if (nodes_[n.a].needs_grad) {
          Tensor<T> gA = G;
          for (std::size_t k = 0; k < gA.data.size(); ++k) gA.data[k] *= B.data[k];
          acc(n.a, std::move(gA));
        }
        if (nodes_[n.b].needs_grad) {
          Tensor<T> gB = G;
          for (std::size_t k = 0; k < gB.data.size(); ++k) gB.data[k] *= A.data[k];
          acc(n.b, std::move(gB));
        }
        return;
      }
      case OpKind::relu:
      case OpKind::hinge_pos: {
        // Subgradient 0 at the kink.
        const Tensor<T>& X = nodes_[n.a].value;
        Tensor<T> g = G;
        for (std::size_t k = 0; k < g.data.size(); ++k)
          g.data[k] = X.data[k] > T(0) ? g.data[k] : T(0);
        acc(n.a, std::move(g));
        return;
      }
      case OpKind::sigmoid: {
        const Tensor<T>& S = n.value;
        Tensor<T> g = G;
        for (std::size_t k = 0; k < g.data.size(); ++k)
          g.data[k] *= S.data[k] * (T(1) - S.data[k]);
        acc(n.a, std::move(g));
        return;
      }
      case OpKind::exp: {
        const Tensor<T>& E = n.value;
        Tensor<T> g = G;
        for (std::size_t k = 0; k < g.data.size(); ++k) g.data[k] *= E.data[k];
        acc(n.a, std::move(g));
        return;
      }
      case OpKind::log: {
        const Tensor<T>& X = nodes_[n.a].value;
        Tensor<T> g = G;
        for (std::size_t k = 0; k < g.data.size(); ++k) g.data[k] /= X.data[k];
        acc(n.a, std::move(g));
        return;
      }
      case OpKind::abs: {
        // Subgradient 0 at zero.
        const Tensor<T>& X = nodes_[n.a].value;
        Tensor<T> g = G;
        for (std::size_t k = 0; k < g.data.size(); ++k) {
          T x = X.data[k];
          g.data[k] = x > T(0) ? g.data[k] : (x < T(0) ? -g.data[k] : T(0));
        }
        acc(n.a, std::move(g));
        return;
      }
      case OpKind::logsumexp_rows: {
        const Tensor<T>& X = nodes_[n.a].value;
        const Tensor<T>& Y = n.value;
        Tensor<T> g = Tensor<T>::zeros(X.shape[0], X.shape[1]);
        for (std::int64_t r = 0; r < X.shape[0]; ++r) {
          T gr = G.at(r, 0);
          if (gr == T(0)) continue;
          for (std::int64_t c = 0; c < X.shape[1]; ++c)
            g.at(r, c) = gr * std::exp(X.at(r, c) - Y.at(r, 0));
        }
        acc(n.a, std::move(g));
        return;
      }
      case OpKind::sum: {
        const Tensor<T>& X = nodes_[n.a].value;
        acc(n.a, Tensor<T>(X.shape, std::vector<T>(X.data.size(), G.data[0])));
        return;
      }
      case OpKind::mean: {
        const Tensor<T>& X = nodes_[n.a].value;
        T v = G.data[0] / static_cast<T>(X.numel());
        acc(n.a, Tensor<T>(X.shape, std::vector<T>(X.data.size(), v)));
        return;
      }
      case OpKind::scale: {
        Tensor<T> g = G;
        for (auto& v : g.data) v *= static_cast<T>(n.attr);
        acc(n.a, std::move(g));
        return;
      }
      case OpKind::transpose: {
        const Tensor<T>& X = nodes_[n.a].value;
        Tensor<T> g = Tensor<T>::zeros(X.shape[0], X.shape[1]);
        for (std::int64_t r = 0; r < G.shape[0]; ++r)
          for (std::int64_t c = 0; c < G.shape[1]; ++c) g.at(c, r) = G.at(r, c);
        acc(n.a, std::move(g));
        return;
      }
      case OpKind::reshape: {
        const Tensor<T>& X = nodes_[n.a].value;
        acc(n.a, Tensor<T>(X.shape, G.data));
        return;
      }
    }
  }
};

}  // namespace trinet
