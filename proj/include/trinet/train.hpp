#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "trinet/data.hpp"
#include "trinet/loss.hpp"
#include "trinet/metrics.hpp"
#include "trinet/net.hpp"
#include "trinet/rng.hpp"

namespace trinet {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// First/second moment buffers for one parameter tensor.
template <typename T>
struct AdamSlot {
  std::vector<T> m, v;
};

// Bias-corrected Adam update on a flat buffer; `decay` switches on decoupled
// l2 (added to the update, outside the moment estimates). `t` counts steps
// from 1. Throws on any non-finite gradient, naming the parameter.
template <typename T>
void adam_step(T* w, const T* g, std::size_t n, AdamSlot<T>& slot, std::int64_t t,
               const AdamConfig& cfg, bool decay, const std::string& name) {
  if (t < 1) throw std::invalid_argument("adam_step: t counts from 1");
  if (slot.m.empty()) {
    slot.m.assign(n, T(0));
    slot.v.assign(n, T(0));
  }
  if (slot.m.size() != n || slot.v.size() != n) {
    throw std::invalid_argument("adam_step: state size does not match " + name);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(g[i]))) {
      throw std::runtime_error("adam_step: non-finite gradient in " + name);
    }
  }
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T bc1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(t)));
  const T bc2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(t)));
  for (std::size_t i = 0; i < n; ++i) {
    slot.m[i] = b1 * slot.m[i] + (T(1) - b1) * g[i];
    slot.v[i] = b2 * slot.v[i] + (T(1) - b2) * g[i] * g[i];
    T update = (slot.m[i] / bc1) / (std::sqrt(slot.v[i] / bc2) + static_cast<T>(cfg.eps));
    if (decay) update += static_cast<T>(cfg.weight_decay) * w[i];
    w[i] -= static_cast<T>(cfg.lr) * update;
  }
}

template <typename T>
void adam_step(std::vector<T>& w, const std::vector<T>& g, AdamSlot<T>& slot, std::int64_t t,
               const AdamConfig& cfg, bool decay, const std::string& name) {
  if (w.size() != g.size()) {
    throw std::invalid_argument("adam_step: gradient size does not match " + name);
  }
  adam_step(w.data(), g.data(), w.size(), slot, t, cfg, decay, name);
}

// Moment buffers for a whole network, in staging order: per layer W then b,
// then the gate parameters, then theta.
template <typename T>
struct AdamState {
  std::vector<AdamSlot<T>> slots;
  std::int64_t t = 0;
};

struct TrainConfig {
  std::vector<std::int64_t> hidden;  // hidden layer widths
  double lr = 1e-3;
  std::int64_t batch = 128;
  std::int64_t max_iterations = 50000;
  std::int64_t validate_every = 1000;
  double dropout = 0.0;
  LossSpec loss;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) {
      throw std::invalid_argument("TrainConfig: lr must be positive");
    }
    if (batch < 1) throw std::invalid_argument("TrainConfig: batch must be >= 1");
    if (max_iterations < 0) {
      throw std::invalid_argument("TrainConfig: max_iterations must be >= 0");
    }
    if (validate_every < 1) {
      throw std::invalid_argument("TrainConfig: validate_every must be >= 1");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
      throw std::invalid_argument("TrainConfig: dropout must be in [0,1)");
    }
    for (auto h : hidden) {
      if (h <= 0) throw std::invalid_argument("TrainConfig: hidden sizes must be positive");
    }
    loss.validate();
  }
};

template <typename T>
struct Checkpoint {
  MlpParams<T> params;
  std::int64_t iteration = 0;
  double val_acc = 0.0;
  MetricBundle metrics;
};

struct HistoryRow {
  std::int64_t iteration = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double val_acc = 0.0;
  double expected_l0 = std::numeric_limits<double>::quiet_NaN();  // gated only
  double theta = std::numeric_limits<double>::quiet_NaN();        // stable only
};

template <typename T>
struct FitResult {
  Checkpoint<T> best;
  std::vector<HistoryRow> history;
};

// Closed-form expected count of open gates, summed over layers.
template <typename T>
double expected_l0(const MlpParams<T>& p, const GateConfig& gcfg) {
  if (!p.gated()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (const auto& la : p.log_alpha) {
    for (T v : la.data) total += prob_nonzero(static_cast<double>(v), gcfg);
  }
  return total;
}

namespace detail {

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& X, const std::vector<std::int64_t>& idx) {
  Tensor<T> out = Tensor<T>::zeros(static_cast<std::int64_t>(idx.size()), X.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const T* src = X.data.data() + idx[i] * X.cols();
    std::copy(src, src + X.cols(), out.data.data() + static_cast<std::int64_t>(i) * X.cols());
  }
  return out;
}

inline std::vector<int> gather_labels(const std::vector<int>& y,
                                      const std::vector<std::int64_t>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = y[static_cast<std::size_t>(idx[i])];
  return out;
}

// One Adam sweep over every parameter the staged graph exposes. Weight decay
// touches weights and biases only, never gate parameters or theta.
template <typename T>
void apply_gradients(MlpParams<T>& p, Tape<T>& tape, const Staged<T>& s, AdamState<T>& state,
                     const AdamConfig& cfg) {
  const int L = p.n_layers();
  const int n_gate = static_cast<int>(s.log_alpha.size());
  const std::size_t n_slots =
      static_cast<std::size_t>(2 * L + n_gate + (s.theta >= 0 ? 1 : 0));
  if (state.slots.empty()) state.slots.resize(n_slots);
  if (state.slots.size() != n_slots) {
    throw std::invalid_argument("apply_gradients: state does not match network");
  }
  ++state.t;
  std::size_t slot = 0;
  for (int l = 0; l < L; ++l) {
    const std::string tag = "[" + std::to_string(l) + "]";
    adam_step(p.W[l].data, tape.grad_or_zero(s.W[l]).data, state.slots[slot++], state.t, cfg,
              /*decay=*/true, "W" + tag);
    adam_step(p.b[l].data, tape.grad_or_zero(s.b[l]).data, state.slots[slot++], state.t, cfg,
              /*decay=*/true, "b" + tag);
  }
  for (int l = 0; l < n_gate; ++l) {
    adam_step(p.log_alpha[l].data, tape.grad_or_zero(s.log_alpha[l]).data, state.slots[slot++],
              state.t, cfg, /*decay=*/false, "log_alpha[" + std::to_string(l) + "]");
  }
  if (s.theta >= 0) {
    const T g = tape.grad_or_zero(s.theta).data[0];
    adam_step(&p.theta, &g, 1, state.slots[slot++], state.t, cfg, /*decay=*/false, "theta");
  }
}

}  // namespace detail

// Train one network on the dataset's train split, validating natural accuracy
// on the val split every `validate_every` iterations (and at iteration 0 and
// the final iteration). Returns the checkpoint with the highest validation
// accuracy (ties resolve to the earliest) plus the validation history.
template <typename T>
FitResult<T> fit(const Dataset<T>& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.split.empty()) throw std::invalid_argument("fit: dataset split not assigned");
  if (ds.split.train.empty() || ds.split.val.empty()) {
    throw std::invalid_argument("fit: empty train or val split");
  }

  std::vector<std::int64_t> sizes;
  sizes.push_back(ds.dim());
  for (auto h : cfg.hidden) sizes.push_back(h);
  sizes.push_back(ds.n_classes);
  MlpParams<T> p = init_mlp<T>(sizes, cfg.seed, cfg.loss.flags.sparse);

  const Tensor<T> X_val = detail::gather_rows(ds.X, ds.split.val);
  const std::vector<int> y_val = detail::gather_labels(ds.y, ds.split.val);

  Rng shuffle_rng(cfg.seed, "batch-shuffle");
  Rng gate_rng(cfg.seed, "gate-noise");
  Rng drop_rng(cfg.seed, "dropout");
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = cfg.loss.weight_decay;
  AdamState<T> state;

  FitResult<T> out;
  double last_loss = std::numeric_limits<double>::quiet_NaN();
  bool have_best = false;

  auto record = [&](std::int64_t iter) {
    const double acc = natural_accuracy(p, X_val, y_val, cfg.loss.gates);
    HistoryRow row;
    row.iteration = iter;
    row.train_loss = last_loss;
    row.val_acc = acc;
    row.expected_l0 = expected_l0(p, cfg.loss.gates);
    if (cfg.loss.flags.stable) row.theta = static_cast<double>(p.theta);
    out.history.push_back(row);
    if (!have_best || acc > out.best.val_acc) {
      have_best = true;
      out.best.params = p;
      out.best.iteration = iter;
      out.best.val_acc = acc;
      out.best.metrics = MetricBundle{};
      out.best.metrics.natural_acc = acc;
      out.best.metrics.sparsity = sparsity_fraction(p, cfg.loss.gates);
    }
  };

  std::vector<std::int64_t> perm = ds.split.train;
  const auto n_train = static_cast<std::int64_t>(perm.size());
  std::int64_t cursor = n_train;  // forces a shuffle before the first batch

  {
    // Loss of the untrained network on the first train rows, eval-mode, so
    // the iteration-0 history row is defined without consuming rng streams.
    const std::int64_t take = std::min<std::int64_t>(cfg.batch, n_train);
    std::vector<std::int64_t> head(perm.begin(), perm.begin() + take);
    Tape<T> tape;
    ComposeOpts<T> opts;
    opts.mode = RunMode::eval;
    auto res = compose(tape, p, detail::gather_rows(ds.X, head),
                       detail::gather_labels(ds.y, head), cfg.loss, opts);
    last_loss = static_cast<double>(tape.val(res.loss).data[0]);
  }
  record(0);

  for (std::int64_t it = 1; it <= cfg.max_iterations; ++it) {
    if (cursor >= n_train) {
      shuffle(perm, shuffle_rng);
      cursor = 0;
    }
    const std::int64_t take = std::min<std::int64_t>(cfg.batch, n_train - cursor);
    std::vector<std::int64_t> idx(perm.begin() + cursor, perm.begin() + cursor + take);
    cursor += take;

    Tape<T> tape;
    ComposeOpts<T> opts;
    opts.mode = RunMode::train;
    opts.dropout = cfg.dropout;
    opts.dropout_rng = &drop_rng;
    opts.gate_rng = &gate_rng;
    auto res = compose(tape, p, detail::gather_rows(ds.X, idx),
                       detail::gather_labels(ds.y, idx), cfg.loss, opts);
    last_loss = static_cast<double>(tape.val(res.loss).data[0]);
    if (!std::isfinite(last_loss)) {
      throw std::runtime_error("fit: non-finite loss at iteration " + std::to_string(it));
    }
    tape.backward(res.loss);
    try {
      detail::apply_gradients(p, tape, res.staged, state, acfg);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(std::string(e.what()) + " at iteration " + std::to_string(it));
    }

    if (it % cfg.validate_every == 0 || it == cfg.max_iterations) record(it);
  }
  return out;
}

template <typename T>
struct RunRecord {
  std::uint64_t seed = 0;
  Checkpoint<T> best;
  std::vector<HistoryRow> history;
  SplitIndices split;
  std::vector<int> test_predictions;  // on the shared test set, input order
  MetricBundle test_metrics;          // natural accuracy + sparsity on test
};

template <typename T>
struct MultiSeedResult {
  std::vector<RunRecord<T>> runs;
  MetricBundle aggregate;  // mean over seeds; stability across seeds
};

// One fit per seed. The test block is pinned by `test_seed` so every seed
// (and every objective sharing the seed list) scores against the same test
// set; train/val are re-dealt per seed, and initialization reseeds too.
template <typename T>
MultiSeedResult<T> multi_seed(const Dataset<T>& ds, const TrainConfig& cfg,
                              const std::vector<std::uint64_t>& seeds,
                              std::uint64_t test_seed = 0) {
  if (seeds.empty()) throw std::invalid_argument("multi_seed: need at least one seed");
  Dataset<T> work = ds;
  MultiSeedResult<T> out;
  std::vector<std::vector<int>> preds;
  double acc_sum = 0.0, sp_sum = 0.0;
  for (std::uint64_t seed : seeds) {
    work.split = make_split_fixed_test(work.y, work.n_classes, test_seed, seed);
    TrainConfig c = cfg;
    c.seed = seed;
    FitResult<T> fr = fit(work, c);

    RunRecord<T> rec;
    rec.seed = seed;
    rec.split = work.split;
    const Tensor<T> X_te = detail::gather_rows(work.X, rec.split.test);
    const std::vector<int> y_te = detail::gather_labels(work.y, rec.split.test);
    rec.test_predictions = predict_all(fr.best.params, X_te, cfg.loss.gates);
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < y_te.size(); ++i) {
      hits += rec.test_predictions[i] == y_te[i];
    }
    rec.test_metrics.natural_acc = static_cast<double>(hits) / static_cast<double>(y_te.size());
    rec.test_metrics.sparsity = sparsity_fraction(fr.best.params, cfg.loss.gates);
    rec.best = std::move(fr.best);
    rec.history = std::move(fr.history);

    acc_sum += rec.test_metrics.natural_acc;
    sp_sum += rec.test_metrics.sparsity;
    preds.push_back(rec.test_predictions);
    out.runs.push_back(std::move(rec));
  }
  const auto s = static_cast<double>(seeds.size());
  out.aggregate.natural_acc = acc_sum / s;
  out.aggregate.sparsity = sp_sum / s;
  if (seeds.size() >= 2) {
    out.aggregate.stability = stability_score(preds, ds.n_classes);
  }
  return out;
}

}  // namespace trinet
