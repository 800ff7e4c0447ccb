#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "layercollapse/collapse.hpp"
#include "layercollapse/common.hpp"
#include "layercollapse/data.hpp"
#include "layercollapse/layers.hpp"
#include "layercollapse/loss.hpp"
#include "layercollapse/rng.hpp"
#include "layercollapse/tensor.hpp"

namespace lc {

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 5e-4;
  double momentum = 0.9;
  // (epoch index, multiplier): lr *= multiplier at the start of that epoch.
  std::vector<std::pair<std::size_t, double>> lr_schedule;
  RegConfig reg;
  double tau = 0.05;
  std::size_t max_epochs_per_layer = 10;

  void validate() const {
    if (lr <= 0.0) throw ConfigError("train: lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
      throw ConfigError("train: momentum must be in [0,1)");
    if (batch_size == 0) throw ConfigError("train: batch_size must be > 0");
  }
};

/// Momentum SGD: v <- momentum*v + g; w <- w - lr*v.
/// No Nesterov, no weight decay.
inline void sgd_step(std::vector<Tensor>& params,
                     std::vector<std::vector<double>>& velocity, double lr,
                     double momentum) {
  if (velocity.size() != params.size())
    velocity.assign(params.size(), {});
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = params[p];
    if (!t.requires_grad()) continue;
    auto& v = velocity[p];
    if (v.size() != t.size()) v.assign(t.size(), 0.0);
    const auto& g = t.grad();
    for (std::size_t i = 0; i < t.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      t.data()[i] -= lr * v[i];
    }
  }
}

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double total = 0.0, ce_term = 0.0, kl_term = 0.0, reg_term = 0.0;
  double metric = 0.0;  // top-1 accuracy or MSE
  std::vector<std::pair<std::string, double>> alphas;
};

struct TrainLog {
  std::vector<EpochRecord> rows;
  bool diverged = false;
};

namespace detail {

inline Tensor gather_rows(const Tensor& x,
                          const std::vector<std::size_t>& idx,
                          std::size_t from, std::size_t count) {
  const std::size_t d = x.shape()[1];
  Tensor out({count, d});
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = x[idx[from + i] * d + j];
  return out;
}

inline std::vector<std::pair<std::string, double>> alpha_snapshot(
    ModelGraph& m) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& name : m.collapsible_block_names())
    out.emplace_back(name, m.block(name)->act.alpha[0]);
  return out;
}

}  // namespace detail

/// Top-1 accuracy (classification) or MSE (regression) on the given rows.
inline double evaluate(ModelGraph& m, const Dataset& data,
                       const std::vector<std::size_t>& idx) {
  m.set_training(false);
  if (idx.empty()) return 0.0;
  Tensor x = detail::gather_rows(data.inputs, idx, 0, idx.size());
  Tensor y = m.forward(x);
  if (data.classification) {
    const std::size_t c = y.shape()[1];
    std::size_t correct = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (y[i * c + j] > y[i * c + best]) best = j;
      if (static_cast<int>(best) == data.labels[idx[i]]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
  }
  Tensor t = detail::gather_rows(data.targets, idx, 0, idx.size());
  return mse_loss(y, t).item();
}

/// Frozen teacher probabilities over the whole dataset (eval mode, softmax).
inline Tensor teacher_probabilities(ModelGraph& teacher, const Tensor& inputs) {
  teacher.set_training(false);
  Tensor logits = teacher.forward(inputs);
  return softmax(logits);
}

/// Minimizes the composite loss with momentum SGD. Deterministic given the
/// seed. A non-finite loss aborts the run and restores the parameters from
/// the end of the previous epoch.
/// `reg_layer_override`, when given, replaces the fraction-based selection
/// of regularized blocks (used by the sequential collapse workflow).
inline TrainLog train(ModelGraph& m, const Dataset& data,
                      const TrainConfig& cfg,
                      const std::optional<Tensor>& teacher_probs = std::nullopt,
                      const std::vector<std::string>* reg_layer_override =
                          nullptr) {
  cfg.validate();
  TrainLog log;
  std::vector<std::string> reg_layers =
      reg_layer_override ? *reg_layer_override
                         : select_regularized_layers(m, cfg.reg.layer_fraction);
  std::vector<Tensor> reg_alphas;
  for (const auto& name : reg_layers) {
    auto* blk = m.block(name);
    if (!blk) throw ContractError("train: no collapsible block named " + name);
    reg_alphas.push_back(blk->act.alpha);
  }
  auto params = m.parameters();
  std::vector<std::vector<double>> velocity(params.size());
  double lr = cfg.lr;

  auto snapshot = [&]() {
    std::vector<std::vector<double>> s;
    for (auto& p : params) s.push_back(p.data());
    return s;
  };
  auto restore = [&](const std::vector<std::vector<double>>& s) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].data() = s[i];
  };
  std::vector<std::vector<double>> last_good = snapshot();

  const std::size_t n_train = data.train_idx.size();
  const std::size_t d = data.inputs.shape()[1];
  (void)d;
  Rng shuffle_rng(Rng::mix(cfg.seed) ^ 0x5f375a86);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& [at, mult] : cfg.lr_schedule)
      if (at == epoch) lr *= mult;

    std::vector<std::size_t> order = data.train_idx;
    shuffle_rng.shuffle(order);

    m.set_training(true);
    double ep_total = 0.0, ep_ce = 0.0, ep_kl = 0.0, ep_reg = 0.0;
    std::size_t n_batches = 0;
    bool aborted = false;
    for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n_train - start);
      if (count < 2 && n_train >= 2)
        continue;  // BN needs at least two samples; skip a trailing singleton
      Tensor x = detail::gather_rows(data.inputs, order, start, count);
      Tape tape;
      Tensor out = m.forward(x, &tape);
      LossBreakdown lb;
      if (data.classification) {
        std::vector<int> labels(count);
        for (std::size_t i = 0; i < count; ++i)
          labels[i] = data.labels[order[start + i]];
        std::optional<Tensor> batch_teacher;
        if (teacher_probs) {
          const std::size_t c = teacher_probs->shape()[1];
          Tensor tp({count, c});
          for (std::size_t i = 0; i < count; ++i)
            for (std::size_t j = 0; j < c; ++j)
              tp[i * c + j] = (*teacher_probs)[order[start + i] * c + j];
          batch_teacher = tp;
        }
        lb = composite_loss(out, labels, batch_teacher, reg_alphas, cfg.reg,
                            &tape);
      } else {
        Tensor t = detail::gather_rows(data.targets, order, start, count);
        Tensor data_term = mse_loss(out, t, &tape);
        Tensor reg = reg_loss(reg_alphas, cfg.reg, &tape);
        Tensor total = add(data_term, reg, &tape);
        lb.ce_term = data_term.item();
        lb.reg_term = reg.item();
        lb.total = total.item();
        lb.total_tensor = total;
      }
      if (!std::isfinite(lb.total)) {
        restore(last_good);
        log.diverged = true;
        aborted = true;
        break;
      }
      for (auto& p : params)
        if (p.requires_grad()) p.zero_grad();
      tape.backward(lb.total_tensor);
      sgd_step(params, velocity, lr, cfg.momentum);
      ep_total += lb.total;
      ep_ce += lb.ce_term;
      ep_kl += lb.kl_term;
      ep_reg += lb.reg_term;
      ++n_batches;
    }
    if (aborted) break;
    last_good = snapshot();

    const double inv = n_batches ? 1.0 / static_cast<double>(n_batches) : 0.0;
    EpochRecord train_row{epoch, "train", ep_total * inv, ep_ce * inv,
                          ep_kl * inv, ep_reg * inv,
                          evaluate(m, data, data.train_idx),
                          detail::alpha_snapshot(m)};
    EpochRecord val_row{epoch,       "val", 0.0, 0.0, 0.0, 0.0,
                        evaluate(m, data, data.val_idx),
                        detail::alpha_snapshot(m)};
    log.rows.push_back(std::move(train_row));
    log.rows.push_back(std::move(val_row));
  }
  m.set_training(false);
  return log;
}

struct StageReport {
  std::string layer_name;
  double alpha = 0.0;
  bool collapsed = false;
  std::size_t epochs_used = 0;
  std::uint64_t params_total = 0;  // model total after this stage
  double val_metric = 0.0;
  CollapseReport collapse;
};

/// Layer-by-layer collapse from the last collapsible block backward: enable
/// that block's regularizer, fine-tune up to max_epochs_per_layer, then
/// attempt the collapse once. Blocks already within tau skip fine-tuning.
/// Collapses are never rolled back; the post-stage validation metric is
/// recorded instead.
inline std::vector<StageReport> sequential_collapse(
    ModelGraph& m, const Dataset& data, const TrainConfig& cfg,
    const std::optional<Tensor>& teacher_probs = std::nullopt) {
  std::vector<StageReport> stages;
  CollapseConfig ccfg{cfg.tau};
  auto names = m.collapsible_block_names();
  std::reverse(names.begin(), names.end());
  for (const auto& name : names) {
    StageReport stage;
    stage.layer_name = name;
    CollapsibleBlock* blk = m.block(name);
    if (std::abs(1.0 - blk->act.alpha[0]) > cfg.tau &&
        cfg.max_epochs_per_layer > 0) {
      TrainConfig stage_cfg = cfg;
      stage_cfg.epochs = cfg.max_epochs_per_layer;
      std::vector<std::string> only{name};
      TrainLog lg = train(m, data, stage_cfg, teacher_probs, &only);
      stage.epochs_used = lg.rows.size() / 2;
      blk = m.block(name);
    }
    stage.alpha = blk->act.alpha[0];
    CollapseReport rep;
    rep.layer_name = name;
    rep.alpha_at_collapse = stage.alpha;
    rep.params_before = count_params(*blk);
    rep.macs_before =
        static_cast<std::uint64_t>(blk->in_features()) * blk->hidden_features() +
        static_cast<std::uint64_t>(blk->hidden_features()) *
            blk->out_features();
    rep.gain_fraction = dense_gain(
        {blk->in_features(), blk->hidden_features(), blk->out_features()});
    auto fused = collapse_block(*blk, ccfg, name);
    if (fused) {
      rep.collapsed = true;
      rep.params_after = count_params(*fused);
      rep.macs_after = static_cast<std::uint64_t>(fused->in_features()) *
                       fused->out_features();
      fused->weight.set_requires_grad(true);
      fused->bias.set_requires_grad(true);
      for (auto& node : m.layers)
        if (node.name == name) node.layer = std::move(*fused);
    } else {
      rep.collapsed = false;
      rep.params_after = rep.params_before;
      rep.macs_after = rep.macs_before;
    }
    stage.collapsed = rep.collapsed;
    stage.collapse = rep;
    stage.params_total = count_params(m);
    stage.val_metric = evaluate(m, data, data.val_idx);
    stages.push_back(std::move(stage));
  }
  return stages;
}

struct SweepRow {
  std::size_t layers_collapsed = 0;
  double val_metric = 0.0;
  std::uint64_t params = 0;
};

/// Cumulative-collapse curve: row 0 is the uncollapsed baseline, then one
/// row per sequential collapse stage.
inline std::vector<SweepRow> sensitivity_sweep(
    ModelGraph& m, const Dataset& data, const TrainConfig& cfg,
    const std::optional<Tensor>& teacher_probs = std::nullopt) {
  std::vector<SweepRow> rows;
  rows.push_back({0, evaluate(m, data, data.val_idx), count_params(m)});
  auto stages = sequential_collapse(m, data, cfg, teacher_probs);
  std::size_t collapsed = 0;
  for (const auto& s : stages) {
    if (s.collapsed) ++collapsed;
    rows.push_back({collapsed, s.val_metric, s.params_total});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// 1-D regression demo: fits at fixed and learned alpha ("fig1" in the CLI)
// ---------------------------------------------------------------------------

struct Fig1Config {
  std::uint64_t seed = 7;
  std::size_t n = 512;
  double noise_std = 0.3;
  RegressionShape shape = RegressionShape::kPiecewise;
  std::size_t hidden = 32;
  std::size_t epochs = 400;
  std::size_t batch_size = 64;
  double lr = 2e-2;
  double momentum = 0.9;
  double lc = 1.0;  // only the "learned" setting is regularized
};

struct Fig1Setting {
  std::string name;      // "alpha0", "alpha05", "alpha1", "learned"
  double final_alpha = 0.0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  std::vector<double> fit;  // model output on the plot grid
};

struct Fig1Result {
  std::vector<double> grid;  // x values of the plot grid
  Dataset data;
  std::vector<Fig1Setting> settings;
};

inline Fig1Result demo_fig1(const Fig1Config& cfg) {
  Fig1Result out;
  out.data = gen_regression_1d(cfg.seed, cfg.n, cfg.noise_std, cfg.shape);
  const std::size_t grid_n = 201;
  for (std::size_t i = 0; i < grid_n; ++i)
    out.grid.push_back(-1.0 + 2.0 * static_cast<double>(i) /
                                  static_cast<double>(grid_n - 1));
  struct Mode {
    std::string name;
    double alpha;
    bool learned;
  };
  const Mode modes[] = {{"alpha0", 0.0, false},
                        {"alpha05", 0.5, false},
                        {"alpha1", 1.0, false},
                        {"learned", 0.25, true}};
  for (const auto& mode : modes) {
    ModelSpec spec;
    spec.blocks.push_back({1, cfg.hidden, 1, false, 0.0});
    ModelGraph m = init_model(spec, cfg.seed);
    CollapsibleBlock* blk = m.block("block0");
    blk->act.alpha[0] = mode.alpha;
    blk->act.alpha.set_requires_grad(mode.learned);

    TrainConfig tc;
    tc.seed = cfg.seed;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.lr;
    tc.momentum = cfg.momentum;
    tc.reg.lc = mode.learned ? cfg.lc : 0.0;
    tc.reg.layer_fraction = 1.0;
    train(m, out.data, tc);

    Fig1Setting s;
    s.name = mode.name;
    s.final_alpha = m.block("block0")->act.alpha[0];
    s.train_mse = evaluate(m, out.data, out.data.train_idx);
    s.val_mse = evaluate(m, out.data, out.data.val_idx);
    Tensor gx({grid_n, 1});
    for (std::size_t i = 0; i < grid_n; ++i) gx[i] = out.grid[i];
    Tensor gy = m.forward(gx);
    s.fit.assign(gy.data().begin(), gy.data().end());
    out.settings.push_back(std::move(s));
  }
  return out;
}

}  // namespace lc
