#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "layercollapse/common.hpp"
#include "layercollapse/layers.hpp"
#include "layercollapse/tensor.hpp"

namespace lc {

struct RegConfig {
  double lc = 0.05;           // regularization strength
  double layer_fraction = 1.0;  // fraction of collapsible layers regularized
};

// Defaults used by the two workflows.
inline constexpr double kRegStrengthFinetune = 0.2;
inline constexpr double kRegStrengthScratch = 0.05;

struct LossBreakdown {
  double total = 0.0;
  double ce_term = 0.0;
  double kl_term = 0.0;
  double reg_term = 0.0;
  Tensor total_tensor;  // scalar on the active tape
};

/// Sum over the given slopes of lc * (1 - alpha)^2.
/// d/dalpha = -2 * lc * (1 - alpha).
inline Tensor reg_loss(const std::vector<Tensor>& alphas, const RegConfig& cfg,
                       Tape* tape = nullptr) {
  if (cfg.lc < 0.0) throw ContractError("reg_loss: lc must be >= 0");
  double total = 0.0;
  for (const auto& a : alphas) {
    if (a.size() != 1)
      throw ContractError("reg_loss: alphas must be scalars");
    const double d = 1.0 - a[0];
    total += cfg.lc * d * d;
  }
  Tensor out = Tensor::scalar(total);
  bool any_grad = false;
  for (const auto& a : alphas) any_grad = any_grad || a.requires_grad();
  if (tape && any_grad) {
    out.set_requires_grad(true);
    auto as = alphas;
    const double lcv = cfg.lc;
    tape->record(out, [as, out, lcv]() mutable {
      const double g = out.grad()[0];
      for (auto& a : as)
        if (a.requires_grad())
          a.grad()[0] += g * (-2.0 * lcv * (1.0 - a[0]));
    });
  }
  return out;
}

/// ceil(fraction * count) collapsible blocks, selected from the model's end
/// backward; returned last-first.
inline std::vector<std::string> select_regularized_layers(
    const ModelGraph& m, double fraction) {
  if (fraction < 0.0 || fraction > 1.0)
    throw ContractError("layer fraction must be in [0,1], got " +
                        std::to_string(fraction));
  auto names = m.collapsible_block_names();
  std::size_t k = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(names.size())));
  if (k > names.size()) k = names.size();
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i)
    out.push_back(names[names.size() - 1 - i]);
  return out;
}

/// Mean over the batch of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits,
                            const std::vector<int>& labels,
                            Tape* tape = nullptr) {
  if (logits.rank() != 2)
    throw DimensionError("cross_entropy: logits must be [batch x classes]");
  const std::size_t b = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != b)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(b));
  double total = 0.0;
  std::vector<double> lse(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw ContractError("cross_entropy: label out of range: " +
                          std::to_string(labels[i]));
    double m = logits[i * c];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, logits[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[i * c + j] - m);
    lse[i] = m + std::log(z);
    total += lse[i] - logits[i * c + static_cast<std::size_t>(labels[i])];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(b));
  if (detail::track(tape, {logits})) {
    out.set_requires_grad(true);
    tape->record(out, [logits, labels, out, lse, b, c]() mutable {
      const double g = out.grad()[0] / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double p = std::exp(logits[i * c + j] - lse[i]);
          const double onehot =
              (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
          logits.grad()[i * c + j] += g * (p - onehot);
        }
    });
  }
  return out;
}

/// Mean over the batch of sum_c teacher * (log teacher - log softmax(student)),
/// temperature 1. Teacher entries of exactly 0 contribute 0.
inline Tensor kl_divergence(const Tensor& student_logits,
                            const Tensor& teacher_probs,
                            Tape* tape = nullptr) {
  detail::check_same_shape(student_logits, teacher_probs, "kl_divergence");
  if (student_logits.rank() != 2)
    throw DimensionError("kl_divergence: logits must be [batch x classes]");
  const std::size_t b = student_logits.shape()[0],
                    c = student_logits.shape()[1];
  double total = 0.0;
  std::vector<double> lse(b);
  for (std::size_t i = 0; i < b; ++i) {
    double m = student_logits[i * c];
    for (std::size_t j = 1; j < c; ++j)
      m = std::max(m, student_logits[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      z += std::exp(student_logits[i * c + j] - m);
    lse[i] = m + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      const double t = teacher_probs[i * c + j];
      if (t <= 0.0) continue;
      total += t * (std::log(t) - (student_logits[i * c + j] - lse[i]));
    }
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(b));
  if (detail::track(tape, {student_logits})) {
    out.set_requires_grad(true);
    tape->record(out, [student_logits, teacher_probs, out, lse, b,
                       c]() mutable {
      const double g = out.grad()[0] / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i) {
        double tsum = 0.0;
        for (std::size_t j = 0; j < c; ++j)
          tsum += teacher_probs[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          const double p = std::exp(student_logits[i * c + j] - lse[i]);
          student_logits.grad()[i * c + j] +=
              g * (tsum * p - teacher_probs[i * c + j]);
        }
      }
    });
  }
  return out;
}

/// Mean squared error, used by the regression demo.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target,
                       Tape* tape = nullptr) {
  detail::check_same_shape(pred, target, "mse_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    total += d * d;
  }
  const double inv = 1.0 / static_cast<double>(pred.size());
  Tensor out = Tensor::scalar(total * inv);
  if (detail::track(tape, {pred})) {
    out.set_requires_grad(true);
    tape->record(out, [pred, target, out, inv]() mutable {
      const double g = out.grad()[0];
      for (std::size_t i = 0; i < pred.size(); ++i)
        pred.grad()[i] += g * 2.0 * (pred[i] - target[i]) * inv;
    });
  }
  return out;
}

/// Composite training objective:
///   with a teacher:  1/2 CE + 1/2 KL + reg
///   without:         CE + reg (from-scratch mode)
inline LossBreakdown composite_loss(const Tensor& student_logits,
                                    const std::vector<int>& labels,
                                    const std::optional<Tensor>& teacher_probs,
                                    const std::vector<Tensor>& alphas,
                                    const RegConfig& cfg,
                                    Tape* tape = nullptr) {
  LossBreakdown out;
  Tensor ce = cross_entropy(student_logits, labels, tape);
  Tensor reg = reg_loss(alphas, cfg, tape);
  Tensor total;
  if (teacher_probs) {
    Tensor kl = kl_divergence(student_logits, *teacher_probs, tape);
    out.kl_term = 0.5 * kl.item();
    out.ce_term = 0.5 * ce.item();
    total = add(add(scale(ce, 0.5, tape), scale(kl, 0.5, tape), tape), reg,
                tape);
  } else {
    out.ce_term = ce.item();
    total = add(ce, reg, tape);
  }
  out.reg_term = reg.item();
  out.total = total.item();
  out.total_tensor = total;
  return out;
}

}  // namespace lc
