#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "layercollapse/common.hpp"
#include "layercollapse/layers.hpp"
#include "layercollapse/rng.hpp"
#include "layercollapse/tensor.hpp"

namespace lc {

struct BoundReport {
  double delta = 0.0;
  double x_delta_norm = 0.0;  // empirical (1-delta)-quantile of ||x||_2
  double sigma_max = 0.0;     // largest singular value of W2*W1
  double c_constant = 0.0;    // sigma^2 * x_delta^2 + ||W2 b1||^2
  double alpha = 0.0;
  double violation_rate = 0.0;
  std::size_t n_eval = 0;
};

/// Largest singular value via power iteration on M^T M, seeded start,
/// run to relative tolerance 1e-8 or 1000 iterations. Zero matrix -> 0.
inline double sigma_max(const Tensor& m, std::uint64_t seed = 12345) {
  if (m.rank() != 2)
    throw DimensionError("sigma_max: expected a matrix, got " +
                         shape_str(m.shape()));
  if (!m.all_finite()) throw NumericError("sigma_max: non-finite matrix");
  const std::size_t rows = m.shape()[0], cols = m.shape()[1];
  Rng rng(seed);
  std::vector<double> v(cols);
  double vn = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    vn += x * x;
  }
  vn = std::sqrt(vn);
  if (vn == 0.0) return 0.0;
  for (auto& x : v) x /= vn;

  std::vector<double> mv(rows), w(cols);
  double sigma = 0.0;
  for (int iter = 0; iter < 1000; ++iter) {
    for (std::size_t i = 0; i < rows; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += m[i * cols + j] * v[j];
      mv[i] = acc;
    }
    for (std::size_t j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < rows; ++i) acc += m[i * cols + j] * mv[i];
      w[j] = acc;
    }
    double wn = 0.0;
    for (double x : w) wn += x * x;
    wn = std::sqrt(wn);
    if (wn == 0.0) return 0.0;
    const double next = std::sqrt(wn);  // sqrt of dominant eigenvalue estimate
    for (std::size_t j = 0; j < cols; ++j) v[j] = w[j] / wn;
    if (iter > 0 && std::abs(next - sigma) <= 1e-8 * std::max(next, 1e-300)) {
      sigma = next;
      break;
    }
    sigma = next;
  }
  return sigma;
}

/// Empirical (1-delta)-quantile, nearest-rank, of the Euclidean norms of the
/// sample rows. delta -> 0 gives the max norm.
inline double estimate_x_delta(const Tensor& samples, double delta) {
  if (samples.rank() != 2 || samples.shape()[0] == 0)
    throw ContractError("estimate_x_delta: need a non-empty [N x d] sample set");
  if (delta <= 0.0 || delta >= 1.0)
    throw ContractError("estimate_x_delta: delta must be in (0,1)");
  const std::size_t n = samples.shape()[0], d = samples.shape()[1];
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = samples[i * d + j];
      acc += x * x;
    }
    norms[i] = std::sqrt(acc);
  }
  std::sort(norms.begin(), norms.end());
  std::size_t rank = static_cast<std::size_t>(
      std::ceil((1.0 - delta) * static_cast<double>(n)));
  if (rank < 1) rank = 1;
  if (rank > n) rank = n;
  return norms[rank - 1];
}

/// C = sigma_max(W2 W1)^2 * |x^delta|^2 + ||W2 b1||^2.
inline double bound_constant(const Tensor& w1, const Tensor& b1,
                             const Tensor& w2, double x_delta_norm) {
  Tensor w21 = matmul(w2, w1);
  const double s = sigma_max(w21);
  const std::size_t nout = w2.shape()[0], h = w2.shape()[1];
  if (b1.size() != h)
    throw DimensionError("bound_constant: b1 " + shape_str(b1.shape()) +
                         " vs W2 " + shape_str(w2.shape()));
  double w2b1_sq = 0.0;
  for (std::size_t o = 0; o < nout; ++o) {
    double acc = 0.0;
    for (std::size_t j = 0; j < h; ++j) acc += w2[o * h + j] * b1[j];
    w2b1_sq += acc * acc;
  }
  return s * s * x_delta_norm * x_delta_norm + w2b1_sq;
}

namespace detail {

inline double row_sq_err(const Tensor& a, const Tensor& b, std::size_t row) {
  const std::size_t c = a.shape()[1];
  double acc = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    const double d = a[row * c + j] - b[row * c + j];
    acc += d * d;
  }
  return acc;
}

}  // namespace detail

/// Empirical check of the probabilistic error bound on a plain two-layer
/// block (no BN). Calibration and evaluation samples are disjoint seeded
/// halves of the input; x^delta comes from the calibration half only.
inline BoundReport verify_bound(const CollapsibleBlock& block,
                                const Tensor& samples, double delta,
                                std::uint64_t seed = 0) {
  if (block.bn)
    throw ContractError("verify_bound: block must not contain BatchNorm");
  if (samples.rank() != 2)
    throw ContractError("verify_bound: samples must be [N x d]");
  const std::size_t n = samples.shape()[0], d = samples.shape()[1];
  if (n < 100)
    throw InsufficientDataError("verify_bound: need at least 100 samples, got " +
                                std::to_string(n));
  if (d != block.in_features())
    throw DimensionError("verify_bound: sample width " + std::to_string(d) +
                         " vs block input " +
                         std::to_string(block.in_features()));

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed ^ 0xb0u);
  rng.shuffle(idx);
  const std::size_t n_cal = n / 2;
  const std::size_t n_eval = n - n_cal;

  Tensor cal({n_cal, d}), eval_x({n_eval, d});
  for (std::size_t i = 0; i < n_cal; ++i)
    for (std::size_t j = 0; j < d; ++j) cal[i * d + j] = samples[idx[i] * d + j];
  for (std::size_t i = 0; i < n_eval; ++i)
    for (std::size_t j = 0; j < d; ++j)
      eval_x[i * d + j] = samples[idx[n_cal + i] * d + j];

  BoundReport r;
  r.delta = delta;
  r.alpha = block.act.alpha[0];
  r.x_delta_norm = estimate_x_delta(cal, delta);
  Tensor w21 = matmul(block.fc2.weight, block.fc1.weight);
  r.sigma_max = sigma_max(w21);
  r.c_constant = bound_constant(block.fc1.weight, block.fc1.bias,
                                block.fc2.weight, r.x_delta_norm);
  r.n_eval = n_eval;

  // Y_alpha and Y_linear on the evaluation half.
  Tensor pre = linear(eval_x, block.fc1.weight, block.fc1.bias);
  Tensor act = prelu(pre, block.act.alpha);
  Tensor y_alpha = linear(act, block.fc2.weight, block.fc2.bias);
  Tensor lin1 = matmul(eval_x, transpose(w21));
  // + W2 b1 + b2
  const std::size_t nout = block.out_features(), h = block.hidden_features();
  Tensor bias_lin({nout});
  for (std::size_t o = 0; o < nout; ++o) {
    double acc = block.fc2.bias[o];
    for (std::size_t j = 0; j < h; ++j)
      acc += block.fc2.weight[o * h + j] * block.fc1.bias[j];
    bias_lin[o] = acc;
  }
  Tensor y_linear = add_bias(lin1, bias_lin);

  const double budget =
      r.c_constant * (1.0 - r.alpha) * (1.0 - r.alpha);
  // Tiny relative/absolute slack so that at alpha=1, where both outputs are
  // algebraically equal but rounded differently, fp noise is not counted.
  std::size_t violations = 0;
  for (std::size_t i = 0; i < n_eval; ++i)
    if (detail::row_sq_err(y_linear, y_alpha, i) >
        budget * (1.0 + 1e-12) + 1e-24)
      ++violations;
  r.violation_rate =
      static_cast<double>(violations) / static_cast<double>(n_eval);
  return r;
}

}  // namespace lc
