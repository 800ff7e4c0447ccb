#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "layercollapse/common.hpp"
#include "layercollapse/layers.hpp"
#include "layercollapse/tensor.hpp"

namespace lc {

struct CollapseConfig {
  // Linearity tolerance: a block collapses when |1 - alpha| <= tau.
  double tau = 0.05;
};

struct GainQuery {
  std::uint64_t n_in = 0, n_hidden = 0, n_out = 0;
};

struct ConvGainQuery {
  std::uint64_t k1 = 0, k2 = 0;
  std::uint64_t c_in = 0, c_hidden = 0, c_out = 0;
};

struct CollapseReport {
  std::string layer_name;
  double alpha_at_collapse = 0.0;
  bool collapsed = false;
  std::uint64_t params_before = 0;
  std::uint64_t params_after = 0;
  double gain_fraction = 0.0;  // weights-only gain, biases excluded
  std::uint64_t macs_before = 0;
  std::uint64_t macs_after = 0;
};

/// Fractional weight reduction from fusing a dense in->hidden->out block,
/// biases and BN parameters excluded.
inline double dense_gain(const GainQuery& q) {
  if (q.n_in == 0 || q.n_hidden == 0 || q.n_out == 0)
    throw ContractError("dense_gain: widths must be positive");
  return 1.0 - static_cast<double>(q.n_in * q.n_out) /
                   static_cast<double>(q.n_hidden * (q.n_in + q.n_out));
}

inline double conv_gain(const ConvGainQuery& q) {
  if (q.k1 == 0 || q.k2 == 0 || q.c_in == 0 || q.c_hidden == 0 || q.c_out == 0)
    throw ContractError("conv_gain: sizes must be positive");
  const double num = static_cast<double>(q.k1 * q.k1 * q.c_in * q.c_hidden +
                                         q.k2 * q.k2 * q.c_hidden * q.c_out);
  const std::uint64_t k = q.k1 + q.k2 - 1;
  return 1.0 - num / static_cast<double>(k * k * q.c_in * q.c_out);
}

namespace detail {

inline void check_finite_params(const CollapsibleBlock& b,
                                const std::string& name) {
  bool ok = b.fc1.weight.all_finite() && b.fc1.bias.all_finite() &&
            b.fc2.weight.all_finite() && b.fc2.bias.all_finite() &&
            b.act.alpha.all_finite();
  if (ok && b.bn) {
    ok = b.bn->gamma.all_finite() && b.bn->beta.all_finite();
    for (double v : b.bn->running_mean) ok = ok && std::isfinite(v);
    for (double v : b.bn->running_var) ok = ok && std::isfinite(v);
  }
  if (!ok)
    throw NumericError("collapse: non-finite parameters in block '" + name +
                       "'");
}

}  // namespace detail

/// Fuses fc1 -> BN -> PReLU -> fc2 into one linear layer when
/// |1 - alpha| <= tau:
///   W_new = W2 * diag(s) * W1,  b_new = W2 * (s .* (b1 - mu) + beta) + b2
/// with s = gamma / sqrt(running_var + eps). Without BN, s = 1, mu = 0,
/// beta = 0. Returns nullopt (not an error) when the block fails the test.
inline std::optional<LinearLayer> collapse_block(const CollapsibleBlock& block,
                                                 const CollapseConfig& cfg,
                                                 const std::string& name = "") {
  detail::check_finite_params(block, name);
  const double alpha = block.act.alpha[0];
  if (std::abs(1.0 - alpha) > cfg.tau) return std::nullopt;

  const std::size_t nin = block.in_features();
  const std::size_t h = block.hidden_features();
  const std::size_t nout = block.out_features();
  std::vector<double> s(h, 1.0), mu(h, 0.0), beta(h, 0.0);
  if (block.bn) {
    const auto& bn = *block.bn;
    for (std::size_t j = 0; j < h; ++j) {
      s[j] = bn.gamma[j] / std::sqrt(bn.running_var[j] + bn.eps);
      mu[j] = bn.running_mean[j];
      beta[j] = bn.beta[j];
    }
  }
  const auto& w1 = block.fc1.weight;  // [h x nin]
  const auto& b1 = block.fc1.bias;
  const auto& w2 = block.fc2.weight;  // [nout x h]
  const auto& b2 = block.fc2.bias;

  Tensor w_new({nout, nin});
  Tensor b_new({nout});
  for (std::size_t o = 0; o < nout; ++o) {
    double bacc = b2[o];
    for (std::size_t j = 0; j < h; ++j) {
      const double w2oj = w2[o * h + j];
      bacc += w2oj * (s[j] * (b1[j] - mu[j]) + beta[j]);
      const double c = w2oj * s[j];
      for (std::size_t i = 0; i < nin; ++i)
        w_new[o * nin + i] += c * w1[j * nin + i];
    }
    b_new[o] = bacc;
  }
  return LinearLayer(std::move(w_new), std::move(b_new));
}

inline std::uint64_t count_params(const LinearLayer& l) {
  return static_cast<std::uint64_t>(l.weight.size() + l.bias.size());
}

inline std::uint64_t count_params(const CollapsibleBlock& b) {
  std::uint64_t n = b.fc1.weight.size() + b.fc1.bias.size() +
                    b.fc2.weight.size() + b.fc2.bias.size() + 1;  // + alpha
  if (b.bn) n += b.bn->gamma.size() + b.bn->beta.size();
  return n;
}

/// Exact trainable parameter count: weights, biases, BN affine, alphas.
inline std::uint64_t count_params(const ModelGraph& m) {
  std::uint64_t n = 0;
  for (const auto& node : m.layers)
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, LinearLayer>)
            n += count_params(l);
          else if constexpr (std::is_same_v<T, PReLULayer>)
            n += 1;
          else if constexpr (std::is_same_v<T, BatchNormLayer>)
            n += l.gamma.size() + l.beta.size();
          else if constexpr (std::is_same_v<T, CollapsibleBlock>)
            n += count_params(l);
        },
        node.layer);
  return n;
}

/// Per-sample multiply-accumulates of a runtime model (dense layers only).
inline std::uint64_t count_macs(const ModelGraph& m) {
  std::uint64_t n = 0;
  for (const auto& node : m.layers)
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, LinearLayer>)
            n += static_cast<std::uint64_t>(l.in_features()) *
                 l.out_features();
          else if constexpr (std::is_same_v<T, CollapsibleBlock>)
            n += static_cast<std::uint64_t>(l.in_features()) *
                     l.hidden_features() +
                 static_cast<std::uint64_t>(l.hidden_features()) *
                     l.out_features();
        },
        node.layer);
  return n;
}

/// Replaces every collapsible block passing the tau test by its fused linear
/// layer, in place. Blocks failing the test are reported and left intact.
/// Newly adjacent linear pairs are not re-collapsed in the same pass.
inline std::vector<CollapseReport> collapse_model(ModelGraph& m,
                                                  const CollapseConfig& cfg) {
  std::vector<CollapseReport> reports;
  for (auto& node : m.layers) {
    auto* blk = std::get_if<CollapsibleBlock>(&node.layer);
    if (!blk) continue;
    CollapseReport r;
    r.layer_name = node.name;
    r.alpha_at_collapse = blk->act.alpha[0];
    r.params_before = count_params(*blk);
    r.macs_before = static_cast<std::uint64_t>(blk->in_features()) *
                        blk->hidden_features() +
                    static_cast<std::uint64_t>(blk->hidden_features()) *
                        blk->out_features();
    r.gain_fraction = dense_gain(
        {blk->in_features(), blk->hidden_features(), blk->out_features()});
    auto fused = collapse_block(*blk, cfg, node.name);
    if (fused) {
      r.collapsed = true;
      r.params_after = count_params(*fused);
      r.macs_after = static_cast<std::uint64_t>(fused->in_features()) *
                     fused->out_features();
      fused->weight.set_requires_grad(true);
      fused->bias.set_requires_grad(true);
      node.layer = std::move(*fused);
    } else {
      r.collapsed = false;
      r.params_after = r.params_before;
      r.macs_after = r.macs_before;
    }
    reports.push_back(std::move(r));
  }
  return reports;
}

/// Composes two stride-1 2-D cross-correlations into one.
/// K1 [c_h x c_in x k1 x k1], K2 [c_out x c_h x k2 x k2]; the fused kernel
/// has spatial size k1 + k2 - 1 and
///   K_new[o,i] = sum_h fullconv2(K2[o,h], K1[h,i])
///   b_new[o]   = b2[o] + sum_h b1[h] * sum_spatial K2[o,h].
/// conv2(conv1(x)) in valid mode equals conv(x, K_new, b_new) exactly.
inline std::pair<Tensor, Tensor> fuse_conv(const Tensor& k1, const Tensor& b1,
                                           const Tensor& k2, const Tensor& b2,
                                           std::size_t stride = 1) {
  if (stride != 1)
    throw UnsupportedError("fuse_conv: only stride 1 is supported");
  if (k1.rank() != 4 || k2.rank() != 4)
    throw DimensionError("fuse_conv: kernels must be rank 4");
  const std::size_t ch = k1.shape()[0], cin = k1.shape()[1],
                    s1 = k1.shape()[2];
  const std::size_t cout = k2.shape()[0], s2 = k2.shape()[2];
  if (k1.shape()[2] != k1.shape()[3] || k2.shape()[2] != k2.shape()[3])
    throw DimensionError("fuse_conv: kernels must be square");
  if (k2.shape()[1] != ch)
    throw DimensionError("fuse_conv: channel mismatch, K1 " +
                         shape_str(k1.shape()) + " vs K2 " +
                         shape_str(k2.shape()));
  if (b1.size() != ch || b2.size() != cout)
    throw DimensionError("fuse_conv: bias sizes do not match kernels");
  const std::size_t k = s1 + s2 - 1;
  Tensor k_new({cout, cin, k, k});
  Tensor b_new({cout});
  for (std::size_t o = 0; o < cout; ++o) {
    double bacc = b2[o];
    for (std::size_t h = 0; h < ch; ++h) {
      double k2sum = 0.0;
      for (std::size_t u = 0; u < s2; ++u)
        for (std::size_t v = 0; v < s2; ++v)
          k2sum += k2[((o * ch + h) * s2 + u) * s2 + v];
      bacc += b1[h] * k2sum;
      for (std::size_t i = 0; i < cin; ++i)
        for (std::size_t u2 = 0; u2 < s2; ++u2)
          for (std::size_t v2 = 0; v2 < s2; ++v2)
            for (std::size_t u1 = 0; u1 < s1; ++u1)
              for (std::size_t v1 = 0; v1 < s1; ++v1)
                k_new[((o * cin + i) * k + (u1 + u2)) * k + (v1 + v2)] +=
                    k2[((o * ch + h) * s2 + u2) * s2 + v2] *
                    k1[((h * cin + i) * s1 + u1) * s1 + v1];
    }
    b_new[o] = bacc;
  }
  return {std::move(k_new), std::move(b_new)};
}

}  // namespace lc
