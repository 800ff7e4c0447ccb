#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "layercollapse/common.hpp"
#include "layercollapse/rng.hpp"
#include "layercollapse/tensor.hpp"

namespace lc {

struct LinearLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  LinearLayer() = default;
  LinearLayer(Tensor w, Tensor b) : weight(std::move(w)), bias(std::move(b)) {
    if (weight.rank() != 2 || bias.rank() != 1 ||
        bias.shape()[0] != weight.shape()[0])
      throw DimensionError("linear layer: weight " + shape_str(weight.shape()) +
                           " vs bias " + shape_str(bias.shape()));
  }

  std::size_t in_features() const { return weight.shape()[1]; }
  std::size_t out_features() const { return weight.shape()[0]; }

  Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
    return linear(x, weight, bias, tape);
  }
};

struct PReLULayer {
  Tensor alpha;  // scalar slope; no clamp, the regularizer is the only pull

  PReLULayer() : alpha(Tensor::scalar(0.25)) {}
  explicit PReLULayer(double a) : alpha(Tensor::scalar(a)) {}

  Tensor forward(const Tensor& x, Tape* tape = nullptr) const {
    return prelu(x, alpha, tape);
  }
};

/// BatchNorm over the feature axis of [batch x h] inputs.
/// Training mode normalizes with population (biased) batch statistics and
/// updates running stats as running <- (1-momentum)*running + momentum*batch.
/// Eval mode normalizes with (running_mean, running_var + eps).
struct BatchNormLayer {
  Tensor gamma;  // [h]
  Tensor beta;   // [h]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  bool training_mode = false;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t h)
      : gamma({h}, std::vector<double>(h, 1.0)),
        beta({h}, std::vector<double>(h, 0.0)),
        running_mean(h, 0.0),
        running_var(h, 1.0) {}

  std::size_t width() const { return gamma.size(); }

  Tensor forward(const Tensor& x, Tape* tape = nullptr) {
    const std::size_t h = width();
    if (x.rank() != 2 || x.shape()[1] != h)
      throw DimensionError("batchnorm: input " + shape_str(x.shape()) +
                           " vs width " + std::to_string(h));
    const std::size_t b = x.shape()[0];
    std::vector<double> mu(h), var(h);
    if (training_mode) {
      if (b < 2)
        throw ContractError(
            "batchnorm: training mode requires batch size >= 2, got " +
            std::to_string(b));
      for (std::size_t j = 0; j < h; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < b; ++i) m += x[i * h + j];
        m /= static_cast<double>(b);
        double v = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
          const double d = x[i * h + j] - m;
          v += d * d;
        }
        v /= static_cast<double>(b);
        mu[j] = m;
        var[j] = v;
        running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * m;
        running_var[j] = (1.0 - momentum) * running_var[j] + momentum * v;
      }
    } else {
      mu = running_mean;
      var = running_var;
    }
    Tensor out({b, h});
    std::vector<double> inv_std(h);
    for (std::size_t j = 0; j < h; ++j)
      inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < h; ++j)
        out[i * h + j] =
            (x[i * h + j] - mu[j]) * inv_std[j] * gamma[j] + beta[j];

    const bool train_stats = training_mode;
    Tensor g = gamma, be = beta;
    if (detail::track(tape, {x, gamma, beta})) {
      out.set_requires_grad(true);
      tape->record(out, [x, g, be, out, mu, inv_std, b, h,
                         train_stats]() mutable {
        const auto& gr = out.grad();
        for (std::size_t j = 0; j < h; ++j) {
          double sum_g = 0.0, sum_g_xhat = 0.0;
          for (std::size_t i = 0; i < b; ++i) {
            const double xhat = (x[i * h + j] - mu[j]) * inv_std[j];
            sum_g += gr[i * h + j];
            sum_g_xhat += gr[i * h + j] * xhat;
          }
          if (g.requires_grad()) g.grad()[j] += sum_g_xhat;
          if (be.requires_grad()) be.grad()[j] += sum_g;
          if (x.requires_grad()) {
            if (train_stats) {
              const double inv_b = 1.0 / static_cast<double>(b);
              for (std::size_t i = 0; i < b; ++i) {
                const double xhat = (x[i * h + j] - mu[j]) * inv_std[j];
                x.grad()[i * h + j] +=
                    g[j] * inv_std[j] *
                    (gr[i * h + j] - inv_b * sum_g - inv_b * xhat * sum_g_xhat);
              }
            } else {
              for (std::size_t i = 0; i < b; ++i)
                x.grad()[i * h + j] += gr[i * h + j] * g[j] * inv_std[j];
            }
          }
        }
      });
    }
    return out;
  }
};

/// Inverted dropout; exact identity in eval mode.
struct DropoutLayer {
  double p = 0.5;
  bool training_mode = false;

  DropoutLayer() = default;
  explicit DropoutLayer(double prob) : p(prob) {
    if (p < 0.0 || p >= 1.0)
      throw ContractError("dropout: p must be in [0,1), got " +
                          std::to_string(p));
  }

  Tensor forward(const Tensor& x, Rng& rng, Tape* tape = nullptr) const {
    if (!training_mode || p == 0.0) return x;
    Tensor mask(x.shape());
    const double keep = 1.0 - p;
    for (std::size_t i = 0; i < mask.size(); ++i)
      mask[i] = rng.uniform() < p ? 0.0 : 1.0 / keep;
    return mul(x, mask, tape);
  }
};

/// The unit the collapse engine fuses: fc1 -> optional BN -> PReLU ->
/// optional Dropout -> fc2. This layer order is the only one the fusion
/// formula is exact for.
struct CollapsibleBlock {
  LinearLayer fc1;
  std::optional<BatchNormLayer> bn;
  PReLULayer act;
  std::optional<DropoutLayer> drop;
  LinearLayer fc2;

  std::size_t in_features() const { return fc1.in_features(); }
  std::size_t hidden_features() const { return fc1.out_features(); }
  std::size_t out_features() const { return fc2.out_features(); }

  void validate() const {
    const std::size_t h = fc1.out_features();
    if (fc2.in_features() != h || (bn && bn->width() != h))
      throw DimensionError("collapsible block: hidden width mismatch (fc1 " +
                           shape_str(fc1.weight.shape()) + ", fc2 " +
                           shape_str(fc2.weight.shape()) + ")");
  }

  Tensor forward(const Tensor& x, Rng& rng, Tape* tape = nullptr) {
    Tensor h = fc1.forward(x, tape);
    if (bn) h = bn->forward(h, tape);
    h = act.forward(h, tape);
    if (drop) h = drop->forward(h, rng, tape);
    return fc2.forward(h, tape);
  }

  void set_training(bool training) {
    if (bn) bn->training_mode = training;
    if (drop) drop->training_mode = training;
  }
};

using LayerVariant = std::variant<LinearLayer, PReLULayer, BatchNormLayer,
                                  DropoutLayer, CollapsibleBlock>;

struct LayerNode {
  std::string name;
  LayerVariant layer;
};

/// Ordered sequence of layers/blocks with named parameters.
class ModelGraph {
 public:
  std::vector<LayerNode> layers;
  std::map<std::string, std::string> metadata;
  Rng dropout_rng{0};

  void add(std::string name, LayerVariant layer) {
    for (const auto& n : layers)
      if (n.name == name)
        throw ContractError("duplicate layer name: " + name);
    layers.push_back({std::move(name), std::move(layer)});
  }

  Tensor forward(const Tensor& x, Tape* tape = nullptr) {
    Tensor h = x;
    for (auto& node : layers) {
      try {
        h = std::visit(
            [&](auto& l) -> Tensor {
              using T = std::decay_t<decltype(l)>;
              if constexpr (std::is_same_v<T, DropoutLayer>)
                return l.forward(h, dropout_rng, tape);
              else if constexpr (std::is_same_v<T, CollapsibleBlock>)
                return l.forward(h, dropout_rng, tape);
              else
                return l.forward(h, tape);
            },
            node.layer);
      } catch (const Error& e) {
        throw DimensionError("layer '" + node.name + "': " + e.what());
      }
    }
    return h;
  }

  void set_training(bool training) {
    for (auto& node : layers)
      std::visit(
          [&](auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, BatchNormLayer> ||
                          std::is_same_v<T, DropoutLayer>)
              l.training_mode = training;
            else if constexpr (std::is_same_v<T, CollapsibleBlock>)
              l.set_training(training);
          },
          node.layer);
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& node : layers) {
      const std::string& n = node.name;
      std::visit(
          [&](auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, LinearLayer>) {
              out.emplace_back(n + ".weight", l.weight);
              out.emplace_back(n + ".bias", l.bias);
            } else if constexpr (std::is_same_v<T, PReLULayer>) {
              out.emplace_back(n + ".alpha", l.alpha);
            } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
              out.emplace_back(n + ".gamma", l.gamma);
              out.emplace_back(n + ".beta", l.beta);
            } else if constexpr (std::is_same_v<T, CollapsibleBlock>) {
              out.emplace_back(n + ".fc1.weight", l.fc1.weight);
              out.emplace_back(n + ".fc1.bias", l.fc1.bias);
              if (l.bn) {
                out.emplace_back(n + ".bn.gamma", l.bn->gamma);
                out.emplace_back(n + ".bn.beta", l.bn->beta);
              }
              out.emplace_back(n + ".alpha", l.act.alpha);
              out.emplace_back(n + ".fc2.weight", l.fc2.weight);
              out.emplace_back(n + ".fc2.bias", l.fc2.bias);
            }
          },
          node.layer);
    }
    return out;
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::vector<std::string> collapsible_block_names() const {
    std::vector<std::string> out;
    for (const auto& node : layers)
      if (std::holds_alternative<CollapsibleBlock>(node.layer))
        out.push_back(node.name);
    return out;
  }

  /// Deep copy: fresh parameter storage, requires_grad flags preserved.
  ModelGraph clone() const {
    ModelGraph out;
    out.metadata = metadata;
    out.dropout_rng = dropout_rng;
    for (const auto& node : layers) {
      LayerVariant copy = std::visit(
          [](const auto& l) -> LayerVariant {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, LinearLayer>) {
              LinearLayer c(l.weight.clone(), l.bias.clone());
              c.weight.set_requires_grad(l.weight.requires_grad());
              c.bias.set_requires_grad(l.bias.requires_grad());
              return c;
            } else if constexpr (std::is_same_v<T, PReLULayer>) {
              PReLULayer c(l.alpha[0]);
              c.alpha.set_requires_grad(l.alpha.requires_grad());
              return c;
            } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
              BatchNormLayer c = l;
              c.gamma = l.gamma.clone();
              c.beta = l.beta.clone();
              c.gamma.set_requires_grad(l.gamma.requires_grad());
              c.beta.set_requires_grad(l.beta.requires_grad());
              return c;
            } else if constexpr (std::is_same_v<T, DropoutLayer>) {
              return l;
            } else {
              const CollapsibleBlock& b = l;
              CollapsibleBlock c;
              c.fc1 = LinearLayer(b.fc1.weight.clone(), b.fc1.bias.clone());
              c.fc1.weight.set_requires_grad(b.fc1.weight.requires_grad());
              c.fc1.bias.set_requires_grad(b.fc1.bias.requires_grad());
              if (b.bn) {
                BatchNormLayer bn = *b.bn;
                bn.gamma = b.bn->gamma.clone();
                bn.beta = b.bn->beta.clone();
                bn.gamma.set_requires_grad(b.bn->gamma.requires_grad());
                bn.beta.set_requires_grad(b.bn->beta.requires_grad());
                c.bn = std::move(bn);
              }
              c.act = PReLULayer(b.act.alpha[0]);
              c.act.alpha.set_requires_grad(b.act.alpha.requires_grad());
              c.drop = b.drop;
              c.fc2 = LinearLayer(b.fc2.weight.clone(), b.fc2.bias.clone());
              c.fc2.weight.set_requires_grad(b.fc2.weight.requires_grad());
              c.fc2.bias.set_requires_grad(b.fc2.bias.requires_grad());
              return c;
            }
          },
          node.layer);
      out.layers.push_back({node.name, std::move(copy)});
    }
    return out;
  }

  CollapsibleBlock* block(const std::string& name) {
    for (auto& node : layers)
      if (node.name == name)
        return std::get_if<CollapsibleBlock>(&node.layer);
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

struct BlockSpec {
  std::size_t in = 0, hidden = 0, out = 0;
  bool batchnorm = false;
  double dropout = 0.0;
};

/// Sequential stack of collapsible blocks.
struct ModelSpec {
  std::vector<BlockSpec> blocks;
};

inline Tensor uniform_init(std::vector<std::size_t> shape, std::size_t fan_in,
                           Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = rng.uniform(-bound, bound);
  return t;
}

/// Weights uniform over +-sqrt(6/fan_in). alpha starts at 0.25 for scratch
/// training; retrofit mode starts at 0 so the fresh PReLU is exactly a ReLU
/// and the swap is function-preserving.
inline ModelGraph init_model(const ModelSpec& spec, std::uint64_t seed,
                             bool retrofit_mode = false) {
  Rng rng(seed);
  ModelGraph m;
  m.dropout_rng = Rng(Rng::mix(seed) ^ 0xd02b7f5a);
  const double alpha0 = retrofit_mode ? 0.0 : 0.25;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const auto& b = spec.blocks[i];
    if (i > 0 && spec.blocks[i - 1].out != b.in)
      throw DimensionError("model spec: block " + std::to_string(i) +
                           " input width " + std::to_string(b.in) +
                           " does not match previous output " +
                           std::to_string(spec.blocks[i - 1].out));
    CollapsibleBlock blk;
    blk.fc1 = LinearLayer(uniform_init({b.hidden, b.in}, b.in, rng),
                          Tensor({b.hidden}));
    if (b.batchnorm) blk.bn = BatchNormLayer(b.hidden);
    blk.act = PReLULayer(alpha0);
    if (b.dropout > 0.0) blk.drop = DropoutLayer(b.dropout);
    blk.fc2 = LinearLayer(uniform_init({b.out, b.hidden}, b.hidden, rng),
                          Tensor({b.out}));
    m.add("block" + std::to_string(i), std::move(blk));
  }
  m.metadata["seed"] = std::to_string(seed);
  for (auto& [name, p] : m.named_parameters()) p.set_requires_grad(true);
  return m;
}

}  // namespace lc
