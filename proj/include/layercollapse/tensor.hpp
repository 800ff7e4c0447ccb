#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "layercollapse/common.hpp"

namespace lc {

/// Dense n-dimensional double tensor with shared storage. Copying a Tensor
/// copies the handle, not the buffer, so gradient closures recorded on a tape
/// see updates made by the optimizer and vice versa.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<Impl>()) {}

  explicit Tensor(std::vector<std::size_t> shape, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(numel(impl_->shape), 0.0);
    impl_->requires_grad = requires_grad;
  }

  Tensor(std::vector<std::size_t> shape, std::vector<double> data,
         bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  // Braced data lists would otherwise prefer the (shape, bool) constructor.
  Tensor(std::vector<std::size_t> shape, std::initializer_list<double> data,
         bool requires_grad = false)
      : Tensor(std::move(shape), std::vector<double>(data), requires_grad) {}

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  const std::vector<std::size_t>& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t rank() const { return impl_->shape.size(); }

  // A Tensor is a shared handle; const-ness of the handle does not protect
  // the buffer, so the accessors are const-qualified.
  std::vector<double>& data() const { return impl_->data; }

  double& operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool r) const {
    impl_->requires_grad = r;
    if (r && impl_->grad.size() != impl_->data.size())
      impl_->grad.assign(impl_->data.size(), 0.0);
  }

  std::vector<double>& grad() const {
    if (impl_->grad.size() != impl_->data.size())
      impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }

  void zero_grad() const { impl_->grad.assign(impl_->data.size(), 0.0); }

  double item() const {
    if (size() != 1)
      throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  bool all_finite() const {
    for (double v : impl_->data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Deep copy (fresh storage, no grad carried over).
  Tensor clone() const {
    Tensor t(impl_->shape, impl_->data, false);
    return t;
  }

  static std::size_t numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
  }

 private:
  struct Impl {
    std::vector<std::size_t> shape{0};
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;
  };
  std::shared_ptr<Impl> impl_;
};

/// Dynamic reverse-mode tape. Operations append a node per recorded op;
/// backward() replays the nodes in reverse recording order exactly once.
/// Leaf gradients accumulate additively across backward() calls; gradients
/// of recorded intermediates are reset on each call.
class Tape {
 public:
  void record(Tensor output, std::function<void()> backward_fn) {
    nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
  }

  void backward(Tensor loss) {
    if (loss.size() != 1)
      throw ContractError("backward() requires a scalar loss, got " +
                          shape_str(loss.shape()));
    bool found = false;
    for (auto& n : nodes_) {
      n.output.zero_grad();
      if (n.output.same_storage(loss)) found = true;
    }
    if (!found)
      throw ContractError("backward() loss was not produced on this tape");
    loss.grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_fn();
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
};

namespace detail {

inline bool track(const Tape* tape, std::initializer_list<Tensor> inputs) {
  if (!tape) return false;
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. Each takes an optional tape; when the tape is given and an
// input requires gradients, the op records a closure implementing its local
// gradient rule.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  if (detail::track(tape, {a, b})) {
    out.set_requires_grad(true);
    tape->record(out, [a, b, out]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) b.grad()[i] += g[i];
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  if (detail::track(tape, {a, b})) {
    out.set_requires_grad(true);
    tape->record(out, [a, b, out]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) b.grad()[i] -= g[i];
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  if (detail::track(tape, {a, b})) {
    out.set_requires_grad(true);
    tape->record(out, [a, b, out]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i] * b[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) b.grad()[i] += g[i] * a[i];
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c, Tape* tape = nullptr) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
  if (detail::track(tape, {a})) {
    out.set_requires_grad(true);
    tape->record(out, [a, out, c]() mutable {
      const auto& g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i] * c;
    });
  }
  return out;
}

/// Matrix product of a [m x k] and b [k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[p * n + j];
    }
  if (detail::track(tape, {a, b})) {
    out.set_requires_grad(true);
    tape->record(out, [a, b, out, m, k, n]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad()) {
        // dA = G * B^T
        auto& ga = a.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j)
              acc += g[i * n + j] * b[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        // dB = A^T * G
        auto& gb = b.grad();
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i)
              acc += a[i * k + p] * g[i * n + j];
            gb[p * n + j] += acc;
          }
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a, Tape* tape = nullptr) {
  if (a.rank() != 2)
    throw DimensionError("transpose: expected rank-2 tensor, got " +
                         shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  if (detail::track(tape, {a})) {
    out.set_requires_grad(true);
    tape->record(out, [a, out, m, n]() mutable {
      const auto& g = out.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) a.grad()[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

/// Broadcast-add a bias vector [f] over the rows of x [batch x f].
inline Tensor add_bias(const Tensor& x, const Tensor& bias,
                       Tape* tape = nullptr) {
  if (x.rank() != 2 || bias.rank() != 1 || x.shape()[1] != bias.shape()[0])
    throw DimensionError("add_bias: incompatible shapes " +
                         shape_str(x.shape()) + " vs " +
                         shape_str(bias.shape()));
  const std::size_t b = x.shape()[0], f = x.shape()[1];
  Tensor out({b, f});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < f; ++j) out[i * f + j] = x[i * f + j] + bias[j];
  if (detail::track(tape, {x, bias})) {
    out.set_requires_grad(true);
    tape->record(out, [x, bias, out, b, f]() mutable {
      const auto& g = out.grad();
      if (x.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i) x.grad()[i] += g[i];
      if (bias.requires_grad())
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < f; ++j) bias.grad()[j] += g[i * f + j];
    });
  }
  return out;
}

/// Affine layer x [batch x in] -> x W^T + b with W [out x in], b [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias,
                     Tape* tape = nullptr) {
  if (x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1])
    throw DimensionError("linear: input " + shape_str(x.shape()) +
                         " incompatible with weight " + shape_str(w.shape()));
  if (bias.rank() != 1 || bias.shape()[0] != w.shape()[0])
    throw DimensionError("linear: bias " + shape_str(bias.shape()) +
                         " incompatible with weight " + shape_str(w.shape()));
  const std::size_t b = x.shape()[0], in = x.shape()[1], out_f = w.shape()[0];
  Tensor out({b, out_f});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t o = 0; o < out_f; ++o) {
      double acc = bias[o];
      for (std::size_t j = 0; j < in; ++j)
        acc += x[i * in + j] * w[o * in + j];
      out[i * out_f + o] = acc;
    }
  if (detail::track(tape, {x, w, bias})) {
    out.set_requires_grad(true);
    tape->record(out, [x, w, bias, out, b, in, out_f]() mutable {
      const auto& g = out.grad();
      if (x.requires_grad()) {
        auto& gx = x.grad();
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < in; ++j) {
            double acc = 0.0;
            for (std::size_t o = 0; o < out_f; ++o)
              acc += g[i * out_f + o] * w[o * in + j];
            gx[i * in + j] += acc;
          }
      }
      if (w.requires_grad()) {
        auto& gw = w.grad();
        for (std::size_t o = 0; o < out_f; ++o)
          for (std::size_t j = 0; j < in; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < b; ++i)
              acc += g[i * out_f + o] * x[i * in + j];
            gw[o * in + j] += acc;
          }
      }
      if (bias.requires_grad()) {
        auto& gb = bias.grad();
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[i * out_f + o];
      }
    });
  }
  return out;
}

/// Parametric ReLU, max(0,x) + alpha*min(0,x) with a single scalar slope.
/// Subgradient at x == 0 takes the positive branch (dy/dx = 1).
inline Tensor prelu(const Tensor& x, const Tensor& alpha,
                    Tape* tape = nullptr) {
  if (alpha.size() != 1)
    throw ContractError("prelu: alpha must be a scalar parameter, got " +
                        shape_str(alpha.shape()));
  const double a = alpha[0];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = x[i] >= 0.0 ? x[i] : a * x[i];
  if (detail::track(tape, {x, alpha})) {
    out.set_requires_grad(true);
    tape->record(out, [x, alpha, out, a]() mutable {
      const auto& g = out.grad();
      if (x.requires_grad())
        for (std::size_t i = 0; i < g.size(); ++i)
          x.grad()[i] += g[i] * (x[i] >= 0.0 ? 1.0 : a);
      if (alpha.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] < 0.0) acc += g[i] * x[i];
        alpha.grad()[0] += acc;
      }
    });
  }
  return out;
}

inline Tensor exp(const Tensor& x, Tape* tape = nullptr) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape->record(out, [x, out]() mutable {
      const auto& g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) x.grad()[i] += g[i] * out[i];
    });
  }
  return out;
}

inline Tensor log(const Tensor& x, Tape* tape = nullptr) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape->record(out, [x, out]() mutable {
      const auto& g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) x.grad()[i] += g[i] / x[i];
    });
  }
  return out;
}

/// Numerically stable softmax over the last axis.
inline Tensor softmax(const Tensor& x, Tape* tape = nullptr) {
  if (x.rank() == 0 || x.shape().back() == 0)
    throw DimensionError("softmax: empty last axis in " + shape_str(x.shape()));
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * c;
    double* yr = out.data().data() + r * c;
    double m = xr[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (yr[j] = std::exp(xr[j] - m));
    for (std::size_t j = 0; j < c; ++j) yr[j] /= z;
  }
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape->record(out, [x, out, rows, c]() mutable {
      const auto& g = out.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j)
          dot += g[r * c + j] * out[r * c + j];
        for (std::size_t j = 0; j < c; ++j)
          x.grad()[r * c + j] += out[r * c + j] * (g[r * c + j] - dot);
      }
    });
  }
  return out;
}

inline Tensor sum(const Tensor& x, Tape* tape = nullptr) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  Tensor out = Tensor::scalar(s);
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape->record(out, [x, out]() mutable {
      const double g = out.grad()[0];
      for (std::size_t i = 0; i < x.size(); ++i) x.grad()[i] += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& x, Tape* tape = nullptr) {
  if (x.size() == 0) throw ContractError("mean of empty tensor");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  const double inv = 1.0 / static_cast<double>(x.size());
  Tensor out = Tensor::scalar(s * inv);
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape->record(out, [x, out, inv]() mutable {
      const double g = out.grad()[0] * inv;
      for (std::size_t i = 0; i < x.size(); ++i) x.grad()[i] += g;
    });
  }
  return out;
}

/// 2-D cross-correlation, stride 1, symmetric zero padding.
/// x [N x C x H x W], kernel [O x C x kh x kw], bias [O] (may be empty).
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                     std::size_t pad = 0, Tape* tape = nullptr) {
  if (x.rank() != 4 || kernel.rank() != 4 || x.shape()[1] != kernel.shape()[1])
    throw DimensionError("conv2d: input " + shape_str(x.shape()) +
                         " incompatible with kernel " +
                         shape_str(kernel.shape()));
  const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  const std::size_t cout = kernel.shape()[0], kh = kernel.shape()[2],
                    kw = kernel.shape()[3];
  if (h + 2 * pad < kh || w + 2 * pad < kw)
    throw DimensionError("conv2d: kernel larger than padded input");
  const bool has_bias = bias.size() > 0;
  if (has_bias && (bias.rank() != 1 || bias.shape()[0] != cout))
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) +
                         " incompatible with kernel " +
                         shape_str(kernel.shape()));
  const std::size_t oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
  Tensor out({n, cout, oh, ow});
  auto xi = [&](std::size_t b, std::size_t c, std::ptrdiff_t i,
                std::ptrdiff_t j) -> double {
    if (i < 0 || j < 0 || i >= static_cast<std::ptrdiff_t>(h) ||
        j >= static_cast<std::ptrdiff_t>(w))
      return 0.0;
    return x[((b * cin + c) * h + i) * w + j];
  };
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = has_bias ? bias[o] : 0.0;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v)
                acc += kernel[((o * cin + c) * kh + u) * kw + v] *
                       xi(b, c,
                          static_cast<std::ptrdiff_t>(i + u) -
                              static_cast<std::ptrdiff_t>(pad),
                          static_cast<std::ptrdiff_t>(j + v) -
                              static_cast<std::ptrdiff_t>(pad));
          out[((b * cout + o) * oh + i) * ow + j] = acc;
        }
  if (detail::track(tape, {x, kernel, bias})) {
    out.set_requires_grad(true);
    tape->record(out, [x, kernel, bias, out, n, cin, h, w, cout, kh, kw, oh,
                       ow, pad, has_bias]() mutable {
      const auto& g = out.grad();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
              const double gv = g[((b * cout + o) * oh + i) * ow + j];
              if (gv == 0.0) continue;
              if (has_bias && bias.requires_grad()) bias.grad()[o] += gv;
              for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t u = 0; u < kh; ++u)
                  for (std::size_t v = 0; v < kw; ++v) {
                    const std::ptrdiff_t ii =
                        static_cast<std::ptrdiff_t>(i + u) -
                        static_cast<std::ptrdiff_t>(pad);
                    const std::ptrdiff_t jj =
                        static_cast<std::ptrdiff_t>(j + v) -
                        static_cast<std::ptrdiff_t>(pad);
                    if (ii < 0 || jj < 0 ||
                        ii >= static_cast<std::ptrdiff_t>(h) ||
                        jj >= static_cast<std::ptrdiff_t>(w))
                      continue;
                    const std::size_t xoff = ((b * cin + c) * h + ii) * w + jj;
                    const std::size_t koff =
                        ((o * cin + c) * kh + u) * kw + v;
                    if (kernel.requires_grad())
                      kernel.grad()[koff] += gv * x[xoff];
                    if (x.requires_grad())
                      x.grad()[xoff] += gv * kernel[koff];
                  }
            }
    });
  }
  return out;
}

}  // namespace lc
