#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "layercollapse/common.hpp"
#include "layercollapse/rng.hpp"
#include "layercollapse/tensor.hpp"

namespace lc {

struct Dataset {
  Tensor inputs;            // [N x d]
  std::vector<int> labels;  // classification targets
  Tensor targets;           // [N x k] regression targets
  bool classification = true;
  std::vector<std::size_t> train_idx, val_idx;

  std::size_t size() const { return inputs.shape()[0]; }

  void split(double val_fraction, Rng& rng) {
    const std::size_t n = size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    const std::size_t n_val =
        static_cast<std::size_t>(val_fraction * static_cast<double>(n));
    val_idx.assign(idx.begin(), idx.begin() + n_val);
    train_idx.assign(idx.begin() + n_val, idx.end());
  }
};

enum class RegressionShape { kSine, kPiecewise };

/// y = f(x) + eps, eps ~ N(0, noise_std^2), x uniform on [-1, 1].
inline Dataset gen_regression_1d(std::uint64_t seed, std::size_t n,
                                 double noise_std,
                                 RegressionShape shape = RegressionShape::kSine) {
  Rng rng(seed);
  Dataset d;
  d.classification = false;
  d.inputs = Tensor({n, 1});
  d.targets = Tensor({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    double y;
    switch (shape) {
      case RegressionShape::kSine:
        y = std::sin(3.141592653589793 * x);
        break;
      case RegressionShape::kPiecewise:
        // Linear trend with a mild kink at the origin.
        y = x < 0.0 ? 0.8 * x - 0.25 : 1.2 * x - 0.25;
        break;
      default:
        throw ContractError("gen_regression_1d: unknown shape");
    }
    d.inputs[i] = x;
    d.targets[i] = y + (noise_std > 0.0 ? rng.normal(0.0, noise_std) : 0.0);
  }
  Rng split_rng = rng.fork(1);
  d.split(0.2, split_rng);
  return d;
}

/// Gaussian blobs on a circle, class counts balanced within +-1.
inline Dataset gen_blobs(std::uint64_t seed, std::size_t n, std::size_t classes,
                         double spread) {
  if (classes < 2) throw ContractError("gen_blobs: need at least 2 classes");
  Rng rng(seed);
  Dataset d;
  d.classification = true;
  d.inputs = Tensor({n, 2});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;  // round-robin keeps counts balanced
    const double angle =
        6.283185307179586 * static_cast<double>(c) / static_cast<double>(classes);
    d.inputs[i * 2 + 0] = 2.0 * std::cos(angle) + spread * rng.normal();
    d.inputs[i * 2 + 1] = 2.0 * std::sin(angle) + spread * rng.normal();
    d.labels[i] = static_cast<int>(c);
  }
  Rng split_rng = rng.fork(1);
  d.split(0.2, split_rng);
  return d;
}

/// Two interleaved spirals, binary labels.
inline Dataset gen_two_spirals(std::uint64_t seed, std::size_t n,
                               double spread) {
  Rng rng(seed);
  Dataset d;
  d.classification = true;
  d.inputs = Tensor({n, 2});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    const double t = rng.uniform(0.25, 1.0) * 3.0 * 3.141592653589793;
    const double sign = c == 0 ? 1.0 : -1.0;
    d.inputs[i * 2 + 0] =
        sign * t * std::cos(t) / 10.0 + spread * rng.normal();
    d.inputs[i * 2 + 1] =
        sign * t * std::sin(t) / 10.0 + spread * rng.normal();
    d.labels[i] = c;
  }
  Rng split_rng = rng.fork(1);
  d.split(0.2, split_rng);
  return d;
}

// ---------------------------------------------------------------------------
// IDX binary format (big-endian magic 0x00000803 images / 0x00000801 labels)
// ---------------------------------------------------------------------------

struct IdxContent {
  bool is_labels = false;
  std::vector<std::size_t> dims;
  Tensor data;              // images: [N x pixels] scaled to [0,1]
  std::vector<int> labels;  // label files only
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, std::size_t offset,
                               const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in)
    throw FormatError("idx: truncated read at byte offset " +
                      std::to_string(offset) + " in " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace detail

inline IdxContent load_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("idx: cannot open " + path);
  const std::uint32_t magic = detail::read_be32(in, 0, path);
  IdxContent out;
  std::size_t ndims;
  if (magic == 0x00000803u) {
    out.is_labels = false;
    ndims = 3;
  } else if (magic == 0x00000801u) {
    out.is_labels = true;
    ndims = 1;
  } else {
    throw FormatError("idx: bad magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", magic);
      return std::string(buf);
    }() + " at byte offset 0 in " + path);
  }
  std::size_t offset = 4;
  out.dims.resize(ndims);
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    out.dims[i] = detail::read_be32(in, offset, path);
    offset += 4;
    total *= out.dims[i];
  }
  std::vector<unsigned char> bytes(total);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(total));
  if (static_cast<std::size_t>(in.gcount()) != total)
    throw FormatError("idx: truncated payload at byte offset " +
                      std::to_string(offset + static_cast<std::size_t>(
                                                  std::max<std::streamsize>(
                                                      in.gcount(), 0))) +
                      " in " + path);
  if (out.is_labels) {
    out.labels.assign(bytes.begin(), bytes.end());
  } else {
    const std::size_t n = out.dims[0];
    const std::size_t pixels = out.dims[1] * out.dims[2];
    out.data = Tensor({n, pixels});
    for (std::size_t i = 0; i < total; ++i)
      out.data[i] = static_cast<double>(bytes[i]) / 255.0;
  }
  return out;
}

inline void save_idx_images(const std::string& path,
                            const std::vector<unsigned char>& pixels,
                            std::size_t n, std::size_t rows, std::size_t cols) {
  if (pixels.size() != n * rows * cols)
    throw ContractError("save_idx_images: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("idx: cannot write " + path);
  detail::write_be32(out, 0x00000803u);
  detail::write_be32(out, static_cast<std::uint32_t>(n));
  detail::write_be32(out, static_cast<std::uint32_t>(rows));
  detail::write_be32(out, static_cast<std::uint32_t>(cols));
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
}

inline void save_idx_labels(const std::string& path,
                            const std::vector<unsigned char>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("idx: cannot write " + path);
  detail::write_be32(out, 0x00000801u);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

/// Pairs an IDX image file with an IDX label file into a classification set.
inline Dataset load_idx_dataset(const std::string& images_path,
                                const std::string& labels_path,
                                std::uint64_t seed = 0) {
  IdxContent images = load_idx(images_path);
  IdxContent labels = load_idx(labels_path);
  if (images.is_labels || !labels.is_labels)
    throw FormatError("idx: expected an image file and a label file");
  if (images.dims[0] != labels.dims[0])
    throw FormatError("idx: image count " + std::to_string(images.dims[0]) +
                      " does not match label count " +
                      std::to_string(labels.dims[0]));
  Dataset d;
  d.classification = true;
  d.inputs = images.data;
  d.labels = labels.labels;
  Rng rng(seed);
  d.split(0.2, rng);
  return d;
}

}  // namespace lc
