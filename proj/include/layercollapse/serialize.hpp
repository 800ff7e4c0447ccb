#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "layercollapse/common.hpp"
#include "layercollapse/layers.hpp"
#include "layercollapse/loss.hpp"
#include "layercollapse/train.hpp"

namespace lc {

using json = nlohmann::json;

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'L', 'C', 'K', 'P'};

// ---------------------------------------------------------------------------
// Little-endian binary helpers
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size())
      throw FormatError("checkpoint: truncated at byte offset " +
                        std::to_string(pos) + " (need " + std::to_string(n) +
                        " more bytes)");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= std::uint64_t(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

// Write-temp-then-rename so readers never observe a partial file.
inline void atomic_write(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " +
                        ec.message());
}

inline void append_tensor(std::string& blob, const std::string& name,
                          const Tensor& t) {
  put_u32(blob, static_cast<std::uint32_t>(name.size()));
  blob += name;
  put_u32(blob, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u32(blob, static_cast<std::uint32_t>(e));
  for (double v : t.data()) put_f32(blob, static_cast<float>(v));
}

inline void append_vector(std::string& blob, const std::string& name,
                          const std::vector<double>& v) {
  put_u32(blob, static_cast<std::uint32_t>(name.size()));
  blob += name;
  put_u32(blob, 1);
  put_u32(blob, static_cast<std::uint32_t>(v.size()));
  for (double x : v) put_f32(blob, static_cast<float>(x));
}

inline Tensor read_tensor(ByteReader& r, const std::string& expected_name,
                          const std::vector<std::size_t>& expected_shape) {
  const std::size_t at = r.pos;
  const std::uint32_t name_len = r.u32();
  const std::string name = r.bytes(name_len);
  if (name != expected_name)
    throw FormatError("checkpoint: tensor '" + name + "' at byte offset " +
                      std::to_string(at) + " does not match metadata entry '" +
                      expected_name + "'");
  const std::uint32_t rank = r.u32();
  std::vector<std::size_t> shape(rank);
  for (auto& e : shape) e = r.u32();
  if (!expected_shape.empty() && shape != expected_shape)
    throw FormatError("checkpoint: tensor '" + name + "' has shape " +
                      shape_str(shape) + ", metadata says " +
                      shape_str(expected_shape));
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.f32();
  return t;
}

// Alphas stored in the JSON metadata carry the same float32 quantization as
// the blob so a load/save cycle is byte-identical.
inline double quantize_f32(double v) {
  return static_cast<double>(static_cast<float>(v));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoint save/load
// ---------------------------------------------------------------------------

inline std::string serialize_checkpoint(const ModelGraph& m) {
  json meta;
  meta["seed"] = m.metadata.count("seed") ? m.metadata.at("seed") : "0";
  json cfg_echo = json::object();
  for (const auto& [k, v] : m.metadata)
    if (k != "seed") cfg_echo[k] = v;
  meta["config"] = cfg_echo;
  json jlayers = json::array();
  std::string blob;
  for (const auto& node : m.layers) {
    json jl;
    jl["name"] = node.name;
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, LinearLayer>) {
            jl["type"] = "linear";
            jl["in"] = l.in_features();
            jl["out"] = l.out_features();
            detail::append_tensor(blob, node.name + ".weight", l.weight);
            detail::append_tensor(blob, node.name + ".bias", l.bias);
          } else if constexpr (std::is_same_v<T, PReLULayer>) {
            jl["type"] = "prelu";
            jl["alpha"] = detail::quantize_f32(l.alpha[0]);
          } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
            jl["type"] = "batchnorm";
            jl["width"] = l.width();
            jl["momentum"] = l.momentum;
            jl["eps"] = l.eps;
            detail::append_tensor(blob, node.name + ".gamma", l.gamma);
            detail::append_tensor(blob, node.name + ".beta", l.beta);
            detail::append_vector(blob, node.name + ".running_mean",
                                  l.running_mean);
            detail::append_vector(blob, node.name + ".running_var",
                                  l.running_var);
          } else if constexpr (std::is_same_v<T, DropoutLayer>) {
            jl["type"] = "dropout";
            jl["p"] = l.p;
          } else if constexpr (std::is_same_v<T, CollapsibleBlock>) {
            jl["type"] = "block";
            jl["in"] = l.in_features();
            jl["hidden"] = l.hidden_features();
            jl["out"] = l.out_features();
            jl["alpha"] = detail::quantize_f32(l.act.alpha[0]);
            jl["batchnorm"] = static_cast<bool>(l.bn);
            if (l.bn) {
              jl["momentum"] = l.bn->momentum;
              jl["eps"] = l.bn->eps;
            }
            if (l.drop) jl["dropout"] = l.drop->p;
            detail::append_tensor(blob, node.name + ".fc1.weight",
                                  l.fc1.weight);
            detail::append_tensor(blob, node.name + ".fc1.bias", l.fc1.bias);
            if (l.bn) {
              detail::append_tensor(blob, node.name + ".bn.gamma",
                                    l.bn->gamma);
              detail::append_tensor(blob, node.name + ".bn.beta", l.bn->beta);
              detail::append_vector(blob, node.name + ".bn.running_mean",
                                    l.bn->running_mean);
              detail::append_vector(blob, node.name + ".bn.running_var",
                                    l.bn->running_var);
            }
            detail::append_tensor(blob, node.name + ".fc2.weight",
                                  l.fc2.weight);
            detail::append_tensor(blob, node.name + ".fc2.bias", l.fc2.bias);
          }
        },
        node.layer);
    jlayers.push_back(std::move(jl));
  }
  meta["layers"] = jlayers;
  const std::string meta_str = meta.dump();

  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, meta_str.size());
  out += meta_str;
  out += blob;
  return out;
}

inline void save_checkpoint(const ModelGraph& m, const std::string& path) {
  detail::atomic_write(path, serialize_checkpoint(m));
}

inline ModelGraph deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic at byte offset 0");
  detail::ByteReader r{bytes, 4};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version) + " at byte offset 4");
  const std::uint64_t meta_len = r.u64();
  json meta;
  try {
    meta = json::parse(r.bytes(meta_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: metadata is not valid JSON: ") +
                      e.what());
  }

  ModelGraph m;
  if (meta.contains("seed")) m.metadata["seed"] = meta["seed"].get<std::string>();
  if (meta.contains("config"))
    for (auto& [k, v] : meta["config"].items())
      m.metadata[k] = v.get<std::string>();
  if (m.metadata.count("seed"))
    m.dropout_rng =
        Rng(Rng::mix(std::stoull(m.metadata["seed"])) ^ 0xd02b7f5a);

  for (const auto& jl : meta.at("layers")) {
    const std::string name = jl.at("name").get<std::string>();
    const std::string type = jl.at("type").get<std::string>();
    if (type == "linear") {
      const std::size_t in = jl.at("in").get<std::size_t>();
      const std::size_t out_f = jl.at("out").get<std::size_t>();
      // Blob records must be consumed in write order, so never nest two
      // read_tensor calls in one argument list.
      Tensor w = detail::read_tensor(r, name + ".weight", {out_f, in});
      Tensor b = detail::read_tensor(r, name + ".bias", {out_f});
      LinearLayer l(std::move(w), std::move(b));
      l.weight.set_requires_grad(true);
      l.bias.set_requires_grad(true);
      m.add(name, std::move(l));
    } else if (type == "prelu") {
      PReLULayer l(jl.at("alpha").get<double>());
      l.alpha.set_requires_grad(true);
      m.add(name, std::move(l));
    } else if (type == "batchnorm") {
      const std::size_t h = jl.at("width").get<std::size_t>();
      BatchNormLayer l(h);
      l.momentum = jl.at("momentum").get<double>();
      l.eps = jl.at("eps").get<double>();
      l.gamma = detail::read_tensor(r, name + ".gamma", {h});
      l.beta = detail::read_tensor(r, name + ".beta", {h});
      l.running_mean = detail::read_tensor(r, name + ".running_mean", {h}).data();
      l.running_var = detail::read_tensor(r, name + ".running_var", {h}).data();
      l.gamma.set_requires_grad(true);
      l.beta.set_requires_grad(true);
      m.add(name, std::move(l));
    } else if (type == "dropout") {
      m.add(name, DropoutLayer(jl.at("p").get<double>()));
    } else if (type == "block") {
      const std::size_t in = jl.at("in").get<std::size_t>();
      const std::size_t h = jl.at("hidden").get<std::size_t>();
      const std::size_t out_f = jl.at("out").get<std::size_t>();
      CollapsibleBlock b;
      Tensor w1 = detail::read_tensor(r, name + ".fc1.weight", {h, in});
      Tensor b1 = detail::read_tensor(r, name + ".fc1.bias", {h});
      b.fc1 = LinearLayer(std::move(w1), std::move(b1));
      if (jl.at("batchnorm").get<bool>()) {
        BatchNormLayer bn(h);
        bn.momentum = jl.at("momentum").get<double>();
        bn.eps = jl.at("eps").get<double>();
        bn.gamma = detail::read_tensor(r, name + ".bn.gamma", {h});
        bn.beta = detail::read_tensor(r, name + ".bn.beta", {h});
        bn.running_mean =
            detail::read_tensor(r, name + ".bn.running_mean", {h}).data();
        bn.running_var =
            detail::read_tensor(r, name + ".bn.running_var", {h}).data();
        bn.gamma.set_requires_grad(true);
        bn.beta.set_requires_grad(true);
        b.bn = std::move(bn);
      }
      b.act = PReLULayer(jl.at("alpha").get<double>());
      b.act.alpha.set_requires_grad(true);
      if (jl.contains("dropout"))
        b.drop = DropoutLayer(jl.at("dropout").get<double>());
      Tensor w2 = detail::read_tensor(r, name + ".fc2.weight", {out_f, h});
      Tensor b2 = detail::read_tensor(r, name + ".fc2.bias", {out_f});
      b.fc2 = LinearLayer(std::move(w2), std::move(b2));
      b.fc1.weight.set_requires_grad(true);
      b.fc1.bias.set_requires_grad(true);
      b.fc2.weight.set_requires_grad(true);
      b.fc2.bias.set_requires_grad(true);
      m.add(name, std::move(b));
    } else {
      throw FormatError("checkpoint: unknown layer type '" + type + "'");
    }
  }
  if (r.pos != bytes.size())
    throw FormatError("checkpoint: " +
                      std::to_string(bytes.size() - r.pos) +
                      " trailing bytes at offset " + std::to_string(r.pos));
  return m;
}

inline ModelGraph load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// CSV emission: 6 significant digits, stable ordering.
// ---------------------------------------------------------------------------

inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) {
    append_row(header);
  }
  void append_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) body_ += ',';
      body_ += cells[i];
    }
    body_ += '\n';
  }
  const std::string& str() const { return body_; }
  void write(const std::string& path) const {
    detail::atomic_write(path, body_);
  }

 private:
  std::string body_;
};

// ---------------------------------------------------------------------------
// Run configuration (JSON file + CLI overrides)
// ---------------------------------------------------------------------------

struct DataConfig {
  std::string generator = "blobs";  // blobs | spirals | regression | idx
  std::uint64_t seed = 0;
  std::size_t n = 2000;
  std::size_t classes = 4;
  double spread = 0.35;
  double noise_std = 0.3;
  std::string shape = "sine";
  std::string images, labels;  // idx file paths
};

struct ModelConfig {
  std::vector<BlockSpec> blocks;
  std::string checkpoint;  // load instead of init when set
  bool retrofit = false;
  std::uint64_t seed = 0;
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  CollapseConfig collapse;
  std::string output = "out";
};

namespace detail {

inline void reject_unknown_keys(const json& j, const std::string& section,
                                std::initializer_list<const char*> known,
                                std::vector<std::string>& bad) {
  for (auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* n : known) ok = ok || k == n;
    if (!ok) bad.push_back(section.empty() ? k : section + "." + k);
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
  RunConfig rc;
  std::vector<std::string> bad;
  detail::reject_unknown_keys(
      j, "", {"model", "data", "train", "reg", "collapse", "output"}, bad);
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::reject_unknown_keys(m, "model",
                                {"blocks", "checkpoint", "retrofit", "seed"},
                                bad);
    if (m.contains("checkpoint"))
      rc.model.checkpoint = m["checkpoint"].get<std::string>();
    if (m.contains("retrofit")) rc.model.retrofit = m["retrofit"].get<bool>();
    if (m.contains("seed")) rc.model.seed = m["seed"].get<std::uint64_t>();
    if (m.contains("blocks"))
      for (const auto& b : m["blocks"]) {
        detail::reject_unknown_keys(
            b, "model.blocks", {"in", "hidden", "out", "batchnorm", "dropout"},
            bad);
        BlockSpec s;
        s.in = b.at("in").get<std::size_t>();
        s.hidden = b.at("hidden").get<std::size_t>();
        s.out = b.at("out").get<std::size_t>();
        if (b.contains("batchnorm")) s.batchnorm = b["batchnorm"].get<bool>();
        if (b.contains("dropout")) s.dropout = b["dropout"].get<double>();
        rc.model.blocks.push_back(s);
      }
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown_keys(d, "data",
                                {"generator", "seed", "n", "classes", "spread",
                                 "noise_std", "shape", "images", "labels"},
                                bad);
    if (d.contains("generator"))
      rc.data.generator = d["generator"].get<std::string>();
    if (d.contains("seed")) rc.data.seed = d["seed"].get<std::uint64_t>();
    if (d.contains("n")) rc.data.n = d["n"].get<std::size_t>();
    if (d.contains("classes")) rc.data.classes = d["classes"].get<std::size_t>();
    if (d.contains("spread")) rc.data.spread = d["spread"].get<double>();
    if (d.contains("noise_std"))
      rc.data.noise_std = d["noise_std"].get<double>();
    if (d.contains("shape")) rc.data.shape = d["shape"].get<std::string>();
    if (d.contains("images")) rc.data.images = d["images"].get<std::string>();
    if (d.contains("labels")) rc.data.labels = d["labels"].get<std::string>();
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::reject_unknown_keys(t, "train",
                                {"seed", "epochs", "batch_size", "lr",
                                 "momentum", "lr_schedule",
                                 "max_epochs_per_layer"},
                                bad);
    if (t.contains("seed")) rc.train.seed = t["seed"].get<std::uint64_t>();
    if (t.contains("epochs")) rc.train.epochs = t["epochs"].get<std::size_t>();
    if (t.contains("batch_size"))
      rc.train.batch_size = t["batch_size"].get<std::size_t>();
    if (t.contains("lr")) rc.train.lr = t["lr"].get<double>();
    if (t.contains("momentum")) rc.train.momentum = t["momentum"].get<double>();
    if (t.contains("max_epochs_per_layer"))
      rc.train.max_epochs_per_layer =
          t["max_epochs_per_layer"].get<std::size_t>();
    if (t.contains("lr_schedule"))
      for (const auto& s : t["lr_schedule"])
        rc.train.lr_schedule.emplace_back(s.at(0).get<std::size_t>(),
                                          s.at(1).get<double>());
  }
  if (j.contains("reg")) {
    const auto& rg = j["reg"];
    detail::reject_unknown_keys(rg, "reg", {"lc", "layer_fraction"}, bad);
    if (rg.contains("lc")) rc.train.reg.lc = rg["lc"].get<double>();
    if (rg.contains("layer_fraction"))
      rc.train.reg.layer_fraction = rg["layer_fraction"].get<double>();
  }
  if (j.contains("collapse")) {
    const auto& c = j["collapse"];
    detail::reject_unknown_keys(c, "collapse", {"tau"}, bad);
    if (c.contains("tau")) rc.collapse.tau = c["tau"].get<double>();
    rc.train.tau = rc.collapse.tau;
  }
  if (j.contains("output")) rc.output = j["output"].get<std::string>();
  if (!bad.empty()) {
    std::string msg = "config: unknown keys:";
    for (const auto& k : bad) msg += " " + k;
    throw ConfigError(msg);
  }
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace lc
