#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "layercollapse/common.hpp"

namespace lc {

/// One fusable MLP in a symbolic architecture. `positions` is the number of
/// places the MLP is applied per forward pass (tokens for channel-mixing,
/// channels for token-mixing, 1 for a classifier head); it multiplies MACs
/// but not parameters.
struct MlpSite {
  std::string name;
  std::uint64_t n_in = 0, n_hidden = 0, n_out = 0;
  std::uint64_t positions = 1;

  std::uint64_t params_before() const {
    return n_in * n_hidden + n_hidden + n_hidden * n_out + n_out;
  }
  std::uint64_t params_after() const { return n_in * n_out + n_out; }
  std::uint64_t macs_before() const {
    return positions * (n_in * n_hidden + n_hidden * n_out);
  }
  std::uint64_t macs_after() const { return positions * n_in * n_out; }
};

/// One collapse operation in the published fusion order. For Mixer a step
/// covers a token/channel pair; for VGG the second step fuses across the
/// already-fused classifier tail, so its deltas are precomputed rather than
/// derived from the listed sites alone.
struct CollapseStep {
  std::vector<MlpSite> sites;
  std::uint64_t params_removed = 0;
  std::uint64_t macs_removed = 0;
};

struct ArchDescriptor {
  std::string family;
  std::uint64_t input_resolution = 224;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
  std::vector<CollapseStep> steps;  // in collapse order

  std::vector<MlpSite> collapsible_sites() const {
    std::vector<MlpSite> out;
    for (const auto& s : steps)
      out.insert(out.end(), s.sites.begin(), s.sites.end());
    return out;
  }
};

inline std::uint64_t count_params(const ArchDescriptor& d) {
  return d.total_params;
}

inline std::uint64_t count_macs(const ArchDescriptor& d) {
  return d.total_macs;
}

/// Post-collapse totals after applying the first `layers_to_collapse` steps.
inline std::pair<std::uint64_t, std::uint64_t> collapse_accounting(
    const ArchDescriptor& d, std::size_t layers_to_collapse) {
  if (layers_to_collapse > d.steps.size())
    throw ContractError("collapse_accounting: " + d.family + " has only " +
                        std::to_string(d.steps.size()) + " collapse steps");
  std::uint64_t params = d.total_params, macs = d.total_macs;
  for (std::size_t i = 0; i < layers_to_collapse; ++i) {
    params -= d.steps[i].params_removed;
    macs -= d.steps[i].macs_removed;
  }
  return {params, macs};
}

/// Fraction of parameters/MACs removed when every collapsible MLP is
/// replaced by a single linear map.
inline std::pair<double, double> mlp_share(const ArchDescriptor& d) {
  std::uint64_t dp = 0, dm = 0;
  for (const auto& s : d.steps) {
    dp += s.params_removed;
    dm += s.macs_removed;
  }
  return {static_cast<double>(dp) / static_cast<double>(d.total_params),
          static_cast<double>(dm) / static_cast<double>(d.total_macs)};
}

namespace detail {

inline ArchDescriptor vgg_descriptor(const std::string& family,
                                     const std::vector<int>& cfg,
                                     std::uint64_t res) {
  ArchDescriptor d;
  d.family = family;
  d.input_resolution = res;
  std::uint64_t cin = 3, hw = res;
  for (int c : cfg) {
    if (c < 0) {  // maxpool
      hw /= 2;
      continue;
    }
    const std::uint64_t cout = static_cast<std::uint64_t>(c);
    d.total_params += 9 * cin * cout + cout;
    d.total_macs += 9 * cin * cout * hw * hw;
    cin = cout;
  }
  const std::uint64_t feat = cin * hw * hw;  // 512*7*7 at 224
  const std::uint64_t h = 4096, classes = 1000;
  d.total_params += feat * h + h + h * h + h + h * classes + classes;
  d.total_macs += feat * h + h * h + h * classes;

  // Step 1 fuses the 4096->4096->1000 tail; step 2 then fuses
  // feat->4096->1000, leaving a single feat->1000 map.
  CollapseStep s1;
  s1.sites.push_back({"classifier.tail", h, h, classes, 1});
  s1.params_removed = (h * h + h + h * classes + classes) -
                      (h * classes + classes);
  s1.macs_removed = (h * h + h * classes) - h * classes;
  CollapseStep s2;
  s2.sites.push_back({"classifier.head", feat, h, classes, 1});
  s2.params_removed = (feat * h + h + h * classes + classes) -
                      (feat * classes + classes);
  s2.macs_removed = (feat * h + h * classes) - feat * classes;
  d.steps = {std::move(s1), std::move(s2)};
  return d;
}

inline ArchDescriptor vit_descriptor(const std::string& family,
                                     std::uint64_t dim, std::uint64_t depth,
                                     std::uint64_t mlp_dim,
                                     std::uint64_t res) {
  ArchDescriptor d;
  d.family = family;
  d.input_resolution = res;
  const std::uint64_t patch = 16, classes = 1000;
  const std::uint64_t grid = res / patch;
  const std::uint64_t patches = grid * grid;
  const std::uint64_t tokens = patches + 1;  // + class token
  const std::uint64_t pdim = 3 * patch * patch;

  d.total_params = pdim * dim + dim          // patch embedding
                   + tokens * dim + dim      // positional + class token
                   + 2 * dim + dim * classes + classes;  // final LN + head
  d.total_macs = patches * pdim * dim + dim * classes;
  const std::uint64_t block_params =
      4 * dim                                // two LayerNorms
      + dim * 3 * dim + 3 * dim              // qkv
      + dim * dim + dim                      // attention out proj
      + dim * mlp_dim + mlp_dim + mlp_dim * dim + dim;
  // Linear-projection MACs only; the batched score/value products are
  // excluded, following the usual profiler convention for these models.
  const std::uint64_t block_macs =
      tokens * (dim * 3 * dim + dim * dim + 2 * dim * mlp_dim);
  d.total_params += depth * block_params;
  d.total_macs += depth * block_macs;

  // Collapsed from the last block backward, one MLP per step.
  for (std::uint64_t i = 0; i < depth; ++i) {
    CollapseStep s;
    MlpSite site{"blocks." + std::to_string(depth - 1 - i) + ".mlp", dim,
                 mlp_dim, dim, tokens};
    s.params_removed = site.params_before() - site.params_after();
    s.macs_removed = site.macs_before() - site.macs_after();
    s.sites.push_back(std::move(site));
    d.steps.push_back(std::move(s));
  }
  return d;
}

inline ArchDescriptor mixer_descriptor(const std::string& family,
                                       std::uint64_t dim, std::uint64_t depth,
                                       std::uint64_t token_dim,
                                       std::uint64_t channel_dim,
                                       std::uint64_t res) {
  ArchDescriptor d;
  d.family = family;
  d.input_resolution = res;
  const std::uint64_t patch = 16, classes = 1000;
  const std::uint64_t tokens = (res / patch) * (res / patch);
  const std::uint64_t pdim = 3 * patch * patch;

  d.total_params = pdim * dim + dim + 2 * dim + dim * classes + classes;
  d.total_macs = tokens * pdim * dim + dim * classes;
  const std::uint64_t block_params =
      4 * dim + tokens * token_dim + token_dim + token_dim * tokens + tokens +
      dim * channel_dim + channel_dim + channel_dim * dim + dim;
  const std::uint64_t block_macs =
      dim * (2 * tokens * token_dim) + tokens * (2 * dim * channel_dim);
  d.total_params += depth * block_params;
  d.total_macs += depth * block_macs;

  // Token/channel MLPs collapse in pairs, last block first.
  for (std::uint64_t i = 0; i < depth; ++i) {
    const std::string prefix = "blocks." + std::to_string(depth - 1 - i);
    CollapseStep s;
    MlpSite tok{prefix + ".mlp_tokens", tokens, token_dim, tokens, dim};
    MlpSite chan{prefix + ".mlp_channels", dim, channel_dim, dim, tokens};
    s.params_removed = (tok.params_before() - tok.params_after()) +
                       (chan.params_before() - chan.params_after());
    s.macs_removed = (tok.macs_before() - tok.macs_after()) +
                     (chan.macs_before() - chan.macs_after());
    s.sites.push_back(std::move(tok));
    s.sites.push_back(std::move(chan));
    d.steps.push_back(std::move(s));
  }
  return d;
}

}  // namespace detail

inline std::vector<std::string> known_families() {
  return {"vgg11",   "vgg13",   "vgg16",   "vgg19",     "vit-t16",
          "vit-s16", "vit-b16", "vit-l16", "mixer-b16", "mixer-l16"};
}

/// Canonical descriptor per published configuration. Pure lookup.
inline ArchDescriptor describe(const std::string& family,
                               std::uint64_t res = 224) {
  const int M = -1;
  if (family == "vgg11")
    return detail::vgg_descriptor(
        family, {64, M, 128, M, 256, 256, M, 512, 512, M, 512, 512, M}, res);
  if (family == "vgg13")
    return detail::vgg_descriptor(
        family,
        {64, 64, M, 128, 128, M, 256, 256, M, 512, 512, M, 512, 512, M}, res);
  if (family == "vgg16")
    return detail::vgg_descriptor(
        family,
        {64, 64, M, 128, 128, M, 256, 256, 256, M, 512, 512, 512, M, 512, 512,
         512, M},
        res);
  if (family == "vgg19")
    return detail::vgg_descriptor(
        family,
        {64, 64, M, 128, 128, M, 256, 256, 256, 256, M, 512, 512, 512, 512, M,
         512, 512, 512, 512, M},
        res);
  if (family == "vit-t16") return detail::vit_descriptor(family, 192, 12, 768, res);
  if (family == "vit-s16")
    return detail::vit_descriptor(family, 384, 12, 1536, res);
  if (family == "vit-b16")
    return detail::vit_descriptor(family, 768, 12, 3072, res);
  if (family == "vit-l16")
    return detail::vit_descriptor(family, 1024, 24, 4096, res);
  if (family == "mixer-b16")
    return detail::mixer_descriptor(family, 768, 12, 384, 3072, res);
  if (family == "mixer-l16")
    return detail::mixer_descriptor(family, 1024, 24, 512, 4096, res);
  throw ContractError("unknown architecture family: " + family);
}

}  // namespace lc
