#include <cmath>
#include <cstdint>

#include <catch2/catch_amalgamated.hpp>

#include "layercollapse/arch.hpp"
#include "test_util.hpp"

namespace {

double mega(std::uint64_t v) { return static_cast<double>(v) / 1e6; }
double giga(std::uint64_t v) { return static_cast<double>(v) / 1e9; }

}  // namespace

TEST_CASE("vgg16 parameter count is exact") {
  auto d = lc::describe("vgg16");
  CHECK(lc::count_params(d) == 138357544ull);
}

TEST_CASE("vit-t16 counts are exact") {
  auto d = lc::describe("vit-t16");
  CHECK(lc::count_params(d) == 5717416ull);
  CHECK(lc::count_macs(d) == 1074851328ull);
  REQUIRE(d.steps.size() == 12);
  CHECK(d.steps[0].params_removed == 258816ull);
  CHECK(d.steps[0].macs_removed == 50835456ull);
  CHECK(d.steps[0].sites[0].name == "blocks.11.mlp");
}

TEST_CASE("published totals within tolerance") {
  struct Row {
    const char* family;
    double params_m;
    double macs_g;
  };
  // Params to 1%, MACs to 2%.
  const Row rows[] = {
      {"vgg11", 132.86, 7.62},    {"vgg13", 133.05, 11.32},
      {"vgg16", 138.36, 15.48},   {"vgg19", 143.67, 19.65},
      {"vit-t16", 5.72, 1.08},    {"vit-s16", 22.05, 4.24},
      {"vit-b16", 86.57, 16.85},  {"vit-l16", 304.33, 59.66},
      {"mixer-b16", 59.88, 12.61},
  };
  for (const Row& r : rows) {
    auto d = lc::describe(r.family);
    INFO(r.family);
    CHECK(std::abs(mega(d.total_params) - r.params_m) <= 0.01 * r.params_m);
    CHECK(std::abs(giga(d.total_macs) - r.macs_g) <= 0.02 * r.macs_g);
  }
}

TEST_CASE("collapse accounting reproduces the published progression") {
  struct Row {
    const char* family;
    std::size_t steps;
    double params_m;
    double macs_g;
  };
  const Row rows[] = {
      {"vit-t16", 1, 5.46, 1.02},  {"vit-t16", 2, 5.20, 0.97},
      {"vit-t16", 3, 4.94, 0.91},  {"vit-s16", 1, 21.02, 4.04},
      {"vit-s16", 2, 19.98, 3.84}, {"vit-b16", 1, 82.44, 16.04},
      {"vit-b16", 2, 78.30, 15.23}, {"vit-l16", 2, 289.64, 56.77},
      {"mixer-b16", 1, 55.64, 11.71}, {"mixer-b16", 2, 51.39, 10.81},
      {"vgg19", 1, 126.89, 19.65},  // tail fusion removes ~16.8M params
      {"vgg16", 1, 121.58, 15.48},
  };
  for (const Row& r : rows) {
    auto d = lc::describe(r.family);
    auto [p, m] = lc::collapse_accounting(d, r.steps);
    INFO(r.family << " steps " << r.steps);
    CHECK(std::abs(mega(p) - r.params_m) <= 0.01 * r.params_m);
    CHECK(std::abs(giga(m) - r.macs_g) <= 0.02 * r.macs_g);
  }
}

TEST_CASE("vgg19 full classifier fusion is exact") {
  auto d = lc::describe("vgg19");
  auto [p, m] = lc::collapse_accounting(d, 2);
  CHECK(p == 45113384ull);
  CHECK_THROWS_AS(lc::collapse_accounting(d, 3), lc::ContractError);
}

TEST_CASE("mlp shares match the published fractions") {
  struct Row {
    const char* family;
    double param_share;
    double mac_share;
  };
  // Params to 0.5 points, MACs to 2 points.
  const Row rows[] = {
      {"vit-t16", 0.543, 0.567}, {"vit-b16", 0.573, 0.579},
      {"vit-l16", 0.579, 0.582}, {"mixer-b16", 0.850, 0.852},
      {"mixer-l16", 0.865, 0.865}, {"vgg16", 0.712, 0.006},
  };
  for (const Row& r : rows) {
    auto d = lc::describe(r.family);
    auto [ps, ms] = lc::mlp_share(d);
    INFO(r.family);
    CHECK(std::abs(ps - r.param_share) <= 0.005);
    CHECK(std::abs(ms - r.mac_share) <= 0.02);
  }
}

TEST_CASE("mlp_share is consistent with collapsing every step") {
  for (const auto& family : lc::known_families()) {
    auto d = lc::describe(family);
    auto [p, m] = lc::collapse_accounting(d, d.steps.size());
    auto [ps, ms] = lc::mlp_share(d);
    INFO(family);
    CHECK(rel_err(ps, 1.0 - static_cast<double>(p) /
                           static_cast<double>(d.total_params)) <= 1e-12);
    CHECK(rel_err(ms, 1.0 - static_cast<double>(m) /
                           static_cast<double>(d.total_macs)) <= 1e-12);
  }
}

TEST_CASE("unknown family rejected") {
  CHECK_THROWS_AS(lc::describe("resnet50"), lc::ContractError);
}

TEST_CASE("mlp site arithmetic") {
  lc::MlpSite s{"mlp", 192, 768, 192, 197};
  CHECK(s.params_before() == 192ull * 768 + 768 + 768 * 192 + 192);
  CHECK(s.params_after() == 192ull * 192 + 192);
  CHECK(s.macs_before() == 197ull * (192 * 768 + 768 * 192));
  CHECK(s.macs_after() == 197ull * 192 * 192);
}
