#include <catch2/catch_amalgamated.hpp>

#include "layercollapse/collapse.hpp"
#include "test_util.hpp"

using lc::Tensor;

namespace {

lc::CollapsibleBlock make_block(lc::Rng& rng, std::size_t nin, std::size_t h,
                                std::size_t nout, bool with_bn, double alpha) {
  lc::CollapsibleBlock b;
  b.fc1 = lc::LinearLayer(random_tensor({h, nin}, rng),
                          random_tensor({h}, rng));
  if (with_bn) {
    lc::BatchNormLayer bn(h);
    for (std::size_t j = 0; j < h; ++j) {
      bn.gamma[j] = rng.uniform(0.5, 1.5);
      bn.beta[j] = rng.uniform(-0.5, 0.5);
      bn.running_mean[j] = rng.uniform(-0.5, 0.5);
      bn.running_var[j] = rng.uniform(0.2, 2.0);
    }
    b.bn = std::move(bn);
  }
  b.act = lc::PReLULayer(alpha);
  b.fc2 = lc::LinearLayer(random_tensor({nout, h}, rng),
                          random_tensor({nout}, rng));
  return b;
}

}  // namespace

TEST_CASE("collapse_block dense fixture") {
  lc::CollapsibleBlock b;
  b.fc1 = lc::LinearLayer(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2}, {1, 1}));
  b.act = lc::PReLULayer(1.0);
  b.fc2 = lc::LinearLayer(Tensor({2, 2}, {1, 1, 1, -1}), Tensor({2}, {0, 0}));
  auto fused = lc::collapse_block(b, {0.05});
  REQUIRE(fused.has_value());
  CHECK(fused->weight.data() == std::vector<double>{4, 6, -2, -2});
  CHECK(fused->bias.data() == std::vector<double>{2, 0});
}

TEST_CASE("collapse_block folds batchnorm") {
  lc::CollapsibleBlock b;
  b.fc1 = lc::LinearLayer(Tensor({1, 1}, {1.0}), Tensor({1}, {0.0}));
  lc::BatchNormLayer bn(1);
  bn.eps = 0.0;
  bn.gamma[0] = 2.0;
  bn.beta[0] = 1.0;
  bn.running_mean[0] = 0.5;
  bn.running_var[0] = 1.0;
  b.bn = std::move(bn);
  b.act = lc::PReLULayer(1.0);
  b.fc2 = lc::LinearLayer(Tensor({1, 1}, {3.0}), Tensor({1}, {0.0}));
  auto fused = lc::collapse_block(b, {0.05});
  REQUIRE(fused.has_value());
  CHECK(fused->weight[0] == Catch::Approx(6.0));
  CHECK(fused->bias[0] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("collapse_block threshold and validation") {
  lc::Rng rng(31);
  lc::CollapsibleBlock b = make_block(rng, 2, 3, 2, false, 0.5);
  CHECK_FALSE(lc::collapse_block(b, {0.05}).has_value());
  b.act.alpha[0] = 0.96;
  CHECK(lc::collapse_block(b, {0.05}).has_value());
  b.fc1.weight[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(lc::collapse_block(b, {0.05}), lc::NumericError);
}

TEST_CASE("fusion is exact at alpha=1 on random blocks") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    lc::Rng rng(1000 + seed);
    const bool with_bn = seed % 2 == 0;
    lc::CollapsibleBlock b = make_block(rng, 4, 7, 3, with_bn, 1.0);
    auto fused = lc::collapse_block(b, {0.0});
    REQUIRE(fused.has_value());
    Tensor x = random_tensor({20, 4}, rng, -2.0, 2.0);
    lc::Rng unused(0);
    Tensor yb = b.forward(x, unused);
    Tensor yf = fused->forward(x);
    for (std::size_t i = 0; i < yb.size(); ++i)
      REQUIRE(std::abs(yb[i] - yf[i]) <= 1e-9);
  }
}

TEST_CASE("collapse_model") {
  SECTION("model without collapsible blocks is unchanged") {
    lc::ModelGraph m;
    m.add("fc", lc::LinearLayer(Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2})));
    auto reports = lc::collapse_model(m, {0.05});
    CHECK(reports.empty());
    CHECK(m.layers.size() == 1);
  }
  SECTION("mixed model fuses exactly the linear block") {
    lc::Rng rng(40);
    lc::ModelGraph m;
    m.add("a", make_block(rng, 3, 4, 3, false, 1.0));
    m.add("b", make_block(rng, 3, 4, 2, false, 0.0));
    const std::uint64_t before = lc::count_params(m);
    auto reports = lc::collapse_model(m, {0.05});
    REQUIRE(reports.size() == 2);
    CHECK(reports[0].collapsed);
    CHECK_FALSE(reports[1].collapsed);
    std::uint64_t removed = 0;
    for (const auto& r : reports) removed += r.params_before - r.params_after;
    CHECK(lc::count_params(m) == before - removed);
    CHECK(m.block("a") == nullptr);
    CHECK(m.block("b") != nullptr);
  }
  SECTION("fused model matches the original everywhere") {
    lc::Rng rng(41);
    lc::ModelGraph m;
    m.add("b0", make_block(rng, 3, 6, 4, true, 1.0));
    m.add("b1", make_block(rng, 4, 6, 2, false, 1.0));
    lc::ModelGraph orig = m.clone();
    lc::collapse_model(m, {0.05});
    Tensor x = random_tensor({50, 3}, rng);
    Tensor y0 = orig.forward(x), y1 = m.forward(x);
    for (std::size_t i = 0; i < y0.size(); ++i)
      REQUIRE(std::abs(y0[i] - y1[i]) <= 1e-9);
  }
}

TEST_CASE("dense_gain fixtures") {
  CHECK(lc::dense_gain({192, 768, 192}) == Catch::Approx(0.875).epsilon(0).margin(1e-12));
  CHECK(lc::dense_gain({2, 1, 2}) == Catch::Approx(0.0).margin(1e-12));
  CHECK(lc::dense_gain({4, 1, 4}) == Catch::Approx(-1.0).margin(1e-12));
  CHECK_THROWS_AS(lc::dense_gain({0, 1, 1}), lc::ContractError);
}

TEST_CASE("dense_gain sign law") {
  lc::Rng rng(55);
  for (int i = 0; i < 1000; ++i) {
    lc::GainQuery q{1 + rng.uniform_int(512), 1 + rng.uniform_int(512),
                    1 + rng.uniform_int(512)};
    const double g = lc::dense_gain(q);
    const double threshold = static_cast<double>(q.n_in * q.n_out) /
                             static_cast<double>(q.n_in + q.n_out);
    if (g > 0.0) CHECK(static_cast<double>(q.n_hidden) > threshold);
    if (static_cast<double>(q.n_hidden) > threshold) CHECK(g > 0.0);
  }
}

TEST_CASE("conv_gain fixtures") {
  CHECK(lc::conv_gain({1, 1, 8, 8, 8}) == Catch::Approx(-1.0).margin(1e-12));
  CHECK(lc::conv_gain({3, 3, 64, 64, 64}) ==
        Catch::Approx(0.28).margin(1e-12));
  CHECK(lc::conv_gain({3, 3, 64, 512, 64}) ==
        Catch::Approx(-4.76).margin(1e-12));
}

TEST_CASE("fuse_conv 1x1 pair degenerates to a channel matmul") {
  lc::Rng rng(60);
  Tensor k1 = random_tensor({3, 2, 1, 1}, rng);
  Tensor b1 = random_tensor({3}, rng);
  Tensor k2 = random_tensor({4, 3, 1, 1}, rng);
  Tensor b2 = random_tensor({4}, rng);
  auto [kf, bf] = lc::fuse_conv(k1, b1, k2, b2);
  REQUIRE(kf.shape() == std::vector<std::size_t>{4, 2, 1, 1});
  for (std::size_t o = 0; o < 4; ++o) {
    for (std::size_t i = 0; i < 2; ++i) {
      double expect = 0.0;
      for (std::size_t h = 0; h < 3; ++h)
        expect += k2[o * 3 + h] * k1[h * 2 + i];
      CHECK(kf[o * 2 + i] == Catch::Approx(expect).margin(1e-12));
    }
    double bexp = b2[o];
    for (std::size_t h = 0; h < 3; ++h) bexp += b1[h] * k2[o * 3 + h];
    CHECK(bf[o] == Catch::Approx(bexp).margin(1e-12));
  }
}

TEST_CASE("fuse_conv composes two 3x3 kernels into a 5x5") {
  lc::Rng rng(61);
  Tensor k1 = random_tensor({2, 2, 3, 3}, rng);
  Tensor b1 = random_tensor({2}, rng);
  Tensor k2 = random_tensor({2, 2, 3, 3}, rng);
  Tensor b2 = random_tensor({2}, rng);
  auto [kf, bf] = lc::fuse_conv(k1, b1, k2, b2);
  REQUIRE(kf.shape() == std::vector<std::size_t>{2, 2, 5, 5});

  Tensor x = random_tensor({1, 2, 8, 8}, rng);
  Tensor mid = lc::conv2d(x, k1, b1);
  Tensor composed = lc::conv2d(mid, k2, b2);
  Tensor fused = lc::conv2d(x, kf, bf);
  REQUIRE(composed.shape() == fused.shape());
  for (std::size_t i = 0; i < composed.size(); ++i)
    REQUIRE(std::abs(composed[i] - fused[i]) <= 1e-9);
}

TEST_CASE("fuse_conv validation") {
  Tensor k1({2, 2, 3, 3}), b1({2}), k2({2, 2, 3, 3}), b2({2});
  CHECK_THROWS_AS(lc::fuse_conv(k1, b1, k2, b2, 2), lc::UnsupportedError);
  Tensor mismatched({2, 3, 3, 3});
  CHECK_THROWS_AS(lc::fuse_conv(k1, b1, mismatched, b2), lc::DimensionError);
}

TEST_CASE("count_params and count_macs") {
  lc::LinearLayer l(Tensor({5, 10}), Tensor({5}));
  CHECK(lc::count_params(l) == 55);
  lc::ModelGraph m;
  m.add("fc", l);
  CHECK(lc::count_macs(m) == 50);
  lc::Rng rng(70);
  m.add("blk", make_block(rng, 5, 8, 3, true, 0.25));
  CHECK(lc::count_params(m) == 55 + (5 * 8 + 8 + 8 * 3 + 3 + 1 + 16));
  CHECK(lc::count_macs(m) == 50 + 5 * 8 + 8 * 3);
}
