#include <cmath>

#include <catch2/catch_amalgamated.hpp>

#include "layercollapse/loss.hpp"
#include "test_util.hpp"

using lc::Tensor;

TEST_CASE("reg_loss values") {
  Tensor a1 = Tensor::scalar(1.0);
  CHECK(lc::reg_loss({a1}, {0.05, 1.0}).item() == 0.0);
  Tensor a0 = Tensor::scalar(0.0);
  CHECK(lc::reg_loss({a0}, {0.05, 1.0}).item() == Catch::Approx(0.05));
  Tensor ah = Tensor::scalar(0.5);
  CHECK(lc::reg_loss({a0, ah, a1}, {0.1, 1.0}).item() ==
        Catch::Approx(0.1 + 0.025));
  CHECK_THROWS_AS(lc::reg_loss({a0}, {-0.1, 1.0}), lc::ContractError);
}

TEST_CASE("reg_loss gradient is -2*lc*(1-alpha)") {
  Tensor a = Tensor::scalar(0.5, true);
  lc::Tape tape;
  Tensor loss = lc::reg_loss({a}, {0.2, 1.0}, &tape);
  tape.backward(loss);
  CHECK(a.grad()[0] == Catch::Approx(-0.2));
  fd_check(a, [&](lc::Tape* t) { return lc::reg_loss({a}, {0.2, 1.0}, t); },
           1e-5, 1e-6);
}

TEST_CASE("reg_loss is permutation invariant") {
  Tensor a = Tensor::scalar(0.3), b = Tensor::scalar(-0.2),
         c = Tensor::scalar(0.9);
  CHECK(lc::reg_loss({a, b, c}, {0.7, 1.0}).item() ==
        lc::reg_loss({c, a, b}, {0.7, 1.0}).item());
}

TEST_CASE("select_regularized_layers") {
  lc::ModelSpec spec;
  for (int i = 0; i < 5; ++i)
    spec.blocks.push_back({4, 4, 4, false, 0.0});
  lc::ModelGraph m = lc::init_model(spec, 0);
  CHECK(lc::select_regularized_layers(m, 0.0).empty());
  auto two = lc::select_regularized_layers(m, 0.4);
  REQUIRE(two.size() == 2);
  CHECK(two[0] == "block4");
  CHECK(two[1] == "block3");
  CHECK(lc::select_regularized_layers(m, 1.0).size() == 5);
  CHECK_THROWS_AS(lc::select_regularized_layers(m, 1.5), lc::ContractError);
}

TEST_CASE("cross_entropy fixtures") {
  Tensor uniform({1, 4}, {0.3, 0.3, 0.3, 0.3});
  CHECK(lc::cross_entropy(uniform, {2}).item() ==
        Catch::Approx(std::log(4.0)));
  Tensor dominant({1, 3}, {100.0, 0.0, 0.0});
  CHECK(lc::cross_entropy(dominant, {0}).item() ==
        Catch::Approx(0.0).margin(1e-12));
  Tensor two({1, 2}, {0.0, 1.0});
  CHECK(lc::cross_entropy(two, {0}).item() ==
        Catch::Approx(std::log(1.0 + std::exp(1.0))));
  CHECK_THROWS_AS(lc::cross_entropy(two, {2}), lc::ContractError);
  CHECK_THROWS_AS(lc::cross_entropy(two, {0, 1}), lc::DimensionError);
}

TEST_CASE("cross_entropy gradient matches finite differences") {
  lc::Rng rng(3);
  Tensor logits = random_tensor({4, 5}, rng);
  std::vector<int> labels{0, 3, 4, 1};
  fd_check(logits,
           [&](lc::Tape* t) { return lc::cross_entropy(logits, labels, t); });
}

TEST_CASE("kl_divergence fixtures") {
  Tensor student({1, 2}, {0.7, -0.4});
  Tensor teacher = lc::softmax(student);
  CHECK(lc::kl_divergence(student, teacher).item() ==
        Catch::Approx(0.0).margin(1e-12));

  Tensor hard({1, 2}, {1.0, 0.0});
  Tensor logits({1, 2}, {0.0, 0.0});
  CHECK(lc::kl_divergence(logits, hard).item() ==
        Catch::Approx(std::log(2.0)));
}

TEST_CASE("kl_divergence is non-negative on random pairs") {
  lc::Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    Tensor student = random_tensor({2, 4}, rng, -3.0, 3.0);
    Tensor teacher = lc::softmax(random_tensor({2, 4}, rng, -3.0, 3.0));
    CHECK(lc::kl_divergence(student, teacher).item() >= -1e-12);
  }
}

TEST_CASE("kl_divergence gradient matches finite differences") {
  lc::Rng rng(9);
  Tensor student = random_tensor({3, 4}, rng);
  Tensor teacher = lc::softmax(random_tensor({3, 4}, rng));
  fd_check(student, [&](lc::Tape* t) {
    return lc::kl_divergence(student, teacher, t);
  });
}

TEST_CASE("mse_loss") {
  Tensor p({2, 1}, {1.0, 2.0});
  CHECK(lc::mse_loss(p, p).item() == 0.0);
  Tensor t({2, 1}, {0.0, 3.0});
  CHECK(lc::mse_loss(p, t).item() == Catch::Approx(1.0));
  lc::Rng rng(10);
  Tensor pred = random_tensor({3, 2}, rng);
  Tensor target = random_tensor({3, 2}, rng);
  fd_check(pred,
           [&](lc::Tape* t2) { return lc::mse_loss(pred, target, t2); });
}

TEST_CASE("composite_loss") {
  Tensor a1 = Tensor::scalar(1.0);
  Tensor logits({2, 2}, {0.0, 1.0, 2.0, 0.0});
  std::vector<int> labels{0, 1};

  SECTION("no teacher, alpha=1: total equals CE") {
    auto lb = lc::composite_loss(logits, labels, std::nullopt, {a1}, {0.5, 1.0});
    CHECK(lb.total == Catch::Approx(lc::cross_entropy(logits, labels).item()));
    CHECK(lb.kl_term == 0.0);
    CHECK(lb.reg_term == 0.0);
  }
  SECTION("teacher equal to student distribution, alpha=1: total is CE/2") {
    Tensor teacher = lc::softmax(logits);
    auto lb = lc::composite_loss(logits, labels, teacher, {a1}, {0.5, 1.0});
    CHECK(lb.total ==
          Catch::Approx(0.5 * lc::cross_entropy(logits, labels).item()));
  }
  SECTION("all three terms reconstruct the total") {
    Tensor teacher({2, 2}, {0.7, 0.3, 0.2, 0.8});
    Tensor a = Tensor::scalar(0.5);
    auto lb = lc::composite_loss(logits, labels, teacher, {a}, {0.2, 1.0});
    const double ce = lc::cross_entropy(logits, labels).item();
    const double kl = lc::kl_divergence(logits, teacher).item();
    CHECK(lb.ce_term == Catch::Approx(0.5 * ce).margin(1e-12));
    CHECK(lb.kl_term == Catch::Approx(0.5 * kl).margin(1e-12));
    CHECK(lb.reg_term == Catch::Approx(0.2 * 0.25).margin(1e-15));
    CHECK(std::abs(lb.total - (lb.ce_term + lb.kl_term + lb.reg_term)) <=
          1e-12);
  }
}
