// Semantic-enhancement module: resolutions, value ranges, the fusion rule
// and gradient flow into both branches.

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "bsnet/dse.hpp"

using namespace bsnet;

namespace {

Tensor randn(Shape shape, uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

}  // namespace

TEST_CASE("dse outputs live at the x3 resolution, single channel") {
  Rng rng(21);
  DSE dse(32, DilatedActivation::sigmoid, rng);
  NoGradGuard ng;
  // side 64: x3 8x8, x4 4x4, x5 2x2
  Tensor x3 = randn({2, 32, 8, 8}, 1), x4 = randn({2, 32, 4, 4}, 2), x5 = randn({2, 32, 2, 2}, 3);
  DSEOutput out = dse.forward(x3, x4, x5);
  REQUIRE(out.a_t.shape() == Shape{2, 1, 8, 8});
  REQUIRE(out.a_p.shape() == Shape{2, 1, 8, 8});
  REQUIRE(out.a_se.shape() == Shape{2, 1, 8, 8});
}

TEST_CASE("attention maps stay in [0,1] and fuse by averaging") {
  Rng rng(22);
  DSE dse(16, DilatedActivation::sigmoid, rng);
  NoGradGuard ng;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Tensor x3 = randn({1, 16, 8, 8}, 100 + seed);
    Tensor x4 = randn({1, 16, 4, 4}, 200 + seed);
    Tensor x5 = randn({1, 16, 2, 2}, 300 + seed);
    DSEOutput out = dse.forward(x3, x4, x5);
    for (const Tensor* t : {&out.a_t, &out.a_p, &out.a_se})
      for (int64_t k = 0; k < t->numel(); ++k) {
        REQUIRE(t->data()[k] >= 0.0);
        REQUIRE(t->data()[k] <= 1.0);
      }
    for (int64_t k = 0; k < out.a_se.numel(); ++k)
      REQUIRE_THAT(out.a_se.data()[k],
                   Catch::Matchers::WithinAbs(0.5 * (out.a_t.data()[k] + out.a_p.data()[k]), 1e-12));
  }
}

TEST_CASE("fusion rejects mismatched branches") {
  Tensor a = Tensor::zeros({1, 1, 8, 8});
  Tensor b = Tensor::zeros({1, 1, 4, 4});
  REQUIRE_THROWS_AS(DSE::semantic_attention(a, b), std::invalid_argument);
}

TEST_CASE("relu variant of the dilated activation is accepted") {
  Rng rng(23);
  DSE dse(16, DilatedActivation::relu, rng);
  NoGradGuard ng;
  DSEOutput out = dse.forward(randn({1, 16, 8, 8}, 7), randn({1, 16, 4, 4}, 8),
                              randn({1, 16, 2, 2}, 9));
  for (int64_t k = 0; k < out.a_se.numel(); ++k) {
    REQUIRE(out.a_se.data()[k] >= 0.0);
    REQUIRE(out.a_se.data()[k] <= 1.0);
  }
}

TEST_CASE("gradients reach every dse parameter") {
  Rng rng(24);
  DSE dse(16, DilatedActivation::sigmoid, rng);
  Tensor x3 = randn({1, 16, 8, 8}, 31), x4 = randn({1, 16, 4, 4}, 32),
         x5 = randn({1, 16, 2, 2}, 33);
  DSEOutput out = dse.forward(x3, x4, x5);
  sum_all(out.a_se).backward();
  auto params = dse.named_params("dse");
  REQUIRE(params.size() >= 14);  // 7 convs, weight + bias each
  for (auto& [name, p] : params) {
    double norm = 0;
    for (double g : p.grad()) norm += g * g;
    INFO(name);
    REQUIRE(norm > 0.0);
  }
}

TEST_CASE("the two branches are independent paths") {
  Rng rng(25);
  DSE dse(16, DilatedActivation::sigmoid, rng);
  Tensor x3 = randn({1, 16, 8, 8}, 41), x4 = randn({1, 16, 4, 4}, 42),
         x5 = randn({1, 16, 2, 2}, 43);
  // a_t only depends on x5; a_p on all three
  NoGradGuard ng;
  Tensor at1 = dse.top_level_preservation(x5);
  Tensor x3b = randn({1, 16, 8, 8}, 44);
  Tensor at2 = dse.top_level_preservation(x5);
  for (int64_t k = 0; k < at1.numel(); ++k) REQUIRE(at1.data()[k] == at2.data()[k]);
  Tensor ap1 = dse.progressive_integration(x3, x4, x5);
  Tensor ap2 = dse.progressive_integration(x3b, x4, x5);
  bool differs = false;
  for (int64_t k = 0; k < ap1.numel(); ++k) differs = differs || ap1.data()[k] != ap2.data()[k];
  REQUIRE(differs);
}
