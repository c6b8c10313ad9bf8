// Finite-difference gradient checks and forward spot-checks for the
// differentiable op set.

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "bsnet/nn.hpp"
#include "bsnet/ops.hpp"

using namespace bsnet;

namespace {

Rng& rng() {
  static Rng r(20240901);
  return r;
}

Tensor randn(Shape shape, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.vec()) v = d(rng());
  return t;
}

// Central finite differences of a scalar-valued function w.r.t. each listed
// input, compared against the analytic backward pass.
void check_grads(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                 std::vector<Tensor> inputs, double h = 1e-5, double tol = 1e-6) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tensor loss = f(inputs);
  REQUIRE(loss.numel() == 1);
  for (auto& t : inputs) t.zero_grad();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    for (int64_t k = 0; k < t.numel(); ++k) {
      double orig = t.data()[k];
      t.data()[k] = orig + h;
      double up = f(inputs).item();
      t.data()[k] = orig - h;
      double down = f(inputs).item();
      t.data()[k] = orig;
      double fd = (up - down) / (2.0 * h);
      double got = analytic[ti][static_cast<size_t>(k)];
      double denom = std::max({std::fabs(fd), std::fabs(got), 1.0});
      INFO("input " << ti << " element " << k << " fd=" << fd << " analytic=" << got);
      REQUIRE(std::fabs(fd - got) / denom < tol);
    }
  }
}

Tensor weighted_sum(const Tensor& t, double freq = 0.37) {
  // deterministic non-uniform weights so gradients differ per element
  Tensor w = Tensor::zeros(t.shape());
  for (int64_t k = 0; k < w.numel(); ++k) w.data()[k] = std::sin(freq * static_cast<double>(k + 1));
  return sum_all(mul(t, w));
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(add(in[0], in[1])); },
              {randn({2, 3, 4, 5}), randn({2, 3, 4, 5})});
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(sub(in[0], in[1])); },
              {randn({1, 2, 3, 3}), randn({1, 2, 3, 3})});
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(mul(in[0], in[1])); },
              {randn({2, 2, 3, 3}), randn({2, 2, 3, 3})});
  // keep the divisor away from zero
  Tensor denom = randn({2, 2, 3, 3});
  for (auto& v : denom.vec()) v = 2.0 + std::fabs(v);
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(div(in[0], in[1])); },
              {randn({2, 2, 3, 3}), denom});
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(sigmoid(in[0])); },
              {randn({2, 1, 4, 4})});
  check_grads(
      [](const std::vector<Tensor>& in) { return weighted_sum(mul_scalar(add_scalar(in[0], 0.7), -1.3)); },
      {randn({1, 3, 2, 2})});
}

TEST_CASE("relu and clamp gradients away from kinks") {
  Tensor x = randn({2, 2, 4, 4});
  for (auto& v : x.vec())
    if (std::fabs(v) < 0.05) v = 0.2;  // stay off the non-differentiable points
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(relu(in[0])); }, {x});

  Tensor y = randn({1, 1, 5, 5}, 0.3);
  for (auto& v : y.vec()) {
    if (std::fabs(v - 0.5) < 0.05) v = 0.3;
    if (std::fabs(v + 0.5) < 0.05) v = -0.3;
  }
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(clamp(in[0], -0.5, 0.5)); },
              {y});
}

TEST_CASE("log gradient on positive inputs") {
  Tensor x = randn({1, 2, 3, 3});
  for (auto& v : x.vec()) v = 0.5 + std::fabs(v);
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(log_op(in[0])); }, {x});
}

TEST_CASE("broadcast variants of mul") {
  // channel broadcast: (N,1,H,W) against (N,C,H,W)
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(mul(in[0], in[1])); },
              {randn({2, 3, 4, 4}), randn({2, 1, 4, 4})});
  // scalar broadcast
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(add(in[0], in[1])); },
              {randn({2, 2, 3, 3}), randn({1})});
}

TEST_CASE("reductions") {
  check_grads([](const std::vector<Tensor>& in) { return sum_all(in[0]); }, {randn({2, 2, 3, 3})});
  check_grads([](const std::vector<Tensor>& in) { return mean_all(in[0]); }, {randn({2, 1, 4, 4})});
  check_grads(
      [](const std::vector<Tensor>& in) { return weighted_sum(sum_per_image(in[0]), 0.9); },
      {randn({3, 2, 3, 3})});

  Tensor x = randn({2, 4, 3, 3});
  Tensor s = sum_per_image(x);
  REQUIRE(s.shape() == Shape{2, 1, 1, 1});
  double manual = 0;
  for (int64_t k = 0; k < 4 * 9; ++k) manual += x.data()[k];
  REQUIRE_THAT(s.data()[0], Catch::Matchers::WithinAbs(manual, 1e-12));
}

TEST_CASE("channel statistics") {
  Tensor x = randn({2, 4, 3, 3});
  Tensor m = channel_mean(x);
  REQUIRE(m.shape() == Shape{2, 1, 3, 3});
  double manual = (x.data()[0] + x.data()[9] + x.data()[18] + x.data()[27]) / 4.0;
  REQUIRE_THAT(m.data()[0], Catch::Matchers::WithinAbs(manual, 1e-12));
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(channel_mean(in[0])); },
              {randn({2, 3, 3, 3})});

  // max: perturb so the argmax is strict
  Tensor y = randn({1, 3, 4, 4});
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(channel_max(in[0])); }, {y},
              1e-6, 1e-5);
}

TEST_CASE("concat and slice") {
  check_grads(
      [](const std::vector<Tensor>& in) {
        return weighted_sum(concat_channels({in[0], in[1], in[2]}));
      },
      {randn({2, 1, 3, 3}), randn({2, 2, 3, 3}), randn({2, 3, 3, 3})});
  check_grads(
      [](const std::vector<Tensor>& in) { return weighted_sum(slice_channels(in[0], 1, 3)); },
      {randn({2, 4, 3, 3})});
  Tensor a = randn({1, 2, 2, 2}), b = randn({1, 3, 2, 2});
  Tensor c = concat_channels({a, b});
  REQUIRE(c.shape() == Shape{1, 5, 2, 2});
  Tensor back = slice_channels(c, 2, 5);
  for (int64_t k = 0; k < b.numel(); ++k) REQUIRE(back.data()[k] == b.data()[k]);
}

TEST_CASE("conv2d forward matches direct convolution") {
  Tensor x = randn({2, 3, 7, 6});
  Tensor w = randn({4, 3, 3, 3});
  Tensor bias = randn({4});
  Conv2dSpec sp;
  sp.stride_h = sp.stride_w = 2;
  sp.pad_h = sp.pad_w = 1;
  Tensor y = conv2d(x, w, bias, sp);
  REQUIRE(y.shape() == Shape{2, 4, 4, 3});
  // direct evaluation of one output pixel
  auto at = [&](const Tensor& t, int64_t n, int64_t c, int64_t i, int64_t j) {
    const Shape& s = t.shape();
    return t.data()[((n * s[1] + c) * s[2] + i) * s[3] + j];
  };
  for (int64_t co = 0; co < 4; ++co)
    for (int64_t oi = 0; oi < 4; ++oi)
      for (int64_t oj = 0; oj < 3; ++oj) {
        double acc = bias.data()[co];
        for (int64_t ci = 0; ci < 3; ++ci)
          for (int64_t ki = 0; ki < 3; ++ki)
            for (int64_t kj = 0; kj < 3; ++kj) {
              int64_t ii = oi * 2 - 1 + ki, jj = oj * 2 - 1 + kj;
              if (ii < 0 || ii >= 7 || jj < 0 || jj >= 6) continue;
              acc += at(x, 1, ci, ii, jj) * at(w, co, ci, ki, kj);
            }
        REQUIRE_THAT(at(y, 1, co, oi, oj), Catch::Matchers::WithinAbs(acc, 1e-10));
      }
}

TEST_CASE("conv2d gradients (stride, pad, dilation)") {
  for (auto [stride, pad, dil] : {std::tuple{1, 1, 1}, {2, 1, 1}, {1, 2, 2}, {1, 0, 1}}) {
    Conv2dSpec sp;
    sp.stride_h = sp.stride_w = stride;
    sp.pad_h = sp.pad_w = pad;
    sp.dil_h = sp.dil_w = dil;
    check_grads(
        [sp](const std::vector<Tensor>& in) {
          return weighted_sum(conv2d(in[0], in[1], in[2], sp));
        },
        {randn({2, 2, 6, 6}), randn({3, 2, 3, 3}), randn({3})});
  }
  // bias-free path
  check_grads(
      [](const std::vector<Tensor>& in) { return weighted_sum(conv2d(in[0], in[1], Tensor())); },
      {randn({1, 2, 4, 4}), randn({2, 2, 1, 1})});
}

TEST_CASE("pooling") {
  Tensor x = randn({2, 2, 6, 6});
  Tensor mp = max_pool2d(x, 3, 2, 1);
  REQUIRE(mp.shape() == Shape{2, 2, 3, 3});
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(max_pool2d(in[0], 3, 2, 1)); },
              {randn({1, 2, 6, 6})}, 1e-6, 1e-5);
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(avg_pool2d(in[0], 3, 2, 1)); },
              {randn({1, 2, 6, 6})});
  // count_include_pad: corner cell of a 2x2 avg pool over constant ones
  Tensor ones = Tensor::full({1, 1, 2, 2}, 1.0);
  Tensor ap = avg_pool2d(ones, 3, 2, 1);
  REQUIRE(ap.shape() == Shape{1, 1, 1, 1});
  REQUIRE_THAT(ap.item(), Catch::Matchers::WithinAbs(4.0 / 9.0, 1e-12));
}

TEST_CASE("bilinear upsampling") {
  // doubling a 2x2 grid, pixel-center convention
  Tensor x = Tensor::from({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  Tensor y = upsample_bilinear(x, 4, 4);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  // output pixel (0,0) maps to source (-0.25,-0.25) -> clamped corner
  REQUIRE_THAT(y.data()[0], Catch::Matchers::WithinAbs(0.0, 1e-12));
  REQUIRE_THAT(y.data()[15], Catch::Matchers::WithinAbs(3.0, 1e-12));
  // center symmetry
  REQUIRE_THAT(y.data()[5], Catch::Matchers::WithinAbs(y.data()[5], 1e-12));

  check_grads(
      [](const std::vector<Tensor>& in) { return weighted_sum(upsample_bilinear(in[0], 7, 5)); },
      {randn({2, 2, 3, 3})});
  check_grads([](const std::vector<Tensor>& in) { return weighted_sum(upsample_by(in[0], 2)); },
              {randn({1, 3, 4, 4})});
}

TEST_CASE("batch norm training mode") {
  Tensor x = randn({3, 2, 4, 4});
  Tensor gamma = randn({2});
  for (auto& v : gamma.vec()) v = 1.0 + 0.1 * v;
  Tensor beta = randn({2}, 0.1);
  Tensor rm = Tensor::zeros({2});
  Tensor rv = Tensor::full({2}, 1.0);
  check_grads(
      [&rm, &rv](const std::vector<Tensor>& in) {
        Tensor m = rm.detach(), v = rv.detach();  // stats updated in place
        return weighted_sum(batch_norm_train(in[0], in[1], in[2], m, v, 0.1, 1e-5));
      },
      {x, gamma, beta}, 1e-5, 1e-4);

  // normalized output has ~zero mean / unit variance per channel
  Tensor y = batch_norm_train(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), rm, rv, 0.1, 1e-12);
  for (int64_t c = 0; c < 2; ++c) {
    double m = 0, m2 = 0;
    int64_t cnt = 0;
    for (int64_t n = 0; n < 3; ++n)
      for (int64_t k = 0; k < 16; ++k) {
        double v = y.data()[(n * 2 + c) * 16 + k];
        m += v;
        m2 += v * v;
        ++cnt;
      }
    m /= static_cast<double>(cnt);
    REQUIRE_THAT(m, Catch::Matchers::WithinAbs(0.0, 1e-9));
    REQUIRE_THAT(m2 / static_cast<double>(cnt), Catch::Matchers::WithinAbs(1.0, 1e-6));
  }

  // running stats move toward the batch statistics
  REQUIRE(rm.data()[0] != 0.0);
}

TEST_CASE("batch norm eval mode is an affine map") {
  Tensor gamma = Tensor::full({1}, 2.0), beta = Tensor::full({1}, -1.0);
  Tensor rm = Tensor::full({1}, 0.5), rv = Tensor::full({1}, 4.0);
  Tensor x = Tensor::from({1, 1, 1, 2}, {0.5, 2.5});
  Tensor y = batch_norm_eval(x, gamma, beta, rm, rv, 0.0);
  REQUIRE_THAT(y.data()[0], Catch::Matchers::WithinAbs(-1.0, 1e-12));
  REQUIRE_THAT(y.data()[1], Catch::Matchers::WithinAbs(2.0 * (2.0 / 2.0) - 1.0, 1e-12));
}

TEST_CASE("bce with logits is stable and correct") {
  Tensor logits = Tensor::from({1, 1, 1, 4}, {-40.0, 40.0, 0.5, -0.5});
  Tensor target = Tensor::from({1, 1, 1, 4}, {0.0, 1.0, 1.0, 0.0});
  double loss = bce_with_logits_mean(logits, target).item();
  REQUIRE(std::isfinite(loss));
  double manual = (0.0 + 0.0 + std::log1p(std::exp(-0.5)) + std::log1p(std::exp(-0.5))) / 4.0;
  REQUIRE_THAT(loss, Catch::Matchers::WithinAbs(manual, 1e-9));

  check_grads(
      [](const std::vector<Tensor>& in) {
        Tensor t = Tensor::from({1, 1, 2, 2}, {1.0, 0.0, 1.0, 0.0});
        return bce_with_logits_mean(in[0], t);
      },
      {randn({1, 1, 2, 2})});
}

TEST_CASE("no-grad mode records no tape") {
  Tensor x = randn({1, 1, 2, 2});
  x.set_requires_grad(true);
  NoGradGuard guard;
  Tensor y = sum_all(mul(x, x));
  REQUIRE_FALSE(y.requires_grad());
}
