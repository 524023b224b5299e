#include "doctest.h"

#include <cmath>
#include <vector>

#include "cracknet/layers.hpp"

using namespace cracknet;

namespace {

// Naive 6-loop direct convolution, the reference for the im2col path.
std::vector<double> conv_oracle(const std::vector<double>& x, int64_t B, int64_t C,
                                int64_t H, int64_t W, const std::vector<double>& w,
                                const std::vector<double>& bias, int64_t Cout,
                                int64_t k, int64_t stride, int64_t pad) {
  const int64_t Ho = (H + 2 * pad - k) / stride + 1;
  const int64_t Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<size_t>(B * Cout * Ho * Wo), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = bias[static_cast<size_t>(co)];
          for (int64_t ci = 0; ci < C; ++ci)
            for (int64_t ki = 0; ki < k; ++ki)
              for (int64_t kj = 0; kj < k; ++kj) {
                const int64_t ih = oh * stride - pad + ki;
                const int64_t iw = ow * stride - pad + kj;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((b * C + ci) * H + ih) * W + iw] *
                       w[((co * C + ci) * k + ki) * k + kj];
              }
          out[((b * Cout + co) * Ho + oh) * Wo + ow] = acc;
        }
  return out;
}

Conv2d conv_from(const std::vector<double>& w, const std::vector<double>& bias,
                 Shape wshape, int64_t stride, int64_t pad) {
  Conv2d layer;
  layer.weight = Tensor(std::move(wshape), w, true);
  layer.bias = Tensor({static_cast<int64_t>(bias.size())}, bias, true);
  layer.stride = stride;
  layer.padding = pad;
  return layer;
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("1x1 conv with unit weight is the identity") {
  Rng rng(1);
  Tensor x = rand_uniform({1, 1, 4, 4}, rng, -1.0, 1.0);
  Conv2d layer = conv_from({1.0}, {0.0}, {1, 1, 1, 1}, 1, 0);
  Tensor y = conv2d(x, layer);
  CHECK(y.shape() == x.shape());
  CHECK(y.data() == x.data());
}

TEST_CASE("3x3 conv matches the sliding-window oracle") {
  Rng rng(2);
  Tensor x = rand_uniform({1, 1, 5, 5}, rng, -1.0, 1.0);
  Tensor w = rand_uniform({1, 1, 3, 3}, rng, -1.0, 1.0);
  Conv2d layer = conv_from(w.data(), {0.3}, {1, 1, 3, 3}, 1, 0);
  Tensor y = conv2d(x, layer);
  auto ref = conv_oracle(x.data(), 1, 1, 5, 5, w.data(), {0.3}, 1, 3, 1, 0);
  REQUIRE(y.numel() == static_cast<int64_t>(ref.size()));
  for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("stride-2 pad-1 size formula") {
  Rng rng(3);
  Tensor x = rand_uniform({1, 1, 8, 8}, rng, -1.0, 1.0);
  Conv2d layer = Conv2d::make(1, 1, 3, 2, 1, rng);
  Tensor y = conv2d(x, layer);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
}

TEST_CASE("channel mismatch throws") {
  Rng rng(4);
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  Conv2d layer = Conv2d::make(3, 1, 3, 1, 1, rng);
  CHECK_THROWS_AS(conv2d(x, layer), DimensionError);
}

TEST_CASE("conv agrees with the direct oracle on 20 random shape draws") {
  Rng rng(5);
  for (int draw = 0; draw < 20; ++draw) {
    const int64_t B = 1 + rng.bounded(2);
    const int64_t C = 1 + rng.bounded(3);
    const int64_t Cout = 1 + rng.bounded(3);
    const int64_t k = 1 + 2 * rng.bounded(2);  // 1 or 3
    const int64_t stride = 1 + rng.bounded(2);
    const int64_t pad = rng.bounded(2);
    const int64_t H = k + rng.bounded(6);
    const int64_t W = k + rng.bounded(6);
    Tensor x = rand_uniform({B, C, H, W}, rng, -1.0, 1.0);
    Tensor w = rand_uniform({Cout, C, k, k}, rng, -1.0, 1.0);
    Tensor bias = rand_uniform({Cout}, rng, -0.5, 0.5);
    Conv2d layer = conv_from(w.data(), bias.data(), {Cout, C, k, k}, stride, pad);
    Tensor y = conv2d(x, layer);
    auto ref = conv_oracle(x.data(), B, C, H, W, w.data(), bias.data(), Cout, k, stride, pad);
    REQUIRE(y.numel() == static_cast<int64_t>(ref.size()));
    for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.data()[i] - ref[i]) < 1e-12);
  }
}

TEST_CASE("conv gradients pass finite differences for x, weight and bias") {
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed);
    Tensor x = rand_uniform({2, 2, 5, 5}, rng, -1.0, 1.0);
    Conv2d layer = Conv2d::make(2, 3, 3, 1, 1, rng);
    auto f = [&layer](const std::vector<Tensor>& in) {
      Conv2d probe = layer;  // shares the parameter tensors
      return sum(mul(conv2d(in[0], probe), conv2d(in[0], probe)));
    };
    CHECK(finite_diff_check(f, {x, layer.weight, layer.bias}) < 1e-4);
  }
}

TEST_CASE("parameter count formula") {
  Rng rng(6);
  Conv2d layer = Conv2d::make(4, 8, 3, 1, 1, rng);
  CHECK(layer.param_count() == 8 * (4 * 9 + 1));
  Dense d = Dense::make(5, 7, true, rng);
  CHECK(d.param_count() == 5 * 7 + 7);
  Dense d2 = Dense::make(5, 7, false, rng);
  CHECK(d2.param_count() == 5 * 7);
}

TEST_CASE("batchnorm train output is normalized per channel") {
  Rng rng(7);
  Tensor x = rand_uniform({3, 4, 5, 5}, rng, -3.0, 5.0);
  BatchNorm2d bn = BatchNorm2d::make(4);
  Tensor y = batchnorm2d(x, bn, Mode::train);
  const int64_t n = 3 * 5 * 5;
  for (int64_t c = 0; c < 4; ++c) {
    double m = 0.0, v = 0.0;
    for (int64_t b = 0; b < 3; ++b)
      for (int64_t i = 0; i < 25; ++i) m += y.data()[((b * 4 + c) * 25) + i];
    m /= n;
    for (int64_t b = 0; b < 3; ++b)
      for (int64_t i = 0; i < 25; ++i) {
        double d = y.data()[((b * 4 + c) * 25) + i] - m;
        v += d * d;
      }
    v /= n;
    CHECK(std::abs(m) < 1e-8);
    CHECK(std::abs(v - 1.0) < 1e-4);  // eps shifts variance slightly below 1
  }
}

TEST_CASE("batchnorm eval with unit running stats is an affine identity") {
  Rng rng(8);
  Tensor x = rand_uniform({1, 2, 3, 3}, rng, -1.0, 1.0);
  BatchNorm2d bn = BatchNorm2d::make(2);
  bn.eps = 1e-12;
  Tensor y = batchnorm2d(x, bn, Mode::eval);
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("running statistics blend matches the hand-computed momentum mix") {
  Tensor x({2, 1, 1, 2}, {1.0, 2.0, 3.0, 6.0});
  BatchNorm2d bn = BatchNorm2d::make(1);
  batchnorm2d(x, bn, Mode::train);
  // batch mean 3, biased var 3.5, unbiased var 14/3
  CHECK(bn.running_mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 3.0).epsilon(1e-12));
  CHECK(bn.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * (14.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("batchnorm train mode rejects degenerate statistics") {
  BatchNorm2d bn = BatchNorm2d::make(1);
  Tensor x = Tensor::ones({1, 1, 1, 1});
  CHECK_THROWS_AS(batchnorm2d(x, bn, Mode::train), NumericError);
}

TEST_CASE("batchnorm gradients pass finite differences") {
  Rng rng(9);
  Tensor x = rand_uniform({2, 3, 4, 4}, rng, -1.0, 1.0);
  BatchNorm2d bn = BatchNorm2d::make(3);
  // random affine so gamma/beta gradients are non-trivial
  bn.gamma = rand_uniform({3}, rng, 0.5, 1.5, true);
  bn.beta = rand_uniform({3}, rng, -0.5, 0.5, true);
  auto f = [&bn](const std::vector<Tensor>& in) {
    BatchNorm2d probe = bn;  // isolates running-stat mutation per call
    return sum(sigmoid(batchnorm2d(in[0], probe, Mode::train)));
  };
  CHECK(finite_diff_check(f, {x, bn.gamma, bn.beta}) < 1e-4);
}

TEST_CASE("dense layer matches matmul plus bias and passes finite differences") {
  Rng rng(10);
  Tensor x = rand_uniform({4, 3}, rng, -1.0, 1.0);
  Dense layer = Dense::make(3, 2, true, rng);
  Tensor y = dense(x, layer);
  CHECK(y.shape() == Shape{4, 2});
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 2; ++j) {
      double acc = layer.bias.data()[j];
      for (int64_t k = 0; k < 3; ++k) acc += x.at({i, k}) * layer.weight.at({k, j});
      CHECK(y.at({i, j}) == doctest::Approx(acc).epsilon(1e-13));
    }
  auto f = [&layer](const std::vector<Tensor>& in) {
    return sum(sigmoid(dense(in[0], layer)));
  };
  CHECK(finite_diff_check(f, {x, layer.weight, layer.bias}) < 1e-4);
}

TEST_CASE("maxpool constant input stays constant") {
  Tensor x = Tensor::full({1, 1, 6, 6}, 2.5);
  Tensor y = maxpool2d(x, 3, 2, 1);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (double v : y.data()) CHECK(v == 2.5);
}

TEST_CASE("maxpool on a ramp picks window corners") {
  std::vector<double> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[static_cast<size_t>(i)] = i;
  Tensor x({1, 1, 4, 4}, ramp);
  Tensor y = maxpool2d(x, 2, 2, 0);
  CHECK(y.data() == std::vector<double>{5, 7, 13, 15});
}

TEST_CASE("maxpool matches a window-scan oracle and routes ties to first hit") {
  Rng rng(11);
  Tensor x = rand_uniform({2, 2, 7, 7}, rng, -1.0, 1.0);
  Tensor y = maxpool2d(x, 3, 2, 1);
  // window-scan oracle
  for (int64_t bc = 0; bc < 4; ++bc)
    for (int64_t oh = 0; oh < 4; ++oh)
      for (int64_t ow = 0; ow < 4; ++ow) {
        double best = -1e300;
        for (int64_t ki = 0; ki < 3; ++ki)
          for (int64_t kj = 0; kj < 3; ++kj) {
            const int64_t ih = oh * 2 - 1 + ki, iw = ow * 2 - 1 + kj;
            if (ih < 0 || ih >= 7 || iw < 0 || iw >= 7) continue;
            best = std::max(best, x.data()[(bc * 7 + ih) * 7 + iw]);
          }
        CHECK(y.data()[(bc * 4 + oh) * 4 + ow] == best);
      }

  // ties: constant window sends all gradient to the first cell
  Tensor flat = Tensor::ones({1, 1, 2, 2}).set_requires_grad(true);
  backward(sum(maxpool2d(flat, 2, 2, 0)));
  CHECK(flat.grad() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("maxpool gradient passes finite differences") {
  // distinct values keep the argmax stable under the probe step
  Rng rng(12);
  Tensor x = rand_uniform({1, 2, 6, 6}, rng, -1.0, 1.0);
  auto f = [](const Tensor& t) { return sum(mul(maxpool2d(t, 3, 2, 1), 0.7)); };
  CHECK(finite_diff_check(f, x) < 1e-4);
}

TEST_CASE("nearest upsample duplicates pixels into 2x2 blocks") {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = upsample2x(x, UpsampleMode::nearest);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y.data() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("bilinear upsample of a constant is constant") {
  Tensor x = Tensor::full({1, 2, 3, 3}, 0.7);
  Tensor y = upsample2x(x, UpsampleMode::bilinear);
  for (double v : y.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("bilinear upsample matches a direct interpolation oracle") {
  Rng rng(13);
  Tensor x = rand_uniform({1, 1, 3, 3}, rng, 0.0, 1.0);
  Tensor y = upsample2x(x, UpsampleMode::bilinear);
  auto sample = [&](int64_t i, int64_t j) { return x.data()[i * 3 + j]; };
  for (int64_t oh = 0; oh < 6; ++oh)
    for (int64_t ow = 0; ow < 6; ++ow) {
      const double sy = (oh + 0.5) / 2.0 - 0.5;
      const double sx = (ow + 0.5) / 2.0 - 0.5;
      const auto clampi = [](int64_t v, int64_t hi) { return std::min(std::max<int64_t>(v, 0), hi); };
      const int64_t y0 = clampi(static_cast<int64_t>(std::floor(sy)), 2);
      const int64_t x0 = clampi(static_cast<int64_t>(std::floor(sx)), 2);
      const int64_t y1 = clampi(static_cast<int64_t>(std::floor(sy)) + 1, 2);
      const int64_t x1 = clampi(static_cast<int64_t>(std::floor(sx)) + 1, 2);
      const double ty = sy - std::floor(sy);
      const double tx = sx - std::floor(sx);
      const double ref = (1 - ty) * ((1 - tx) * sample(y0, x0) + tx * sample(y0, x1)) +
                         ty * ((1 - tx) * sample(y1, x0) + tx * sample(y1, x1));
      CHECK(y.data()[oh * 6 + ow] == doctest::Approx(ref).epsilon(1e-13));
    }
}

TEST_CASE("upsample gradients pass finite differences in both modes") {
  Rng rng(14);
  Tensor x = rand_uniform({1, 2, 3, 4}, rng, -1.0, 1.0);
  auto fn = [](const Tensor& t) { return sum(mul(upsample2x(t, UpsampleMode::nearest), 0.5)); };
  auto fb = [](const Tensor& t) { return sum(sigmoid(upsample2x(t, UpsampleMode::bilinear))); };
  CHECK(finite_diff_check(fn, x) < 1e-4);
  CHECK(finite_diff_check(fb, x) < 1e-4);
}

}  // TEST_SUITE
