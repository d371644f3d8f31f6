#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "dve/errors.hpp"
#include "dve/nn.hpp"

using namespace dve::nn;

namespace {

Tensor random_tensor(int n, int c, int h, int w, std::mt19937_64& rng, float sd = 1.0f) {
  std::normal_distribution<float> normal(0.0f, sd);
  Tensor t(n, c, h, w);
  for (float& v : t.data) v = normal(rng);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
  return s;
}

// Checks backward() of `layer` against central differences of the scalar
// <forward(x), probe> with respect to the input and every trainable parameter.
// Float arithmetic limits the attainable agreement, so errors are measured
// relative to the largest gradient entry.
double layer_grad_error(Layer& layer, Tensor x, bool training, std::mt19937_64& rng, float h = 1e-2f) {
  // Zero biases put ReLU inputs exactly on the kink wherever a whole input
  // column was clipped; random offsets keep the probe away from it.
  std::vector<Parameter*> all;
  layer.collect("", all);
  std::normal_distribution<float> offset(0.0f, 0.3f);
  for (Parameter* p : all) {
    if (p->trainable && p->name.size() >= 4 && p->name.compare(p->name.size() - 4, 4, "bias") == 0) {
      for (float& v : p->value.data) v = offset(rng);
    }
  }
  const Tensor y = layer.forward(x, training);
  const Tensor probe = random_tensor(y.n, y.c, y.h, y.w, rng);
  std::vector<Parameter*> params;
  layer.collect("", params);
  for (Parameter* p : params) p->grad.zero();
  layer.forward(x, training);
  const Tensor dx = layer.backward(probe);

  const auto loss = [&] { return dot(layer.forward(x, training), probe); };
  double worst = 0, scale = 1e-6;
  const auto probe_entries = [&](std::vector<float>& values, const std::vector<float>& analytic) {
    for (size_t i = 0; i < values.size(); ++i) {
      const float saved = values[i];
      values[i] = saved + h;
      const double up = loss();
      values[i] = saved - h;
      const double down = loss();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(numeric - analytic[i]));
      scale = std::max(scale, std::abs(numeric));
    }
  };
  probe_entries(x.data, dx.data);
  for (Parameter* p : params) {
    if (p->trainable) probe_entries(p->value.data, p->grad.data);
  }
  return worst / scale;
}

// Direct nested-loop convolution.
Tensor naive_conv(const Tensor& x, Conv2d& conv, int kernel, int stride, int dilation) {
  const int pad = dilation * (kernel - 1) / 2;
  const int oh = (x.h + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
  const int ow = (x.w + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
  Tensor y(x.n, conv.out_channels(), oh, ow);
  const auto& wt = conv.weight().value.data;
  for (int i = 0; i < x.n; ++i) {
    for (int co = 0; co < conv.out_channels(); ++co) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = conv.bias().value.data[co];
          for (int ci = 0; ci < x.c; ++ci) {
            for (int ky = 0; ky < kernel; ++ky) {
              for (int kx = 0; kx < kernel; ++kx) {
                const int iy = oy * stride - pad + ky * dilation, ix = ox * stride - pad + kx * dilation;
                if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                acc += wt[((static_cast<size_t>(co) * x.c + ci) * kernel + ky) * kernel + kx] * x.at(i, ci, iy, ix);
              }
            }
          }
          y.at(i, co, oy, ox) = static_cast<float>(acc);
        }
      }
    }
  }
  return y;
}

}  // namespace

TEST_CASE("convolution matches a direct nested-loop oracle") {
  std::mt19937_64 rng(1);
  struct Geometry { int k, stride, dilation; };
  for (const Geometry g : {Geometry{3, 1, 1}, Geometry{5, 1, 1}, Geometry{3, 1, 4}, Geometry{7, 2, 1}, Geometry{1, 1, 1}}) {
    Conv2d conv(3, 4, g.k, g.stride, g.dilation);
    conv.init(rng);
    for (float& b : conv.bias().value.data) b = std::normal_distribution<float>(0, 1)(rng);
    const Tensor x = random_tensor(2, 3, 11, 10, rng);
    const Tensor fast = conv.forward(x, true);
    const Tensor slow = naive_conv(x, conv, g.k, g.stride, g.dilation);
    REQUIRE(fast.same_shape(slow));
    double worst = 0;
    for (size_t i = 0; i < fast.size(); ++i) worst = std::max(worst, double(std::abs(fast.data[i] - slow.data[i])));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("same padding keeps spatial size at stride 1") {
  std::mt19937_64 rng(2);
  for (int d : {1, 2, 4}) {
    Conv2d conv(2, 3, 3, 1, d);
    conv.init(rng);
    const Tensor y = conv.forward(Tensor(1, 2, 9, 9), false);
    CHECK(y.h == 9);
    CHECK(y.w == 9);
  }
}

TEST_CASE("layer backward passes agree with finite differences") {
  std::mt19937_64 rng(3);
  SUBCASE("conv, dilated") {
    Conv2d conv(2, 3, 3, 1, 2);
    conv.init(rng);
    CHECK(layer_grad_error(conv, random_tensor(2, 2, 6, 5, rng), true, rng) < 2e-2);
  }
  SUBCASE("conv, strided 7x7") {
    Conv2d conv(2, 2, 7, 2, 1);
    conv.init(rng);
    CHECK(layer_grad_error(conv, random_tensor(1, 2, 8, 8, rng), true, rng) < 2e-2);
  }
  SUBCASE("batch norm, training statistics") {
    BatchNorm2d bn(3);
    CHECK(layer_grad_error(bn, random_tensor(2, 3, 3, 3, rng), true, rng, 1e-2f) < 2e-2);
  }
  SUBCASE("batch norm, running statistics") {
    BatchNorm2d bn(3);
    bn.forward(random_tensor(4, 3, 3, 3, rng, 2.0f), true);
    CHECK(layer_grad_error(bn, random_tensor(2, 3, 3, 3, rng), false, rng) < 2e-2);
  }
  SUBCASE("max pool") {
    MaxPool2d pool;
    CHECK(layer_grad_error(pool, random_tensor(2, 2, 6, 6, rng), true, rng, 1e-3f) < 2e-2);
  }
  SUBCASE("upsample") {
    Upsample2x up;
    CHECK(layer_grad_error(up, random_tensor(1, 2, 3, 4, rng), true, rng) < 2e-2);
  }
  SUBCASE("residual with projection") {
    Residual res(2, 4);
    res.init(rng);
    CHECK(layer_grad_error(res, random_tensor(2, 2, 4, 4, rng), false, rng, 1e-3f) < 2e-2);
  }
  SUBCASE("hourglass, depth 2") {
    Hourglass hg(2, 2);
    hg.init(rng);
    CHECK(layer_grad_error(hg, random_tensor(1, 2, 4, 4, rng), false, rng, 1e-3f) < 2e-2);
  }
}

TEST_CASE("batch norm tracks running statistics with momentum 0.1") {
  BatchNorm2d bn(1);
  Tensor x(1, 1, 1, 4);
  x.data = {1, 2, 3, 6};  // mean 3, unbiased variance 14/3
  bn.forward(x, true);
  std::vector<Parameter*> p;
  bn.collect("bn.", p);
  REQUIRE(p.size() == 4);
  CHECK(p[2]->name == "bn.running_mean");
  CHECK(p[2]->value.data[0] == doctest::Approx(0.3));
  CHECK(p[3]->value.data[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0));
  CHECK_FALSE(p[2]->trainable);
}

TEST_CASE("max pool routes gradient to the maximum only") {
  MaxPool2d pool;
  Tensor x(1, 1, 2, 2);
  x.data = {0.1f, 0.9f, -1.0f, 0.5f};
  const Tensor y = pool.forward(x, true);
  CHECK(y.data[0] == 0.9f);
  Tensor g(1, 1, 1, 1, 2.0f);
  const Tensor dx = pool.backward(g);
  CHECK(dx.data == std::vector<float>{0, 2, 0, 0});
}

TEST_CASE("Adam step matches the closed-form update") {
  Parameter p;
  p.value = Tensor(1, 1, 1, 2);
  p.value.data = {1.0f, -2.0f};
  p.grad = Tensor(1, 1, 1, 2);
  Adam opt({&p}, {.lr = 0.1});
  p.grad.data = {0.5f, -3.0f};
  opt.step();
  // First bias-corrected step moves each coordinate by lr * sign(g) (up to eps).
  CHECK(p.value.data[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p.value.data[1] == doctest::Approx(-1.9).epsilon(1e-6));
  p.grad.data = {0.5f, 1.0f};
  opt.step();
  const double m = 0.9 * (0.1 * -3.0) + 0.1 * 1.0;
  const double v = 0.999 * (0.001 * 9.0) + 0.001 * 1.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  CHECK(p.value.data[1] == doctest::Approx(-1.9 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8)).epsilon(1e-5));
  CHECK(opt.steps() == 2);
}

TEST_CASE("Adam with zero learning rate leaves parameters bit-identical") {
  std::mt19937_64 rng(4);
  Parameter p;
  p.value = random_tensor(1, 3, 2, 2, rng);
  p.grad = random_tensor(1, 3, 2, 2, rng);
  const auto before = p.value.data;
  Adam opt({&p}, {.lr = 0.0});
  for (int i = 0; i < 5; ++i) opt.step();
  CHECK(p.value.data == before);
}

TEST_CASE("invalid layer geometry is rejected") {
  CHECK_THROWS_AS(Conv2d(0, 1, 3), dve::ConfigError);
  CHECK_THROWS_AS(Conv2d(1, 1, 4), dve::ConfigError);
  Conv2d conv(2, 1, 3);
  CHECK_THROWS_AS(conv.forward(Tensor(1, 3, 4, 4), false), dve::ShapeError);
}
