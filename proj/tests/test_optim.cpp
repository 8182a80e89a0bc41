#include <doctest.h>

#include <cmath>

#include "msnas/optim.hpp"

using msnas::AdamOptimizer;
using msnas::SgdOptimizer;
using msnas::Tensor;

TEST_CASE("sgd with lr 0 leaves parameters unchanged") {
  auto p = Tensor<float>::from({2}, {1.0f, -2.0f});
  p.set_requires_grad(true);
  p.grad_data()[0] = 5.0f;
  p.grad_data()[1] = -5.0f;
  SgdOptimizer<float> opt({p}, 0.9f, 0.0f);
  opt.step(0.0f);
  CHECK(p.data()[0] == 1.0f);
  CHECK(p.data()[1] == -2.0f);
  CHECK_THROWS_AS(opt.step(-0.1f), std::invalid_argument);
}

TEST_CASE("plain sgd step moves against the gradient by lr") {
  auto p = Tensor<float>::from({1}, {1.0f});
  p.set_requires_grad(true);
  p.grad_data()[0] = 1.0f;
  SgdOptimizer<float> opt({p}, 0.0f, 0.0f);
  opt.step(0.1f);
  CHECK(p.data()[0] == doctest::Approx(0.9f));
}

TEST_CASE("momentum sgd accumulates velocity") {
  auto p = Tensor<double>::from({1}, {0.0});
  p.set_requires_grad(true);
  SgdOptimizer<double> opt({p}, 0.9, 0.0);
  // constant gradient 1: v1=1, v2=1.9; p = -lr*(v1+v2)
  p.grad_data()[0] = 1.0;
  opt.step(0.1);
  p.zero_grad();
  p.grad_data()[0] = 1.0;
  opt.step(0.1);
  CHECK(p.data()[0] == doctest::Approx(-0.1 - 0.19));
}

TEST_CASE("sgd weight decay pulls weights toward zero") {
  auto p = Tensor<double>::from({1}, {2.0});
  p.set_requires_grad(true);
  SgdOptimizer<double> opt({p}, 0.0, 0.5);
  opt.step(0.1);  // grad 0, decayed grad = 0.5*2 = 1 -> p -= 0.1
  CHECK(p.data()[0] == doctest::Approx(1.9));
}

TEST_CASE("adam first step has bias-corrected magnitude close to lr") {
  // hand-rolled single-step reference: m=(1-b1)g, v=(1-b2)g^2,
  // mhat=g, vhat=g^2, update = lr*g/(|g|+eps) ~= lr*sign(g)
  for (double g : {0.37, -5.0, 1e-3}) {
    auto p = Tensor<double>::from({1}, {1.0});
    p.set_requires_grad(true);
    p.grad_data()[0] = g;
    AdamOptimizer<double> opt({p}, 0.5, 0.999, 0.0);
    opt.step(0.01);
    const double eps = 1e-8;
    const double expect = 1.0 - 0.01 * g / (std::fabs(g) + eps);
    CHECK(p.data()[0] == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("adam two deterministic steps replay identically") {
  auto run = [](std::vector<double>& out) {
    auto p = Tensor<double>::from({2}, {0.3, -0.7});
    p.set_requires_grad(true);
    AdamOptimizer<double> opt({p}, 0.5, 0.999, 1e-3);
    for (int s = 0; s < 2; ++s) {
      p.zero_grad();
      p.grad_data()[0] = 0.1 * (s + 1);
      p.grad_data()[1] = -0.2;
      opt.step(3e-4);
    }
    out = {p.data()[0], p.data()[1]};
  };
  std::vector<double> a, b;
  run(a);
  run(b);
  CHECK(a == b);
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(msnas::cosine_lr(0.025, 0.0, 0, 50) == doctest::Approx(0.025));
  CHECK(msnas::cosine_lr(0.025, 0.0, 50, 50) == doctest::Approx(0.0));
  CHECK(msnas::cosine_lr(0.025, 0.0, 25, 50) == doctest::Approx(0.0125));
}
