#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "iif/optim.hpp"

using namespace iif;
using namespace iif::testing;

namespace {

struct Quad {
  std::vector<double> x{0.0};
  std::vector<double> g{0.0};
  double target = 3.0;
  void compute_grad() { g[0] = 2.0 * (x[0] - target); }
};

ParamRegistry registry_for(Quad& q, std::function<void(std::vector<double>&)> proj = nullptr) {
  ParamRegistry reg;
  ParamBlock b;
  b.name = "x";
  b.params = &q.x;
  b.grads = &q.g;
  b.projection = std::move(proj);
  reg.add(std::move(b));
  return reg;
}

}  // namespace

TEST_CASE("adam: quadratic bowl converges") {
  Quad q;
  ParamRegistry reg = registry_for(q);
  AdamOptimizer adam(reg);
  for (int i = 0; i < 500; ++i) {
    q.compute_grad();
    adam.step(0.1);
  }
  CHECK(std::abs(q.x[0] - 3.0) < 1e-4);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Quad q;
  q.x[0] = 1.5;
  ParamRegistry reg = registry_for(q);
  AdamOptimizer adam(reg);
  q.g[0] = 0.0;
  adam.step(0.1);
  CHECK(q.x[0] == 1.5);
}

TEST_CASE("adam: first step is approximately lr * sign(grad)") {
  Quad q;
  q.x[0] = 0.0;
  ParamRegistry reg = registry_for(q);
  AdamOptimizer adam(reg);
  q.g[0] = -7.3;
  adam.step(0.01);
  CHECK(q.x[0] == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("adam: NaN gradient error names the block") {
  Quad q;
  ParamRegistry reg = registry_for(q);
  AdamOptimizer adam(reg);
  q.g[0] = std::nan("");
  CHECK_THROWS_WITH_AS(adam.step(0.1), doctest::Contains("x"), std::runtime_error);
}

TEST_CASE("sgd: plain update, projection, convergence") {
  {
    Quad q;
    q.x[0] = 1.0;
    ParamRegistry reg = registry_for(q);
    SgdOptimizer sgd(reg);
    q.g[0] = 2.0;
    sgd.step(0.25);
    CHECK(q.x[0] == doctest::Approx(0.5));
  }
  {
    Quad q;
    q.x[0] = 0.1;
    ParamRegistry reg = registry_for(q, [](std::vector<double>& p) {
      for (double& v : p) v = std::max(v, 0.0);
    });
    SgdOptimizer sgd(reg);
    q.g[0] = 10.0;  // would go negative
    sgd.step(0.1);
    CHECK(q.x[0] == 0.0);
  }
  {
    Quad q;
    ParamRegistry reg = registry_for(q);
    SgdOptimizer sgd(reg);
    for (int i = 0; i < 200; ++i) {
      q.compute_grad();
      sgd.step(0.1);
    }
    CHECK(std::abs(q.x[0] - 3.0) < 1e-6);
  }
}

TEST_CASE("schedule arithmetic: geometric decays hit the documented factors") {
  // 0.5 every 2 epochs
  CHECK(std::pow(0.5, 4 / 2) == doctest::Approx(0.25));
  // stage-3 decay 0.2/epoch
  CHECK(0.1 * std::pow(0.2, 2) == doctest::Approx(0.004));
  // anneal 0.85 every 100 iterations
  CHECK(std::pow(0.85, 250 / 100) == doctest::Approx(0.85 * 0.85));
}

TEST_CASE("lr_scale on a block scales its effective step") {
  Quad a, b;
  ParamRegistry reg;
  ParamBlock ba;
  ba.name = "a";
  ba.params = &a.x;
  ba.grads = &a.g;
  reg.add(std::move(ba));
  ParamBlock bb;
  bb.name = "b";
  bb.params = &b.x;
  bb.grads = &b.g;
  bb.lr_scale = 0.5;
  reg.add(std::move(bb));
  SgdOptimizer sgd(reg);
  a.g[0] = b.g[0] = 1.0;
  sgd.step(0.2);
  CHECK(a.x[0] == doctest::Approx(-0.2));
  CHECK(b.x[0] == doctest::Approx(-0.1));
}

TEST_CASE("deterministic updates for identical gradient sequences") {
  const auto run = [] {
    Quad q;
    ParamRegistry reg = registry_for(q);
    AdamOptimizer adam(reg);
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
      q.g[0] = rng.next_double() - 0.5;
      adam.step(0.05);
    }
    return q.x[0];
  };
  CHECK(run() == run());
}
