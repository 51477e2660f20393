#include "doctest.h"

#include "lods/generators.hpp"
#include "lods/oracle.hpp"

using namespace lods;

TEST_CASE("identity generator returns theta") {
  const auto g = Generator<double>::identity(Shape{3, 2});
  const auto th = g.initial_theta(1);
  CHECK((g.render(th).value() - th.value()).cwiseAbs().maxCoeff() == 0.0);
  Tensor<double> up(Shape{3, 2});
  up.value().setConstant(2.0);
  CHECK(g.pullback(th, up).value().isApprox(up.value()));
  CHECK_THROWS_AS(g.render(Tensor<double>(Shape{2, 2})), std::invalid_argument);
}

TEST_CASE("splat layout validation") {
  SplatLayout L;
  L.background = 1.0;
  CHECK_THROWS_AS(Generator<double>::splats(L), std::invalid_argument);
  L.background = 0.5;
  L.width = 0;
  CHECK_THROWS_AS(Generator<double>::splats(L), std::invalid_argument);
  L.width = 8;
  L.channels = 3;
  const auto g = Generator<double>::splats(L);
  CHECK(g.theta_shape() == Shape{L.count, 10});
  CHECK(g.output_shape() == Shape{16, 8, 3});
}

TEST_CASE("an empty scene renders the background") {
  SplatLayout L;
  L.count = 0;
  L.background = 0.25;
  const auto g = Generator<double>::splats(L);
  const auto img = g.render(Tensor<double>(g.theta_shape()));
  CHECK(img.value().minCoeff() == doctest::Approx(0.25));
  CHECK(img.value().maxCoeff() == doctest::Approx(0.25));
}

TEST_CASE("an opaque splat covers its center pixel") {
  SplatLayout L;
  L.count = 1;
  const auto g = Generator<double>::splats(L);
  Tensor<double> th(g.theta_shape());
  th.value() << 0.5, 0.5, std::log(0.5), std::log(0.5), 0.0, 8.0, 20.0, 0.0;
  const auto img = g.render(th).reshaped(Shape{16, 16});
  CHECK(img.value()(7, 7) > 0.99);
  CHECK(img.value()(0, 0) < img.value()(7, 7) - 0.2);
}

TEST_CASE("the nearer splat wins and depth has no gradient") {
  SplatLayout L;
  L.count = 2;
  const auto g = Generator<double>::splats(L);
  Tensor<double> th(g.theta_shape());
  th.value() << 0.5, 0.5, std::log(0.5), std::log(0.5), 0.0, 8.0, 20.0, 1.0,  //
      0.5, 0.5, std::log(0.5), std::log(0.5), 0.0, -8.0, 20.0, 2.0;
  const auto img = g.render(th).reshaped(Shape{16, 16});
  CHECK(img.value()(7, 7) > 0.99);  // depth 1 is nearer than depth 2
  th.value()(0, 7) = 3.0;
  CHECK(g.render(th).reshaped(Shape{16, 16}).value()(7, 7) < 0.01);
  Tensor<double> up(g.output_shape());
  up.value().setOnes();
  const auto grad = g.pullback(th, up);
  CHECK(grad.value().col(7).cwiseAbs().maxCoeff() == 0.0);
  CHECK(grad.value().leftCols(7).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("splat gradients match finite differences on a crowded scene") {
  SplatLayout L;
  L.count = 6;
  L.width = 12;
  L.height = 10;
  L.channels = 3;
  const auto g = Generator<double>::splats(L);
  Tensor<double> th = g.initial_theta(5);
  th.value().col(2).array() += 0.7;
  CounterRng rng(5, 0, Stream::Generic);
  const auto wts = rng.normal_tensor<double>(g.output_shape());
  auto fn = [&](Tape<double>& tape, const Var<double>& v) { return sum(mul(g.render(tape, v), tape.constant(wts))); };
  CHECK(finite_diff_check(fn, th) < 1e-4);
}
