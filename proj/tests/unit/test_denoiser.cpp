#include "doctest.h"

#include <cmath>

#include "lods/denoiser.hpp"
#include "lods/io.hpp"

using namespace lods;

namespace {

NetworkConfig tiny() {
  NetworkConfig c;
  c.width = 16;
  c.hidden_layers = 2;
  c.embed_dim = 4;
  c.time_dim = 4;
  return c;
}

}  // namespace

TEST_CASE("analytic denoiser returns the Gaussian posterior noise") {
  const NoiseSchedule s = make_schedule();
  auto d = make_analytic<double>({GaussianClass{{1.0}, 0.5}}, GaussianClass{{0.0}, 0.5}, s);
  const int t = 400;
  const double a = s.alpha(t), sg = s.sigma(t), z = 0.7;
  const double expect = sg * (z - a * 1.0) / (a * a * 0.5 + sg * sg);
  Tensor<double> zt(Shape{1, 1}, std::vector<double>{z});
  CHECK(d->predict(zt, {t}, Condition<double>::of(0)).item() == doctest::Approx(expect).epsilon(1e-12));
  const double expect_null = sg * z / (a * a * 0.5 + sg * sg);
  CHECK(d->predict(zt, {t}, Condition<double>::null()).item() == doctest::Approx(expect_null).epsilon(1e-12));
}

TEST_CASE("predict validates its inputs") {
  auto d = make_analytic<double>({GaussianClass{{1.0, 0.0}, 0.5}}, GaussianClass{{0.0, 0.0}, 0.5}, make_schedule());
  Tensor<double> z(Shape{3, 2});
  CHECK_THROWS_AS(d->predict(Tensor<double>(Shape{3, 3}), {10}, Condition<double>::null()), std::invalid_argument);
  CHECK_THROWS_AS(d->predict(z, {}, Condition<double>::null()), std::invalid_argument);
  CHECK_THROWS_AS(d->predict(z, {1, 2}, Condition<double>::null()), std::invalid_argument);
  CHECK_THROWS_AS(d->predict(z, {5}, Condition<double>::of(3)), std::out_of_range);
  CHECK_THROWS(d->predict(z, {1000}, Condition<double>::null()));
  CHECK(d->predict(z, {1, 2, 3}, Condition<double>::per_row({0, -1, 0})).rows() == 3);
}

TEST_CASE("a learnable embedding copied from a class predicts like the class") {
  NetworkDenoiser<double> net(tiny(), make_schedule(), 1);
  CounterRng rng(1, 0, Stream::Generic);
  const auto z = rng.normal_tensor<double>(Shape{5, 2});
  for (int id : {0, 1, Condition<double>::kNull}) {
    const auto e = make_learnable_embedding<double>(net, id);
    const auto cond = id == Condition<double>::kNull ? Condition<double>::null() : Condition<double>::of(id);
    CHECK((net.predict(z, {300}, cond).value() - net.predict(z, {300}, Condition<double>::embedding(e)).value())
              .cwiseAbs()
              .maxCoeff() == 0.0);
  }
}

TEST_CASE("adapters attach to hidden layers with zero up-projections") {
  NetworkDenoiser<double> net(tiny(), make_schedule(), 2);
  const auto psi = net.attach_adapter(3, 0.5, 7);
  CHECK(psi.layers.size() == 2);
  for (const auto& l : psi.layers) {
    CHECK(l.down.cols() == 3);
    CHECK(l.up.value().cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(psi.parameter_count() > 0);
  auto analytic = make_analytic<double>({GaussianClass{{0.0}, 1.0}}, GaussianClass{{0.0}, 1.0}, make_schedule());
  CHECK_THROWS_AS(attach_adapter<double>(*analytic, 2, 0.5, 0), std::invalid_argument);
}

TEST_CASE("counters track forwards and gradient-carrying backwards") {
  NetworkDenoiser<double> net(tiny(), make_schedule(), 3);
  Tensor<double> z(Shape{4, 2});
  net.predict(z, {5}, Condition<double>::null());
  CHECK(net.forward_count() == 1);
  CHECK(net.backward_count() == 0);
  auto e = make_learnable_embedding<double>(net);
  Tape<double> tape;
  auto out = net.predict(tape, tape.constant(z), {5}, Condition<double>::embedding(e), nullptr, grad::Embedding);
  tape.backward(sum(out));
  CHECK(net.forward_count() == 2);
  CHECK(net.backward_count() == 1);
  CHECK(e.vector.has_grad());
  net.reset_counters();
  CHECK(net.forward_count() == 0);
}

TEST_CASE("training lowers the denoising loss on the mixture") {
  NetworkDenoiser<double> net(tiny(), make_schedule(), 4);
  const auto data = make_mixture2d(256, 1.5, 0.25, 0);
  TrainSettings s;
  s.steps = 400;
  s.batch = 64;
  const auto losses = train_denoiser(net, data, s);
  REQUIRE(losses.size() == 400);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 50; ++i) {
    first += losses[i];
    last += losses[350 + i];
  }
  CHECK(last < first);
  auto analytic = make_analytic<double>({GaussianClass{{0.0, 0.0}, 1.0}}, GaussianClass{{0.0, 0.0}, 1.0}, make_schedule());
  CHECK_THROWS_AS(train_denoiser(*analytic, data, s), std::invalid_argument);
  s.drop_prob = 1.0;
  CHECK_THROWS_AS(train_denoiser(net, data, s), std::invalid_argument);
}
