#include "doctest.h"

#include <cmath>

#include "lods/schedule.hpp"

using namespace lods;

TEST_CASE("schedules satisfy alpha^2 + sigma^2 = 1 and increasing sigma") {
  for (auto kind : {ScheduleKind::LinearBeta, ScheduleKind::Cosine}) {
    const NoiseSchedule s = make_schedule(kind, 1000);
    CHECK(s.steps() == 1000);
    for (int t = 0; t < s.steps(); ++t) {
      CHECK(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t) == doctest::Approx(1.0).epsilon(1e-12));
      if (t) CHECK(s.sigma(t) > s.sigma(t - 1));
    }
    CHECK(s.alpha(0) >= 0.999);
    CHECK(s.sigma(999) >= 0.99);
  }
}

TEST_CASE("bad schedules are rejected") {
  CHECK_THROWS_AS(make_schedule(ScheduleKind::LinearBeta, 0), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(ScheduleKind::LinearBeta, 1000, 0.1, 0.01), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(ScheduleKind::LinearBeta, 10, 1e-4, 2e-2), std::invalid_argument);
  CHECK_THROWS(make_schedule().alpha(1000));
  CHECK_THROWS(make_schedule().alpha(-1));
}

TEST_CASE("schedule kind names round-trip") {
  CHECK(parse_schedule_kind(to_string(ScheduleKind::Cosine)) == ScheduleKind::Cosine);
  CHECK(parse_schedule_kind(to_string(ScheduleKind::LinearBeta)) == ScheduleKind::LinearBeta);
  CHECK_THROWS_AS(parse_schedule_kind("quadratic"), std::invalid_argument);
}

TEST_CASE("timestep sampling stays inside the policy window") {
  TimestepPolicy p{0.02, 0.98};
  int lo = 1000, hi = -1;
  for (std::uint64_t i = 0; i < 20000; ++i) {
    CounterRng rng(3, i, Stream::DistillTimestep);
    const int t = sample_timestep(p, 1000, rng);
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  CHECK(lo == 20);
  CHECK(hi == 980);
  CounterRng rng(0, 0, Stream::Generic);
  CHECK(sample_timestep(TimestepPolicy{0.0, 1.0}, 1000, rng) <= 999);
}

TEST_CASE("add_noise mixes by alpha and sigma") {
  const NoiseSchedule s = make_schedule();
  Tensor<double> x(Shape{2}, std::vector<double>{1.0, -1.0});
  Tensor<double> e(Shape{2}, std::vector<double>{0.5, 2.0});
  const auto z = add_noise(s, x, {500}, e);
  CHECK(z.value()(0, 0) == doctest::Approx(s.alpha(500) + 0.5 * s.sigma(500)));
  CHECK(z.value()(0, 1) == doctest::Approx(-s.alpha(500) + 2.0 * s.sigma(500)));
}

TEST_CASE("alpha at fraction matches the endpoints") {
  const NoiseSchedule s = make_schedule(ScheduleKind::Cosine);
  CHECK(s.alpha_at_fraction(0.0) == doctest::Approx(s.alpha(0)).epsilon(1e-3));
  CHECK(s.alpha_at_fraction(1.0) < s.alpha_at_fraction(0.5));
}
