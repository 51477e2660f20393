#include "lods/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lods {

const char* to_string(ScheduleKind kind) {
  return kind == ScheduleKind::LinearBeta ? "linear-beta" : "cosine";
}

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear-beta" || s == "linear") return ScheduleKind::LinearBeta;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw std::invalid_argument("unknown schedule kind '" + s + "' (expected linear-beta or cosine)");
}

int NoiseSchedule::check(int t) const {
  if (t < 0 || t >= steps())
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(steps()) + ")");
  return t;
}

void NoiseSchedule::set_loss_weight(std::vector<double> w) {
  if (w.size() != alphas_.size())
    throw std::invalid_argument("loss weight table must have one entry per timestep");
  weights_ = std::move(w);
}

double NoiseSchedule::alpha_at_fraction(double tau) const {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::out_of_range("fraction must lie in [0, 1]");
  if (kind_ == ScheduleKind::Cosine) return std::cos(0.5 * std::numbers::pi * tau);
  const double pos = tau * (steps() - 1);
  const int lo = static_cast<int>(std::floor(pos));
  const int hi = std::min(lo + 1, steps() - 1);
  const double f = pos - lo;
  const double la = std::log(alphas_[lo] * alphas_[lo]);
  const double lb = std::log(alphas_[hi] * alphas_[hi]);
  return std::sqrt(std::exp((1.0 - f) * la + f * lb));
}

NoiseSchedule make_schedule(ScheduleKind kind, int steps, double beta_min, double beta_max) {
  if (steps < 2) throw std::invalid_argument("schedule needs T >= 2, got " + std::to_string(steps));
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw std::invalid_argument("schedule needs 0 < beta_min <= beta_max < 1");

  NoiseSchedule s;
  s.kind_ = kind;
  s.beta_min_ = beta_min;
  s.beta_max_ = beta_max;
  s.alphas_.resize(steps);
  s.sigmas_.resize(steps);
  s.weights_.assign(steps, 1.0);

  if (kind == ScheduleKind::LinearBeta) {
    double log_abar = 0.0;
    for (int t = 0; t < steps; ++t) {
      const double beta = beta_min + (beta_max - beta_min) * t / (steps - 1);
      log_abar += std::log1p(-beta);
      const double abar = std::exp(log_abar);
      s.alphas_[t] = std::sqrt(abar);
      s.sigmas_[t] = std::sqrt(-std::expm1(log_abar));
    }
  } else {
    for (int t = 0; t < steps; ++t) {
      const double angle = 0.5 * std::numbers::pi * t / (steps - 1);
      s.alphas_[t] = std::cos(angle);
      s.sigmas_[t] = std::sin(angle);
    }
    s.alphas_[steps - 1] = 0.0;
    s.sigmas_[steps - 1] = 1.0;
  }

  for (int t = 0; t < steps; ++t) {
    const double vp = s.alphas_[t] * s.alphas_[t] + s.sigmas_[t] * s.sigmas_[t];
    if (std::abs(vp - 1.0) > 1e-6)
      throw std::logic_error("schedule violates variance preservation at t=" + std::to_string(t));
    if (t > 0 && !(s.sigmas_[t] > s.sigmas_[t - 1]))
      throw std::invalid_argument("schedule sigma is not strictly increasing at t=" + std::to_string(t));
  }
  if (s.alphas_.front() < 0.999)
    throw std::invalid_argument("schedule starts too noisy: alpha_0 = " + std::to_string(s.alphas_.front()));
  if (s.sigmas_.back() < 0.99)
    throw std::invalid_argument("schedule ends too clean: sigma_T = " + std::to_string(s.sigmas_.back()) +
                                "; increase T or beta_max");
  return s;
}

int sample_timestep(const TimestepPolicy& policy, int steps, CounterRng& rng) {
  if (!(policy.t_min >= 0.0 && policy.t_max <= 1.0 && policy.t_min <= policy.t_max))
    throw std::invalid_argument("timestep range must satisfy 0 <= t_min <= t_max <= 1");
  const int lo = static_cast<int>(std::lround(policy.t_min * steps));
  const int hi = std::min(static_cast<int>(std::lround(policy.t_max * steps)), steps - 1);
  if (lo > hi) throw std::invalid_argument("timestep range is empty after discretization");
  return static_cast<int>(rng.uniform_int(lo, hi));
}

}  // namespace lods
