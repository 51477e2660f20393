#pragma once

// Variance-preserving noise schedules and single-step forward noising
// z_t = alpha_t * x + sigma_t * eps.

#include <string>
#include <vector>

#include "lods/gradcore.hpp"
#include "lods/rng.hpp"

namespace lods {

enum class ScheduleKind { LinearBeta, Cosine };

const char* to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& s);

class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  ScheduleKind kind() const { return kind_; }
  int steps() const { return static_cast<int>(alphas_.size()); }
  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }

  double alpha(int t) const { return alphas_.at(check(t)); }
  double sigma(int t) const { return sigmas_.at(check(t)); }
  double loss_weight(int t) const { return weights_.at(check(t)); }
  void set_loss_weight(std::vector<double> w);

  /// Signal scale at a fraction tau in [0, 1] of the way through the schedule.
  /// Exact for cosine; log-linear interpolation of alpha^2 for linear-beta.
  double alpha_at_fraction(double tau) const;

  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& sigmas() const { return sigmas_; }
  const std::vector<double>& loss_weights() const { return weights_; }

 private:
  friend NoiseSchedule make_schedule(ScheduleKind, int, double, double);
  int check(int t) const;

  ScheduleKind kind_ = ScheduleKind::LinearBeta;
  double beta_min_ = 1e-4;
  double beta_max_ = 2e-2;
  std::vector<double> alphas_, sigmas_, weights_;
};

/// Builds a schedule and verifies its invariants: alpha^2 + sigma^2 = 1,
/// sigma strictly increasing, alpha_0 >= 0.999, sigma_{T-1} >= 0.99.
/// Throws std::invalid_argument on bad ranges or a schedule that cannot meet them.
NoiseSchedule make_schedule(ScheduleKind kind = ScheduleKind::LinearBeta, int steps = 1000,
                            double beta_min = 1e-4, double beta_max = 2e-2);

struct TimestepPolicy {
  double t_min = 0.02;
  double t_max = 0.98;
};

/// Uniform integer timestep in [round(t_min*T), round(t_max*T)], capped at T-1.
int sample_timestep(const TimestepPolicy& policy, int steps, CounterRng& rng);

/// One timestep for the whole batch, or one per row.
using Timesteps = std::vector<int>;

template <class Scalar>
Mat<Scalar> per_row_coefficient(const std::vector<double>& table, const Timesteps& t, Index rows) {
  if (t.size() == 1) return Mat<Scalar>::Constant(1, 1, static_cast<Scalar>(table.at(t[0])));
  if (static_cast<Index>(t.size()) != rows)
    throw std::invalid_argument("timestep count " + std::to_string(t.size()) + " does not match " +
                                std::to_string(rows) + " rows");
  Mat<Scalar> c(rows, 1);
  for (Index i = 0; i < rows; ++i) c(i, 0) = static_cast<Scalar>(table.at(t[static_cast<std::size_t>(i)]));
  return c;
}

/// Recorded noising; differentiable in x (and eps if it tracks gradient).
template <class Scalar>
Var<Scalar> add_noise(const NoiseSchedule& s, const Var<Scalar>& x, const Timesteps& t,
                      const Var<Scalar>& eps) {
  if (x.shape() != eps.shape())
    throw std::invalid_argument("add_noise: shape mismatch " + to_string(x.shape()) + " vs " +
                                to_string(eps.shape()));
  for (int ti : t) (void)s.alpha(ti);
  Tape<Scalar>& tape = *x.tape();
  auto a = per_row_coefficient<Scalar>(s.alphas(), t, x.rows());
  auto c = per_row_coefficient<Scalar>(s.sigmas(), t, x.rows());
  Shape cs{a.rows(), a.cols()};
  return add(mul(x, tape.constant(cs, a)), mul(eps, tape.constant(cs, c)));
}

template <class Scalar>
Tensor<Scalar> add_noise(const NoiseSchedule& s, const Tensor<Scalar>& x, const Timesteps& t,
                         const Tensor<Scalar>& eps) {
  Tape<Scalar> tape;
  auto z = add_noise(s, tape.constant(x), t, tape.constant(eps));
  return Tensor<Scalar>(z.shape(), z.value());
}

}  // namespace lods
