#pragma once

// Ground truth for the Gaussian sandbox, Monte-Carlo gradient expectations,
// finite-difference checks and kernel MMD.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "lods/denoiser.hpp"
#include "lods/priors.hpp"

namespace lods {

/// Conditional N(mu_y, var_y I) and unconditional N(mu_null, var_null I) data.
struct GaussianSandbox {
  std::vector<double> mu_y{1.0};
  double var_y = 0.5;
  std::vector<double> mu_null{0.0};
  double var_null = 0.5;
  NoiseSchedule schedule = make_schedule();

  Index dim() const { return static_cast<Index>(mu_y.size()); }
  bool equal_variances() const { return var_y == var_null; }

  void validate() const {
    if (mu_y.empty() || mu_y.size() != mu_null.size())
      throw std::invalid_argument("sandbox means must be nonempty and of equal length");
    if (!(var_y >= 0.0 && var_null >= 0.0)) throw std::invalid_argument("sandbox variances must be >= 0");
  }

  template <class Scalar>
  std::unique_ptr<AnalyticDenoiser<Scalar>> denoiser() const {
    validate();
    return make_analytic<Scalar>({GaussianClass{mu_y, var_y}}, GaussianClass{mu_null, var_null}, schedule);
  }
};

/// mu_null = 0, mu_y = 1, both variances 0.5, one dimension.
inline GaussianSandbox equal_variance_sandbox() { return GaussianSandbox{}; }

/// Zero of the expected SDS gradient. Equal variances give w mu_y + (1-w) mu_null
/// for every t; otherwise `t` is required and the per-t weighted root is returned.
inline std::vector<double> cfg_fixed_point(const GaussianSandbox& sb, double w, std::optional<int> t = std::nullopt) {
  sb.validate();
  if (!std::isfinite(w)) throw std::invalid_argument("fixed point needs a finite guidance weight");
  std::vector<double> x(sb.mu_y.size());
  if (sb.equal_variances()) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = w * sb.mu_y[i] + (1.0 - w) * sb.mu_null[i];
    return x;
  }
  if (!t) throw std::invalid_argument("unequal variances: the fixed point depends on t; pass a timestep");
  const double a = sb.schedule.alpha(*t), s = sb.schedule.sigma(*t);
  const double dy = a * a * sb.var_y + s * s;
  const double dn = a * a * sb.var_null + s * s;
  const double denom = w / dy + (1.0 - w) / dn;
  if (denom == 0.0 || !std::isfinite(denom))
    throw std::domain_error("fixed point undefined: w/d_y + (1-w)/d_null = 0 at w = " + format_guidance(w));
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (w * sb.mu_y[i] / dy + (1.0 - w) * sb.mu_null[i] / dn) / denom;
  return x;
}

struct McSettings {
  Index samples = 10000;
  std::uint64_t seed = 0;
  std::optional<int> fixed_t;  // otherwise drawn from the config's timestep policy
  Index chunk = 8192;
};

struct McEstimate {
  std::vector<double> mean;
  std::vector<double> stderr_;
  Index samples = 0;
};

/// Mean and standard error of the configured distillation gradient at fixed x
/// over independent (t, eps) draws. Draws depend only on (seed, sample index),
/// so repeated calls at different x share random numbers.
template <class Scalar>
McEstimate expected_grad_mc(const PriorConfig& cfg, Denoiser<Scalar>& d, const PriorState<Scalar>& st,
                            const std::vector<double>& x, const McSettings& mc,
                            const std::vector<double>* x_src = nullptr) {
  if (mc.samples < 2) throw std::invalid_argument("Monte-Carlo estimate needs at least 2 samples");
  const Index D = d.data_dim();
  if (static_cast<Index>(x.size()) != D) throw std::invalid_argument("probe point has wrong dimension");
  const int T = d.schedule().steps();
  std::vector<double> sum(D, 0.0), sq(D, 0.0);
  for (Index start = 0; start < mc.samples; start += mc.chunk) {
    const Index n = std::min(mc.chunk, mc.samples - start);
    Tensor<Scalar> xb(Shape{n, D}), eps(Shape{n, D}), src(Shape{n, D});
    Timesteps t(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      CounterRng r(mc.seed, static_cast<std::uint64_t>(start + i), Stream::MonteCarlo);
      t[i] = mc.fixed_t ? *mc.fixed_t : sample_timestep(cfg.timesteps, T, r);
      for (Index k = 0; k < D; ++k) {
        xb.value()(i, k) = static_cast<Scalar>(x[k]);
        eps.value()(i, k) = static_cast<Scalar>(r.normal());
        if (x_src) src.value()(i, k) = static_cast<Scalar>((*x_src)[k]);
      }
    }
    const Tensor<Scalar> g = distill_grad(cfg, d, st, xb, x_src ? &src : nullptr, t, eps);
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < D; ++k) {
        const double v = static_cast<double>(g.value()(i, k));
        sum[k] += v;
        sq[k] += v * v;
      }
  }
  McEstimate est;
  est.samples = mc.samples;
  const double n = static_cast<double>(mc.samples);
  for (Index k = 0; k < D; ++k) {
    const double m = sum[k] / n;
    const double var = std::max(0.0, (sq[k] - n * m * m) / (n - 1.0));
    est.mean.push_back(m);
    est.stderr_.push_back(std::sqrt(var / n));
  }
  return est;
}

/// Root of a scalar function on [lo, hi] by bisection; requires a sign change.
inline double bisect(const std::function<double(double)>& f, double lo, double hi, double tol = 1e-6,
                     int max_iter = 200) {
  double flo = f(lo), fhi = f(hi);
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  if ((flo > 0.0) == (fhi > 0.0))
    throw std::invalid_argument("bisection bracket [" + std::to_string(lo) + ", " + std::to_string(hi) +
                                "] has no sign change");
  for (int i = 0; i < max_iter && hi - lo > tol; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if (fm == 0.0) return mid;
    if ((fm > 0.0) == (flo > 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

/// 1-D root of the Monte-Carlo expected gradient, bracketed around `guess`.
template <class Scalar>
double mc_fixed_point(const PriorConfig& cfg, Denoiser<Scalar>& d, const PriorState<Scalar>& st, double guess,
                      double half_width, const McSettings& mc) {
  if (d.data_dim() != 1) throw std::invalid_argument("Monte-Carlo root finding is one-dimensional");
  auto f = [&](double x) { return expected_grad_mc(cfg, d, st, {x}, mc).mean[0]; };
  return bisect(f, guess - half_width, guess + half_width, 1e-5);
}

/// Worst per-component relative error between `analytic` and central differences of `f`:
/// |a - n| / max(|a|, |n|, 1e-6 max|a|, 1e-12).
inline double finite_diff_check(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& theta,
                                const Tensor<double>& analytic, double h = 1e-5) {
  if (analytic.shape() != theta.shape()) throw std::invalid_argument("analytic gradient shape mismatch");
  const double scale = analytic.value().cwiseAbs().maxCoeff();
  double worst = 0.0;
  Tensor<double> probe(theta.shape(), theta.value());
  for (Index i = 0; i < theta.size(); ++i) {
    const double keep = probe.data()[i];
    probe.data()[i] = keep + h;
    const double up = f(probe);
    probe.data()[i] = keep - h;
    const double down = f(probe);
    probe.data()[i] = keep;
    const double num = (up - down) / (2.0 * h);
    const double a = analytic.data()[i];
    const double denom = std::max({std::abs(a), std::abs(num), 1e-6 * scale, 1e-12});
    worst = std::max(worst, std::abs(a - num) / denom);
  }
  return worst;
}

/// Convenience form: `fn` records a scalar on the tape from theta; its reverse-mode
/// gradient is compared with central differences.
inline double finite_diff_check(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& fn,
                                const Tensor<double>& theta, double h = 1e-5) {
  Tensor<double> th(theta.shape(), theta.value(), true);
  {
    Tape<double> tape;
    tape.backward(fn(tape, tape.leaf(th)));
  }
  Tensor<double> analytic = th.has_grad() ? Tensor<double>(theta.shape(), th.grad()) : Tensor<double>(theta.shape());
  auto value = [&](const Tensor<double>& p) {
    Tape<double> tape;
    return fn(tape, tape.constant(p)).value()(0, 0);
  };
  return finite_diff_check(value, theta, analytic, h);
}

namespace detail {

inline bool lex_less(const Mat<double>& a, const Mat<double>& b) {
  if (a.rows() != b.rows()) return a.rows() < b.rows();
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

/// Rows sorted lexicographically, so that equal multisets give equal matrices.
inline Mat<double> canonical_rows(const Mat<double>& m) {
  std::vector<Index> order(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    for (Index k = 0; k < m.cols(); ++k)
      if (m(a, k) != m(b, k)) return m(a, k) < m(b, k);
    return a < b;
  });
  Mat<double> out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) out.row(i) = m.row(order[i]);
  return out;
}

inline double kernel_mean(const Mat<double>& a, const Mat<double>& b, double inv2h2) {
  double total = 0.0;
  for (Index i = 0; i < a.rows(); ++i) {
    double row = 0.0;
    for (Index j = 0; j < b.rows(); ++j) row += std::exp(-(a.row(i) - b.row(j)).squaredNorm() * inv2h2);
    total += row;
  }
  return total / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

}  // namespace detail

/// Biased (V-statistic) squared MMD with kernel exp(-|a-b|^2 / (2 h^2)).
inline double mmd(const Mat<double>& samples_a, const Mat<double>& samples_b, double bandwidth) {
  if (!(bandwidth > 0.0)) throw std::invalid_argument("MMD bandwidth must be positive");
  if (samples_a.rows() == 0 || samples_b.rows() == 0) throw std::invalid_argument("MMD needs nonempty sample sets");
  if (samples_a.cols() != samples_b.cols()) throw std::invalid_argument("MMD sample sets differ in dimension");
  Mat<double> a = detail::canonical_rows(samples_a), b = detail::canonical_rows(samples_b);
  if (detail::lex_less(b, a)) std::swap(a, b);
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  const double v = detail::kernel_mean(a, a, inv) + detail::kernel_mean(b, b, inv) - 2.0 * detail::kernel_mean(a, b, inv);
  return std::max(0.0, v);
}

/// Median pairwise Euclidean distance over at most the first `max_points` rows.
inline double median_heuristic(const Mat<double>& samples, Index max_points = 1000) {
  const Index n = std::min(samples.rows(), max_points);
  if (n < 2) throw std::invalid_argument("median heuristic needs at least two samples");
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) d.push_back((samples.row(i) - samples.row(j)).norm());
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  const double h = *mid;
  if (!(h > 0.0)) throw std::invalid_argument("median heuristic is zero: samples coincide");
  return h;
}

struct OracleReport {
  std::string quantity;
  double analytic = 0.0;
  double mc_estimate = 0.0;
  double stderr_ = 0.0;
  bool pass = false;
};

inline nlohmann::json to_json(const OracleReport& r) {
  return nlohmann::json{{"quantity", r.quantity},
                        {"analytic", r.analytic},
                        {"mc_estimate", r.mc_estimate},
                        {"stderr", r.stderr_},
                        {"verdict", r.pass ? "pass" : "fail"}};
}

struct SandboxSuiteSettings {
  double w = 7.5;
  Index samples = 100000;
  std::uint64_t seed = 0;
  double tolerance = 0.05;
  std::optional<int> fixed_t;  // needed for unequal variances
};

/// Closed-form fixed point against a Monte-Carlo root, plus the expected
/// gradient at the closed-form point against zero (3 standard errors).
inline std::vector<OracleReport> sandbox_suite(const GaussianSandbox& sb, const SandboxSuiteSettings& s) {
  if (sb.dim() != 1) throw std::invalid_argument("sandbox suite runs on one-dimensional sandboxes");
  auto d = sb.denoiser<double>();
  PriorConfig cfg;
  cfg.variant = Variant::Sds;
  cfg.w = s.w;
  cfg.target = 0;
  PriorState<double> st;
  McSettings mc{s.samples, s.seed, s.fixed_t};
  const double analytic = cfg_fixed_point(sb, s.w, s.fixed_t)[0];
  const double span = std::max(1.0, 0.5 * std::abs(analytic - sb.mu_y[0]) + 1.0);
  const double root = mc_fixed_point(cfg, *d, st, analytic, span, mc);
  std::vector<OracleReport> out;
  out.push_back({"sds_fixed_point(w=" + format_guidance(s.w) + ")", analytic, root, 0.0,
                 std::abs(root - analytic) < s.tolerance});
  const McEstimate g = expected_grad_mc(cfg, *d, st, {analytic}, mc);
  out.push_back({"sds_expected_grad_at_fixed_point(w=" + format_guidance(s.w) + ")", 0.0, g.mean[0], g.stderr_[0],
                 std::abs(g.mean[0]) < 3.0 * g.stderr_[0]});
  cfg.variant = Variant::ReferenceSds;
  const McEstimate r = expected_grad_mc(cfg, *d, st, sb.mu_y, mc);
  out.push_back({"reference_sds_expected_grad_at_mu_y", 0.0, r.mean[0], r.stderr_[0],
                 std::abs(r.mean[0]) < 3.0 * r.stderr_[0]});
  return out;
}

}  // namespace lods
