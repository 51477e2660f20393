#pragma once

// Score-distillation gradients and the two-loop distillation driver.
//
// Every gradient below is taken with respect to the rendered sample x and is
// the detached residual of a noise prediction times d z_t / d x = alpha_t.
// Predictions never track gradient here, so no distillation path reaches the
// denoiser or the learnable state. The state is trained only by
// alignment_loss (embedding or adapter) or vsd_adapter_step.

#include <cmath>
#include <cstdint>
#include <functional>
#include <type_traits>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lods/denoiser.hpp"
#include "lods/generators.hpp"
#include "lods/gradcore.hpp"
#include "lods/optim.hpp"
#include "lods/rng.hpp"
#include "lods/schedule.hpp"

namespace lods {

enum class Variant { Sds, ReferenceSds, NormalizedSds, Dds, Vsd, LodsEmbedding, LodsAdapter };
enum class NoisePolicy { Fresh, Reuse };

inline constexpr double kInfiniteGuidance = std::numeric_limits<double>::infinity();

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::Sds: return "sds";
    case Variant::ReferenceSds: return "reference_sds";
    case Variant::NormalizedSds: return "normalized_sds";
    case Variant::Dds: return "dds";
    case Variant::Vsd: return "vsd";
    case Variant::LodsEmbedding: return "lods_embedding";
    case Variant::LodsAdapter: return "lods_adapter";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::Sds, Variant::ReferenceSds, Variant::NormalizedSds, Variant::Dds, Variant::Vsd,
                    Variant::LodsEmbedding, Variant::LodsAdapter})
    if (s == to_string(v)) return v;
  throw std::invalid_argument("unknown variant '" + s +
                              "' (expected sds, reference_sds, normalized_sds, dds, vsd, lods_embedding, lods_adapter)");
}

inline const char* to_string(NoisePolicy p) { return p == NoisePolicy::Fresh ? "fresh" : "reuse"; }

inline NoisePolicy parse_noise_policy(const std::string& s) {
  if (s == "fresh") return NoisePolicy::Fresh;
  if (s == "reuse") return NoisePolicy::Reuse;
  throw std::invalid_argument("unknown noise policy '" + s + "' (expected fresh or reuse)");
}

/// Accepts a decimal number or inf / INF.
inline double parse_guidance(const std::string& s) {
  if (s == "inf" || s == "INF" || s == "Inf") return kInfiniteGuidance;
  std::size_t used = 0;
  double w = 0.0;
  try {
    w = std::stod(s, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("guidance weight '" + s + "' is not a number");
  }
  if (used != s.size()) throw std::invalid_argument("guidance weight '" + s + "' is not a number");
  return w;
}

inline std::string format_guidance(double w) {
  if (std::isinf(w)) return "INF";
  std::string s = std::to_string(w);
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

inline bool uses_embedding(Variant v) { return v == Variant::LodsEmbedding; }
inline bool uses_adapter(Variant v) { return v == Variant::LodsAdapter || v == Variant::Vsd; }
inline bool is_lods(Variant v) { return v == Variant::LodsEmbedding || v == Variant::LodsAdapter; }
inline bool allows_infinite_guidance(Variant v) { return v == Variant::NormalizedSds || is_lods(v); }

struct PriorConfig {
  Variant variant = Variant::Sds;
  double w = 1000.0;
  int target = 0;
  int source = Condition<double>::kNull;  // dds source condition
  int embedding_init = Condition<double>::kNull;
  int adapter_rank = 4;
  double adapter_scale = 0.5;

  OptimSettings theta_optim{OptimizerKind::Sgd, 3e-2};
  double theta_lr_final = 1.0;  // linear decay to this fraction of lr
  OptimSettings embedding_optim{OptimizerKind::Adam, 1e-4};
  OptimSettings adapter_optim{OptimizerKind::Adam, 1e-6};
  double state_lr_final = 1.0;

  TimestepPolicy timesteps;
  NoisePolicy noise = NoisePolicy::Fresh;
  std::uint64_t seed = 0;
  double divergence_limit = 1e6;
};

/// Learnable state of a run. At most one member is present.
template <class Scalar>
struct PriorState {
  std::optional<LearnableEmbedding<Scalar>> embedding;
  std::optional<AdapterSet<Scalar>> adapter;
};

inline void validate(const PriorConfig& cfg) {
  if (std::isnan(cfg.w) || cfg.w < 0.0) throw std::invalid_argument("guidance weight must be >= 0");
  if (std::isinf(cfg.w) && !allows_infinite_guidance(cfg.variant))
    throw std::invalid_argument(std::string("infinite guidance is only defined for normalized_sds and lods "
                                            "variants, not ") +
                                to_string(cfg.variant));
  if (cfg.w == 0.0 && (cfg.variant == Variant::NormalizedSds || is_lods(cfg.variant)))
    throw std::invalid_argument("normalized gradient is undefined at w = 0");
  if (!(cfg.theta_lr_final >= 0.0 && cfg.theta_lr_final <= 1.0) ||
      !(cfg.state_lr_final >= 0.0 && cfg.state_lr_final <= 1.0))
    throw std::invalid_argument("learning-rate decay fractions must lie in [0, 1]");
  if (!(cfg.divergence_limit > 0.0)) throw std::invalid_argument("divergence limit must be positive");
}

template <class Scalar>
void validate(const PriorConfig& cfg, const PriorState<Scalar>& st) {
  validate(cfg);
  if (st.embedding && st.adapter) throw std::invalid_argument("state holds both an embedding and an adapter");
  if (uses_embedding(cfg.variant) && !st.embedding)
    throw std::invalid_argument(std::string(to_string(cfg.variant)) + " requires a learnable embedding");
  if (uses_adapter(cfg.variant) && !st.adapter)
    throw std::invalid_argument(std::string(to_string(cfg.variant)) + " requires an adapter");
}

/// Fresh state for the variant: a copy of the null (or an editing source)
/// embedding, or a zero-delta adapter.
template <class Scalar>
PriorState<Scalar> make_state(const PriorConfig& cfg, const Denoiser<Scalar>& d) {
  PriorState<Scalar> st;
  if (uses_embedding(cfg.variant)) st.embedding = make_learnable_embedding(d, cfg.embedding_init);
  if (uses_adapter(cfg.variant)) st.adapter = attach_adapter(d, cfg.adapter_rank, cfg.adapter_scale, cfg.seed);
  return st;
}

template <class Scalar>
Tensor<Scalar> cfg_combine(const Tensor<Scalar>& eps_y, const Tensor<Scalar>& eps_null, double w) {
  if (eps_y.shape() != eps_null.shape())
    throw std::invalid_argument("cfg_combine: shape mismatch " + to_string(eps_y.shape()) + " vs " +
                                to_string(eps_null.shape()));
  if (!std::isfinite(w)) throw std::invalid_argument("cfg_combine: guidance weight must be finite");
  const Scalar a = static_cast<Scalar>(w);
  const Scalar b = static_cast<Scalar>(1.0 - w);
  return Tensor<Scalar>(eps_y.shape(), (a * eps_y.value() + b * eps_null.value()).eval());
}

namespace detail {

/// Views x as a [rows, data_dim] batch.
template <class Scalar>
Tensor<Scalar> as_batch(const Denoiser<Scalar>& d, const Tensor<Scalar>& x) {
  const Index D = d.data_dim();
  if (x.shape().size() <= 2 && x.cols() == D) return x;
  if (x.size() % D != 0)
    throw std::invalid_argument("sample of shape " + to_string(x.shape()) + " does not split into rows of " +
                                std::to_string(D));
  return x.reshaped(Shape{x.size() / D, D});
}

template <class Scalar>
void check_noise(const Tensor<Scalar>& x, const Tensor<Scalar>& eps) {
  if (x.shape() != eps.shape())
    throw std::invalid_argument("noise shape " + to_string(eps.shape()) + " does not match sample " +
                                to_string(x.shape()));
}

/// residual * alpha_t, reshaped like x.
template <class Scalar>
Tensor<Scalar> route(const NoiseSchedule& s, const Timesteps& t, Mat<Scalar> residual, const Shape& shape) {
  const auto a = per_row_coefficient<Scalar>(s.alphas(), t, residual.rows());
  if (a.rows() == 1)
    residual *= a(0, 0);
  else
    residual = (residual.array().colwise() * a.col(0).array()).matrix();
  Shape flat{residual.rows(), residual.cols()};
  return Tensor<Scalar>(std::move(flat), std::move(residual)).reshaped(shape);
}

template <class Scalar>
Tensor<Scalar> unconditional(Denoiser<Scalar>& d, const Tensor<Scalar>& z, const Timesteps& t,
                             const PriorState<Scalar>& st) {
  if (st.embedding) return d.predict(z, t, Condition<Scalar>::embedding(*st.embedding));
  if (st.adapter) return d.predict(z, t, Condition<Scalar>::null(), &*st.adapter);
  return d.predict(z, t, Condition<Scalar>::null());
}

}  // namespace detail

/// (w eps(z;y) + (1-w) eps(z;null) - eps) alpha_t. Two forwards.
template <class Scalar>
Tensor<Scalar> sds_grad(Denoiser<Scalar>& d, const Tensor<Scalar>& x, int y, double w, const Timesteps& t,
                        const Tensor<Scalar>& eps) {
  if (!std::isfinite(w)) throw std::invalid_argument("sds: guidance weight must be finite");
  detail::check_noise(x, eps);
  const auto xb = detail::as_batch(d, x);
  const auto z = add_noise(d.schedule(), xb, t, detail::as_batch(d, eps));
  const auto ey = d.predict(z, t, Condition<Scalar>::of(y));
  const auto en = d.predict(z, t, Condition<Scalar>::null());
  Mat<Scalar> r = cfg_combine(ey, en, w).value() - detail::as_batch(d, eps).value();
  return detail::route(d.schedule(), t, std::move(r), x.shape());
}

/// (eps(z;y) - eps) alpha_t. One forward.
template <class Scalar>
Tensor<Scalar> reference_sds_grad(Denoiser<Scalar>& d, const Tensor<Scalar>& x, int y, const Timesteps& t,
                                  const Tensor<Scalar>& eps) {
  detail::check_noise(x, eps);
  const auto e = detail::as_batch(d, eps);
  const auto z = add_noise(d.schedule(), detail::as_batch(d, x), t, e);
  Mat<Scalar> r = d.predict(z, t, Condition<Scalar>::of(y)).value() - e.value();
  return detail::route(d.schedule(), t, std::move(r), x.shape());
}

/// (cfg(z;y) - cfg(z_src;y_src)) alpha_t with one (t, eps) for both branches. Four forwards.
template <class Scalar>
Tensor<Scalar> dds_grad(Denoiser<Scalar>& d, const Tensor<Scalar>& x, int y, const Tensor<Scalar>& x_src,
                        int y_src, double w, const Timesteps& t, const Tensor<Scalar>& eps) {
  if (!std::isfinite(w)) throw std::invalid_argument("dds: guidance weight must be finite");
  if (x.shape() != x_src.shape())
    throw std::invalid_argument("dds: target shape " + to_string(x.shape()) + " does not match source " +
                                to_string(x_src.shape()));
  detail::check_noise(x, eps);
  const auto e = detail::as_batch(d, eps);
  const auto z = add_noise(d.schedule(), detail::as_batch(d, x), t, e);
  const auto zs = add_noise(d.schedule(), detail::as_batch(d, x_src), t, e);
  const auto tgt = cfg_combine(d.predict(z, t, Condition<Scalar>::of(y)), d.predict(z, t, Condition<Scalar>::null()), w);
  const auto src = cfg_combine(d.predict(zs, t, Condition<Scalar>::of(y_src)),
                               d.predict(zs, t, Condition<Scalar>::null()), w);
  Mat<Scalar> r = tgt.value() - src.value();
  return detail::route(d.schedule(), t, std::move(r), x.shape());
}

/// (cfg_phi(z;y) - eps_psi(z;y)) alpha_t. Three forwards.
template <class Scalar>
Tensor<Scalar> vsd_grad(Denoiser<Scalar>& d, const AdapterSet<Scalar>& psi, const Tensor<Scalar>& x, int y, double w,
                        const Timesteps& t, const Tensor<Scalar>& eps) {
  if (!std::isfinite(w)) throw std::invalid_argument("vsd: guidance weight must be finite");
  detail::check_noise(x, eps);
  const auto e = detail::as_batch(d, eps);
  const auto z = add_noise(d.schedule(), detail::as_batch(d, x), t, e);
  const auto phi = cfg_combine(d.predict(z, t, Condition<Scalar>::of(y)), d.predict(z, t, Condition<Scalar>::null()), w);
  const auto ps = d.predict(z, t, Condition<Scalar>::of(y), &psi);
  Mat<Scalar> r = phi.value() - ps.value();
  return detail::route(d.schedule(), t, std::move(r), x.shape());
}

/// (eps(z;y) + (1-w)/w u - eps/w) alpha_t with u the unconditional branch of the
/// state (learned embedding, adapter with null condition, or plain null).
/// Infinite w yields limit_grad. Two forwards.
template <class Scalar>
Tensor<Scalar> normalized_sds_grad(Denoiser<Scalar>& d, const Tensor<Scalar>& x, int y,
                                   const PriorState<Scalar>& st, double w, const Timesteps& t,
                                   const Tensor<Scalar>& eps);

/// (eps(z;y) - u) alpha_t. Two forwards.
template <class Scalar>
Tensor<Scalar> limit_grad(Denoiser<Scalar>& d, const Tensor<Scalar>& x, int y, const PriorState<Scalar>& st,
                          const Timesteps& t, const Tensor<Scalar>& eps) {
  detail::check_noise(x, eps);
  const auto e = detail::as_batch(d, eps);
  const auto z = add_noise(d.schedule(), detail::as_batch(d, x), t, e);
  Mat<Scalar> r = d.predict(z, t, Condition<Scalar>::of(y)).value() - detail::unconditional(d, z, t, st).value();
  return detail::route(d.schedule(), t, std::move(r), x.shape());
}

template <class Scalar>
Tensor<Scalar> normalized_sds_grad(Denoiser<Scalar>& d, const Tensor<Scalar>& x, int y,
                                   const PriorState<Scalar>& st, double w, const Timesteps& t,
                                   const Tensor<Scalar>& eps) {
  if (std::isnan(w) || w <= 0.0) throw std::invalid_argument("normalized gradient needs w > 0");
  if (std::isinf(w)) return limit_grad(d, x, y, st, t, eps);
  detail::check_noise(x, eps);
  const auto e = detail::as_batch(d, eps);
  const auto z = add_noise(d.schedule(), detail::as_batch(d, x), t, e);
  const auto ey = d.predict(z, t, Condition<Scalar>::of(y));
  const auto u = detail::unconditional(d, z, t, st);
  const Scalar k = static_cast<Scalar>((1.0 - w) / w);
  const Scalar inv = static_cast<Scalar>(1.0 / w);
  Mat<Scalar> r = ey.value() + k * u.value() - inv * e.value();
  return detail::route(d.schedule(), t, std::move(r), x.shape());
}

/// mean ||u(z_t) - eps||^2 for the state's unconditional branch. x and the
/// denoiser are constants; with `backward` the gradient lands in the state
/// only. One forward, one backward. The guidance weight never enters.
template <class Scalar>
Scalar alignment_loss(Denoiser<Scalar>& d, const Tensor<Scalar>& x, PriorState<Scalar>& st, const Timesteps& t,
                      const Tensor<Scalar>& eps, bool backward = true) {
  detail::check_noise(x, eps);
  if (!st.embedding && !st.adapter) throw std::invalid_argument("alignment needs a learnable embedding or adapter");
  const auto e = detail::as_batch(d, eps);
  const auto z = add_noise(d.schedule(), detail::as_batch(d, x), t, e);
  Tape<Scalar> tape;
  Var<Scalar> pred = st.embedding
                         ? d.predict(tape, tape.constant(z), t, Condition<Scalar>::embedding(*st.embedding), nullptr,
                                     grad::Embedding)
                         : d.predict(tape, tape.constant(z), t, Condition<Scalar>::null(), &*st.adapter, grad::Adapter);
  Var<Scalar> loss = mse(pred, tape.constant(e));
  if (backward) tape.backward(loss);
  return loss.value()(0, 0);
}

/// Config-level overload: the state is selected by the config; w is ignored.
template <class Scalar>
Scalar alignment_loss(const PriorConfig& cfg, Denoiser<Scalar>& d, const Tensor<Scalar>& x, PriorState<Scalar>& st,
                      const Timesteps& t, const Tensor<Scalar>& eps, bool backward = true) {
  validate(cfg, st);
  return alignment_loss(d, x, st, t, eps, backward);
}

/// VSD's adapter objective: mean ||eps_psi(z_t; y) - eps||^2, backpropagated into psi.
template <class Scalar>
Scalar vsd_adapter_loss(Denoiser<Scalar>& d, AdapterSet<Scalar>& psi, const Tensor<Scalar>& x, int y,
                        const Timesteps& t, const Tensor<Scalar>& eps, bool backward = true) {
  detail::check_noise(x, eps);
  const auto e = detail::as_batch(d, eps);
  const auto z = add_noise(d.schedule(), detail::as_batch(d, x), t, e);
  Tape<Scalar> tape;
  Var<Scalar> pred = d.predict(tape, tape.constant(z), t, Condition<Scalar>::of(y), &psi, grad::Adapter);
  Var<Scalar> loss = mse(pred, tape.constant(e));
  if (backward) tape.backward(loss);
  return loss.value()(0, 0);
}

/// One optimizer step of the VSD adapter objective; returns the pre-step loss.
template <class Scalar>
Scalar vsd_adapter_step(Denoiser<Scalar>& d, AdapterSet<Scalar>& psi, Optimizer<Scalar>& opt,
                        const Tensor<Scalar>& x, int y, const Timesteps& t, const Tensor<Scalar>& eps) {
  opt.zero_grad();
  const Scalar loss = vsd_adapter_loss(d, psi, x, y, t, eps, true);
  opt.step();
  opt.zero_grad();
  return loss;
}

/// Distillation gradient of the configured variant with respect to x.
/// `x_src` is used by dds only.
template <class Scalar>
Tensor<Scalar> distill_grad(const PriorConfig& cfg, Denoiser<Scalar>& d, const PriorState<Scalar>& st,
                            const Tensor<Scalar>& x, const Tensor<Scalar>* x_src, const Timesteps& t,
                            const Tensor<Scalar>& eps) {
  switch (cfg.variant) {
    case Variant::Sds: return sds_grad(d, x, cfg.target, cfg.w, t, eps);
    case Variant::ReferenceSds: return reference_sds_grad(d, x, cfg.target, t, eps);
    case Variant::NormalizedSds:
    case Variant::LodsEmbedding:
    case Variant::LodsAdapter: return normalized_sds_grad(d, x, cfg.target, st, cfg.w, t, eps);
    case Variant::Dds:
      if (!x_src) throw std::invalid_argument("dds needs a source sample");
      return dds_grad(d, x, cfg.target, *x_src, cfg.source, cfg.w, t, eps);
    case Variant::Vsd:
      if (!st.adapter) throw std::invalid_argument("vsd requires an adapter");
      return vsd_grad(d, *st.adapter, x, cfg.target, cfg.w, t, eps);
  }
  throw std::logic_error("unhandled variant");
}

struct DistillStepRecord {
  int step = 0;
  double distill_grad_norm = 0.0;
  double alignment_loss = std::numeric_limits<double>::quiet_NaN();
  int t = 0;
  std::uint64_t forwards = 0;
  std::uint64_t backwards = 0;
};

/// Fixed per-step (forwards, backwards) of a variant.
inline std::pair<int, int> step_budget(Variant v) {
  switch (v) {
    case Variant::Sds: return {2, 0};
    case Variant::ReferenceSds: return {1, 0};
    case Variant::NormalizedSds: return {2, 0};
    case Variant::Dds: return {4, 0};
    case Variant::Vsd: return {4, 1};
    case Variant::LodsEmbedding:
    case Variant::LodsAdapter: return {3, 1};
  }
  return {0, 0};
}

template <class Scalar>
struct DistillRun {
  std::vector<DistillStepRecord> records;
  Tensor<Scalar> theta;
  PriorState<Scalar> state;
  bool diverged = false;
  std::string diagnostic;
};

inline double decayed_lr(double lr, double final_fraction, int step, int steps) {
  if (steps <= 1 || final_fraction == 1.0) return lr;
  const double f = static_cast<double>(step) / static_cast<double>(steps - 1);
  return lr * (1.0 - (1.0 - final_fraction) * f);
}

/// Two-loop distillation. Step A moves theta along the variant's gradient with
/// the state frozen. Step B (lods variants) takes one alignment step on the
/// state; vsd takes one adapter step instead. Under the fresh noise policy the
/// second step re-renders and draws its own (t, eps); under reuse it takes
/// Step A's render and draws.
///
/// `state` defaults to make_state(cfg, d). `x_src` (dds) defaults to the initial render.
/// `on_step` sees theta after each completed step.
/// A gradient norm above cfg.divergence_limit, or a non-finite one, stops the
/// run with `diverged` set.
template <class Scalar>
DistillRun<Scalar> lods_run(const PriorConfig& cfg, const Generator<Scalar>& gen, const Tensor<Scalar>& theta0,
                            Denoiser<Scalar>& d, int steps,
                            std::type_identity_t<std::optional<PriorState<Scalar>>> state = std::nullopt,
                            std::type_identity_t<const Tensor<Scalar>*> x_src = nullptr,
                            const std::type_identity_t<std::function<void(int, const Tensor<Scalar>&)>>& on_step = {}) {
  if (steps < 0) throw std::invalid_argument("step count must be >= 0");
  if (theta0.shape() != gen.theta_shape())
    throw std::invalid_argument("initial theta shape " + to_string(theta0.shape()) + " does not match generator " +
                                to_string(gen.theta_shape()));
  DistillRun<Scalar> run;
  run.state = state ? std::move(*state) : make_state(cfg, d);
  validate(cfg, run.state);
  run.theta = Tensor<Scalar>(theta0.shape(), theta0.value(), true);

  Tensor<Scalar> source;
  if (cfg.variant == Variant::Dds) source = x_src ? *x_src : gen.render(theta0);

  Optimizer<Scalar> theta_opt(cfg.theta_optim, {&run.theta});
  std::optional<Optimizer<Scalar>> state_opt;
  if (run.state.embedding) state_opt.emplace(cfg.embedding_optim, std::vector<Tensor<Scalar>*>{&run.state.embedding->vector});
  if (run.state.adapter) state_opt.emplace(cfg.adapter_optim, run.state.adapter->parameters());
  const bool second_step = is_lods(cfg.variant) || cfg.variant == Variant::Vsd;

  const int T = d.schedule().steps();
  run.records.reserve(static_cast<std::size_t>(steps));
  for (int step = 0; step < steps; ++step) {
    const auto f0 = d.forward_count(), b0 = d.backward_count();
    DistillStepRecord rec;
    rec.step = step;

    CounterRng tr(cfg.seed, step, Stream::DistillTimestep);
    CounterRng nr(cfg.seed, step, Stream::DistillNoise);
    const Timesteps t{sample_timestep(cfg.timesteps, T, tr)};
    rec.t = t[0];

    Tape<Scalar> tape;
    Var<Scalar> xv = gen.render(tape, tape.leaf(run.theta));
    const Tensor<Scalar> x(xv.shape(), xv.value());
    const Tensor<Scalar> eps = nr.normal_tensor<Scalar>(x.shape());
    const Tensor<Scalar> gx = distill_grad(cfg, d, run.state, x, source.size() ? &source : nullptr, t, eps);
    theta_opt.zero_grad();
    tape.backward(sum(mul(xv, tape.constant(gx))));
    rec.distill_grad_norm = run.theta.has_grad() ? static_cast<double>(run.theta.grad().norm()) : 0.0;
    if (!std::isfinite(rec.distill_grad_norm) || rec.distill_grad_norm > cfg.divergence_limit) {
      run.diverged = true;
      run.diagnostic = "diverged at step " + std::to_string(step) + ": gradient norm " +
                       std::to_string(rec.distill_grad_norm) + " exceeds " + std::to_string(cfg.divergence_limit) +
                       " (variant " + to_string(cfg.variant) + ", w " + format_guidance(cfg.w) + ")";
      theta_opt.zero_grad();
      break;
    }
    theta_opt.set_lr(decayed_lr(cfg.theta_optim.lr, cfg.theta_lr_final, step, steps));
    theta_opt.step();
    theta_opt.zero_grad();

    if (second_step) {
      Tensor<Scalar> xa = x, ea = eps;
      Timesteps ta = t;
      if (cfg.noise == NoisePolicy::Fresh) {
        CounterRng atr(cfg.seed, step, Stream::AlignTimestep);
        CounterRng anr(cfg.seed, step, Stream::AlignNoise);
        xa = gen.render(run.theta);
        ta = Timesteps{sample_timestep(cfg.timesteps, T, atr)};
        ea = anr.normal_tensor<Scalar>(xa.shape());
      }
      const double base_lr = run.state.embedding ? cfg.embedding_optim.lr : cfg.adapter_optim.lr;
      state_opt->set_lr(decayed_lr(base_lr, cfg.state_lr_final, step, steps));
      state_opt->zero_grad();
      const Scalar loss = cfg.variant == Variant::Vsd
                              ? vsd_adapter_loss(d, *run.state.adapter, xa, cfg.target, ta, ea, true)
                              : alignment_loss(d, xa, run.state, ta, ea, true);
      state_opt->step();
      state_opt->zero_grad();
      rec.alignment_loss = static_cast<double>(loss);
    }

    rec.forwards = d.forward_count() - f0;
    rec.backwards = d.backward_count() - b0;
    run.records.push_back(rec);
    if (on_step) on_step(step, run.theta);
  }
  run.theta.zero_grad();
  return run;
}

}  // namespace lods
