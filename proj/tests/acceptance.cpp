// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Runtime budgets are part of each criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lods/checkpoint.hpp"
#include "lods/config.hpp"
#include "lods/experiments.hpp"
#include "lods/generators.hpp"
#include "lods/io.hpp"
#include "lods/oracle.hpp"
#include "lods/priors.hpp"

using namespace lods;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

struct Probe {
  Tensor<double> x, eps;
  Timesteps t;
  int y = 0;
};

std::vector<Probe> probes(Index dim, int count, std::uint64_t seed, int T, int classes) {
  std::vector<Probe> out;
  for (int i = 0; i < count; ++i) {
    CounterRng rng(seed, static_cast<std::uint64_t>(i), Stream::Generic);
    Probe p;
    p.x = Tensor<double>(Shape{4, dim});
    for (auto& v : p.x.data()) v = 2.0 * rng.normal();
    p.eps = rng.normal_tensor<double>(p.x.shape());
    p.t = {static_cast<int>(rng.uniform_int(0, T - 1))};
    p.y = static_cast<int>(rng.uniform_int(0, classes - 1));
    out.push_back(std::move(p));
  }
  return out;
}

std::unique_ptr<NetworkDenoiser<double>> small_network(std::uint64_t seed) {
  NetworkConfig c;
  c.data_dim = 2;
  c.num_classes = 2;
  c.width = 32;
  c.hidden_layers = 2;
  c.embed_dim = 8;
  c.time_dim = 8;
  return std::make_unique<NetworkDenoiser<double>>(c, make_schedule(), seed);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  return (a.value() - b.value()).cwiseAbs().maxCoeff();
}

bool bitwise_equal(const Mat<double>& a, const Mat<double>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

/// Unconditional-branch states that coincide with the null condition: none, a
/// copy of the null embedding, and a zero-delta adapter.
std::vector<std::pair<std::string, PriorState<double>>> null_states(const NetworkDenoiser<double>& net) {
  std::vector<std::pair<std::string, PriorState<double>>> s(3);
  s[0].first = "plain null";
  s[1].first = "null embedding";
  s[1].second.embedding = make_learnable_embedding(net);
  s[2].first = "zero adapter";
  s[2].second.adapter = net.attach_adapter(4, 0.5, 11);
  return s;
}

Outcome scaling_identity() {
  auto net = small_network(1);
  double worst = 0.0;
  for (auto& [name, st] : null_states(*net))
    for (double w : {1.0, 7.5, 100.0, 1000.0})
      for (const auto& p : probes(2, 50, 101, net->schedule().steps(), 2)) {
        auto n = normalized_sds_grad(*net, p.x, p.y, st, w, p.t, p.eps);
        n.value() *= w;
        worst = std::max(worst, max_abs_diff(n, sds_grad(*net, p.x, p.y, w, p.t, p.eps)));
      }
  return {worst <= 1e-6, "max |w * normalized - sds| = " + num(worst) + " over 3 states x 4 w x 50 probes"};
}

Outcome w_independence() {
  auto net = small_network(2);
  int mismatches = 0, checks = 0;
  for (Variant v : {Variant::LodsEmbedding, Variant::LodsAdapter})
    for (const auto& p : probes(2, 50, 202, net->schedule().steps(), 2)) {
      std::optional<double> loss0;
      std::optional<Mat<double>> grad0;
      for (double w : {1.0, 100.0, 1000.0}) {
        PriorConfig cfg;
        cfg.variant = v;
        cfg.w = w;
        cfg.seed = 5;
        PriorState<double> st = make_state(cfg, *net);
        const double loss = alignment_loss(cfg, *net, p.x, st, p.t, p.eps, true);
        const Mat<double> g = st.embedding ? st.embedding->vector.grad() : st.adapter->layers[0].up.grad();
        if (!loss0) {
          loss0 = loss;
          grad0 = g;
          continue;
        }
        ++checks;
        if (std::memcmp(&loss, &*loss0, sizeof loss) != 0 || !bitwise_equal(g, *grad0)) ++mismatches;
      }
    }
  return {mismatches == 0,
          std::to_string(mismatches) + " of " + std::to_string(checks) + " loss/gradient comparisons differ in any bit"};
}

Outcome cfg_collapse() {
  auto net = small_network(3);
  int bad1 = 0, bad0 = 0;
  for (const auto& p : probes(2, 50, 303, net->schedule().steps(), 2)) {
    if (!bitwise_equal(sds_grad(*net, p.x, p.y, 1.0, p.t, p.eps).value(),
                       reference_sds_grad(*net, p.x, p.y, p.t, p.eps).value()))
      ++bad1;
    const auto z = add_noise(net->schedule(), p.x, p.t, p.eps);
    const auto en = net->predict(z, p.t, Condition<double>::null());
    const auto ey = net->predict(z, p.t, Condition<double>::of(p.y));
    Mat<double> expect = (en.value() - p.eps.value()) * net->schedule().alpha(p.t[0]);
    if (!bitwise_equal(cfg_combine(ey, en, 0.0).value(), en.value()) ||
        !bitwise_equal(sds_grad(*net, p.x, p.y, 0.0, p.t, p.eps).value(), expect))
      ++bad0;
  }
  return {bad1 == 0 && bad0 == 0, "w=1 mismatches " + std::to_string(bad1) + ", w=0 mismatches " +
                                      std::to_string(bad0) + " (of 50, exact)"};
}

Outcome dds_zero() {
  auto net = small_network(4);
  double worst = 0.0;
  for (double w : {1.0, 7.5, 100.0})
    for (const auto& p : probes(2, 50, 404, net->schedule().steps(), 2))
      worst = std::max(worst, dds_grad(*net, p.x, p.y, p.x, p.y, w, p.t, p.eps).value().cwiseAbs().maxCoeff());
  return {worst == 0.0, "max |dds| with identical source and target = " + num(worst)};
}

Outcome adapter_init() {
  auto net = small_network(5);
  const auto psi = net->attach_adapter(4, 0.5, 17);
  int changed = 0;
  double worst = 0.0;
  for (const auto& p : probes(2, 50, 505, net->schedule().steps(), 2)) {
    const auto z = add_noise(net->schedule(), p.x, p.t, p.eps);
    for (int c : {p.y, Condition<double>::kNull}) {
      const auto cond = c == Condition<double>::kNull ? Condition<double>::null() : Condition<double>::of(c);
      if (!bitwise_equal(net->predict(z, p.t, cond).value(), net->predict(z, p.t, cond, &psi).value())) ++changed;
    }
    const auto ey = net->predict(z, p.t, Condition<double>::of(p.y));
    const auto en = net->predict(z, p.t, Condition<double>::null());
    for (double w : {1.0, 7.5, 100.0, 1000.0}) {
      const Mat<double> expect = (w - 1.0) * (ey.value() - en.value()) * net->schedule().alpha(p.t[0]);
      worst = std::max(worst, (vsd_grad(*net, psi, p.x, p.y, w, p.t, p.eps).value() - expect).cwiseAbs().maxCoeff());
    }
  }
  return {changed == 0 && worst <= 1e-6, std::to_string(changed) + " of 100 predictions changed by the zero adapter; "
                                         "max |vsd - (w-1)(eps_y - eps_null) alpha| = " + num(worst)};
}

/// Shared by the guidance-gap oracle and the determinism check.
struct SandboxRun {
  double mean = 0.0;
  double max_dev = 0.0;
  std::string csv;
};

SandboxRun sandbox_run(const GaussianSandbox& sb, Variant v, double w, double target) {
  auto d = sb.denoiser<double>();
  PriorConfig p;
  p.variant = v;
  p.w = w;
  p.seed = 0;
  p.theta_optim = {OptimizerKind::Sgd, 0.05};
  p.theta_lr_final = 0.2;
  p.embedding_optim = {OptimizerKind::Adam, 1e-2};
  const auto gen = Generator<double>::identity(Shape{64, 1});
  const auto run = lods_run(p, gen, gen.initial_theta(0), *d, 3000);
  SandboxRun r;
  r.mean = run.theta.value().mean();
  r.max_dev = (run.theta.value().array() - target).abs().maxCoeff();
  r.csv = metrics_csv(run.records);
  return r;
}

Outcome guidance_gap() {
  const GaussianSandbox sb = equal_variance_sandbox();
  auto d = sb.denoiser<double>();
  bool ok = true;
  std::string detail;
  for (double w : {1.0, 7.5, 100.0}) {
    const double x_star = cfg_fixed_point(sb, w)[0];
    const SandboxRun r = sandbox_run(sb, Variant::Sds, w, x_star);
    PriorConfig p;
    p.variant = Variant::Sds;
    p.w = w;
    McSettings mc;
    mc.samples = 100000;
    const double root = mc_fixed_point(p, *d, PriorState<double>{}, x_star, 1.0, mc);
    const bool pass = std::abs(r.mean - x_star) < 0.05 && std::abs(root - x_star) < 0.05;
    ok = ok && pass;
    detail += "sds w=" + num(w) + ": closed " + num(x_star) + ", particle mean " + num(r.mean) + ", MC root " +
              num(root) + ", max particle dev " + num(r.max_dev) + "; ";
  }
  const SandboxRun l = sandbox_run(sb, Variant::LodsEmbedding, 7.5, 1.0);
  ok = ok && std::abs(l.mean - 1.0) < 0.1;
  detail += "lods_embedding w=7.5: particle mean " + num(l.mean) + ", max particle dev " + num(l.max_dev);
  return {ok, detail};
}

Outcome limit_relation() {
  auto net = small_network(7);
  double worst = 0.0;
  for (auto& [name, st] : null_states(*net)) {
    st.adapter ? (void)(st.adapter->layers[0].up.value().setConstant(0.05)) : (void)0;
    if (st.embedding) st.embedding->vector.value().array() += 0.3;
    for (const auto& p : probes(2, 50, 707, net->schedule().steps(), 2))
      worst = std::max(worst, max_abs_diff(normalized_sds_grad(*net, p.x, p.y, st, 1e9, p.t, p.eps),
                                           limit_grad(*net, p.x, p.y, st, p.t, p.eps)));
  }
  return {worst <= 1e-6, "max |normalized(w=1e9) - limit| = " + num(worst) + " over 3 states x 50 probes"};
}

Outcome op_budget() {
  auto net = small_network(8);
  const auto gen = Generator<double>::identity(Shape{16, 2});
  std::map<Variant, std::pair<std::uint64_t, std::uint64_t>> per_step;
  bool uniform = true;
  for (Variant v : {Variant::Sds, Variant::LodsEmbedding, Variant::LodsAdapter, Variant::Vsd}) {
    PriorConfig p;
    p.variant = v;
    p.w = 100.0;
    const auto run = lods_run(p, gen, gen.initial_theta(0), *net, 20);
    per_step[v] = {run.records[0].forwards, run.records[0].backwards};
    for (const auto& r : run.records)
      uniform = uniform && r.forwards == per_step[v].first && r.backwards == per_step[v].second;
  }
  const auto s = per_step[Variant::Sds], vsd = per_step[Variant::Vsd];
  bool ok = uniform;
  for (Variant v : {Variant::LodsEmbedding, Variant::LodsAdapter}) {
    const auto l = per_step[v];
    ok = ok && l.first == s.first + 1 && l.second == s.second + 1 && vsd.first > l.first &&
         vsd.first + vsd.second > l.first + l.second;
  }
  std::string detail;
  for (const auto& [v, c] : per_step)
    detail += std::string(to_string(v)) + " " + std::to_string(c.first) + "F/" + std::to_string(c.second) + "B; ";
  return {ok, detail + (uniform ? "constant across 20 steps" : "counts vary between steps")};
}

Outcome gradient_integrity() {
  double splat_worst = 0.0;
  for (int channels : {1, 3})
    for (int scene = 0; scene < 4; ++scene) {
      SplatLayout L;
      L.count = 3;
      L.channels = channels;
      const auto gen = Generator<double>::splats(L);
      Tensor<double> theta = gen.initial_theta(100 + scene);
      CounterRng rng(scene, channels, Stream::Generic);
      for (Index k = 0; k < 3; ++k) {
        theta.value()(k, 2) += 0.8 * rng.uniform();  // wider splats overlap
        theta.value()(k, 3) += 0.8 * rng.uniform();
        theta.value()(k, 4) += rng.normal();
        for (Index c = 5; c < 6 + channels; ++c) theta.value()(k, c) += rng.normal();  // colors, opacity
      }
      Tensor<double> weights = CounterRng(scene, 99, Stream::Generic).normal_tensor<double>(Shape{16, 16, channels});
      auto fn = [&](Tape<double>& tape, const Var<double>& th) {
        return sum(mul(gen.render(tape, th), tape.constant(weights)));
      };
      splat_worst = std::max(splat_worst, finite_diff_check(fn, theta));
    }

  NetworkConfig cfg;
  cfg.width = 16;
  cfg.hidden_layers = 2;
  cfg.embed_dim = 4;
  cfg.time_dim = 4;
  NetworkDenoiser<double> net(cfg, make_schedule(), 9);
  CounterRng rng(9, 0, Stream::Generic);
  Tensor<double> x = rng.normal_tensor<double>(Shape{8, 2});
  Tensor<double> eps = rng.normal_tensor<double>(Shape{8, 2});
  Timesteps t;
  std::vector<int> ids;
  for (int i = 0; i < 8; ++i) {
    t.push_back(static_cast<int>(rng.uniform_int(0, 999)));
    ids.push_back(i % 3 == 2 ? Condition<double>::kNull : i % 2);
  }
  const auto cond = Condition<double>::per_row(ids);
  double net_worst = 0.0;
  for (auto& [name, param] : net.named_parameters()) {
    for (auto* q : net.parameters()) q->zero_grad();
    denoising_loss(net, x, t, eps, cond, grad::Base, true);
    const Tensor<double> analytic(param->shape(), param->grad());
    const Mat<double> keep = param->value();
    auto f = [&](const Tensor<double>& v) {
      param->value() = v.value();
      const double l = denoising_loss(net, x, t, eps, cond, grad::None, false);
      param->value() = keep;
      return l;
    };
    net_worst = std::max(net_worst, finite_diff_check(f, Tensor<double>(param->shape(), keep), analytic));
  }
  return {splat_worst < 1e-3 && net_worst < 1e-4,
          "splat renderer max rel err " + num(splat_worst) + " (8 scenes), denoiser loss max rel err " + num(net_worst)};
}

struct EndToEnd {
  double sds_mmd = 0.0, lods_mmd = 0.0;
  std::string sds_csv, lods_csv, train_csv;
};

RunConfig end_to_end_config(const std::string& root) {
  RunConfig c;
  c.precision = Precision::F32;
  c.seed = 0;
  c.data.kind = "mixture2d";
  c.train.steps = 5000;
  c.out_dir = root + "/denoiser";
  c.generator.particles = 256;
  c.distill_steps = 3000;
  c.prior.w = 100.0;
  c.prior.target = 0;
  c.prior.embedding_optim = {OptimizerKind::Adam, 1e-3};
  return c;
}

EndToEnd end_to_end(const std::string& root) {
  EndToEnd e;
  RunConfig c = end_to_end_config(root);
  run_train(c);
  e.train_csv = read_text(c.out_dir + "/train_loss.csv");
  c.checkpoint = c.out_dir + "/denoiser.ckpt";

  RunConfig s = c;
  s.prior.variant = Variant::Sds;
  s.prior.theta_optim.lr /= s.prior.w;
  s.out_dir = root + "/sds";
  e.sds_mmd = run_distill(s)["mmd"].get<double>();
  e.sds_csv = read_text(s.out_dir + "/metrics.csv");

  RunConfig l = c;
  l.prior.variant = Variant::LodsEmbedding;
  l.out_dir = root + "/lods";
  e.lods_mmd = run_distill(l)["mmd"].get<double>();
  e.lods_csv = read_text(l.out_dir + "/metrics.csv");
  return e;
}

EndToEnd first_e2e;

Outcome variant_compare() {
  first_e2e = end_to_end("acceptance_runs/a");
  const bool ok = first_e2e.lods_mmd <= first_e2e.sds_mmd && first_e2e.lods_mmd < 0.1;
  return {ok, "MMD sds(w=100) " + num(first_e2e.sds_mmd) + ", lods_embedding(w=100) " + num(first_e2e.lods_mmd)};
}

Outcome determinism() {
  const GaussianSandbox sb = equal_variance_sandbox();
  int same = 0, total = 0;
  for (double w : {1.0, 7.5, 100.0}) {
    ++total;
    same += sandbox_run(sb, Variant::Sds, w, 0.0).csv == sandbox_run(sb, Variant::Sds, w, 0.0).csv;
  }
  ++total;
  same += sandbox_run(sb, Variant::LodsEmbedding, 7.5, 1.0).csv == sandbox_run(sb, Variant::LodsEmbedding, 7.5, 1.0).csv;
  const EndToEnd again = end_to_end("acceptance_runs/b");
  total += 3;
  same += again.train_csv == first_e2e.train_csv && !again.train_csv.empty();
  same += again.sds_csv == first_e2e.sds_csv && !again.sds_csv.empty();
  same += again.lods_csv == first_e2e.lods_csv && !again.lods_csv.empty();
  return {same == total, std::to_string(same) + " of " + std::to_string(total) +
                             " repeated runs produced byte-identical metrics CSV (sandbox runs, training, distillation)"};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "scaling identity", 10, scaling_identity},
      {2, "alignment loss independent of w", 5, w_independence},
      {3, "guidance collapse at w=1 and w=0", 5, cfg_collapse},
      {4, "dds zero identity", 5, dds_zero},
      {5, "adapter identity at init", 5, adapter_init},
      {6, "guidance-gap oracle", 120, guidance_gap},
      {7, "infinite-guidance limit", 5, limit_relation},
      {8, "op-count budget", 10, op_budget},
      {9, "gradient integrity", 60, gradient_integrity},
      {10, "end-to-end variant comparison", 600, variant_compare},
      {11, "determinism", 600, determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("[%s] criterion %d %s: %s (%.1f s, budget %.0f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.budget_s, in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
