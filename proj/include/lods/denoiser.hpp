#pragma once

// Conditional noise-prediction models eps(z_t; y, t).
//
//  * NetworkDenoiser: MLP on [z_t, sinusoidal time features, condition embedding],
//    SiLU hidden layers, optional low-rank adapters on every hidden linear layer.
//    The condition-embedding table has one row per class plus a final row for the
//    null condition.
//  * AnalyticDenoiser: for data distributed as N(mu_c, var_c I) the optimal noise
//    predictor is sigma_t (z_t - alpha_t mu_c) / (alpha_t^2 var_c + sigma_t^2).
//    Its "embedding" is the mean vector mu_c itself.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lods/gradcore.hpp"
#include "lods/optim.hpp"
#include "lods/rng.hpp"
#include "lods/schedule.hpp"

namespace lods {

enum class DenoiserKind { Network, Analytic };

/// Which parameter groups become gradient-tracking leaves during a prediction.
namespace grad {
inline constexpr unsigned None = 0;
inline constexpr unsigned Base = 1;
inline constexpr unsigned Adapter = 2;
inline constexpr unsigned Embedding = 4;
}  // namespace grad

/// A learnable copy of the null condition (network: embedding row; analytic: mean vector).
template <class Scalar>
struct LearnableEmbedding {
  Tensor<Scalar> vector;
};

template <class Scalar>
struct Condition {
  static constexpr int kNull = -1;

  std::vector<int> ids{kNull};
  const LearnableEmbedding<Scalar>* learned = nullptr;

  static Condition of(int id) { return Condition{{id}, nullptr}; }
  static Condition null() { return Condition{{kNull}, nullptr}; }
  static Condition per_row(std::vector<int> ids) { return Condition{std::move(ids), nullptr}; }
  static Condition embedding(const LearnableEmbedding<Scalar>& e) { return Condition{{}, &e}; }
};

template <class Scalar>
struct AdapterLayer {
  Tensor<Scalar> down;  // in x rank
  Tensor<Scalar> up;    // rank x out, zero at init
};

template <class Scalar>
struct AdapterSet {
  int rank = 0;
  double scale = 0.5;
  std::vector<AdapterLayer<Scalar>> layers;

  std::vector<Tensor<Scalar>*> parameters() {
    std::vector<Tensor<Scalar>*> p;
    for (auto& l : layers) {
      p.push_back(&l.down);
      p.push_back(&l.up);
    }
    return p;
  }
  Index parameter_count() const {
    Index n = 0;
    for (const auto& l : layers) n += l.down.size() + l.up.size();
    return n;
  }
  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }
};

template <class Scalar>
class Denoiser {
 public:
  explicit Denoiser(NoiseSchedule schedule) : schedule_(std::move(schedule)) {}
  virtual ~Denoiser() = default;
  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;

  virtual DenoiserKind kind() const = 0;
  virtual Index data_dim() const = 0;
  virtual int num_classes() const = 0;
  virtual LearnableEmbedding<Scalar> null_embedding() const = 0;
  /// Embedding of a class condition (used to seed a learnable copy from a source caption).
  virtual LearnableEmbedding<Scalar> class_embedding(int id) const = 0;
  virtual std::vector<Tensor<Scalar>*> parameters() { return {}; }

  const NoiseSchedule& schedule() const { return schedule_; }

  /// Records eps(z; c, t) on `tape`. `z` is [B, D] or [D]; the output has z's shape.
  /// Counts one forward; if the output tracks gradient, a backward that reaches it counts once.
  Var<Scalar> predict(Tape<Scalar>& tape, const Var<Scalar>& z, const Timesteps& t,
                      const Condition<Scalar>& c, const AdapterSet<Scalar>* adapter = nullptr,
                      unsigned grads = grad::None) {
    if (z.cols() != data_dim() || z.shape().size() > 2)
      throw std::invalid_argument("predict: input shape " + to_string(z.shape()) +
                                  " does not match data dimension " + std::to_string(data_dim()));
    if (t.empty()) throw std::invalid_argument("predict: no timestep given");
    for (int ti : t) (void)schedule_.alpha(ti);
    if (t.size() != 1 && static_cast<Index>(t.size()) != z.rows())
      throw std::invalid_argument("predict: timestep count does not match batch");
    if (!c.learned) {
      if (c.ids.empty()) throw std::invalid_argument("predict: empty condition");
      if (c.ids.size() != 1 && static_cast<Index>(c.ids.size()) != z.rows())
        throw std::invalid_argument("predict: condition count does not match batch");
      for (int id : c.ids)
        if (id != Condition<Scalar>::kNull && (id < 0 || id >= num_classes()))
          throw std::out_of_range("predict: unknown condition id " + std::to_string(id));
    }
    Var<Scalar> out = forward(tape, z, t, c, adapter, grads);
    if (out.shape() != z.shape()) out = reshape(out, z.shape());
    ++forward_count_;
    if (!out.requires_grad()) return out;
    return tape.record(out.shape(), out.value(), {out},
                       [this, out](Tape<Scalar>& tp, const Mat<Scalar>& g) {
                         ++backward_count_;
                         tp.accumulate(out, g);
                       });
  }

  Tensor<Scalar> predict(const Tensor<Scalar>& z, const Timesteps& t, const Condition<Scalar>& c,
                         const AdapterSet<Scalar>* adapter = nullptr) {
    Tape<Scalar> tape;
    auto out = predict(tape, tape.constant(z), t, c, adapter);
    return Tensor<Scalar>(out.shape(), out.value());
  }

  std::uint64_t forward_count() const { return forward_count_; }
  std::uint64_t backward_count() const { return backward_count_; }
  void reset_counters() {
    forward_count_ = 0;
    backward_count_ = 0;
  }

 protected:
  virtual Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& z, const Timesteps& t,
                              const Condition<Scalar>& c, const AdapterSet<Scalar>* adapter,
                              unsigned grads) = 0;

 private:
  NoiseSchedule schedule_;
  std::atomic<std::uint64_t> forward_count_{0};
  std::atomic<std::uint64_t> backward_count_{0};
};

struct NetworkConfig {
  Index data_dim = 2;
  int num_classes = 2;
  Index width = 128;
  int hidden_layers = 3;
  Index embed_dim = 32;
  Index time_dim = 32;
};

template <class Scalar>
class NetworkDenoiser final : public Denoiser<Scalar> {
 public:
  struct Linear {
    Tensor<Scalar> weight;  // in x out
    Tensor<Scalar> bias;    // [out]
  };

  NetworkDenoiser(NetworkConfig cfg, NoiseSchedule schedule, std::uint64_t seed)
      : Denoiser<Scalar>(std::move(schedule)), cfg_(cfg) {
    if (cfg.data_dim < 1 || cfg.num_classes < 1 || cfg.width < 1 || cfg.hidden_layers < 1 ||
        cfg.embed_dim < 1 || cfg.time_dim < 2 || cfg.time_dim % 2)
      throw std::invalid_argument("invalid network configuration");
    CounterRng rng(seed, 0, Stream::Init);
    Index in = cfg.data_dim + cfg.time_dim + cfg.embed_dim;
    for (int l = 0; l <= cfg.hidden_layers; ++l) {
      Index out = l == cfg.hidden_layers ? cfg.data_dim : cfg.width;
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      Linear lin{Tensor<Scalar>(Shape{in, out}, true), Tensor<Scalar>(Shape{out}, true)};
      for (auto& v : lin.weight.data()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
      for (auto& v : lin.bias.data()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
      layers_.push_back(std::move(lin));
      in = out;
    }
    cond_table_ = Tensor<Scalar>(Shape{cfg.num_classes + 1, cfg.embed_dim}, true);
    for (auto& v : cond_table_.data()) v = static_cast<Scalar>(rng.normal());
    build_time_table();
  }

  DenoiserKind kind() const override { return DenoiserKind::Network; }
  Index data_dim() const override { return cfg_.data_dim; }
  int num_classes() const override { return cfg_.num_classes; }
  const NetworkConfig& config() const { return cfg_; }
  Index null_row() const { return cfg_.num_classes; }

  LearnableEmbedding<Scalar> null_embedding() const override { return class_embedding(Condition<Scalar>::kNull); }

  LearnableEmbedding<Scalar> class_embedding(int id) const override {
    Index row = id == Condition<Scalar>::kNull ? null_row() : id;
    if (row < 0 || row > null_row()) throw std::out_of_range("unknown condition id " + std::to_string(id));
    Mat<Scalar> v = cond_table_.value().row(row);
    return {Tensor<Scalar>(Shape{cfg_.embed_dim}, std::move(v), true)};
  }

  std::vector<Tensor<Scalar>*> parameters() override {
    std::vector<Tensor<Scalar>*> p;
    for (auto& l : layers_) {
      p.push_back(&l.weight);
      p.push_back(&l.bias);
    }
    p.push_back(&cond_table_);
    return p;
  }

  /// Named parameters in a stable order (checkpoint layout).
  std::vector<std::pair<std::string, Tensor<Scalar>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<Scalar>*>> p;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      p.emplace_back("net.layer" + std::to_string(l) + ".weight", &layers_[l].weight);
      p.emplace_back("net.layer" + std::to_string(l) + ".bias", &layers_[l].bias);
    }
    p.emplace_back("net.cond_table", &cond_table_);
    return p;
  }

  std::vector<Linear>& layers() { return layers_; }
  const std::vector<Linear>& layers() const { return layers_; }
  Tensor<Scalar>& cond_table() { return cond_table_; }
  const Tensor<Scalar>& cond_table() const { return cond_table_; }

  /// Zero-delta low-rank adapters on every hidden linear layer.
  AdapterSet<Scalar> attach_adapter(int rank, double scale, std::uint64_t seed) const {
    if (rank < 1) throw std::invalid_argument("adapter rank must be >= 1");
    const Index limit = max_adapter_rank();
    if (rank > limit)
      throw std::invalid_argument("adapter rank " + std::to_string(rank) + " exceeds layer width " +
                                  std::to_string(limit));
    AdapterSet<Scalar> set;
    set.rank = rank;
    set.scale = scale;
    CounterRng rng(seed, 1, Stream::Init);
    for (int l = 0; l < cfg_.hidden_layers; ++l) {
      const Index in = layers_[l].weight.rows();
      const Index out = layers_[l].weight.cols();
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      AdapterLayer<Scalar> a{Tensor<Scalar>(Shape{in, rank}, true), Tensor<Scalar>(Shape{rank, out}, true)};
      for (auto& v : a.down.data()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
      set.layers.push_back(std::move(a));
    }
    return set;
  }

  Index max_adapter_rank() const {
    Index limit = cfg_.width;
    for (int l = 0; l < cfg_.hidden_layers; ++l)
      limit = std::min({limit, layers_[l].weight.rows(), layers_[l].weight.cols()});
    return limit;
  }

  /// Parameter count of the adapted (hidden) weight matrices.
  Index hidden_weight_count() const {
    Index n = 0;
    for (int l = 0; l < cfg_.hidden_layers; ++l) n += layers_[l].weight.size();
    return n;
  }

 protected:
  Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& z, const Timesteps& t,
                      const Condition<Scalar>& c, const AdapterSet<Scalar>* adapter,
                      unsigned grads) override {
    const Index rows = z.rows();
    const bool base = grads & grad::Base;

    Mat<Scalar> tf(rows, cfg_.time_dim);
    for (Index i = 0; i < rows; ++i) tf.row(i) = time_table_.row(t.size() == 1 ? t[0] : t[i]);
    Var<Scalar> time_features = tape.constant(Shape{rows, cfg_.time_dim}, std::move(tf));

    Var<Scalar> cond;
    if (c.learned) {
      if (c.learned->vector.size() != cfg_.embed_dim)
        throw std::invalid_argument("learnable embedding has wrong length");
      // The caller owns the embedding; it only becomes a leaf when asked for.
      auto& emb = const_cast<Tensor<Scalar>&>(c.learned->vector);
      Var<Scalar> e = (grads & grad::Embedding) ? tape.leaf(emb) : tape.constant(emb);
      cond = broadcast_rows(reshape(e, Shape{1, cfg_.embed_dim}), rows);
    } else {
      std::vector<Index> ids;
      for (int id : c.ids) ids.push_back(id == Condition<Scalar>::kNull ? null_row() : id);
      Var<Scalar> table = base ? tape.leaf(cond_table_) : tape.constant(cond_table_);
      cond = gather_rows(table, ids);
      if (ids.size() == 1 && rows != 1) cond = broadcast_rows(cond, rows);
    }

    Var<Scalar> zin = z.shape().size() == 2 ? z : reshape(z, Shape{rows, cfg_.data_dim});
    Var<Scalar> h = concat_cols<Scalar>({zin, time_features, cond});
    if (adapter && static_cast<int>(adapter->layers.size()) != cfg_.hidden_layers)
      throw std::invalid_argument("adapter does not match network depth");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Var<Scalar> w = base ? tape.leaf(layers_[l].weight) : tape.constant(layers_[l].weight);
      Var<Scalar> b = base ? tape.leaf(layers_[l].bias) : tape.constant(layers_[l].bias);
      Var<Scalar> pre = add(matmul(h, w), b);
      const bool hidden = static_cast<int>(l) < cfg_.hidden_layers;
      if (hidden && adapter) {
        auto& a = const_cast<AdapterLayer<Scalar>&>(adapter->layers[l]);
        const bool track = grads & grad::Adapter;
        Var<Scalar> down = track ? tape.leaf(a.down) : tape.constant(a.down);
        Var<Scalar> up = track ? tape.leaf(a.up) : tape.constant(a.up);
        pre = add(pre, scale(matmul(matmul(h, down), up), static_cast<Scalar>(adapter->scale)));
      }
      h = hidden ? silu(pre) : pre;
    }
    return h;
  }

 private:
  void build_time_table() {
    const int steps = this->schedule().steps();
    const Index half = cfg_.time_dim / 2;
    time_table_ = Mat<Scalar>(steps, cfg_.time_dim);
    for (int t = 0; t < steps; ++t)
      for (Index k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
        time_table_(t, k) = static_cast<Scalar>(std::sin(t * freq));
        time_table_(t, half + k) = static_cast<Scalar>(std::cos(t * freq));
      }
  }

  NetworkConfig cfg_;
  std::vector<Linear> layers_;
  Tensor<Scalar> cond_table_;
  Mat<Scalar> time_table_;
};

struct GaussianClass {
  std::vector<double> mean;
  double variance = 1.0;
};

template <class Scalar>
class AnalyticDenoiser final : public Denoiser<Scalar> {
 public:
  AnalyticDenoiser(std::vector<GaussianClass> classes, GaussianClass null, NoiseSchedule schedule)
      : Denoiser<Scalar>(std::move(schedule)), classes_(std::move(classes)), null_(std::move(null)) {
    if (classes_.empty()) throw std::invalid_argument("analytic denoiser needs at least one class");
    const std::size_t dim = null_.mean.size();
    if (dim == 0) throw std::invalid_argument("analytic denoiser needs a nonempty mean");
    for (const auto& c : classes_) {
      if (c.mean.size() != dim) throw std::invalid_argument("class means have inconsistent dimensions");
      if (!(c.variance >= 0.0)) throw std::invalid_argument("negative data variance");
    }
    if (!(null_.variance >= 0.0)) throw std::invalid_argument("negative data variance");
  }

  DenoiserKind kind() const override { return DenoiserKind::Analytic; }
  Index data_dim() const override { return static_cast<Index>(null_.mean.size()); }
  int num_classes() const override { return static_cast<int>(classes_.size()); }
  const std::vector<GaussianClass>& classes() const { return classes_; }
  const GaussianClass& null_class() const { return null_; }

  LearnableEmbedding<Scalar> null_embedding() const override { return class_embedding(Condition<Scalar>::kNull); }

  LearnableEmbedding<Scalar> class_embedding(int id) const override {
    const GaussianClass& g = lookup(id);
    Tensor<Scalar> v(Shape{data_dim()}, true);
    for (Index i = 0; i < data_dim(); ++i) v.value()(0, i) = static_cast<Scalar>(g.mean[i]);
    return {std::move(v)};
  }

 protected:
  Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& z, const Timesteps& t,
                      const Condition<Scalar>& c, const AdapterSet<Scalar>* adapter,
                      unsigned grads) override {
    if (adapter) throw std::invalid_argument("analytic denoiser does not take adapters");
    const Index rows = z.rows();
    const Index dim = data_dim();
    const auto& sched = this->schedule();

    Var<Scalar> mu;
    std::vector<double> variance;
    if (c.learned) {
      if (c.learned->vector.size() != dim) throw std::invalid_argument("learnable mean has wrong length");
      auto& emb = const_cast<Tensor<Scalar>&>(c.learned->vector);
      Var<Scalar> e = (grads & grad::Embedding) ? tape.leaf(emb) : tape.constant(emb);
      mu = reshape(e, Shape{1, dim});
      variance.push_back(null_.variance);
    } else {
      Mat<Scalar> m(static_cast<Index>(c.ids.size()), dim);
      for (std::size_t i = 0; i < c.ids.size(); ++i) {
        const GaussianClass& g = lookup(c.ids[i]);
        for (Index k = 0; k < dim; ++k) m(static_cast<Index>(i), k) = static_cast<Scalar>(g.mean[k]);
        variance.push_back(g.variance);
      }
      Shape ms{m.rows(), dim};
      mu = tape.constant(std::move(ms), std::move(m));
    }
    if (mu.rows() == 1 && rows != 1) mu = broadcast_rows(mu, rows);

    const bool per_row = t.size() != 1 || variance.size() != 1;
    const Index crow = per_row ? rows : 1;
    Mat<Scalar> a(crow, 1), coef(crow, 1);
    for (Index i = 0; i < crow; ++i) {
      const int ti = t.size() == 1 ? t[0] : t[i];
      const double v = variance.size() == 1 ? variance[0] : variance[i];
      const double al = sched.alpha(ti), si = sched.sigma(ti);
      a(i, 0) = static_cast<Scalar>(al);
      coef(i, 0) = static_cast<Scalar>(si / (al * al * v + si * si));
    }
    Var<Scalar> zin = z.shape().size() == 2 ? z : reshape(z, Shape{rows, dim});
    Var<Scalar> resid = sub(zin, mul(mu, tape.constant(Shape{crow, 1}, std::move(a))));
    return mul(resid, tape.constant(Shape{crow, 1}, std::move(coef)));
  }

 private:
  const GaussianClass& lookup(int id) const {
    if (id == Condition<Scalar>::kNull) return null_;
    if (id < 0 || id >= num_classes()) throw std::out_of_range("unknown condition id " + std::to_string(id));
    return classes_[id];
  }

  std::vector<GaussianClass> classes_;
  GaussianClass null_;
};

/// Per-condition means and variances, plus the unconditional Gaussian.
template <class Scalar>
std::unique_ptr<AnalyticDenoiser<Scalar>> make_analytic(std::vector<GaussianClass> classes, GaussianClass null,
                                                        NoiseSchedule schedule) {
  return std::make_unique<AnalyticDenoiser<Scalar>>(std::move(classes), std::move(null), std::move(schedule));
}

template <class Scalar>
AdapterSet<Scalar> attach_adapter(const Denoiser<Scalar>& d, int rank, double scale, std::uint64_t seed) {
  const auto* net = dynamic_cast<const NetworkDenoiser<Scalar>*>(&d);
  if (!net) throw std::invalid_argument("adapters attach to network denoisers only");
  return net->attach_adapter(rank, scale, seed);
}

/// A learnable copy of the null condition, or of a class condition (editing).
template <class Scalar>
LearnableEmbedding<Scalar> make_learnable_embedding(const Denoiser<Scalar>& d,
                                                    int init_from = Condition<Scalar>::kNull) {
  return d.class_embedding(init_from);
}

/// ||eps(z_t; c, t) - eps||^2 averaged over elements, with z_t = alpha_t x + sigma_t eps.
/// When `backward` is set the loss is backpropagated into the groups named by `grads`.
template <class Scalar>
Scalar denoising_loss(Denoiser<Scalar>& d, const Tensor<Scalar>& x, const Timesteps& t,
                      const Tensor<Scalar>& eps, const Condition<Scalar>& c, unsigned grads, bool backward,
                      const AdapterSet<Scalar>* adapter = nullptr) {
  Tape<Scalar> tape;
  Tensor<Scalar> z = add_noise(d.schedule(), x, t, eps);
  Var<Scalar> pred = d.predict(tape, tape.constant(z), t, c, adapter, grads);
  Var<Scalar> target = tape.constant(eps);
  Var<Scalar> diff2 = square(sub(pred, target));
  bool weighted = false;
  for (int ti : t) weighted = weighted || d.schedule().loss_weight(ti) != 1.0;
  if (weighted)
    diff2 = mul(diff2, tape.constant(Shape{t.size() == 1 ? 1 : x.rows(), 1},
                                     per_row_coefficient<Scalar>(d.schedule().loss_weights(), t, x.rows())));
  Var<Scalar> loss = mean(diff2);
  if (backward) tape.backward(loss);
  return loss.value()(0, 0);
}

struct ConditionedSamples {
  Mat<double> samples;  // N x D
  std::vector<int> labels;
  int num_classes = 0;
  Index dim() const { return samples.cols(); }
  Index size() const { return samples.rows(); }
};

struct TrainSettings {
  int steps = 5000;
  int batch = 256;
  OptimSettings optim{OptimizerKind::Adam, 2e-3};
  double drop_prob = 0.1;
  std::uint64_t seed = 0;
};

/// Denoising score matching with condition dropout; returns the per-step loss.
template <class Scalar>
std::vector<double> train_denoiser(Denoiser<Scalar>& d, const ConditionedSamples& data,
                                   const TrainSettings& settings) {
  if (d.kind() != DenoiserKind::Network)
    throw std::invalid_argument("analytic denoiser has nothing to train");
  if (data.size() == 0) throw std::invalid_argument("training set is empty");
  if (data.dim() != d.data_dim()) throw std::invalid_argument("training data dimension mismatch");
  if (!(settings.drop_prob >= 0.0 && settings.drop_prob < 1.0))
    throw std::invalid_argument("drop_prob must lie in [0, 1)");
  if (settings.batch < 1 || settings.steps < 0) throw std::invalid_argument("invalid training schedule");

  Optimizer<Scalar> opt(settings.optim, d.parameters());
  const int steps_T = d.schedule().steps();
  std::vector<double> losses;
  losses.reserve(settings.steps);
  for (int step = 0; step < settings.steps; ++step) {
    CounterRng pick(settings.seed, step, Stream::TrainBatch);
    CounterRng tr(settings.seed, step, Stream::TrainTimestep);
    CounterRng nr(settings.seed, step, Stream::TrainNoise);
    CounterRng dr(settings.seed, step, Stream::TrainDropout);
    Tensor<Scalar> x(Shape{settings.batch, data.dim()});
    Timesteps t(settings.batch);
    std::vector<int> ids(settings.batch);
    for (int i = 0; i < settings.batch; ++i) {
      const Index row = pick.uniform_int(0, data.size() - 1);
      x.value().row(i) = data.samples.row(row).template cast<Scalar>();
      t[i] = static_cast<int>(tr.uniform_int(0, steps_T - 1));
      ids[i] = dr.uniform() < settings.drop_prob ? Condition<Scalar>::kNull : data.labels[row];
    }
    Tensor<Scalar> eps = nr.normal_tensor<Scalar>(x.shape());
    opt.zero_grad();
    losses.push_back(static_cast<double>(
        denoising_loss(d, x, t, eps, Condition<Scalar>::per_row(ids), grad::Base, true)));
    opt.step();
  }
  opt.zero_grad();
  return losses;
}

}  // namespace lods
