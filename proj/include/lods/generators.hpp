#pragma once

// Differentiable parameterizations x = g(theta).
//
// Identity: x = theta. Splats: K anisotropic 2-D Gaussians alpha-composited
// back to front over a constant background into an H x W x C image.
// Each splat occupies one row of theta:
//
//   [cx, cy, log_sx, log_sy, angle, color_logit[C], opacity_logit, depth]
//
// Centers live in image units [0,1]^2; pixel (i, j) samples ((i+0.5)/W, (j+0.5)/H).
// Larger depth is farther and drawn first. Depth only orders splats and has zero
// gradient; splats with equal depth keep storage order.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "lods/gradcore.hpp"
#include "lods/rng.hpp"

namespace lods {

enum class GeneratorKind { Identity, Splats };

inline const char* to_string(GeneratorKind k) { return k == GeneratorKind::Identity ? "identity" : "splats"; }

struct SplatLayout {
  Index width = 16;
  Index height = 16;
  Index channels = 1;
  Index count = 16;
  double background = 0.5;
};

inline constexpr Index kSplatFixedParams = 7;  // cx cy lsx lsy angle opacity depth
inline Index splat_row_length(Index channels) { return kSplatFixedParams + channels; }

template <class Scalar>
class Generator {
 public:
  static Generator identity(Shape theta_shape) {
    Generator g;
    g.kind_ = GeneratorKind::Identity;
    g.theta_shape_ = theta_shape;
    g.output_shape_ = std::move(theta_shape);
    return g;
  }

  static Generator splats(SplatLayout layout) {
    if (layout.width < 1 || layout.height < 1 || layout.count < 0 || layout.channels < 1)
      throw std::invalid_argument("invalid splat layout");
    if (!(layout.background > 0.0 && layout.background < 1.0))
      throw std::invalid_argument("splat background must lie in (0, 1)");
    Generator g;
    g.kind_ = GeneratorKind::Splats;
    g.layout_ = layout;
    g.theta_shape_ = Shape{layout.count, splat_row_length(layout.channels)};
    g.output_shape_ = Shape{layout.height, layout.width, layout.channels};
    return g;
  }

  GeneratorKind kind() const { return kind_; }
  const Shape& theta_shape() const { return theta_shape_; }
  const Shape& output_shape() const { return output_shape_; }
  const SplatLayout& layout() const { return layout_; }

  Var<Scalar> render(Tape<Scalar>& tape, const Var<Scalar>& theta) const {
    if (theta.shape() != theta_shape_)
      throw std::invalid_argument("render: theta shape " + to_string(theta.shape()) + " does not match layout " +
                                  to_string(theta_shape_));
    if (kind_ == GeneratorKind::Identity) return theta;
    return render_splats(tape, theta);
  }

  Tensor<Scalar> render(const Tensor<Scalar>& theta) const {
    Tape<Scalar> tape;
    auto x = render(tape, tape.constant(theta));
    return Tensor<Scalar>(x.shape(), x.value());
  }

  /// d<upstream, g(theta)>/d(theta).
  Tensor<Scalar> pullback(const Tensor<Scalar>& theta, const Tensor<Scalar>& upstream) const {
    if (upstream.shape() != output_shape_)
      throw std::invalid_argument("pullback: upstream shape " + to_string(upstream.shape()) +
                                  " does not match render output " + to_string(output_shape_));
    Tensor<Scalar> th(theta.shape(), theta.value(), true);
    Tape<Scalar> tape;
    auto x = render(tape, tape.leaf(th));
    tape.backward(sum(mul(x, tape.constant(upstream))));
    if (!th.has_grad()) return Tensor<Scalar>(theta.shape());
    return Tensor<Scalar>(theta.shape(), th.grad());
  }

  /// Identity: standard normal entries. Splats: uniform centers, small isotropic
  /// scales, opacity logit -1, mid-gray colors, distinct random depths.
  Tensor<Scalar> initial_theta(std::uint64_t seed, double scale = 1.0) const {
    CounterRng rng(seed, 0, Stream::Init);
    Tensor<Scalar> th(theta_shape_);
    if (kind_ == GeneratorKind::Identity) {
      for (auto& v : th.data()) v = static_cast<Scalar>(scale * rng.normal());
      return th;
    }
    const Index C = layout_.channels;
    for (Index k = 0; k < layout_.count; ++k) {
      auto row = th.value().row(k);
      row(0) = static_cast<Scalar>(rng.uniform(0.1, 0.9));
      row(1) = static_cast<Scalar>(rng.uniform(0.1, 0.9));
      row(2) = row(3) = static_cast<Scalar>(std::log(0.08));
      row(4) = static_cast<Scalar>(rng.uniform(-0.5, 0.5));
      for (Index c = 0; c < C; ++c) row(5 + c) = Scalar(0);
      row(5 + C) = Scalar(-1);
      row(6 + C) = static_cast<Scalar>(k + rng.uniform(0.0, 0.5));
    }
    return th;
  }

 private:
  Var<Scalar> render_splats(Tape<Scalar>& tape, const Var<Scalar>& theta) const {
    using M = Mat<Scalar>;
    using Vec = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    const Index W = layout_.width, H = layout_.height, C = layout_.channels, K = layout_.count;
    const Index P = W * H;
    const M th = theta.value();

    std::vector<Index> order(static_cast<std::size_t>(K));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return th(a, 6 + C) > th(b, 6 + C); });

    Vec px(P), py(P);
    for (Index j = 0; j < H; ++j)
      for (Index i = 0; i < W; ++i) {
        px(j * W + i) = (static_cast<Scalar>(i) + Scalar(0.5)) / static_cast<Scalar>(W);
        py(j * W + i) = (static_cast<Scalar>(j) + Scalar(0.5)) / static_cast<Scalar>(H);
      }

    M image = M::Constant(P, C, static_cast<Scalar>(layout_.background));
    std::vector<M> before;  // composite under splat k, in draw order
    std::vector<Vec> alphas, gauss, us, vs;
    before.reserve(K);
    for (Index n = 0; n < K; ++n) {
      const Index k = order[n];
      const Scalar cx = th(k, 0), cy = th(k, 1);
      const Scalar sx = std::exp(th(k, 2)), sy = std::exp(th(k, 3));
      const Scalar ca = std::cos(th(k, 4)), sa = std::sin(th(k, 4));
      const Scalar op = Scalar(1) / (Scalar(1) + std::exp(-th(k, 5 + C)));
      Vec dx = px - cx, dy = py - cy;
      Vec u = (ca * dx + sa * dy) / sx;
      Vec v = (-sa * dx + ca * dy) / sy;
      Vec g = (Scalar(-0.5) * (u.square() + v.square())).exp();
      Vec a = op * g;
      before.push_back(image);
      for (Index c = 0; c < C; ++c) {
        const Scalar col = Scalar(1) / (Scalar(1) + std::exp(-th(k, 5 + c)));
        image.col(c).array() = image.col(c).array() * (Scalar(1) - a) + a * col;
      }
      alphas.push_back(std::move(a));
      gauss.push_back(std::move(g));
      us.push_back(std::move(u));
      vs.push_back(std::move(v));
    }

    M out = Eigen::Map<const M>(image.data(), H, W * C);
    return tape.record(
        output_shape_, std::move(out), {theta},
        [theta, th, order, before, alphas, gauss, us, vs, W, H, C, K, P](Tape<Scalar>& t, const M& g_out) {
          const Eigen::Map<const M> g(g_out.data(), P, C);
          M grad = M::Zero(th.rows(), th.cols());
          Vec trans = Vec::Ones(P);
          for (Index n = K - 1; n >= 0; --n) {
            const Index k = order[n];
            const Vec& a = alphas[n];
            const Vec& gs = gauss[n];
            const Vec& u = us[n];
            const Vec& v = vs[n];
            const Scalar sx = std::exp(th(k, 2)), sy = std::exp(th(k, 3));
            const Scalar ca = std::cos(th(k, 4)), sa = std::sin(th(k, 4));
            const Scalar op = Scalar(1) / (Scalar(1) + std::exp(-th(k, 5 + C)));

            Vec d_alpha = Vec::Zero(P);
            for (Index c = 0; c < C; ++c) {
              const Scalar col = Scalar(1) / (Scalar(1) + std::exp(-th(k, 5 + c)));
              Vec gc = g.col(c).array() * trans;
              d_alpha += gc * (col - before[n].col(c).array());
              grad(k, 5 + c) = (gc * a).sum() * col * (Scalar(1) - col);
            }
            trans *= (Scalar(1) - a);

            grad(k, 5 + C) = (d_alpha * gs).sum() * op * (Scalar(1) - op);
            // dq with q = u^2 + v^2 and G = exp(-q/2): dL/dq = -0.5 * op * G * dL/dalpha
            Vec dq = Scalar(-0.5) * op * gs * d_alpha;
            grad(k, 0) = (dq * (Scalar(2) * u * (-ca / sx) + Scalar(2) * v * (sa / sy))).sum();
            grad(k, 1) = (dq * (Scalar(2) * u * (-sa / sx) + Scalar(2) * v * (-ca / sy))).sum();
            grad(k, 2) = (dq * (Scalar(-2) * u.square())).sum();
            grad(k, 3) = (dq * (Scalar(-2) * v.square())).sum();
            grad(k, 4) = (dq * (Scalar(2) * u * v * (sy / sx - sx / sy))).sum();
          }
          t.accumulate(theta, grad);
        });
  }

  GeneratorKind kind_ = GeneratorKind::Identity;
  SplatLayout layout_;
  Shape theta_shape_;
  Shape output_shape_;
};

}  // namespace lods
