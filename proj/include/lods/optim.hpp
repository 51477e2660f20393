#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "lods/gradcore.hpp"

namespace lods {

enum class OptimizerKind { Sgd, Adam };

struct OptimSettings {
  OptimizerKind kind = OptimizerKind::Sgd;
  double lr = 1e-3;
  double momentum = 0.0;  // SGD only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

/// First-order optimizer over a fixed parameter list. Parameters without a
/// gradient are left untouched. Gradients are not cleared by step(); call
/// zero_grad() explicitly between steps.
template <class Scalar>
class Optimizer {
 public:
  Optimizer(OptimSettings settings, std::vector<Tensor<Scalar>*> params)
      : settings_(settings), params_(std::move(params)) {
    if (!(settings_.lr >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
    for (auto* p : params_) {
      m_.push_back(Mat<Scalar>::Zero(p->rows(), p->cols()));
      v_.push_back(Mat<Scalar>::Zero(p->rows(), p->cols()));
    }
  }

  void step() {
    ++t_;
    const Scalar lr = static_cast<Scalar>(settings_.lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<Scalar>& p = *params_[i];
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      if (settings_.kind == OptimizerKind::Sgd) {
        if (settings_.momentum != 0.0) {
          m_[i] = m_[i] * static_cast<Scalar>(settings_.momentum) + g;
          p.value() -= lr * m_[i];
        } else {
          p.value() -= lr * g;
        }
      } else {
        const Scalar b1 = static_cast<Scalar>(settings_.beta1);
        const Scalar b2 = static_cast<Scalar>(settings_.beta2);
        m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
        v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseAbs2();
        const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(settings_.beta1, t_));
        const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(settings_.beta2, t_));
        const Scalar eps = static_cast<Scalar>(settings_.eps);
        p.value().array() -=
            lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void set_lr(double lr) { settings_.lr = lr; }
  double lr() const { return settings_.lr; }
  const OptimSettings& settings() const { return settings_; }

 private:
  OptimSettings settings_;
  std::vector<Tensor<Scalar>*> params_;
  std::vector<Mat<Scalar>> m_, v_;
  long t_ = 0;
};

}  // namespace lods
