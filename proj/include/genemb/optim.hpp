#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "genemb/tensor.hpp"

namespace genemb::ad {

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool decay = true;
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Adaptive moments with decoupled weight decay:
//   p <- p - lr*wd*p - lr * mhat / (sqrt(vhat) + eps)
// Moments are kept per parameter in registration order.
class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, AdamWOptions opt = {}) : params_(std::move(params)), opt_(opt) {
    for (auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  // Every parameter must carry a gradient; a parameter the loss never touched
  // has to be given one explicitly (see fill_missing_grads).
  void step(double lr) {
    if (!(lr > 0.0)) throw ShapeError("adamw: learning rate must be positive");
    for (auto& p : params_)
      if (!p.tensor.has_grad()) throw Error("adamw: parameter '" + p.name + "' has no gradient");
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto w = p.tensor.mutable_data();
      auto g = p.tensor.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      const double wd = p.decay ? opt_.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= lr * wd * w[i] + lr * mhat / (std::sqrt(vhat) + opt_.eps);
      }
      p.tensor.zero_grad();
    }
  }

  // Gives untouched parameters an explicit zero gradient.
  void fill_missing_grads() {
    for (auto& p : params_)
      if (!p.tensor.has_grad()) p.tensor.node()->ensure_grad();
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Multiplies all gradients by s (used to average accumulated micro-batches).
  void scale_grads(double s) {
    for (auto& p : params_)
      if (p.tensor.has_grad())
        for (double& g : p.tensor.node()->grad) g *= s;
  }

  std::size_t steps() const { return t_; }
  const std::vector<NamedParam>& params() const { return params_; }

 private:
  std::vector<NamedParam> params_;
  AdamWOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace genemb::ad
