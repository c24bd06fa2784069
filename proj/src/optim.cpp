#include "ppks/optim.hpp"

#include <cmath>

#include "ppks/error.hpp"

namespace ppks {

Optimizer::Optimizer(std::vector<Tensor> params, OptimizerSpec spec)
    : params_(std::move(params)), spec_(spec), first_(params_.size()), second_(params_.size()) {
  for (const Tensor& p : params_) {
    if (!p.defined()) throw ValueError("Optimizer: undefined parameter");
  }
}

void Optimizer::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void Optimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    auto g = params_[i].grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw DivergenceError("optimizer step " + std::to_string(steps_ + 1) + ": non-finite gradient in parameter " +
                              std::to_string(i) + " " + shape_str(params_[i].shape()) + " at index " +
                              std::to_string(j));
      }
    }
  }
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.data();
    auto g = p.grad();
    if (const auto* sgd = std::get_if<SgdSpec>(&spec_)) {
      if (sgd->momentum != 0.0f) {
        auto& vel = first_[i];
        if (vel.empty()) vel.assign(w.size(), 0.0f);
        for (std::size_t j = 0; j < w.size(); ++j) {
          vel[j] = sgd->momentum * vel[j] + g[j];
          w[j] -= sgd->lr * vel[j];
        }
      } else {
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= sgd->lr * g[j];
      }
    } else {
      const auto& adam = std::get<AdamSpec>(spec_);
      auto& m = first_[i];
      auto& v = second_[i];
      if (m.empty()) {
        m.assign(w.size(), 0.0f);
        v.assign(w.size(), 0.0f);
      }
      const double t = static_cast<double>(steps_);
      const float c1 = static_cast<float>(1.0 - std::pow(static_cast<double>(adam.beta1), t));
      const float c2 = static_cast<float>(1.0 - std::pow(static_cast<double>(adam.beta2), t));
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = adam.beta1 * m[j] + (1.0f - adam.beta1) * g[j];
        v[j] = adam.beta2 * v[j] + (1.0f - adam.beta2) * g[j] * g[j];
        const float mhat = m[j] / c1;
        const float vhat = v[j] / c2;
        w[j] -= adam.lr * mhat / (std::sqrt(vhat) + adam.eps);
      }
    }
  }
}

}  // namespace ppks
