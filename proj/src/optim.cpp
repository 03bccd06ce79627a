#include "adaptsec/optim.hpp"

#include <cmath>
#include <string>

namespace adaptsec {

Optimizer::Optimizer(OptimizerKind kind, double lr, double b1, double b2, double eps)
    : kind_(kind), lr_(lr), beta1_(b1), beta2_(b2), eps_(eps) {
  // lr == 0 is allowed for no-op training runs used in tests.
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ContractError("learning rate must be finite and non-negative");
}

void Optimizer::set_learning_rate(double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ContractError("learning rate must be finite and non-negative");
  lr_ = lr;
}

Optimizer Optimizer::sgd(double learning_rate) { return Optimizer(OptimizerKind::sgd, learning_rate, 0, 0, 0); }

Optimizer Optimizer::adam(double learning_rate, double beta1, double beta2, double eps) {
  return Optimizer(OptimizerKind::adam, learning_rate, beta1, beta2, eps);
}

void Optimizer::step(std::span<Tensor> params) {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].has_grad())
      throw ContractError("optimizer step: parameter " + std::to_string(i) + " " +
                          shape_string(params[i].shape()) + " has no gradient");
  ++steps_;
  if (kind_ == OptimizerKind::adam) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ContractError("optimizer step: parameter list changed between steps");
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(beta1_, t);
    const double c2 = 1.0 - std::pow(beta2_, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].mutable_data();
      auto g = params[i].mutable_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.size() != w.size()) throw ContractError("optimizer step: moment buffer does not match parameter");
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        w[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  } else {
    for (auto& p : params) {
      auto w = p.mutable_data();
      auto g = p.grad();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr_ * g[j];
    }
  }
  for (auto& p : params) p.zero_grad();
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

}  // namespace adaptsec
