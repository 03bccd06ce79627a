#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "adaptsec/tensor.hpp"

namespace adaptsec {

enum class OptimizerKind { sgd, adam };

/// First-order optimizer over an ordered parameter list. Moment buffers are
/// bound to parameter position, so the same list must be passed every step.
class Optimizer {
 public:
  static Optimizer sgd(double learning_rate);
  static Optimizer adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update, increments the step counter and zeroes the grads.
  void step(std::span<Tensor> params);

  OptimizerKind kind() const noexcept { return kind_; }
  double learning_rate() const noexcept { return lr_; }
  /// For schedules; moments and the step counter are kept.
  void set_learning_rate(double lr);
  std::size_t steps() const noexcept { return steps_; }

 private:
  Optimizer(OptimizerKind kind, double lr, double b1, double b2, double eps);

  OptimizerKind kind_;
  double lr_;
  double beta1_, beta2_, eps_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Rescales grads so their global L2 norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace adaptsec
