#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "adaptsec/errors.hpp"

namespace adaptsec {

class Rng;

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty = no gradient yet
  bool requires_grad = false;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

/// Dense row-major float64 tensor. Copies share storage (handle semantics);
/// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t rank() const { return impl_->shape.size(); }
  /// Rows/cols of the 2-D view: rank-1 tensors are a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad();
  void drop_grad() { impl_->grad.clear(); }

  Tensor clone() const;
  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Keys and values of an already-encoded prefix that every attention segment
/// may attend to. Never receives gradient.
struct AttentionPrefix {
  const Tensor* keys = nullptr;    // [P x d]
  const Tensor* values = nullptr;  // [P x d]
  std::size_t length() const { return keys ? keys->rows() : 0; }
};

inline constexpr int kIgnoreTarget = -1;

/// Reverse-mode tape. Operations whose inputs need no gradient are computed
/// eagerly and not recorded, so inference never grows the tape.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor matmul(const Tensor& a, const Tensor& b);
  /// a * b^T
  Tensor matmul_nt(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  /// x[m x n] + bias[n] broadcast over rows.
  Tensor add_bias(const Tensor& x, const Tensor& bias);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double s);
  Tensor gelu(const Tensor& x);
  Tensor tanh(const Tensor& x);
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
  Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids);
  Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
  Tensor concat_rows(std::span<const Tensor> parts);
  /// Multi-head causal self-attention over independent row segments.
  /// q, k, v are [T x d]; segment lengths sum to T. Row i of a segment sees
  /// the whole prefix and rows 0..i of its own segment. Non-empty `slopes`
  /// (one per head) add the linear distance penalty -slope * (i - j) to the
  /// scores, positions counted from the start of the prefix.
  Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                          std::span<const std::size_t> segments, AttentionPrefix prefix = {},
                          std::span<const double> slopes = {});
  /// Inverted dropout; identity when rate == 0.
  Tensor dropout(const Tensor& x, double rate, Rng& rng);
  Tensor sum(const Tensor& x);
  /// Mean softmax cross-entropy over rows; rows with kIgnoreTarget are skipped.
  Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);
  /// Single-row convenience: -log softmax(logits)[target].
  Tensor softmax_cross_entropy(const Tensor& logits, int target);

  /// Populates grad of every requires_grad leaf reachable from loss, then
  /// clears the tape.
  void backward(const Tensor& loss);

  std::size_t recorded() const noexcept { return tape_.size(); }
  void clear() { tape_.clear(); }

 private:
  struct Op {
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void(detail::TensorImpl& out)> backward;
  };

  template <class Fn>
  Tensor record(Tensor out, std::initializer_list<const Tensor*> inputs, Fn&& fn);

  std::vector<Op> tape_;
};

/// Numerically stable softmax of one row.
std::vector<double> softmax(std::span<const double> logits);
/// -log softmax(logits)[target] with max-subtraction.
double cross_entropy_value(std::span<const double> logits, std::size_t target);

}  // namespace adaptsec
