#include "adaptsec/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "adaptsec/rng.hpp"

namespace adaptsec {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Stride = Eigen::OuterStride<>;
using ConstStrided = Eigen::Map<const RowMat, 0, Stride>;
using MutStrided = Eigen::Map<RowMat, 0, Stride>;

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;

ConstMap view(const Impl& t, std::size_t rows, std::size_t cols) {
  return ConstMap(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MutMap grad_view(Impl& t, std::size_t rows, std::size_t cols) {
  return MutMap(t.ensure_grad().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMap grad_cview(Impl& t, std::size_t rows, std::size_t cols) {
  return ConstMap(t.ensure_grad().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_string(shape));
  if (shape_size(shape) != data.size())
    throw DimensionError("shape " + shape_string(shape) + " does not hold " + std::to_string(data.size()) +
                         " values");
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

std::size_t Tensor::rows() const {
  const auto& s = impl_->shape;
  return s.size() >= 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const {
  const auto& s = impl_->shape;
  if (s.empty()) return 1;
  return s.size() >= 2 ? s[1] : s[0];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
  return t;
}

// ---------------------------------------------------------------------------

template <class Fn>
Tensor Graph::record(Tensor out, std::initializer_list<const Tensor*> inputs, Fn&& fn) {
  bool needs = false;
  for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  if (needs) {
    out.set_requires_grad(true);
    tape_.push_back(Op{out.impl(), std::forward<Fn>(fn)});
  }
  return out;
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  MutMap(out.mutable_data().data(), m, n).noalias() = view(*a.impl(), m, k) * view(*b.impl(), k, n);
  ImplPtr ai = a.impl(), bi = b.impl();
  return record(out, {&a, &b}, [ai, bi, m, k, n](Impl& o) {
    auto dout = grad_cview(o, m, n);
    if (ai->requires_grad) grad_view(*ai, m, k).noalias() += dout * view(*bi, k, n).transpose();
    if (bi->requires_grad) grad_view(*bi, k, n).noalias() += view(*ai, m, k).transpose() * dout;
  });
}

Tensor Graph::matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw DimensionError("matmul_nt: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  Tensor out = Tensor::zeros({m, n});
  MutMap(out.mutable_data().data(), m, n).noalias() = view(*a.impl(), m, k) * view(*b.impl(), n, k).transpose();
  ImplPtr ai = a.impl(), bi = b.impl();
  return record(out, {&a, &b}, [ai, bi, m, k, n](Impl& o) {
    auto dout = grad_cview(o, m, n);
    if (ai->requires_grad) grad_view(*ai, m, k).noalias() += dout * view(*bi, n, k);
    if (bi->requires_grad) grad_view(*bi, n, k).noalias() += dout.transpose() * view(*ai, m, k);
  });
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> d(a.size());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] + y[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return record(Tensor(a.shape(), std::move(d)), {&a, &b}, [ai, bi](Impl& o) {
    for (auto* in : {ai.get(), bi.get()}) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor Graph::add_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != n)
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(x.shape()));
  std::vector<double> d(x.size());
  const auto xs = x.data(), bs = bias.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) d[r * n + c] = xs[r * n + c] + bs[c];
  ImplPtr xi = x.impl(), bi = bias.impl();
  return record(Tensor(x.shape(), std::move(d)), {&x, &bias}, [xi, bi, m, n](Impl& o) {
    if (xi->requires_grad) {
      auto& g = xi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[c] += o.grad[r * n + c];
    }
  });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> d(a.size());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] * y[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return record(Tensor(a.shape(), std::move(d)), {&a, &b}, [ai, bi](Impl& o) {
    if (ai->requires_grad) {
      auto& g = ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& g = bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
    }
  });
}

Tensor Graph::scale(const Tensor& a, double s) {
  std::vector<double> d(a.data().begin(), a.data().end());
  for (auto& v : d) v *= s;
  ImplPtr ai = a.impl();
  return record(Tensor(a.shape(), std::move(d)), {&a}, [ai, s](Impl& o) {
    auto& g = ai->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o.grad[i];
  });
}

Tensor Graph::gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  std::vector<double> d(x.size());
  const auto xs = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double v = xs[i];
    d[i] = 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
  }
  ImplPtr xi = x.impl();
  return record(Tensor(x.shape(), std::move(d)), {&x}, [xi](Impl& o) {
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xi->data[i];
      const double t = std::tanh(c * (v + k * v * v * v));
      const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
      g[i] += o.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Tensor Graph::tanh(const Tensor& x) {
  std::vector<double> d(x.size());
  const auto xs = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::tanh(xs[i]);
  ImplPtr xi = x.impl();
  Tensor out(x.shape(), std::move(d));
  return record(out, {&x}, [xi](Impl& o) {
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (1.0 - o.data[i] * o.data[i]);
  });
}

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n)
    throw DimensionError("layer_norm: affine parameters do not match " + shape_string(x.shape()));
  std::vector<double> d(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(m);
  const auto xs = x.data(), gs = gamma.data(), bs = beta.data();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xs.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mean) * rs;
      (*xhat)[r * n + c] = h;
      d[r * n + c] = h * gs[c] + bs[c];
    }
  }
  ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return record(Tensor(x.shape(), std::move(d)), {&x, &gamma, &beta}, [xi, gi, bi, xhat, rstd, m, n](Impl& o) {
    const auto& dy = o.grad;
    if (gi->requires_grad) {
      auto& g = gi->ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[c] += dy[r * n + c] * (*xhat)[r * n + c];
    }
    if (bi->requires_grad) {
      auto& g = bi->ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[c] += dy[r * n + c];
    }
    if (xi->requires_grad) {
      auto& g = xi->ensure_grad();
      std::vector<double> dxh(n);
      for (std::size_t r = 0; r < m; ++r) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          dxh[c] = dy[r * n + c] * gi->data[c];
          mean_dxh += dxh[c];
          mean_dxh_xh += dxh[c] * (*xhat)[r * n + c];
        }
        mean_dxh /= static_cast<double>(n);
        mean_dxh_xh /= static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c)
          g[r * n + c] += (*rstd)[r] * (dxh[c] - mean_dxh - (*xhat)[r * n + c] * mean_dxh_xh);
      }
    }
  });
}

Tensor Graph::embedding(const Tensor& table, std::span<const std::uint32_t> ids) {
  require_matrix(table, "embedding");
  const std::size_t v = table.rows(), d = table.cols();
  if (ids.empty()) throw SizeError("embedding: empty id sequence");
  std::vector<double> out(ids.size() * d);
  const auto ts = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v)
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(v));
    std::copy_n(ts.data() + ids[i] * d, d, out.data() + i * d);
  }
  ImplPtr ti = table.impl();
  std::vector<std::uint32_t> idv(ids.begin(), ids.end());
  return record(Tensor({ids.size(), d}, std::move(out)), {&table}, [ti, idv = std::move(idv), d](Impl& o) {
    auto& g = ti->ensure_grad();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) g[idv[i] * d + c] += o.grad[i * d + c];
  });
}

Tensor Graph::gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (rows.empty()) throw SizeError("gather_rows: no rows selected");
  std::vector<double> out(rows.size() * n);
  const auto xs = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " of " + std::to_string(m));
    std::copy_n(xs.data() + rows[i] * n, n, out.data() + i * n);
  }
  ImplPtr xi = x.impl();
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  return record(Tensor({rows.size(), n}, std::move(out)), {&x}, [xi, rv = std::move(rv), n](Impl& o) {
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < rv.size(); ++i)
      for (std::size_t c = 0; c < n; ++c) g[rv[i] * n + c] += o.grad[i * n + c];
  });
}

Tensor Graph::concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw SizeError("concat_rows: nothing to concatenate");
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.cols() != n)
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    total += p.rows();
    needs = needs || p.requires_grad();
  }
  std::vector<double> out;
  out.reserve(total * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor result({total, n}, std::move(out));
  if (!needs) return result;
  std::vector<ImplPtr> ins;
  for (const auto& p : parts) ins.push_back(p.impl());
  result.set_requires_grad(true);
  tape_.push_back(Op{result.impl(), [ins = std::move(ins)](Impl& o) {
                       std::size_t off = 0;
                       for (const auto& in : ins) {
                         const std::size_t len = in->data.size();
                         if (in->requires_grad) {
                           auto& g = in->ensure_grad();
                           for (std::size_t i = 0; i < len; ++i) g[i] += o.grad[off + i];
                         }
                         off += len;
                       }
                     }});
  return result;
}

Tensor Graph::causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                               std::span<const std::size_t> segments, AttentionPrefix prefix,
                               std::span<const double> slopes) {
  require_matrix(q, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t total = q.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0)
    throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  if (std::accumulate(segments.begin(), segments.end(), std::size_t{0}) != total)
    throw DimensionError("causal_attention: segment lengths do not cover " + shape_string(q.shape()));
  const std::size_t plen = prefix.length();
  if (plen > 0 && (prefix.keys->cols() != d || prefix.values->shape() != prefix.keys->shape()))
    throw DimensionError("causal_attention: prefix cache width mismatch");

  if (!slopes.empty() && slopes.size() != heads)
    throw DimensionError("causal_attention: " + std::to_string(slopes.size()) + " slopes for " +
                         std::to_string(heads) + " heads");

  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Stride stride(static_cast<Eigen::Index>(d));
  Tensor out = Tensor::zeros({total, d});

  // probs[seg][head] is L x (P + L), row-major; masked entries are zero.
  auto probs = std::make_shared<std::vector<RowMat>>();
  probs->reserve(segments.size() * heads);

  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  double* od = out.mutable_data().data();
  std::size_t off = 0;
  for (std::size_t len : segments) {
    const auto L = static_cast<Eigen::Index>(len);
    const auto P = static_cast<Eigen::Index>(plen);
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStrided qh(qd + off * d + h * dh, L, dh, stride);
      ConstStrided kh(kd + off * d + h * dh, L, dh, stride);
      ConstStrided vh(vd + off * d + h * dh, L, dh, stride);
      RowMat s(L, P + L);
      if (P > 0) {
        ConstStrided pk(prefix.keys->data().data() + h * dh, P, dh, stride);
        s.leftCols(P).noalias() = qh * pk.transpose();
      }
      s.rightCols(L).noalias() = qh * kh.transpose();
      s *= inv_sqrt;
      const double slope = slopes.empty() ? 0.0 : slopes[h];
      for (Eigen::Index i = 0; i < L; ++i) {
        const Eigen::Index visible = P + i + 1;
        if (slope != 0.0)
          for (Eigen::Index j = 0; j < visible; ++j) s(i, j) -= slope * static_cast<double>(P + i - j);
        double mx = s(i, 0);
        for (Eigen::Index j = 1; j < visible; ++j) mx = std::max(mx, s(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j < visible; ++j) {
          s(i, j) = std::exp(s(i, j) - mx);
          z += s(i, j);
        }
        for (Eigen::Index j = 0; j < visible; ++j) s(i, j) /= z;
        for (Eigen::Index j = visible; j < P + L; ++j) s(i, j) = 0.0;
      }
      MutStrided oh(od + off * d + h * dh, L, dh, stride);
      oh.noalias() = s.rightCols(L) * vh;
      if (P > 0) {
        ConstStrided pv(prefix.values->data().data() + h * dh, P, dh, stride);
        oh.noalias() += s.leftCols(P) * pv;
      }
      probs->push_back(std::move(s));
    }
    off += len;
  }

  ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl();
  ImplPtr pki = plen ? prefix.keys->impl() : nullptr;
  ImplPtr pvi = plen ? prefix.values->impl() : nullptr;
  std::vector<std::size_t> segs(segments.begin(), segments.end());
  return record(out, {&q, &k, &v},
                [qi, ki, vi, pki, pvi, probs, segs = std::move(segs), heads, d, dh, plen, inv_sqrt](Impl& o) {
                  const Stride st(static_cast<Eigen::Index>(d));
                  double* dq = qi->requires_grad ? qi->ensure_grad().data() : nullptr;
                  double* dk = ki->requires_grad ? ki->ensure_grad().data() : nullptr;
                  double* dv = vi->requires_grad ? vi->ensure_grad().data() : nullptr;
                  const auto P = static_cast<Eigen::Index>(plen);
                  std::size_t off = 0, idx = 0;
                  for (std::size_t len : segs) {
                    const auto L = static_cast<Eigen::Index>(len);
                    for (std::size_t h = 0; h < heads; ++h, ++idx) {
                      const RowMat& p = (*probs)[idx];
                      ConstStrided gout(o.grad.data() + off * d + h * dh, L, dh, st);
                      ConstStrided qh(qi->data.data() + off * d + h * dh, L, dh, st);
                      ConstStrided kh(ki->data.data() + off * d + h * dh, L, dh, st);
                      ConstStrided vh(vi->data.data() + off * d + h * dh, L, dh, st);
                      if (dv) MutStrided(dv + off * d + h * dh, L, dh, st).noalias() += p.rightCols(L).transpose() * gout;
                      RowMat dp(L, P + L);
                      dp.rightCols(L).noalias() = gout * vh.transpose();
                      if (P > 0) dp.leftCols(P).noalias() = gout * ConstStrided(pvi->data.data() + h * dh, P, dh, st).transpose();
                      // softmax Jacobian over every visible column; masked p are 0
                      RowMat ds(L, P + L);
                      for (Eigen::Index i = 0; i < L; ++i) {
                        const double dot = p.row(i).dot(dp.row(i));
                        ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
                      }
                      ds *= inv_sqrt;
                      if (dq) {
                        MutStrided gq(dq + off * d + h * dh, L, dh, st);
                        gq.noalias() += ds.rightCols(L) * kh;
                        if (P > 0) gq.noalias() += ds.leftCols(P) * ConstStrided(pki->data.data() + h * dh, P, dh, st);
                      }
                      if (dk) MutStrided(dk + off * d + h * dh, L, dh, st).noalias() += ds.rightCols(L).transpose() * qh;
                    }
                    off += len;
                  }
                });
}

Tensor Graph::dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> d(x.size());
  const auto xs = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    (*mask)[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    d[i] = xs[i] * (*mask)[i];
  }
  ImplPtr xi = x.impl();
  return record(Tensor(x.shape(), std::move(d)), {&x}, [xi, mask](Impl& o) {
    auto& g = xi->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (*mask)[i];
  });
}

Tensor Graph::sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  ImplPtr xi = x.impl();
  return record(Tensor::scalar(s), {&x}, [xi](Impl& o) {
    auto& g = xi->ensure_grad();
    for (auto& gv : g) gv += o.grad[0];
  });
}

Tensor Graph::cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const std::size_t m = logits.rows(), c = logits.cols();
  if (targets.size() != m)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  const auto ls = logits.data();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < m; ++r) {
    const int t = targets[r];
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= c)
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
    const double* row = ls.data() + r * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lz = std::log(z);
    for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] = std::exp(row[j] - mx - lz);
    total += -(row[t] - mx - lz);
    ++counted;
  }
  if (counted == 0) throw SizeError("cross_entropy: every target is ignored");
  const double inv = 1.0 / static_cast<double>(counted);
  ImplPtr li = logits.impl();
  std::vector<int> tv(targets.begin(), targets.end());
  return record(Tensor::scalar(total * inv), {&logits}, [li, probs, tv = std::move(tv), c, inv](Impl& o) {
    auto& g = li->ensure_grad();
    const double go = o.grad[0] * inv;
    for (std::size_t r = 0; r < tv.size(); ++r) {
      if (tv[r] == kIgnoreTarget) continue;
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += go * (*probs)[r * c + j];
      g[r * c + static_cast<std::size_t>(tv[r])] -= go;
    }
  });
}

Tensor Graph::softmax_cross_entropy(const Tensor& logits, int target) {
  if (logits.rows() != 1) throw DimensionError("softmax_cross_entropy: expected one row, got " + shape_string(logits.shape()));
  if (target < 0) throw IndexError("softmax_cross_entropy: negative target");
  const int t[1] = {target};
  return cross_entropy(logits, t);
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any trainable tensor");
  auto& g = loss.impl()->ensure_grad();
  g[0] += 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(*it->output);
    it->output->grad.clear();
    it->output->grad.shrink_to_fit();
  }
  tape_.clear();
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw SizeError("softmax of empty row");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

double cross_entropy_value(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size())
    throw IndexError("cross_entropy: target " + std::to_string(target) + " outside [0, " +
                     std::to_string(logits.size()) + ")");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return -(logits[target] - mx - std::log(z));
}

}  // namespace adaptsec
