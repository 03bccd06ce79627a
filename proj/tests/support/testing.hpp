#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "adaptsec/model.hpp"
#include "adaptsec/rng.hpp"
#include "adaptsec/tensor.hpp"

namespace adaptsec::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Relative error of the analytic gradient of every parameter against central
/// finite differences of `loss`, measured per tensor as
/// ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12).
/// The loss closure must be deterministic (reseed any dropout inside it).
inline std::vector<double> gradient_errors(const std::function<Tensor(Graph&)>& loss, std::vector<Tensor> params,
                                           double h = 1e-5) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Graph g;
    g.backward(loss(g));
  }
  // Finite differences only need loss values, so stop recording a tape.
  std::vector<std::vector<double>> grads;
  for (auto& p : params) {
    std::vector<double> a(p.grad().begin(), p.grad().end());
    a.resize(p.size(), 0.0);
    grads.push_back(std::move(a));
    p.set_requires_grad(false);
  }
  std::vector<double> errors;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    // A leaf the loss never touched has no gradient buffer; that means zeros.
    const std::vector<double>& analytic = grads[k];
    auto data = p.mutable_data();
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      double up;
      {
        Graph g;
        up = loss(g).item();
      }
      data[i] = keep - h;
      double down;
      {
        Graph g;
        down = loss(g).item();
      }
      data[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
    errors.push_back(std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-12));
  }
  return errors;
}

/// A small model over the standard vocabulary; cheap enough for exhaustive checks.
inline ModelConfig tiny_config(std::size_t layers = 1, std::size_t context = 96) {
  ModelConfig c = ModelConfig::desk();
  c.d_model = 16;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = context;
  return c;
}

inline std::shared_ptr<const MiniLM> tiny_model(std::uint64_t seed = 7, std::size_t layers = 1, std::size_t context = 96) {
  Rng rng(seed);
  return std::make_shared<const MiniLM>(MiniLM::init(tiny_config(layers, context), rng));
}

}  // namespace adaptsec::testing
