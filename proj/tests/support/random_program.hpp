#pragma once

#include "testing.hpp"

namespace adaptsec::testing {

// One random differentiable program over a handful of leaves. The structure
// is a pure function of `seed`, so finite differences replay the same graph.
struct RandomProgram {
  std::uint64_t seed;
  std::vector<Tensor> leaves;  // x, w, w2, bias, gamma, beta, table
  Tensor prefix_k, prefix_v, readout;

  explicit RandomProgram(std::uint64_t s) : seed(s) {
    Rng rng(seed);
    leaves = {random_tensor({4, 6}, rng), random_tensor({6, 6}, rng, 0.5), random_tensor({6, 6}, rng, 0.5),
              random_tensor({6}, rng, 0.3),  random_tensor({6}, rng, 0.3),  random_tensor({6}, rng, 0.3),
              random_tensor({10, 6}, rng)};
    prefix_k = random_tensor({3, 6}, rng);
    prefix_v = random_tensor({3, 6}, rng);
    readout = random_tensor({64, 6}, rng);
  }

  Tensor operator()(Graph& g) const {
    Rng rng(seed ^ 0x5eedULL);
    const Tensor &x = leaves[0], &w = leaves[1], &w2 = leaves[2], &bias = leaves[3], &gamma = leaves[4],
                 &beta = leaves[5], &table = leaves[6];
    Tensor h = x;
    const std::size_t depth = 3 + rng.below(6);
    for (std::size_t step = 0; step < depth; ++step) {
      switch (rng.below(13)) {
        case 0: h = g.matmul(h, w); break;
        case 1: h = g.matmul_nt(h, w2); break;
        case 2: h = g.add(h, g.matmul(h, w2)); break;
        case 3: h = g.add_bias(h, bias); break;
        case 4: h = g.mul(h, g.tanh(h)); break;
        case 5: h = g.scale(h, rng.uniform(-1.5, 1.5)); break;
        case 6: h = g.gelu(h); break;
        case 7: h = g.tanh(h); break;
        case 8: h = g.layer_norm(h, gamma, beta); break;
        case 9: {
          std::vector<std::uint32_t> ids{static_cast<std::uint32_t>(rng.below(10)),
                                         static_cast<std::uint32_t>(rng.below(10))};
          const Tensor parts[] = {h, g.embedding(table, ids)};
          h = g.concat_rows(parts);
          break;
        }
        case 10: {
          std::vector<std::size_t> rows(1 + rng.below(h.rows() + 1));
          for (auto& r : rows) r = rng.below(h.rows());
          h = g.gather_rows(h, rows);
          break;
        }
        case 11: {
          const std::size_t heads = rng.bernoulli(0.5) ? 2 : 3;
          std::vector<std::size_t> segs;
          for (std::size_t left = h.rows(); left > 0;) {
            const std::size_t n = 1 + rng.below(left);
            segs.push_back(n);
            left -= n;
          }
          std::vector<double> slopes;
          if (rng.bernoulli(0.5))
            for (std::size_t i = 0; i < heads; ++i) slopes.push_back(rng.uniform(0.0, 1.0));
          AttentionPrefix pre;
          if (rng.bernoulli(0.5)) pre = {&prefix_k, &prefix_v};
          h = g.causal_attention(g.matmul(h, w), g.matmul(h, w2), h, heads, segs, pre, slopes);
          break;
        }
        default: h = g.dropout(h, 0.3, rng); break;
      }
    }
    if (rng.bernoulli(0.5)) {
      std::vector<int> targets(h.rows());
      for (auto& t : targets) t = rng.bernoulli(0.2) ? kIgnoreTarget : static_cast<int>(rng.below(6));
      targets[0] = static_cast<int>(rng.below(6));
      return g.cross_entropy(h, targets);
    }
    std::vector<std::size_t> rows(h.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return g.sum(g.mul(h, g.gather_rows(readout, rows)));
  }
};

}  // namespace adaptsec::testing
