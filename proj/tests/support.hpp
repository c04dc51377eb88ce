#pragma once

#include <cmath>
#include <vector>

#include "refgame/diffcore.hpp"
#include "refgame/rng.hpp"

namespace refgame::testing {

inline diff::Tensor random_tensor(diff::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  diff::Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

/// Rows of positive entries summing to one.
inline diff::Tensor random_distribution(std::size_t rows, std::size_t cols, Rng& rng) {
  diff::Tensor t({rows, cols});
  auto d = t.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += d[r * cols + c] = rng.uniform(0.1, 1.0);
    for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] /= z;
  }
  return t;
}

/// Weighted sum with fixed pseudo-random weights, so a scalar loss depends on
/// every output element with a distinct coefficient.
inline diff::Tensor probe_loss(diff::Tape& tape, const diff::Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  diff::Tensor w(y.shape());
  for (auto& v : w.mutable_data()) v = rng.uniform(-1.0, 1.0);
  return diff::sum(tape, diff::mul(tape, y, w));
}

}  // namespace refgame::testing
