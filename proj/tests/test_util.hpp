#pragma once

#include <random>

#include "sgzero/tensor.hpp"

namespace sgz::testing {

inline Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t({r, c}, 0.0);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

inline Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
  Tensor out({perm.size(), t.cols()}, 0.0);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) out(i, j) = t(perm[i], j);
  return out;
}

}  // namespace sgz::testing
