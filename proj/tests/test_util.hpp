#pragma once

#include <cmath>
#include <vector>

#include "imnet/rng.hpp"
#include "imnet/tensor.hpp"

namespace imnet::testutil {

inline Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  int64_t n = shape_numel(s);
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor(std::move(s), std::move(v));
}

// random values bounded away from zero (for kink-free relu / reciprocal checks)
inline Tensor random_tensor_away_from_zero(Rng& rng, Shape s, double margin = 0.2) {
  int64_t n = shape_numel(s);
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) {
    double m = margin + rng.uniform();
    x = rng.uniform() < 0.5 ? -m : m;
  }
  return Tensor(std::move(s), std::move(v));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double worst = 0;
  auto av = a.data(), bv = b.data();
  for (size_t i = 0; i < av.size(); ++i) worst = std::max(worst, std::fabs(av[i] - bv[i]));
  return worst;
}

}  // namespace imnet::testutil
