#pragma once

// Central finite-difference oracle for f64 gradients. Independent of the
// backward closures: it only calls forward.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "tssl/ops.hpp"
#include "tssl/rng.hpp"

namespace tssl::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error with a unit floor on the denominator so that entries whose true
// gradient is ~0 are compared absolutely.
inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

inline GradCheckResult grad_check(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> leaves,
                                  double eps = 1e-6) {
  for (auto& l : leaves) l.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    if (l.has_grad())
      analytic.emplace_back(l.grad().begin(), l.grad().end());
    else
      analytic.emplace_back(l.size(), 0.0);
  }
  GradCheckResult res;
  NoGradGuard guard;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto data = leaves[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double up = loss_fn().item();
      data[i] = orig - eps;
      const double down = loss_fn().item();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      res.max_rel_error = std::max(res.max_rel_error, rel_error(analytic[k][i], numeric));
      ++res.checked;
    }
  }
  return res;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

// sum(w * y) with fixed random w turns any output into a scalar with O(1) sensitivity.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, 1.0, false)));
}

}  // namespace tssl::testing
