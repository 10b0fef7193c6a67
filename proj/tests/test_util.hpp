#pragma once

#include "amoe/autodiff.hpp"
#include "amoe/tensor.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace testutil {

inline amoe::Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  amoe::Tensor t(r, c);
  for (double& v : t.data) v = nd(rng);
  return t;
}

inline double max_abs_diff(const amoe::Tensor& a, const amoe::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// Relative error between the reverse-mode gradient of `f` w.r.t. each input
// and a central finite difference computed here independently.
inline double fd_rel_error(const std::vector<amoe::ad::Var>& inputs, const std::function<amoe::ad::Var()>& f,
                           double eps = 1e-6) {
  for (auto& v : inputs) v->grad = amoe::Tensor();
  amoe::ad::backward(f());
  double worst = 0.0;
  for (auto& v : inputs) {
    double diff = 0.0, na = 0.0, nf = 0.0;
    for (std::size_t i = 0; i < v->value.size(); ++i) {
      const double saved = v->value.data[i];
      v->value.data[i] = saved + eps;
      const double up = f()->value.data[0];
      v->value.data[i] = saved - eps;
      const double dn = f()->value.data[0];
      v->value.data[i] = saved;
      const double fd = (up - dn) / (2 * eps);
      const double a = v->grad.empty() ? 0.0 : v->grad.data[i];
      diff += (a - fd) * (a - fd);
      na += a * a;
      nf += fd * fd;
    }
    const double den = std::max(std::sqrt(na), std::sqrt(nf));
    if (den > 1e-12) worst = std::max(worst, std::sqrt(diff) / den);
  }
  return worst;
}

}  // namespace testutil
