#include "amoe/nn.hpp"

#include <cmath>

namespace amoe {

Tensor randn(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor t(rows, cols);
  for (double& v : t.data) v = stddev * dist(rng);
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, double gain)
    : w(ad::parameter(randn(in, out, gain / std::sqrt(static_cast<double>(in)), rng))),
      b(ad::parameter(Tensor(1, out))) {}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", w});
  out.push_back({prefix + ".b", b});
}

void Linear::zero() {
  w->value.fill(0.0);
  b->value.fill(0.0);
}

LayerNorm::LayerNorm(std::size_t dim) : gamma(ad::parameter(Tensor(1, dim, 1.0))), beta(ad::parameter(Tensor(1, dim))) {}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

}  // namespace amoe
