#pragma once

#include "amoe/autodiff.hpp"

#include <random>
#include <string>
#include <vector>

namespace amoe {

struct NamedParam {
  std::string name;
  ad::Var var;
};
using ParamList = std::vector<NamedParam>;

// Dense layer y = x W + b with W stored in x out. Weights ~ N(0, gain^2 / in).
struct Linear {
  ad::Var w;
  ad::Var b;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng, double gain = 1.0);
  ad::Var operator()(const ad::Var& x) const { return ad::linear(x, w, b); }
  void collect(const std::string& prefix, ParamList& out) const;
  void zero();
};

struct LayerNorm {
  ad::Var gamma;
  ad::Var beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  ad::Var operator()(const ad::Var& x) const { return ad::layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamList& out) const;
};

Tensor randn(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng);

}  // namespace amoe
