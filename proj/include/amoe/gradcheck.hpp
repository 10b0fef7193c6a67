#pragma once

#include "amoe/model.hpp"

#include <string>
#include <vector>

#include <functional>

#include <json.hpp>

namespace amoe {

struct GradcheckOptions {
  std::size_t dim = 8;
  std::size_t grid = 2;  // grid x grid patches
  std::size_t experts_per_group = 1;
  std::size_t batch = 4;
  double lambda_esb = 0.5;
  double lambda_eir = 0.5;
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct TensorCheck {
  std::string name;
  std::size_t size = 0;
  double rel_err = 0.0;  // ||analytic - fd|| / max(||analytic||, ||fd||)
  double analytic_norm = 0.0;
  double fd_norm = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<TensorCheck> tensors;
  double loss = 0.0;
  double max_rel_err = 0.0;
  bool passed = false;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

// Builds a tiny model (K = number of experts, so routing is fixed under
// perturbation and every load term stays below capacity) on synthetic normals
// and compares the total-loss gradient with central finite differences for
// every router and expert tensor.
GradcheckReport gradcheck(const GradcheckOptions& opt);

// Same comparison for an arbitrary scalar function of a parameter list.
std::vector<TensorCheck> compare_gradients(const ParamList& params, const std::function<ad::Var()>& loss, double eps,
                                           double tolerance);

}  // namespace amoe
