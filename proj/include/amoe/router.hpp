#pragma once

#include "amoe/autodiff.hpp"
#include "amoe/tensor.hpp"

#include <span>
#include <vector>

namespace amoe {

struct RoutingDecision {
  std::vector<double> logits;  // N_exp
  std::vector<int> topk;       // sorted by descending logit, ties to lowest index
  std::vector<double> gates;   // N_exp, zero outside topk
};

// Top-K over the concatenated expert list. Ties are broken by lowest index.
std::vector<int> select_topk(std::span<const double> logits, std::size_t k);

// One pick per group first (best expert of each group, keeping the K best
// groups when K < number of groups), remaining slots filled by global top-K.
std::vector<int> select_group_constrained(std::span<const double> logits, std::span<const std::size_t> group_sizes,
                                          std::size_t k);

struct RouterParams {
  Tensor w_gate;  // N_exp x D
  std::size_t k = 3;
  bool group_constrained = false;
  std::vector<std::size_t> group_sizes;  // used only in constrained mode

  std::size_t num_experts() const { return w_gate.rows; }
};

RoutingDecision route(std::span<const double> cls, const RouterParams& params);

// Restricted softmax of `logits` over `selected`.
std::vector<double> restricted_softmax(std::span<const double> logits, std::span<const int> selected);

struct BatchRoutingStats {
  std::vector<double> importance;  // P_j
  std::vector<int> counts;         // C_j
  std::size_t batch = 0;
  double capacity = 0.0;
};

BatchRoutingStats batch_stats(const Tensor& gates, const std::vector<std::vector<int>>& selected, double capacity);

struct EsbWeights {
  double importance = 1.0;
  double load = 1.0;
  double z = 1.0;
};

struct EsbTerms {
  double importance = 0.0;
  double load = 0.0;
  double z = 0.0;
  double total = 0.0;
};

// Value-only evaluation: N_exp * sum P^2, sum max(C - cap, 0)^2, (1/B) sum logits^2.
EsbTerms esb_loss(const BatchRoutingStats& stats, const Tensor& logits_batch, const EsbWeights& w);

struct EsbGraph {
  ad::Var total;
  EsbTerms terms;
};

// Differentiable version. Importance flows through the sparse gates, the
// z-term through the full logits and the load term through the soft count.
EsbGraph esb_loss_graph(const ad::Var& logits, const ad::Var& gates, const std::vector<int>& counts, double capacity,
                        const EsbWeights& w);

// ceil(ceil(B*K/N_exp) * factor)
std::size_t default_capacity(std::size_t batch, std::size_t k, std::size_t n_experts, double factor = 1.25);

}  // namespace amoe
