#include "amoe/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace amoe {

std::vector<int> select_topk(std::span<const double> logits, std::size_t k) {
  if (k == 0 || k > logits.size()) throw std::invalid_argument("select_topk: require 1 <= K <= N_exp");
  std::vector<int> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  idx.resize(k);
  return idx;
}

std::vector<int> select_group_constrained(std::span<const double> logits, std::span<const std::size_t> group_sizes,
                                          std::size_t k) {
  if (k == 0 || k > logits.size()) throw std::invalid_argument("select_group_constrained: require 1 <= K <= N_exp");
  if (std::accumulate(group_sizes.begin(), group_sizes.end(), std::size_t{0}) != logits.size())
    throw std::invalid_argument("select_group_constrained: group sizes do not cover the experts");
  std::vector<int> best;
  std::size_t base = 0;
  for (std::size_t g : group_sizes) {
    if (g > 0) {
      auto sub = logits.subspan(base, g);
      best.push_back(static_cast<int>(base) + static_cast<int>(select_topk(sub, 1).front()));
    }
    base += g;
  }
  auto by_logit = [&](int a, int b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); };
  std::sort(best.begin(), best.end(), by_logit);
  if (best.size() > k) best.resize(k);
  std::vector<bool> taken(logits.size(), false);
  for (int i : best) taken[i] = true;
  for (int i : select_topk(logits, logits.size())) {
    if (best.size() >= k) break;
    if (!taken[i]) {
      best.push_back(i);
      taken[i] = true;
    }
  }
  std::sort(best.begin(), best.end(), by_logit);
  return best;
}

std::vector<double> restricted_softmax(std::span<const double> logits, std::span<const int> selected) {
  std::vector<double> gates(logits.size(), 0.0);
  double mx = -INFINITY;
  for (int j : selected) mx = std::max(mx, logits[j]);
  double z = 0.0;
  for (int j : selected) z += std::exp(logits[j] - mx);
  for (int j : selected) gates[j] = std::exp(logits[j] - mx) / z;
  return gates;
}

RoutingDecision route(std::span<const double> cls, const RouterParams& params) {
  const Tensor& w = params.w_gate;
  if (cls.size() != w.cols)
    throw std::invalid_argument("route: cls has dim " + std::to_string(cls.size()) + ", router expects " + std::to_string(w.cols));
  RoutingDecision d;
  d.logits.assign(w.rows, 0.0);
  for (std::size_t j = 0; j < w.rows; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < w.cols; ++i) s += w(j, i) * cls[i];
    d.logits[j] = s;
  }
  d.topk = params.group_constrained ? select_group_constrained(d.logits, params.group_sizes, params.k)
                                    : select_topk(d.logits, params.k);
  d.gates = restricted_softmax(d.logits, d.topk);
  return d;
}

BatchRoutingStats batch_stats(const Tensor& gates, const std::vector<std::vector<int>>& selected, double capacity) {
  if (selected.size() != gates.rows || gates.rows == 0) throw std::invalid_argument("batch_stats: shape");
  BatchRoutingStats s;
  s.batch = gates.rows;
  s.capacity = capacity;
  s.importance.assign(gates.cols, 0.0);
  s.counts.assign(gates.cols, 0);
  for (std::size_t b = 0; b < gates.rows; ++b) {
    for (std::size_t j = 0; j < gates.cols; ++j) s.importance[j] += gates(b, j);
    for (int j : selected[b]) ++s.counts[j];
  }
  for (double& p : s.importance) p /= static_cast<double>(gates.rows);
  return s;
}

EsbTerms esb_loss(const BatchRoutingStats& stats, const Tensor& logits_batch, const EsbWeights& w) {
  const std::size_t n = stats.importance.size();
  if (stats.counts.size() != n || (logits_batch.size() > 0 && logits_batch.cols != n))
    throw std::invalid_argument("esb_loss: inconsistent expert count");
  EsbTerms t;
  // N * sum P^2 written as N * sum q^2 / (sum q)^2 with q = P / max P: equal
  // on the simplex, and exactly 1 when all P_j coincide.
  const double pmax = n ? *std::max_element(stats.importance.begin(), stats.importance.end()) : 0.0;
  if (pmax > 0.0) {
    double sq = 0.0, s1 = 0.0;
    for (double p : stats.importance) {
      const double q = p / pmax;
      sq += q * q;
      s1 += q;
    }
    t.importance = static_cast<double>(n) * sq / (s1 * s1);
  }
  for (int c : stats.counts) {
    const double over = std::max(static_cast<double>(c) - stats.capacity, 0.0);
    t.load += over * over;
  }
  if (logits_batch.rows > 0) {
    for (double v : logits_batch.data) t.z += v * v;
    t.z /= static_cast<double>(logits_batch.rows);
  }
  t.total = w.importance * t.importance + w.load * t.load + w.z * t.z;
  return t;
}

EsbGraph esb_loss_graph(const ad::Var& logits, const ad::Var& gates, const std::vector<int>& counts, double capacity,
                        const EsbWeights& w) {
  const double n = static_cast<double>(logits->value.cols);
  const double b = static_cast<double>(logits->value.rows);
  auto importance = ad::scale(ad::sum_squares(ad::col_mean(gates)), n);
  auto load = ad::load_loss_st(logits, counts, capacity);
  auto z = ad::scale(ad::sum_squares(logits), 1.0 / b);
  EsbGraph g;
  g.terms.importance = ad::scalar(importance);
  g.terms.load = ad::scalar(load);
  g.terms.z = ad::scalar(z);
  g.total = ad::add(ad::add(ad::scale(importance, w.importance), ad::scale(load, w.load)), ad::scale(z, w.z));
  g.terms.total = ad::scalar(g.total);
  return g;
}

std::size_t default_capacity(std::size_t batch, std::size_t k, std::size_t n_experts, double factor) {
  if (batch == 0 || k == 0 || n_experts == 0 || factor <= 0.0) throw std::invalid_argument("default_capacity: non-positive input");
  const std::size_t base = (batch * k + n_experts - 1) / n_experts;
  return static_cast<std::size_t>(std::ceil(static_cast<double>(base) * factor));
}

}  // namespace amoe
