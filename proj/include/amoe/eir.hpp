#pragma once

#include "amoe/autodiff.hpp"
#include "amoe/nn.hpp"
#include "amoe/optimizer.hpp"

#include <random>
#include <span>
#include <vector>

namespace amoe {

// Variational Gaussian q(z_k | z_j) for the CLUB mutual-information bound:
// two MLPs predicting the mean and the (clamped) log-variance.
struct ClubNetConfig {
  std::size_t dim = 0;     // representation dim D_r
  std::size_t hidden = 0;  // 0 -> max(dim, 8)
  double lr = 1e-3;
  double logvar_min = -10.0;
  double logvar_max = 10.0;
};

class ClubNet {
 public:
  ClubNet(const ClubNetConfig& cfg, std::mt19937_64& rng);

  struct Prediction {
    ad::Var mu;
    ad::Var logvar;
  };
  // frozen=true evaluates with detached parameters (no gradient to the net).
  Prediction predict(const ad::Var& z_j, bool frozen) const;

  void collect(const std::string& prefix, ParamList& out) const;
  AdamW& optimizer() { return opt_; }
  const AdamW& optimizer() const { return opt_; }
  const ClubNetConfig& config() const { return cfg_; }

 private:
  ClubNetConfig cfg_;
  Linear mu1_, mu2_, lv1_, lv2_;
  AdamW opt_;
};

// Per-row Gaussian log density (value-level wrapper over the autodiff op).
std::vector<double> gaussian_loglik(const Tensor& z, const Tensor& mu, const Tensor& logvar);

// mean_b log q(z_k[b] | z_j[b]) - mean_b log q(z_k[perm[b]] | z_j[b])
ad::Var club_estimate(const ad::Var& z_j, const ad::Var& z_k, const ClubNet& net, std::span<const int> perm);
double club_estimate(const Tensor& z_j, const Tensor& z_k, const ClubNet& net, std::span<const int> perm);

// One optimizer step maximizing the positive-pair log-likelihood on detached
// inputs. Returns the mean log-likelihood before the step.
double club_net_update(const Tensor& z_j, const Tensor& z_k, ClubNet& net);

std::vector<int> random_permutation(std::size_t n, std::mt19937_64& rng);

// Nets for one group: one per unordered pair (j < k) in lexicographic order.
struct ClubGroup {
  std::size_t n_experts = 0;
  std::vector<ClubNet> nets;

  static std::size_t pair_index(std::size_t j, std::size_t k, std::size_t n);
};

ClubGroup make_club_group(std::size_t n_experts, const ClubNetConfig& cfg, std::mt19937_64& rng);

// Sum of CLUB estimates over all unordered pairs of every group. reps[g][j] is
// the B x D_r representation of expert j in group g; perms[g][pair] the
// negative-sampling permutation of that pair.
struct EirResult {
  ad::Var loss;
  std::size_t pair_terms = 0;
};
EirResult eir_loss(const std::vector<std::vector<ad::Var>>& reps, const std::vector<ClubGroup>& groups,
                   const std::vector<std::vector<std::vector<int>>>& perms);

}  // namespace amoe
