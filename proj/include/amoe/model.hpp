#pragma once

#include "amoe/component_kb.hpp"
#include "amoe/eir.hpp"
#include "amoe/experts.hpp"
#include "amoe/feature_io.hpp"
#include "amoe/router.hpp"
#include "amoe/scoring.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <vector>

namespace amoe {

struct ModelConfig {
  std::size_t dim = 0;
  GridShape grid;
  std::size_t n_patch = 6;
  std::size_t n_component = 6;
  std::size_t n_global = 6;
  std::size_t top_k = 3;
  bool group_constrained = false;
  std::size_t patch_depth = 2;
  std::size_t patch_ffn = 0;             // 0 -> dim
  std::size_t component_bottleneck = 0;  // 0 -> max(1, dim/8)
  std::vector<std::size_t> global_channels;
  bool identity_init = true;
  std::size_t kb_clusters = 8;
  CorruptionConfig corruption;
  double capacity_factor = 1.25;
  EsbWeights esb;
  std::size_t club_hidden = 0;
  double club_lr = 1e-3;
  std::uint64_t seed = 0;

  std::size_t num_experts() const { return n_patch + n_component + n_global; }
  std::array<std::size_t, kNumGroups> group_sizes() const { return {n_patch, n_component, n_global}; }
  void validate() const;
};

// A training/test sample with everything the experts consume precomputed.
struct PreparedSample {
  std::string class_id;
  Label label = Label::Normal;
  Tensor target;  // F_target, N x D
  Tensor cls;     // 1 x D
  ComponentMasks masks;
  PooledComponents pooled;
};

struct LossOptions {
  double lambda_esb = 0.01;
  double lambda_eir = 1e-4;
  bool freeze_gates = false;
  bool corrupt = true;       // apply patch-input corruption to activated experts
  bool update_club = false;  // one ClubNet step on detached representations first
};

struct LossBreakdown {
  double total = 0.0;
  double rec = 0.0;
  EsbTerms esb;
  double eir = 0.0;
  std::size_t eir_pairs = 0;
  std::vector<double> importance;  // P_j
  std::vector<int> counts;         // C_j
  std::array<double, kNumGroups> gate_mass{};  // batch-mean gate mass per group
};

struct ForwardResult {
  ad::Var total;
  LossBreakdown parts;
};

class AnomalyMoE {
 public:
  explicit AnomalyMoE(const ModelConfig& cfg);
  // Parameters are shared handles, so a copy would alias them.
  AnomalyMoE(const AnomalyMoE&) = delete;
  AnomalyMoE& operator=(const AnomalyMoE&) = delete;
  AnomalyMoE(AnomalyMoE&&) = default;
  AnomalyMoE& operator=(AnomalyMoE&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ExpertKind kind_of(std::size_t expert) const;
  std::size_t local_index(std::size_t expert) const;

  // Router + all experts (the parameters optimized by the main objective).
  ParamList parameters() const;
  // ClubNet parameters, prefixed per group/pair.
  ParamList club_parameters() const;
  std::vector<ClubGroup>& club_groups() { return clubs_; }
  const std::vector<ClubGroup>& club_groups() const { return clubs_; }

  ComponentKB& kb() { return kb_; }
  const ComponentKB& kb() const { return kb_; }
  ScoreStats& score_stats() { return stats_; }
  const ScoreStats& score_stats() const { return stats_; }

  RouterParams router_params() const;
  const ad::Var& gate_weights() const { return w_gate_; }

  PreparedSample prepare(const FeatureBundle& b) const;

  // Training objective over a batch of prepared normal samples. All randomness
  // (corruption, negative permutation) derives from step_seed.
  ForwardResult forward_loss(const std::vector<const PreparedSample*>& batch, std::uint64_t step_seed,
                             const LossOptions& opt);

  // Routes, runs the activated experts without corruption and fills the group
  // maps; aggregation is left to the caller.
  AnomalyResult infer(const PreparedSample& s) const;

  const std::vector<PatchExpert>& patch_experts() const { return patch_; }
  const std::vector<ComponentExpert>& component_experts() const { return component_; }
  const std::vector<GlobalExpert>& global_experts() const { return global_; }

 private:
  ModelConfig cfg_;
  ad::Var w_gate_;  // N_exp x D
  std::vector<PatchExpert> patch_;
  std::vector<ComponentExpert> component_;
  std::vector<GlobalExpert> global_;
  std::vector<ClubGroup> clubs_;
  ComponentKB kb_;
  ScoreStats stats_;
};

}  // namespace amoe
