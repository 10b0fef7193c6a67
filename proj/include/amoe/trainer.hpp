#pragma once

#include "amoe/model.hpp"
#include "amoe/optimizer.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

namespace amoe {

struct TrainConfig {
  std::size_t iterations = 50000;
  std::size_t batch_size = 16;
  double lr = 5e-4;
  double weight_decay = 1e-4;
  double lambda_esb = 0.01;
  double lambda_eir = 1e-4;
  std::uint64_t seed = 0;
  std::string optimizer = "stable_adamw";  // or "adamw" (no update clipping)
  bool freeze_gates = false;
  bool update_club = true;
  bool corrupt = true;
  std::size_t kb_max_points = 100000;

  void validate() const;
};

struct StepMetrics {
  std::size_t step = 0;  // 1-based index of the completed step
  LossBreakdown loss;

  nlohmann::json to_json() const;
};

// Thrown when the objective becomes NaN/Inf; what() carries the diagnostics.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Owns the optimizer, the prepared training stream and the data order.
// The stream mixes all classes; each epoch is a fresh shuffle drawn from the
// master generator, which also supplies one seed per step.
class Trainer {
 public:
  // Fits the component KB first if the model has none.
  Trainer(AnomalyMoE& model, const Dataset& ds, const TrainConfig& cfg);

  StepMetrics step();
  void run(std::size_t steps, const std::function<void(const StepMetrics&)>& on_step = {});

  std::size_t iteration() const { return iteration_; }
  const TrainConfig& config() const { return cfg_; }
  AdamW& optimizer() { return opt_; }
  const AdamW& optimizer() const { return opt_; }
  const std::vector<PreparedSample>& samples() const { return samples_; }

  // Resumable state.
  struct State {
    std::size_t iteration = 0;
    std::string rng;  // textual mt19937_64 state
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
  };
  State state() const;
  void set_state(const State& s);

 private:
  std::vector<const PreparedSample*> next_batch();

  AnomalyMoE& model_;
  TrainConfig cfg_;
  AdamW opt_;
  std::vector<PreparedSample> samples_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t iteration_ = 0;
};

// Per class and group mean/std of map values over the normal training samples.
ScoreStats compute_score_stats(const AnomalyMoE& model, const Dataset& ds);

}  // namespace amoe
