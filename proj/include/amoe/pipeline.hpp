#pragma once

#include "amoe/checkpoint.hpp"
#include "amoe/config.hpp"
#include "amoe/evaluate.hpp"
#include "amoe/model.hpp"
#include "amoe/trainer.hpp"

#include <iosfwd>
#include <memory>
#include <vector>

namespace amoe {

// Fills model.dim and model.grid from the dataset (or checks them if set).
void bind_model_to_data(RunConfig& cfg, const Dataset& ds);

struct TrainRun {
  std::unique_ptr<AnomalyMoE> model;
  std::vector<StepMetrics> metrics;
  double seconds = 0.0;
};

// Trains for cfg.train.iterations steps (counting steps already done in
// `resume`), then computes the score statistics. Each step's metrics are
// written as one JSON line to `metrics_out` when given. If `checkpoint_path`
// is non-empty a checkpoint is written there at the end and every
// `checkpoint_every` steps.
TrainRun train_model(RunConfig cfg, const Dataset& ds, std::ostream* metrics_out = nullptr,
                     const Checkpoint* resume = nullptr, const std::filesystem::path& checkpoint_path = {},
                     std::size_t checkpoint_every = 0);

// Per-expert importance P_j averaged over the last `window` steps (all steps
// if fewer were run).
std::vector<double> mean_importance(const std::vector<StepMetrics>& metrics, std::size_t window);

// Mean total loss over the `window` steps ending at 1-based step `end`.
double windowed_loss(const std::vector<StepMetrics>& metrics, std::size_t end, std::size_t window);

}  // namespace amoe
