#include "amoe/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <stdexcept>
#include <ostream>

namespace amoe {

void bind_model_to_data(RunConfig& cfg, const Dataset& ds) {
  ds.validate();
  const auto& first = ds.classes.at(0).train.empty() ? ds.classes.at(0).test.at(0).bundle : ds.classes.at(0).train.at(0).bundle;
  auto check = [](std::size_t& field, std::size_t actual, const char* name) {
    if (field == 0) field = actual;
    if (field != actual)
      throw ConfigError(std::string("model.") + name + "=" + std::to_string(field) + " but the data has " +
                        std::to_string(actual));
  };
  check(cfg.model.dim, first.dim, "dim");
  check(cfg.model.grid.h, first.grid_h, "grid_h");
  check(cfg.model.grid.w, first.grid_w, "grid_w");
  cfg.resolve();
}

TrainRun train_model(RunConfig cfg, const Dataset& ds, std::ostream* metrics_out, const Checkpoint* resume,
                     const std::filesystem::path& checkpoint_path, std::size_t checkpoint_every) {
  const auto t0 = std::chrono::steady_clock::now();
  bind_model_to_data(cfg, ds);
  TrainRun run;
  if (resume) {
    run.model = std::make_unique<AnomalyMoE>(build_model(*resume));
    if (run.model->config().dim != cfg.model.dim)
      throw CheckpointError(CheckpointErrc::ShapeMismatch, "checkpoint dim " + std::to_string(run.model->config().dim) +
                                                               " differs from data dim " + std::to_string(cfg.model.dim));
  } else {
    run.model = std::make_unique<AnomalyMoE>(cfg.model);
  }
  Trainer trainer(*run.model, ds, cfg.train);
  if (resume) restore_trainer(trainer, *resume);

  while (trainer.iteration() < cfg.train.iterations) {
    const auto m = trainer.step();
    if (metrics_out) *metrics_out << m.to_json().dump() << '\n';
    run.metrics.push_back(m);
    if (!checkpoint_path.empty() && checkpoint_every > 0 && m.step % checkpoint_every == 0)
      save_checkpoint(checkpoint_path, cfg, *run.model, &trainer);
  }
  if (metrics_out) metrics_out->flush();
  run.model->score_stats() = compute_score_stats(*run.model, ds);
  if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, cfg, *run.model, &trainer);
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

std::vector<double> mean_importance(const std::vector<StepMetrics>& metrics, std::size_t window) {
  if (metrics.empty()) throw std::invalid_argument("mean_importance: no metrics");
  const std::size_t n = std::min(window == 0 ? metrics.size() : window, metrics.size());
  std::vector<double> out(metrics.back().loss.importance.size(), 0.0);
  for (std::size_t i = metrics.size() - n; i < metrics.size(); ++i)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += metrics[i].loss.importance[j] / static_cast<double>(n);
  return out;
}

double windowed_loss(const std::vector<StepMetrics>& metrics, std::size_t end, std::size_t window) {
  if (end == 0 || end > metrics.size() || window == 0) throw std::invalid_argument("windowed_loss: bad range");
  const std::size_t lo = end > window ? end - window : 0;
  double s = 0.0;
  for (std::size_t i = lo; i < end; ++i) s += metrics[i].loss.total;
  return s / static_cast<double>(end - lo);
}

}  // namespace amoe
