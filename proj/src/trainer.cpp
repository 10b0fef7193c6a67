#include "amoe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace amoe {

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (!std::isfinite(lr) || lr < 0.0) throw std::invalid_argument("train: lr must be finite and >= 0");
  if (!std::isfinite(weight_decay) || weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (!(lambda_esb >= 0.0) || !(lambda_eir >= 0.0)) throw std::invalid_argument("train: lambda values must be >= 0");
  if (optimizer != "stable_adamw" && optimizer != "adamw")
    throw std::invalid_argument("train: optimizer must be stable_adamw or adamw, got '" + optimizer + "'");
  if (kb_max_points == 0) throw std::invalid_argument("train: kb_max_points must be positive");
}

nlohmann::json StepMetrics::to_json() const {
  return {{"step", step},
          {"total", loss.total},
          {"rec", loss.rec},
          {"esb", loss.esb.total},
          {"esb_importance", loss.esb.importance},
          {"esb_load", loss.esb.load},
          {"esb_z", loss.esb.z},
          {"eir", loss.eir},
          {"gate_counts", loss.counts},
          {"importance", loss.importance},
          {"gate_mass", loss.gate_mass}};
}

namespace {

AdamConfig adam_config(const TrainConfig& cfg) {
  AdamConfig a;
  a.lr = cfg.lr;
  a.weight_decay = cfg.weight_decay;
  a.update_clipping = cfg.optimizer == "stable_adamw";
  return a;
}

}  // namespace

Trainer::Trainer(AnomalyMoE& model, const Dataset& ds, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), rng_(cfg.seed) {
  cfg_.validate();
  ds.validate();
  if (model_.config().n_component > 0 && model_.kb().classes.empty()) {
    KbFitOptions ko;
    ko.k_c = model_.config().kb_clusters;
    ko.max_points = cfg_.kb_max_points;
    ko.seed = cfg_.seed;
    model_.kb() = fit_component_kb(ds, ko);
  }
  for (const auto& c : ds.classes)
    for (const auto& e : c.train) samples_.push_back(model_.prepare(e.bundle));
  if (samples_.empty()) throw std::invalid_argument("train: dataset has no training samples");
  opt_ = AdamW(model_.parameters(), adam_config(cfg_));
}

std::vector<const PreparedSample*> Trainer::next_batch() {
  std::vector<const PreparedSample*> batch;
  batch.reserve(cfg_.batch_size);
  while (batch.size() < cfg_.batch_size) {
    if (cursor_ >= order_.size()) {
      order_.resize(samples_.size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    batch.push_back(&samples_[order_[cursor_++]]);
  }
  return batch;
}

StepMetrics Trainer::step() {
  const auto batch = next_batch();
  const std::uint64_t step_seed = rng_();
  LossOptions lo;
  lo.lambda_esb = cfg_.lambda_esb;
  lo.lambda_eir = cfg_.lambda_eir;
  lo.freeze_gates = cfg_.freeze_gates;
  lo.corrupt = cfg_.corrupt;
  lo.update_club = cfg_.update_club;

  opt_.zero_grad();
  auto res = model_.forward_loss(batch, step_seed, lo);
  const auto& p = res.parts;
  if (!std::isfinite(p.total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << iteration_ + 1 << ": total=" << p.total << " rec=" << p.rec
       << " esb=" << p.esb.total << " (importance=" << p.esb.importance << " load=" << p.esb.load << " z=" << p.esb.z
       << ") eir=" << p.eir;
    throw NonFiniteLoss(os.str());
  }
  ad::backward(res.total);
  opt_.step();
  ++iteration_;
  return StepMetrics{iteration_, p};
}

void Trainer::run(std::size_t steps, const std::function<void(const StepMetrics&)>& on_step) {
  for (std::size_t i = 0; i < steps; ++i) {
    const auto m = step();
    if (on_step) on_step(m);
  }
}

Trainer::State Trainer::state() const {
  std::ostringstream os;
  os << rng_;
  return State{iteration_, os.str(), order_, cursor_};
}

void Trainer::set_state(const State& s) {
  std::istringstream is(s.rng);
  is >> rng_;
  if (!is) throw std::invalid_argument("trainer: malformed rng state");
  for (std::size_t i : s.order)
    if (i >= samples_.size()) throw std::invalid_argument("trainer: data order refers to a missing sample");
  if (s.cursor > s.order.size()) throw std::invalid_argument("trainer: cursor beyond data order");
  iteration_ = s.iteration;
  order_ = s.order;
  cursor_ = s.cursor;
}

ScoreStats compute_score_stats(const AnomalyMoE& model, const Dataset& ds) {
  ScoreStats out;
  for (const auto& c : ds.classes) {
    std::array<RunningStat, kNumGroups> acc;
    for (const auto& e : c.train) {
      const auto r = model.infer(model.prepare(e.bundle));
      for (std::size_t g = 0; g < kNumGroups; ++g)
        if (r.maps[g])
          for (double v : r.maps[g]->data) acc[g].push(v);
    }
    auto& stats = out.per_class[c.class_id];
    for (std::size_t g = 0; g < kNumGroups; ++g) {
      stats[g].mean = acc[g].mean;
      stats[g].std = acc[g].std();
      stats[g].valid = acc[g].n > 1 && stats[g].std > 1e-12;
    }
  }
  return out;
}

}  // namespace amoe
