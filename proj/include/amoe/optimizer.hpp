#pragma once

#include "amoe/nn.hpp"

namespace amoe {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  // StableAdamW-style update clipping: per tensor, the step size is divided
  // by max(1, RMS(g / sqrt(v_hat))), i.e. the update RMS is clipped at 1.
  bool update_clipping = true;
};

// AdamW with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
 public:
  struct Slot {
    Tensor m;
    Tensor v;
  };

  AdamW() = default;
  AdamW(ParamList params, AdamConfig cfg);

  void zero_grad();
  void step();

  const ParamList& params() const { return params_; }
  const AdamConfig& config() const { return cfg_; }
  AdamConfig& config() { return cfg_; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  std::uint64_t t_ = 0;
};

}  // namespace amoe
