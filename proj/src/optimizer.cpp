#include "amoe/optimizer.hpp"

#include <algorithm>
#include <cmath>

namespace amoe {

AdamW::AdamW(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) slots_.push_back({Tensor(p.var->value.rows, p.var->value.cols), Tensor(p.var->value.rows, p.var->value.cols)});
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.var->grad = Tensor();
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& node = *params_[i].var;
    if (node.grad.empty()) continue;  // no gradient reached this tensor
    auto& s = slots_[i];
    const std::size_t n = node.value.size();
    double rms = 0.0;
    for (std::size_t e = 0; e < n; ++e) {
      const double g = node.grad.data[e];
      s.m.data[e] = cfg_.beta1 * s.m.data[e] + (1.0 - cfg_.beta1) * g;
      s.v.data[e] = cfg_.beta2 * s.v.data[e] + (1.0 - cfg_.beta2) * g * g;
      const double vhat = s.v.data[e] / bc2;
      rms += g * g / std::max(vhat, cfg_.eps * cfg_.eps);
    }
    rms = std::sqrt(rms / static_cast<double>(n));
    const double lr = cfg_.update_clipping ? cfg_.lr / std::max(1.0, rms) : cfg_.lr;
    for (std::size_t e = 0; e < n; ++e) {
      const double mhat = s.m.data[e] / bc1;
      const double vhat = s.v.data[e] / bc2;
      node.value.data[e] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * node.value.data[e]);
    }
  }
}

}  // namespace amoe
