#pragma once

#include "amoe/feature_io.hpp"

#include <cstdint>

namespace amoe {

struct AnomalyMix {
  double local = 1.0 / 3.0;
  double component = 1.0 / 3.0;
  double global = 1.0 / 3.0;
};

// Synthetic feature generator. Normal patches of a class lie on a
// class-specific affine manifold of rank `manifold_rank`; the grid is split
// into 2x2 layout blocks, each holding one latent "component" whose centre is
// well separated from the others so K-means can find it.
struct SyntheticConfig {
  std::size_t n_classes = 3;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 60;
  double anomaly_fraction = 0.5;  // of the test split
  std::size_t grid_h = 14;
  std::size_t grid_w = 14;
  std::size_t dim = 32;
  std::size_t manifold_rank = 4;
  std::size_t extra_layers = 0;   // additional encoder layers in layer_stack
  double noise_std = 0.02;        // isotropic off-manifold noise on normal patches
  double patch_spread = 0.35;     // within-component latent spread
  double sample_jitter = 0.15;    // per-sample component centre jitter
  AnomalyMix anomaly_mix;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

// Deterministic under cfg.seed. Test anomalies cycle through the mix in
// proportion; DatasetEntry::anomaly_type records "local", "component" or "global".
Dataset gen_synthetic(const SyntheticConfig& cfg);

}  // namespace amoe
