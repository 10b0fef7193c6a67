#pragma once

#include "amoe/autodiff.hpp"
#include "amoe/nn.hpp"
#include "amoe/tensor.hpp"

#include <random>
#include <vector>

namespace amoe {

enum class ExpertKind { Patch = 0, Component = 1, Global = 2 };
const char* to_string(ExpertKind k);

// ---------------------------------------------------------------------------
// Input corruption for patch experts: Gaussian noise then inverted dropout.

struct CorruptionConfig {
  double noise_std = 0.1;  // relative to the global feature std of the batch
  double dropout_p = 0.2;
  bool enabled_at_inference = false;

  void validate() const;
};

// Population std over all elements.
double global_feature_std(const Tensor& f);

// Noise std = cfg.noise_std * feature_std. With p == 1 every element is zeroed.
Tensor corrupt(const Tensor& f, const CorruptionConfig& cfg, std::mt19937_64& rng, double feature_std);
Tensor corrupt(const Tensor& f, const CorruptionConfig& cfg, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Linear attention with phi(x) = elu(x) + 1, single sequence, O(N d^2).

inline constexpr double kAttentionEps = 1e-6;

Tensor phi(const Tensor& x);
Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// ---------------------------------------------------------------------------
// Patch expert: pre-norm transformer decoder blocks with linear attention.
// The final output projection is zero-initialised on a residual path, so a
// freshly built expert is the identity map.

struct PatchExpertConfig {
  std::size_t dim = 0;
  std::size_t depth = 2;
  std::size_t ffn_width = 0;  // 0 -> dim
  bool identity_init = true;
};

class PatchExpert {
 public:
  PatchExpert(const PatchExpertConfig& cfg, std::mt19937_64& rng);

  // x: (S * seq_len) x D, S independent samples stacked.
  ad::Var forward(const ad::Var& x, std::size_t seq_len) const;
  Tensor forward(const Tensor& f) const;  // one sample, N x D

  void collect(const std::string& prefix, ParamList& out) const;
  const PatchExpertConfig& config() const { return cfg_; }

 private:
  struct Block {
    LayerNorm ln1, ln2;
    Linear wq, wk, wv, wo, ff1, ff2;
  };
  PatchExpertConfig cfg_;
  std::vector<Block> blocks_;
  LayerNorm ln_out_;
  Linear out_;
};

// ---------------------------------------------------------------------------
// Component expert: MLP autoencoder over pooled component embeddings.

struct ComponentExpertConfig {
  std::size_t dim = 0;
  std::size_t bottleneck = 0;  // 0 -> max(1, dim / 8)
};

class ComponentExpert {
 public:
  ComponentExpert(const ComponentExpertConfig& cfg, std::mt19937_64& rng);

  ad::Var forward(const ad::Var& c) const;  // rows are component embeddings
  Tensor forward(const Tensor& c) const;

  void collect(const std::string& prefix, ParamList& out) const;
  std::size_t bottleneck() const { return bottleneck_; }

 private:
  std::size_t bottleneck_;
  Linear enc1_, enc2_, dec1_, dec2_;
};

// ---------------------------------------------------------------------------
// Global expert: convolutional autoencoder over the feature grid. Each entry
// of `channels` is a stride-2 3x3 conv in the encoder; the decoder mirrors it
// with nearest upsampling + 3x3 conv and ends in a 1x1 projection to D.

struct GlobalExpertConfig {
  std::size_t dim = 0;
  std::vector<std::size_t> channels;  // empty -> {max(1,D/2), max(1,D/4)}
};

struct GridShape {
  std::size_t h = 0;
  std::size_t w = 0;
};

class GlobalExpert {
 public:
  GlobalExpert(const GlobalExpertConfig& cfg, std::mt19937_64& rng);

  // x: (batch * h * w) x D in row-major grid order per sample.
  ad::Var forward(const ad::Var& x, std::size_t batch, GridShape grid) const;
  Tensor forward(const Tensor& f, GridShape grid) const;

  // Spatial sizes after each encoder stage, starting with the input grid.
  std::vector<GridShape> encoder_shapes(GridShape grid) const;

  void collect(const std::string& prefix, ParamList& out) const;

 private:
  std::vector<std::size_t> channels_;
  std::size_t dim_;
  std::vector<Linear> enc_, dec_;
  Linear head_;
};

// im2col index table for a 3x3 convolution with padding 1.
std::vector<int> conv3x3_table(std::size_t batch, GridShape in, std::size_t stride, GridShape& out);
// Nearest-neighbour resize table.
std::vector<int> resize_table(std::size_t batch, GridShape in, GridShape out);

// ---------------------------------------------------------------------------
// Losses and score maps (value-level).

// mean over rows of 1 - cos(target_i, rec_i)
double patch_loss(const Tensor& target, const Tensor& rec);
// per-row 1 - cos, returned as grid_h x grid_w
Tensor patch_score(const Tensor& target, const Tensor& rec, GridShape grid);

double component_loss(const Tensor& c, const Tensor& c_rec);
std::vector<double> component_scores(const Tensor& c, const Tensor& c_rec);

// mean over all elements of the squared error
double global_loss(const Tensor& target, const Tensor& rec);
// per-patch squared Euclidean distance over channels, grid_h x grid_w
Tensor global_score(const Tensor& target, const Tensor& rec, GridShape grid);

}  // namespace amoe
