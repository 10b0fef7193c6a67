#pragma once

#include "amoe/experts.hpp"
#include "amoe/feature_io.hpp"
#include "amoe/tensor.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace amoe {

struct KMeansResult {
  Tensor centroids;                     // k x D
  std::vector<int> assignment;          // per point
  double inertia = 0.0;                 // of `assignment` w.r.t. `centroids`
  std::size_t iterations = 0;
  std::vector<double> inertia_history;  // one entry per assignment step
};

// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded to
// the point farthest from its current centroid. Throws if points.rows < k.
KMeansResult kmeans_fit(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t max_iter = 100,
                        double tol = 1e-6);

// argmin squared Euclidean distance, ties to the lowest centroid index.
std::vector<int> nearest_centroid(const Tensor& points, const Tensor& centroids);
double inertia_of(const Tensor& points, const Tensor& centroids, std::span<const int> assignment);

struct ClassKB {
  Tensor centroids;
  double inertia = 0.0;
  std::size_t iterations = 0;
};

struct ComponentKB {
  std::size_t k_c = 8;
  std::map<std::string, ClassKB> classes;

  const ClassKB& at(const std::string& class_id) const;
};

struct ComponentMasks {
  GridShape grid;
  std::size_t k_c = 0;
  std::vector<int> assignment;  // grid.h * grid.w values in [0, k_c)
};

ComponentMasks assign_masks(const Tensor& f_target, const ComponentKB& kb, const std::string& class_id, GridShape grid);

struct PooledComponents {
  Tensor embeddings;               // present components x D
  std::vector<int> component_ids;  // ascending ids of non-empty components
};

PooledComponents masked_avg_pool(const Tensor& f_target, const ComponentMasks& masks);

// Each cell receives the score of its component; scores[i] belongs to ids[i].
Tensor scatter_component_scores(std::span<const double> scores, std::span<const int> ids, const ComponentMasks& masks);

struct KbFitOptions {
  std::size_t k_c = 8;
  std::size_t max_points = 100000;
  std::uint64_t seed = 0;
  std::size_t max_iter = 100;
  double tol = 1e-6;
};

// Fits one KB entry per class on the fused targets of its normal training bundles.
ComponentKB fit_component_kb(const Dataset& ds, const KbFitOptions& opt);

}  // namespace amoe
