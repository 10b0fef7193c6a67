#include "amoe/component_kb.hpp"

#include "amoe/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace amoe {

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

// Blocked sum with a fixed partition so the total is thread-count independent.
double blocked_sum(const std::vector<double>& v) {
  const std::size_t bs = kernels::kReduceBlock;
  const std::size_t nb = (v.size() + bs - 1) / bs;
  std::vector<double> part(nb, 0.0);
#pragma omp parallel for schedule(static) if (nb > 4)
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(nb); ++b) {
    const std::size_t hi = std::min(v.size(), (b + 1) * bs);
    for (std::size_t i = b * bs; i < hi; ++i) part[b] += v[i];
  }
  double s = 0.0;
  for (double p : part) s += p;
  return s;
}

Tensor kmeanspp(const Tensor& pts, std::size_t k, std::mt19937_64& rng) {
  const std::size_t m = pts.rows, d = pts.cols;
  Tensor cen(k, d);
  std::vector<bool> chosen(m, false);
  std::uniform_int_distribution<std::size_t> pick(0, m - 1);
  std::size_t first = pick(rng);
  chosen[first] = true;
  std::copy_n(pts.data.data() + first * d, d, cen.data.data());
  std::vector<double> d2(m);
  for (std::size_t i = 0; i < m; ++i) d2[i] = sq_dist(pts.data.data() + i * d, cen.data.data(), d);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t c = 1; c < k; ++c) {
    const double total = blocked_sum(d2);
    std::size_t idx = m;
    if (total > 0.0) {
      double r = u(rng) * total;
      for (std::size_t i = 0; i < m; ++i) {
        if (chosen[i] || d2[i] <= 0.0) continue;
        idx = i;
        r -= d2[i];
        if (r <= 0.0) break;
      }
    }
    if (idx == m) {
      // every remaining point coincides with a centre: take the first unused one
      for (std::size_t i = 0; i < m && idx == m; ++i)
        if (!chosen[i]) idx = i;
    }
    chosen[idx] = true;
    double* dst = cen.data.data() + c * d;
    std::copy_n(pts.data.data() + idx * d, d, dst);
    for (std::size_t i = 0; i < m; ++i) d2[i] = std::min(d2[i], sq_dist(pts.data.data() + i * d, dst, d));
  }
  return cen;
}

}  // namespace

std::vector<int> nearest_centroid(const Tensor& points, const Tensor& centroids) {
  if (points.cols != centroids.cols || centroids.rows == 0) throw std::invalid_argument("nearest_centroid: shape");
  const std::size_t d = points.cols, k = centroids.rows;
  std::vector<int> out(points.rows);
#pragma omp parallel for schedule(static) if (points.rows * k * d > 65536)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(points.rows); ++i) {
    const double* p = points.data.data() + i * d;
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double dist = sq_dist(p, centroids.data.data() + c * d, d);
      if (dist < best) {
        best = dist;
        arg = static_cast<int>(c);
      }
    }
    out[i] = arg;
  }
  return out;
}

double inertia_of(const Tensor& points, const Tensor& centroids, std::span<const int> assignment) {
  const std::size_t d = points.cols;
  std::vector<double> per(points.rows);
  for (std::size_t i = 0; i < points.rows; ++i)
    per[i] = sq_dist(points.data.data() + i * d, centroids.data.data() + assignment[i] * d, d);
  return blocked_sum(per);
}

KMeansResult kmeans_fit(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t max_iter, double tol) {
  if (k == 0) throw std::invalid_argument("kmeans_fit: K_c must be >= 1");
  if (points.rows < k)
    throw std::invalid_argument("kmeans_fit: " + std::to_string(points.rows) + " points for K_c=" + std::to_string(k));
  const std::size_t m = points.rows, d = points.cols;
  std::mt19937_64 rng(seed);
  KMeansResult res;
  res.centroids = kmeanspp(points, k, rng);

  for (std::size_t it = 1; it <= std::max<std::size_t>(1, max_iter); ++it) {
    res.iterations = it;
    res.assignment = nearest_centroid(points, res.centroids);
    res.inertia_history.push_back(inertia_of(points, res.centroids, res.assignment));

    Tensor next(k, d);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const auto c = static_cast<std::size_t>(res.assignment[i]);
      ++count[c];
      for (std::size_t j = 0; j < d; ++j) next.data[c * d + j] += points.data[i * d + j];
    }
    std::vector<bool> used(m, false);
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] > 0) {
        for (std::size_t j = 0; j < d; ++j) next.data[c * d + j] /= static_cast<double>(count[c]);
        continue;
      }
      // Empty cluster: move it onto the point farthest from its own centroid.
      double far = -1.0;
      std::size_t arg = 0;
      for (std::size_t i = 0; i < m; ++i) {
        if (used[i]) continue;
        const double dist = sq_dist(points.data.data() + i * d, res.centroids.data.data() + res.assignment[i] * d, d);
        if (dist > far) {
          far = dist;
          arg = i;
        }
      }
      used[arg] = true;
      std::copy_n(points.data.data() + arg * d, d, next.data.data() + c * d);
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c)
      shift = std::max(shift, std::sqrt(sq_dist(next.data.data() + c * d, res.centroids.data.data() + c * d, d)));
    res.centroids = std::move(next);
    if (shift < tol) break;
  }
  res.assignment = nearest_centroid(points, res.centroids);
  res.inertia = inertia_of(points, res.centroids, res.assignment);
  res.inertia_history.push_back(res.inertia);
  return res;
}

const ClassKB& ComponentKB::at(const std::string& class_id) const {
  auto it = classes.find(class_id);
  if (it == classes.end()) throw std::out_of_range("component KB has no entry for class '" + class_id + "'");
  return it->second;
}

ComponentMasks assign_masks(const Tensor& f_target, const ComponentKB& kb, const std::string& class_id, GridShape grid) {
  const ClassKB& entry = kb.at(class_id);
  if (f_target.rows != grid.h * grid.w) throw std::invalid_argument("assign_masks: feature rows do not match grid");
  ComponentMasks m;
  m.grid = grid;
  m.k_c = entry.centroids.rows;
  m.assignment = nearest_centroid(f_target, entry.centroids);
  return m;
}

PooledComponents masked_avg_pool(const Tensor& f_target, const ComponentMasks& masks) {
  const std::size_t d = f_target.cols;
  if (masks.assignment.size() != f_target.rows) throw std::invalid_argument("masked_avg_pool: masks do not cover the grid");
  std::vector<std::size_t> count(masks.k_c, 0);
  Tensor sums(masks.k_c, d);
  for (std::size_t i = 0; i < f_target.rows; ++i) {
    const auto c = static_cast<std::size_t>(masks.assignment[i]);
    ++count[c];
    for (std::size_t j = 0; j < d; ++j) sums.data[c * d + j] += f_target.data[i * d + j];
  }
  PooledComponents out;
  for (std::size_t c = 0; c < masks.k_c; ++c)
    if (count[c] > 0) out.component_ids.push_back(static_cast<int>(c));
  out.embeddings = Tensor(out.component_ids.size(), d);
  for (std::size_t r = 0; r < out.component_ids.size(); ++r) {
    const auto c = static_cast<std::size_t>(out.component_ids[r]);
    for (std::size_t j = 0; j < d; ++j) out.embeddings.data[r * d + j] = sums.data[c * d + j] / static_cast<double>(count[c]);
  }
  return out;
}

Tensor scatter_component_scores(std::span<const double> scores, std::span<const int> ids, const ComponentMasks& masks) {
  if (scores.size() != ids.size()) throw std::invalid_argument("scatter_component_scores: scores/ids size mismatch");
  std::vector<double> lut(masks.k_c, std::numeric_limits<double>::quiet_NaN());
  std::vector<bool> have(masks.k_c, false);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= masks.k_c) throw std::out_of_range("scatter_component_scores: component id");
    lut[ids[i]] = scores[i];
    have[ids[i]] = true;
  }
  Tensor map(masks.grid.h, masks.grid.w);
  for (std::size_t i = 0; i < masks.assignment.size(); ++i) {
    const int c = masks.assignment[i];
    if (!have[c]) throw std::invalid_argument("scatter_component_scores: missing score for component " + std::to_string(c));
    map.data[i] = lut[c];
  }
  return map;
}

ComponentKB fit_component_kb(const Dataset& ds, const KbFitOptions& opt) {
  ComponentKB kb;
  kb.k_c = opt.k_c;
  std::mt19937_64 rng(opt.seed);
  for (const auto& cls : ds.classes) {
    if (cls.train.empty()) continue;
    const std::size_t d = cls.train.front().bundle.dim;
    std::size_t total = 0;
    for (const auto& e : cls.train) total += e.bundle.num_patches();
    // Uniform subsample (seeded) when the pool exceeds max_points.
    std::vector<std::size_t> keep(total);
    std::iota(keep.begin(), keep.end(), 0);
    if (total > opt.max_points) {
      std::shuffle(keep.begin(), keep.end(), rng);
      keep.resize(opt.max_points);
      std::sort(keep.begin(), keep.end());
    }
    Tensor pts(keep.size(), d);
    std::size_t base = 0, next = 0;
    for (const auto& e : cls.train) {
      const Tensor f = fuse_target(e.bundle, all_layers(e.bundle));
      for (; next < keep.size() && keep[next] < base + f.rows; ++next)
        std::copy_n(f.data.data() + (keep[next] - base) * d, d, pts.data.data() + next * d);
      base += f.rows;
    }
    const auto fit = kmeans_fit(pts, std::min(opt.k_c, pts.rows), rng(), opt.max_iter, opt.tol);
    kb.classes[cls.class_id] = ClassKB{fit.centroids, fit.inertia, fit.iterations};
  }
  return kb;
}

}  // namespace amoe
