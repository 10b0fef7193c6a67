#include "amoe/component_kb.hpp"
#include "amoe/synthetic.hpp"
#include "test_util.hpp"

#include <doctest.h>

using namespace amoe;

namespace {

std::vector<int> brute_nearest(const Tensor& p, const Tensor& c) {
  std::vector<int> out;
  for (std::size_t i = 0; i < p.rows; ++i) {
    int best = 0;
    double bd = 1e300;
    for (std::size_t j = 0; j < c.rows; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < p.cols; ++k) d += (p(i, k) - c(j, k)) * (p(i, k) - c(j, k));
      if (d < bd) bd = d, best = static_cast<int>(j);
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace

TEST_CASE("nearest centroid matches brute force") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    const Tensor p = testutil::random_tensor(200, 5, rng), c = testutil::random_tensor(7, 5, rng);
    CHECK(nearest_centroid(p, c) == brute_nearest(p, c));
  }
  Tensor p(1, 1, 0.0), c(2, 1);
  c.data = {1.0, -1.0};
  CHECK(nearest_centroid(p, c) == std::vector<int>{0});
}

TEST_CASE("two blobs are recovered exactly and inertia never increases") {
  std::mt19937_64 rng(2);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor p = testutil::random_tensor(400, 3, rng, 0.3);
    std::vector<double> m0(3, 0.0), m1(3, 0.0);
    for (std::size_t i = 0; i < 400; ++i)
      for (std::size_t k = 0; k < 3; ++k) {
        if (i % 2) p(i, k) += 10.0;
        (i % 2 ? m1 : m0)[k] += p(i, k) / 200.0;
      }
    const auto r = kmeans_fit(p, 2, seed);
    const int c0 = r.assignment[0];
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(std::abs(r.centroids(static_cast<std::size_t>(c0), k) - m0[k]) < 1e-6);
      CHECK(std::abs(r.centroids(static_cast<std::size_t>(1 - c0), k) - m1[k]) < 1e-6);
    }
    for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
      CHECK(r.inertia_history[i] <= r.inertia_history[i - 1] + 1e-9);
    CHECK(r.inertia == doctest::Approx(inertia_of(p, r.centroids, r.assignment)));
  }
}

TEST_CASE("inertia is monotone on random data and zero with one cluster per point") {
  std::mt19937_64 rng(3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor p = testutil::random_tensor(150, 4, rng);
    const auto r = kmeans_fit(p, 6, seed);
    for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
      CHECK(r.inertia_history[i] <= r.inertia_history[i - 1] + 1e-9);
  }
  const Tensor p = testutil::random_tensor(9, 3, rng);
  CHECK(kmeans_fit(p, 9, 0).inertia == doctest::Approx(0.0).scale(1.0));
  CHECK_THROWS(kmeans_fit(p, 10, 0));
  CHECK(kmeans_fit(p, 4, 11).centroids.data == kmeans_fit(p, 4, 11).centroids.data);
}

TEST_CASE("pooling then scattering reproduces per-component means") {
  Tensor f(6, 2);
  f.data = {1, 1, 3, 3, 10, 0, 20, 0, 5, 5, 7, 7};
  ComponentMasks m;
  m.grid = {2, 3};
  m.k_c = 4;
  m.assignment = {0, 0, 2, 2, 3, 3};
  const auto pooled = masked_avg_pool(f, m);
  CHECK(pooled.component_ids == std::vector<int>{0, 2, 3});
  CHECK(pooled.embeddings(0, 0) == 2.0);
  CHECK(pooled.embeddings(1, 0) == 15.0);
  CHECK(pooled.embeddings(2, 1) == 6.0);

  std::vector<double> col0;
  for (std::size_t i = 0; i < pooled.embeddings.rows; ++i) col0.push_back(pooled.embeddings(i, 0));
  const Tensor s = scatter_component_scores(col0, pooled.component_ids, m);
  CHECK(s.rows == 2);
  CHECK(s.cols == 3);
  const std::vector<double> expect{2, 2, 15, 15, 6, 6};
  CHECK(s.data == expect);
}

TEST_CASE("knowledge base fitting on synthetic data") {
  SyntheticConfig cfg;
  cfg.n_classes = 2;
  cfg.train_per_class = 4;
  cfg.test_per_class = 2;
  cfg.grid_h = cfg.grid_w = 6;
  cfg.dim = 8;
  const Dataset ds = gen_synthetic(cfg);
  KbFitOptions opt;
  opt.k_c = 4;
  const ComponentKB kb = fit_component_kb(ds, opt);
  CHECK(kb.classes.size() == 2);
  CHECK(kb.at("class1").centroids.rows == 4);
  CHECK_THROWS(kb.at("nope"));

  const Tensor f = fuse_target(ds.classes[0].test[0].bundle, all_layers(ds.classes[0].test[0].bundle));
  const auto masks = assign_masks(f, kb, "class0", {6, 6});
  CHECK(masks.assignment == nearest_centroid(f, kb.at("class0").centroids));

  // sub-sampling cap still yields k_c centroids
  opt.max_points = 10;
  CHECK(fit_component_kb(ds, opt).at("class0").centroids.rows == 4);
}
