#include "amoe/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <stdexcept>

namespace amoe {

void SyntheticConfig::validate() const {
  if (n_classes == 0 || train_per_class == 0) throw std::invalid_argument("synthetic: need at least one class and training sample");
  if (grid_h < 2 || grid_w < 2 || dim == 0) throw std::invalid_argument("synthetic: grid must be at least 2x2");
  if (manifold_rank == 0 || manifold_rank >= dim) throw std::invalid_argument("synthetic: require 0 < manifold_rank < dim");
  if (anomaly_fraction < 0.0 || anomaly_fraction > 1.0) throw std::invalid_argument("synthetic: anomaly_fraction outside [0,1]");
  const double s = anomaly_mix.local + anomaly_mix.component + anomaly_mix.global;
  if (anomaly_mix.local < 0 || anomaly_mix.component < 0 || anomaly_mix.global < 0 || std::abs(s - 1.0) > 1e-9)
    throw std::invalid_argument("synthetic: anomaly_mix must be non-negative and sum to 1");
  if (noise_std < 0 || patch_spread < 0 || sample_jitter < 0) throw std::invalid_argument("synthetic: negative spread");
}

namespace {

constexpr std::size_t kRegions = 4;  // 2x2 layout blocks

struct ClassModel {
  std::vector<double> basis;                    // dim x rank
  std::vector<double> offset;                   // dim
  std::vector<double> cls_offset;               // dim
  std::vector<std::vector<double>> centres;     // kRegions x rank
  std::array<std::size_t, kRegions> layout{};   // block -> component id
};

class Generator {
 public:
  explicit Generator(const SyntheticConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
    const std::size_t r = cfg.manifold_rank, d = cfg.dim;
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
      ClassModel m;
      m.basis.resize(d * r);
      for (auto& v : m.basis) v = normal() / std::sqrt(static_cast<double>(r));
      m.offset.resize(d);
      for (auto& v : m.offset) v = 0.5 * normal();
      m.cls_offset.resize(d);
      for (auto& v : m.cls_offset) v = normal();
      // Component centres: spaced on a scaled simplex-like random set with a
      // minimum pairwise separation so K-means can recover them.
      while (m.centres.size() < kRegions) {
        std::vector<double> cand(r);
        for (auto& v : cand) v = 2.0 * normal();
        bool ok = true;
        for (const auto& other : m.centres) {
          double dist = 0.0;
          for (std::size_t i = 0; i < r; ++i) dist += (cand[i] - other[i]) * (cand[i] - other[i]);
          ok = ok && std::sqrt(dist) > 2.0;
        }
        if (ok) m.centres.push_back(std::move(cand));
      }
      for (std::size_t i = 0; i < kRegions; ++i) m.layout[i] = i;
      std::shuffle(m.layout.begin(), m.layout.end(), rng_);
      classes_.push_back(std::move(m));
    }
  }

  Dataset run() {
    Dataset ds;
    ds.seed = cfg_.seed;
    for (std::size_t c = 0; c < cfg_.n_classes; ++c) {
      ClassSplit split;
      split.class_id = "class" + std::to_string(c);
      for (std::size_t i = 0; i < cfg_.train_per_class; ++i)
        split.train.push_back(sample(c, "none", split.class_id + "_train_" + std::to_string(i)));
      const auto n_anom = static_cast<std::size_t>(std::llround(cfg_.anomaly_fraction * static_cast<double>(cfg_.test_per_class)));
      const auto types = anomaly_schedule(n_anom);
      for (std::size_t i = 0; i < cfg_.test_per_class; ++i) {
        const std::string type = i < n_anom ? types[i] : "none";
        split.test.push_back(sample(c, type, split.class_id + "_test_" + std::to_string(i)));
      }
      ds.classes.push_back(std::move(split));
    }
    return ds;
  }

 private:
  double normal() { return gauss_(rng_); }
  double uniform() { return unif_(rng_); }

  std::vector<std::string> anomaly_schedule(std::size_t n) {
    // Largest-remainder apportionment of n anomalies over the mix.
    const std::array<double, 3> w{cfg_.anomaly_mix.local, cfg_.anomaly_mix.component, cfg_.anomaly_mix.global};
    const std::array<const char*, 3> names{"local", "component", "global"};
    std::array<std::size_t, 3> cnt{};
    std::array<double, 3> rem{};
    std::size_t used = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double exact = w[i] * static_cast<double>(n);
      cnt[i] = static_cast<std::size_t>(std::floor(exact));
      rem[i] = exact - static_cast<double>(cnt[i]);
      used += cnt[i];
    }
    while (used < n) {
      const auto i = static_cast<std::size_t>(std::max_element(rem.begin(), rem.end()) - rem.begin());
      ++cnt[i];
      rem[i] = -1.0;
      ++used;
    }
    std::vector<std::string> out;
    for (std::size_t i = 0; i < 3; ++i) out.insert(out.end(), cnt[i], names[i]);
    return out;
  }

  std::size_t block_of(std::size_t y, std::size_t x) const {
    const std::size_t by = y < cfg_.grid_h / 2 ? 0 : 1;
    const std::size_t bx = x < cfg_.grid_w / 2 ? 0 : 1;
    return by * 2 + bx;
  }

  void embed(const ClassModel& m, const std::vector<double>& latent, float* out) {
    const std::size_t r = cfg_.manifold_rank;
    for (std::size_t d = 0; d < cfg_.dim; ++d) {
      double v = m.offset[d] + cfg_.noise_std * normal();
      for (std::size_t i = 0; i < r; ++i) v += m.basis[d * r + i] * latent[i];
      out[d] = static_cast<float>(v);
    }
  }

  DatasetEntry sample(std::size_t c, const std::string& type, const std::string& id) {
    const ClassModel& m = classes_[c];
    const std::size_t h = cfg_.grid_h, w = cfg_.grid_w, d = cfg_.dim, r = cfg_.manifold_rank, n = h * w;

    std::array<std::size_t, kRegions> content = m.layout;
    std::vector<std::vector<double>> centres = m.centres;
    std::vector<std::uint8_t> mask(n, 0);

    // Per-sample jitter of every component centre.
    for (auto& cen : centres)
      for (auto& v : cen) v += cfg_.sample_jitter * normal();

    std::size_t anomalous_block = kRegions;  // component anomaly target
    if (type == "component") {
      anomalous_block = static_cast<std::size_t>(uniform() * kRegions) % kRegions;
      std::size_t donor_class = c;
      if (cfg_.n_classes > 1) {
        donor_class = (c + 1 + static_cast<std::size_t>(uniform() * static_cast<double>(cfg_.n_classes - 1)) %
                                   (cfg_.n_classes - 1)) % cfg_.n_classes;
        const auto donor_comp = static_cast<std::size_t>(uniform() * kRegions) % kRegions;
        centres[content[anomalous_block]] = classes_[donor_class].centres[donor_comp];
      } else {
        for (auto& v : centres[content[anomalous_block]]) v = 2.0 * normal();
      }
    } else if (type == "global") {
      const auto a = static_cast<std::size_t>(uniform() * kRegions) % kRegions;
      const auto b = (a + 1 + static_cast<std::size_t>(uniform() * (kRegions - 1)) % (kRegions - 1)) % kRegions;
      std::swap(content[a], content[b]);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t blk = block_of(y, x);
          if (blk == a || blk == b) mask[y * w + x] = 1;
        }
    }

    FeatureBundle b;
    b.sample_id = id;
    b.class_id = "class" + std::to_string(c);
    b.grid_h = h;
    b.grid_w = w;
    b.dim = d;
    b.patch_embeddings.assign(n * d, 0.0f);
    std::vector<double> latent(r);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t blk = block_of(y, x);
        const auto& cen = centres[content[blk]];
        for (std::size_t i = 0; i < r; ++i) latent[i] = cen[i] + cfg_.patch_spread * normal();
        embed(m, latent, b.patch_embeddings.data() + (y * w + x) * d);
        if (blk == anomalous_block) mask[y * w + x] = 1;
      }

    if (type == "local") {
      const std::size_t bs = std::max<std::size_t>(2, std::min(h, w) / 4);
      const auto y0 = static_cast<std::size_t>(uniform() * static_cast<double>(h - bs + 1)) % (h - bs + 1);
      const auto x0 = static_cast<std::size_t>(uniform() * static_cast<double>(w - bs + 1)) % (w - bs + 1);
      for (std::size_t y = y0; y < y0 + bs; ++y)
        for (std::size_t x = x0; x < x0 + bs; ++x) {
          float* p = b.patch_embeddings.data() + (y * w + x) * d;
          for (std::size_t k = 0; k < d; ++k) p[k] = static_cast<float>(m.offset[k] + normal());
          mask[y * w + x] = 1;
        }
    }

    b.cls_embedding.assign(d, 0.0f);
    for (std::size_t k = 0; k < d; ++k) {
      double s = 0.0;
      for (std::size_t p = 0; p < n; ++p) s += b.patch_embeddings[p * d + k];
      b.cls_embedding[k] = static_cast<float>(s / static_cast<double>(n) + m.cls_offset[k]);
    }
    for (std::size_t l = 0; l < cfg_.extra_layers; ++l) {
      std::vector<float> layer(b.patch_embeddings);
      for (auto& v : layer) v = static_cast<float>(v + cfg_.noise_std * normal());
      b.layer_stack.push_back(std::move(layer));
    }

    const bool anomalous = type != "none";
    b.label = anomalous ? Label::Anomalous : Label::Normal;
    if (anomalous) b.pixel_mask = mask;
    else if (id.find("_test_") != std::string::npos) b.pixel_mask = std::vector<std::uint8_t>(n, 0);

    DatasetEntry e;
    e.bundle = std::move(b);
    e.anomaly_type = type;
    return e;
  }

  SyntheticConfig cfg_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> gauss_{0.0, 1.0};
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
  std::vector<ClassModel> classes_;
};

}  // namespace

Dataset gen_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  return Generator(cfg).run();
}

}  // namespace amoe
