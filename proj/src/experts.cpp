#include "amoe/experts.hpp"

#include "amoe/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace amoe {

const char* to_string(ExpertKind k) {
  switch (k) {
    case ExpertKind::Patch: return "patch";
    case ExpertKind::Component: return "component";
    case ExpertKind::Global: return "global";
  }
  return "?";
}

void CorruptionConfig::validate() const {
  if (!(dropout_p >= 0.0 && dropout_p <= 1.0)) throw std::invalid_argument("corruption: dropout_p outside [0,1]");
  if (!std::isfinite(noise_std) || noise_std < 0.0) throw std::invalid_argument("corruption: noise_std must be finite and >= 0");
}

double global_feature_std(const Tensor& f) {
  if (f.empty()) return 0.0;
  double mu = 0.0;
  for (double v : f.data) mu += v;
  mu /= static_cast<double>(f.size());
  double var = 0.0;
  for (double v : f.data) var += (v - mu) * (v - mu);
  return std::sqrt(var / static_cast<double>(f.size()));
}

Tensor corrupt(const Tensor& f, const CorruptionConfig& cfg, std::mt19937_64& rng, double feature_std) {
  cfg.validate();
  Tensor out = f;
  if (cfg.dropout_p >= 1.0) {
    out.fill(0.0);
    return out;
  }
  const double sigma = cfg.noise_std * feature_std;
  if (sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& v : out.data) v += noise(rng);
  }
  if (cfg.dropout_p > 0.0) {
    std::bernoulli_distribution drop(cfg.dropout_p);
    const double keep_scale = 1.0 / (1.0 - cfg.dropout_p);
    for (double& v : out.data) v = drop(rng) ? 0.0 : v * keep_scale;
  }
  return out;
}

Tensor corrupt(const Tensor& f, const CorruptionConfig& cfg, std::mt19937_64& rng) {
  return corrupt(f, cfg, rng, global_feature_std(f));
}

Tensor phi(const Tensor& x) { return ad::elu_plus_one(ad::constant(x))->value; }

Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (!q.same_shape(k) || q.rows != v.rows) throw std::invalid_argument("linear_attention: shape mismatch");
  Tensor out, kv, ksum;
  kernels::linear_attention_fwd(phi(q), phi(k), v, q.rows, kAttentionEps, out, kv, ksum);
  return out;
}

// ---------------------------------------------------------------------------

PatchExpert::PatchExpert(const PatchExpertConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  if (cfg_.dim == 0 || cfg_.depth == 0) throw std::invalid_argument("PatchExpert: dim and depth must be positive");
  if (cfg_.ffn_width == 0) cfg_.ffn_width = cfg_.dim;
  const std::size_t d = cfg_.dim;
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    Block b{LayerNorm(d), LayerNorm(d),
            Linear(d, d, rng), Linear(d, d, rng), Linear(d, d, rng), Linear(d, d, rng),
            Linear(d, cfg_.ffn_width, rng), Linear(cfg_.ffn_width, d, rng)};
    blocks_.push_back(std::move(b));
  }
  ln_out_ = LayerNorm(d);
  out_ = Linear(d, d, rng, 0.1);
  if (cfg_.identity_init) out_.zero();
}

ad::Var PatchExpert::forward(const ad::Var& x, std::size_t seq_len) const {
  if (x->value.cols != cfg_.dim) throw std::invalid_argument("PatchExpert: input has " + std::to_string(x->value.cols) + " channels");
  ad::Var h = x;
  for (const auto& b : blocks_) {
    auto a = b.ln1(h);
    auto q = ad::elu_plus_one(b.wq(a));
    auto k = ad::elu_plus_one(b.wk(a));
    auto v = b.wv(a);
    h = ad::add(h, b.wo(ad::linear_attention(q, k, v, seq_len, kAttentionEps)));
    auto f = b.ln2(h);
    h = ad::add(h, b.ff2(ad::gelu(b.ff1(f))));
  }
  return ad::add(x, out_(ln_out_(h)));
}

Tensor PatchExpert::forward(const Tensor& f) const { return forward(ad::constant(f), f.rows)->value; }

void PatchExpert::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto p = prefix + ".block" + std::to_string(i);
    const auto& b = blocks_[i];
    b.ln1.collect(p + ".ln1", out);
    b.wq.collect(p + ".wq", out);
    b.wk.collect(p + ".wk", out);
    b.wv.collect(p + ".wv", out);
    b.wo.collect(p + ".wo", out);
    b.ln2.collect(p + ".ln2", out);
    b.ff1.collect(p + ".ff1", out);
    b.ff2.collect(p + ".ff2", out);
  }
  ln_out_.collect(prefix + ".ln_out", out);
  out_.collect(prefix + ".out", out);
}

// ---------------------------------------------------------------------------

ComponentExpert::ComponentExpert(const ComponentExpertConfig& cfg, std::mt19937_64& rng)
    : bottleneck_(cfg.bottleneck ? cfg.bottleneck : std::max<std::size_t>(1, cfg.dim / 8)) {
  if (cfg.dim == 0) throw std::invalid_argument("ComponentExpert: dim must be positive");
  if (bottleneck_ >= cfg.dim) throw std::invalid_argument("ComponentExpert: bottleneck must be smaller than dim");
  const std::size_t hidden = std::max(2 * bottleneck_, cfg.dim / 2);
  enc1_ = Linear(cfg.dim, hidden, rng);
  enc2_ = Linear(hidden, bottleneck_, rng);
  dec1_ = Linear(bottleneck_, hidden, rng);
  dec2_ = Linear(hidden, cfg.dim, rng);
}

ad::Var ComponentExpert::forward(const ad::Var& c) const {
  auto code = enc2_(ad::gelu(enc1_(c)));
  return dec2_(ad::gelu(dec1_(code)));
}

Tensor ComponentExpert::forward(const Tensor& c) const { return forward(ad::constant(c))->value; }

void ComponentExpert::collect(const std::string& prefix, ParamList& out) const {
  enc1_.collect(prefix + ".enc1", out);
  enc2_.collect(prefix + ".enc2", out);
  dec1_.collect(prefix + ".dec1", out);
  dec2_.collect(prefix + ".dec2", out);
}

// ---------------------------------------------------------------------------

std::vector<int> conv3x3_table(std::size_t batch, GridShape in, std::size_t stride, GridShape& out) {
  out.h = (in.h - 1) / stride + 1;
  out.w = (in.w - 1) / stride + 1;
  std::vector<int> table;
  table.reserve(batch * out.h * out.w * 9);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t oy = 0; oy < out.h; ++oy)
      for (std::size_t ox = 0; ox < out.w; ++ox)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const long iy = static_cast<long>(oy * stride) + ky - 1;
            const long ix = static_cast<long>(ox * stride) + kx - 1;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(in.h) || ix >= static_cast<long>(in.w)) table.push_back(-1);
            else table.push_back(static_cast<int>(b * in.h * in.w + static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix)));
          }
  return table;
}

std::vector<int> resize_table(std::size_t batch, GridShape in, GridShape out) {
  std::vector<int> table;
  table.reserve(batch * out.h * out.w);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t y = 0; y < out.h; ++y)
      for (std::size_t x = 0; x < out.w; ++x) {
        const std::size_t sy = y * in.h / out.h, sx = x * in.w / out.w;
        table.push_back(static_cast<int>(b * in.h * in.w + sy * in.w + sx));
      }
  return table;
}

GlobalExpert::GlobalExpert(const GlobalExpertConfig& cfg, std::mt19937_64& rng) : channels_(cfg.channels), dim_(cfg.dim) {
  if (dim_ == 0) throw std::invalid_argument("GlobalExpert: dim must be positive");
  if (channels_.empty()) channels_ = {std::max<std::size_t>(1, dim_ / 2), std::max<std::size_t>(1, dim_ / 4)};
  std::vector<std::size_t> ch{dim_};
  ch.insert(ch.end(), channels_.begin(), channels_.end());
  for (std::size_t l = 0; l + 1 < ch.size(); ++l) enc_.emplace_back(9 * ch[l], ch[l + 1], rng);
  for (std::size_t l = 0; l + 1 < ch.size(); ++l) {
    const std::size_t out = l == 0 ? ch[1] : ch[l];
    dec_.emplace_back(9 * ch[l + 1], out, rng);
  }
  head_ = Linear(ch[1], dim_, rng);
}

std::vector<GridShape> GlobalExpert::encoder_shapes(GridShape grid) const {
  std::vector<GridShape> shapes{grid};
  for (std::size_t l = 0; l < channels_.size(); ++l) {
    GridShape next;
    conv3x3_table(0, shapes.back(), 2, next);
    shapes.push_back(next);
  }
  return shapes;
}

ad::Var GlobalExpert::forward(const ad::Var& x, std::size_t batch, GridShape grid) const {
  if (x->value.cols != dim_ || x->value.rows != batch * grid.h * grid.w)
    throw std::invalid_argument("GlobalExpert: input shape " + x->value.shape_str() + " does not match grid");
  const auto shapes = encoder_shapes(grid);
  ad::Var h = x;
  for (std::size_t l = 0; l < enc_.size(); ++l) {
    GridShape out;
    auto table = conv3x3_table(batch, shapes[l], 2, out);
    h = ad::gelu(enc_[l](ad::gather_rows(h, std::move(table), 9)));
  }
  for (std::size_t l = dec_.size(); l-- > 0;) {
    h = ad::gather_rows(h, resize_table(batch, shapes[l + 1], shapes[l]), 1);
    GridShape same;
    h = ad::gelu(dec_[l](ad::gather_rows(h, conv3x3_table(batch, shapes[l], 1, same), 9)));
  }
  return head_(h);
}

Tensor GlobalExpert::forward(const Tensor& f, GridShape grid) const { return forward(ad::constant(f), 1, grid)->value; }

void GlobalExpert::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t l = 0; l < enc_.size(); ++l) enc_[l].collect(prefix + ".enc" + std::to_string(l), out);
  for (std::size_t l = 0; l < dec_.size(); ++l) dec_[l].collect(prefix + ".dec" + std::to_string(l), out);
  head_.collect(prefix + ".head", out);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> row_cos_dist(const Tensor& a, const Tensor& b) {
  const auto v = ad::row_cosine_distance(ad::constant(a), ad::constant(b))->value;
  return v.data;
}

Tensor to_grid(std::vector<double> values, GridShape grid) {
  if (values.size() != grid.h * grid.w) throw std::invalid_argument("score map size does not match grid");
  Tensor t(grid.h, grid.w);
  t.data = std::move(values);
  return t;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double patch_loss(const Tensor& target, const Tensor& rec) { return mean_of(row_cos_dist(target, rec)); }

Tensor patch_score(const Tensor& target, const Tensor& rec, GridShape grid) { return to_grid(row_cos_dist(target, rec), grid); }

double component_loss(const Tensor& c, const Tensor& c_rec) {
  if (c.rows == 0) throw std::invalid_argument("component_loss: empty component set");
  return mean_of(row_cos_dist(c, c_rec));
}

std::vector<double> component_scores(const Tensor& c, const Tensor& c_rec) {
  if (c.rows == 0) throw std::invalid_argument("component_scores: empty component set");
  return row_cos_dist(c, c_rec);
}

double global_loss(const Tensor& target, const Tensor& rec) {
  if (!target.same_shape(rec)) throw std::invalid_argument("global_loss: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) s += (target.data[i] - rec.data[i]) * (target.data[i] - rec.data[i]);
  return s / static_cast<double>(target.size());
}

Tensor global_score(const Tensor& target, const Tensor& rec, GridShape grid) {
  if (!target.same_shape(rec)) throw std::invalid_argument("global_score: shape mismatch");
  return to_grid(ad::row_sq_dist(ad::constant(target), ad::constant(rec))->value.data, grid);
}

}  // namespace amoe
