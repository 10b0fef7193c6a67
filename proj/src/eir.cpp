#include "amoe/eir.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace amoe {

ClubNet::ClubNet(const ClubNetConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  if (cfg_.dim == 0) throw std::invalid_argument("ClubNet: dim must be positive");
  if (cfg_.hidden == 0) cfg_.hidden = std::max<std::size_t>(cfg_.dim, 8);
  mu1_ = Linear(cfg_.dim, cfg_.hidden, rng);
  mu2_ = Linear(cfg_.hidden, cfg_.dim, rng);
  lv1_ = Linear(cfg_.dim, cfg_.hidden, rng);
  lv2_ = Linear(cfg_.hidden, cfg_.dim, rng, 0.1);
  ParamList params;
  collect("club", params);
  AdamConfig ac;
  ac.lr = cfg_.lr;
  ac.weight_decay = 0.0;
  ac.update_clipping = false;
  opt_ = AdamW(std::move(params), ac);
}

ClubNet::Prediction ClubNet::predict(const ad::Var& z_j, bool frozen) const {
  auto use = [frozen](const Linear& l) {
    if (!frozen) return l;
    Linear c;
    c.w = ad::detach(l.w);
    c.b = ad::detach(l.b);
    return c;
  };
  const Linear m1 = use(mu1_), m2 = use(mu2_), l1 = use(lv1_), l2 = use(lv2_);
  Prediction p;
  p.mu = m2(ad::gelu(m1(z_j)));
  p.logvar = ad::clamp(l2(ad::gelu(l1(z_j))), cfg_.logvar_min, cfg_.logvar_max);
  return p;
}

void ClubNet::collect(const std::string& prefix, ParamList& out) const {
  mu1_.collect(prefix + ".mu1", out);
  mu2_.collect(prefix + ".mu2", out);
  lv1_.collect(prefix + ".lv1", out);
  lv2_.collect(prefix + ".lv2", out);
}

std::vector<double> gaussian_loglik(const Tensor& z, const Tensor& mu, const Tensor& logvar) {
  return ad::gaussian_loglik(ad::constant(z), ad::constant(mu), ad::constant(logvar))->value.data;
}

ad::Var club_estimate(const ad::Var& z_j, const ad::Var& z_k, const ClubNet& net, std::span<const int> perm) {
  const std::size_t b = z_j->value.rows;
  if (b < 2) throw std::invalid_argument("club_estimate: batch size must be >= 2");
  if (z_k->value.rows != b || perm.size() != b) throw std::invalid_argument("club_estimate: batch sizes differ");
  const auto pred = net.predict(z_j, true);
  auto positive = ad::mean(ad::gaussian_loglik(z_k, pred.mu, pred.logvar));
  auto shuffled = ad::gather_rows(z_k, std::vector<int>(perm.begin(), perm.end()), 1);
  auto negative = ad::mean(ad::gaussian_loglik(shuffled, pred.mu, pred.logvar));
  return ad::sub(positive, negative);
}

double club_estimate(const Tensor& z_j, const Tensor& z_k, const ClubNet& net, std::span<const int> perm) {
  return ad::scalar(club_estimate(ad::constant(z_j), ad::constant(z_k), net, perm));
}

double club_net_update(const Tensor& z_j, const Tensor& z_k, ClubNet& net) {
  if (z_j.rows < 2 || z_k.rows != z_j.rows) throw std::invalid_argument("club_net_update: need matching batches of size >= 2");
  auto& opt = net.optimizer();
  opt.zero_grad();
  const auto pred = net.predict(ad::constant(z_j), false);
  auto ll = ad::mean(ad::gaussian_loglik(ad::constant(z_k), pred.mu, pred.logvar));
  const double before = ad::scalar(ll);
  ad::backward(ad::scale(ll, -1.0));
  opt.step();
  return before;
}

std::vector<int> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

std::size_t ClubGroup::pair_index(std::size_t j, std::size_t k, std::size_t n) {
  if (!(j < k && k < n)) throw std::out_of_range("ClubGroup::pair_index");
  // pairs before row j: sum_{i<j} (n-1-i)
  return j * (2 * n - j - 1) / 2 + (k - j - 1);
}

ClubGroup make_club_group(std::size_t n_experts, const ClubNetConfig& cfg, std::mt19937_64& rng) {
  ClubGroup g;
  g.n_experts = n_experts;
  for (std::size_t j = 0; j < n_experts; ++j)
    for (std::size_t k = j + 1; k < n_experts; ++k) g.nets.emplace_back(cfg, rng);
  return g;
}

EirResult eir_loss(const std::vector<std::vector<ad::Var>>& reps, const std::vector<ClubGroup>& groups,
                   const std::vector<std::vector<std::vector<int>>>& perms) {
  if (reps.size() != groups.size() || perms.size() != groups.size()) throw std::invalid_argument("eir_loss: group count mismatch");
  EirResult r;
  r.loss = ad::constant(Tensor(1, 1));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const std::size_t n = groups[g].n_experts;
    if (reps[g].size() != n) throw std::invalid_argument("eir_loss: representation count mismatch");
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = j + 1; k < n; ++k) {
        const std::size_t p = ClubGroup::pair_index(j, k, n);
        r.loss = ad::add(r.loss, club_estimate(reps[g][j], reps[g][k], groups[g].nets[p], perms[g][p]));
        ++r.pair_terms;
      }
  }
  return r;
}

}  // namespace amoe
