#include "amoe/gradcheck.hpp"

#include "amoe/synthetic.hpp"

#include <chrono>
#include <cmath>

namespace amoe {

nlohmann::json GradcheckReport::to_json() const {
  nlohmann::json j = {{"passed", passed}, {"loss", loss}, {"max_rel_err", max_rel_err}, {"seconds", seconds}};
  j["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors)
    j["tensors"].push_back({{"name", t.name},
                            {"size", t.size},
                            {"rel_err", t.rel_err},
                            {"analytic_norm", t.analytic_norm},
                            {"fd_norm", t.fd_norm},
                            {"passed", t.passed}});
  return j;
}

std::vector<TensorCheck> compare_gradients(const ParamList& params, const std::function<ad::Var()>& loss, double eps,
                                           double tolerance) {
  for (const auto& p : params) p.var->grad = Tensor();
  ad::backward(loss());
  std::vector<TensorCheck> out;
  for (const auto& p : params) {
    Tensor analytic = p.var->grad.empty() ? Tensor(p.var->value.rows, p.var->value.cols) : p.var->grad;
    TensorCheck tc;
    tc.name = p.name;
    tc.size = p.var->value.size();
    double diff = 0.0, na = 0.0, nf = 0.0;
    for (std::size_t i = 0; i < tc.size; ++i) {
      double& x = p.var->value.data[i];
      const double saved = x;
      x = saved + eps;
      const double up = loss()->value.data[0];
      x = saved - eps;
      const double down = loss()->value.data[0];
      x = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double a = analytic.data[i];
      diff += (a - fd) * (a - fd);
      na += a * a;
      nf += fd * fd;
    }
    tc.analytic_norm = std::sqrt(na);
    tc.fd_norm = std::sqrt(nf);
    const double denom = std::max(tc.analytic_norm, tc.fd_norm);
    tc.rel_err = denom < 1e-12 ? 0.0 : std::sqrt(diff) / denom;
    tc.passed = tc.rel_err < tolerance;
    out.push_back(tc);
  }
  for (const auto& p : params) p.var->grad = Tensor();
  return out;
}

GradcheckReport gradcheck(const GradcheckOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticConfig sc;
  sc.n_classes = 2;
  sc.train_per_class = std::max<std::size_t>(opt.batch, 4);
  sc.test_per_class = 2;
  sc.grid_h = sc.grid_w = opt.grid;
  sc.dim = opt.dim;
  sc.manifold_rank = std::min<std::size_t>(2, opt.dim);
  sc.seed = opt.seed;
  const Dataset ds = gen_synthetic(sc);

  ModelConfig mc;
  mc.dim = opt.dim;
  mc.grid = {opt.grid, opt.grid};
  mc.n_patch = mc.n_component = mc.n_global = opt.experts_per_group;
  mc.top_k = mc.num_experts();
  mc.identity_init = false;
  mc.kb_clusters = 2;
  mc.seed = opt.seed;
  AnomalyMoE model(mc);
  KbFitOptions ko;
  ko.k_c = mc.kb_clusters;
  ko.seed = opt.seed;
  model.kb() = fit_component_kb(ds, ko);

  std::vector<PreparedSample> samples;
  for (const auto& c : ds.classes)
    for (const auto& e : c.train)
      if (samples.size() < opt.batch) samples.push_back(model.prepare(e.bundle));
  std::vector<const PreparedSample*> batch;
  for (const auto& s : samples) batch.push_back(&s);

  LossOptions lo;
  lo.lambda_esb = opt.lambda_esb;
  lo.lambda_eir = opt.lambda_eir;
  lo.update_club = false;
  const std::uint64_t step_seed = opt.seed + 1;
  auto loss = [&] { return model.forward_loss(batch, step_seed, lo).total; };

  GradcheckReport rep;
  rep.loss = loss()->value.data[0];
  rep.tensors = compare_gradients(model.parameters(), loss, opt.eps, opt.tolerance);
  rep.passed = true;
  for (const auto& t : rep.tensors) {
    rep.max_rel_err = std::max(rep.max_rel_err, t.rel_err);
    rep.passed = rep.passed && t.passed;
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace amoe
