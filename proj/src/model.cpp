#include "amoe/model.hpp"

#include <cmath>
#include <stdexcept>

namespace amoe {

void ModelConfig::validate() const {
  if (dim == 0) throw std::invalid_argument("model: dim must be positive");
  if (grid.h == 0 || grid.w == 0) throw std::invalid_argument("model: grid must be non-empty");
  if (num_experts() == 0) throw std::invalid_argument("model: at least one expert is required");
  if (top_k == 0 || top_k > num_experts())
    throw std::invalid_argument("model: top_k must lie in [1, " + std::to_string(num_experts()) + "]");
  if (capacity_factor <= 0.0) throw std::invalid_argument("model: capacity_factor must be positive");
  if (esb.importance < 0 || esb.load < 0 || esb.z < 0) throw std::invalid_argument("model: ESB weights must be >= 0");
  corruption.validate();
}

AnomalyMoE::AnomalyMoE(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t d = cfg_.dim;
  w_gate_ = ad::parameter(randn(cfg_.num_experts(), d, 0.1 / std::sqrt(static_cast<double>(d)), rng));
  PatchExpertConfig pc{d, cfg_.patch_depth, cfg_.patch_ffn, cfg_.identity_init};
  for (std::size_t i = 0; i < cfg_.n_patch; ++i) patch_.emplace_back(pc, rng);
  ComponentExpertConfig cc{d, cfg_.component_bottleneck};
  for (std::size_t i = 0; i < cfg_.n_component; ++i) component_.emplace_back(cc, rng);
  GlobalExpertConfig gc{d, cfg_.global_channels};
  for (std::size_t i = 0; i < cfg_.n_global; ++i) global_.emplace_back(gc, rng);
  ClubNetConfig club{d, cfg_.club_hidden, cfg_.club_lr};
  for (std::size_t n : cfg_.group_sizes()) clubs_.push_back(make_club_group(n, club, rng));
  kb_.k_c = cfg_.kb_clusters;
}

ExpertKind AnomalyMoE::kind_of(std::size_t expert) const {
  if (expert < cfg_.n_patch) return ExpertKind::Patch;
  if (expert < cfg_.n_patch + cfg_.n_component) return ExpertKind::Component;
  if (expert < cfg_.num_experts()) return ExpertKind::Global;
  throw std::out_of_range("expert index " + std::to_string(expert));
}

std::size_t AnomalyMoE::local_index(std::size_t expert) const {
  switch (kind_of(expert)) {
    case ExpertKind::Patch: return expert;
    case ExpertKind::Component: return expert - cfg_.n_patch;
    case ExpertKind::Global: return expert - cfg_.n_patch - cfg_.n_component;
  }
  return 0;
}

ParamList AnomalyMoE::parameters() const {
  ParamList out{{"router.w_gate", w_gate_}};
  for (std::size_t i = 0; i < patch_.size(); ++i) patch_[i].collect("patch" + std::to_string(i), out);
  for (std::size_t i = 0; i < component_.size(); ++i) component_[i].collect("component" + std::to_string(i), out);
  for (std::size_t i = 0; i < global_.size(); ++i) global_[i].collect("global" + std::to_string(i), out);
  return out;
}

ParamList AnomalyMoE::club_parameters() const {
  ParamList out;
  for (std::size_t g = 0; g < clubs_.size(); ++g)
    for (std::size_t p = 0; p < clubs_[g].nets.size(); ++p)
      clubs_[g].nets[p].collect("club.g" + std::to_string(g) + ".p" + std::to_string(p), out);
  return out;
}

RouterParams AnomalyMoE::router_params() const {
  RouterParams rp;
  rp.w_gate = w_gate_->value;
  rp.k = cfg_.top_k;
  rp.group_constrained = cfg_.group_constrained;
  const auto gs = cfg_.group_sizes();
  rp.group_sizes.assign(gs.begin(), gs.end());
  return rp;
}

PreparedSample AnomalyMoE::prepare(const FeatureBundle& b) const {
  if (b.dim != cfg_.dim || b.grid_h != cfg_.grid.h || b.grid_w != cfg_.grid.w)
    throw std::invalid_argument("bundle " + b.sample_id + " has shape " + std::to_string(b.grid_h) + "x" +
                                std::to_string(b.grid_w) + "x" + std::to_string(b.dim) + ", model expects " +
                                std::to_string(cfg_.grid.h) + "x" + std::to_string(cfg_.grid.w) + "x" + std::to_string(cfg_.dim));
  PreparedSample s;
  s.class_id = b.class_id;
  s.label = b.label;
  s.target = fuse_target(b, all_layers(b));
  s.cls = cls_tensor(b);
  if (cfg_.n_component > 0) {
    s.masks = assign_masks(s.target, kb_, b.class_id, cfg_.grid);
    s.pooled = masked_avg_pool(s.target, s.masks);
  }
  return s;
}

ForwardResult AnomalyMoE::forward_loss(const std::vector<const PreparedSample*>& batch, std::uint64_t step_seed,
                                       const LossOptions& opt) {
  const std::size_t nb = batch.size(), d = cfg_.dim, n = cfg_.grid.h * cfg_.grid.w, ne = cfg_.num_experts();
  if (nb == 0) throw std::invalid_argument("forward_loss: empty batch");
  for (const auto* s : batch)
    if (s->label != Label::Normal) throw std::invalid_argument("forward_loss: anomalous sample in a training batch");
  std::mt19937_64 rng(step_seed);

  // Routing over the concatenated expert list.
  Tensor cls_stack(nb, d);
  for (std::size_t b = 0; b < nb; ++b) std::copy_n(batch[b]->cls.data.data(), d, cls_stack.data.data() + b * d);
  auto logits = ad::matmul_nt(ad::constant(std::move(cls_stack)), w_gate_);
  const RouterParams rp = router_params();
  std::vector<std::vector<int>> selected(nb);
  std::vector<std::vector<bool>> active(ne, std::vector<bool>(nb, false));
  for (std::size_t b = 0; b < nb; ++b) {
    const auto row = logits->value.row(b);
    selected[b] = rp.group_constrained ? select_group_constrained(row, rp.group_sizes, rp.k) : select_topk(row, rp.k);
    for (int j : selected[b]) active[j][b] = true;
  }
  auto gates = ad::topk_softmax(logits, selected);

  Tensor target_stack(nb * n, d);
  for (std::size_t b = 0; b < nb; ++b) std::copy_n(batch[b]->target.data.data(), n * d, target_stack.data.data() + b * n * d);
  const double batch_std = global_feature_std(target_stack);
  auto target_var = ad::constant(target_stack);

  const auto sizes = cfg_.group_sizes();
  const bool eir_on = opt.lambda_eir > 0.0;
  std::vector<std::vector<ad::Var>> reps(kNumGroups);
  for (std::size_t g = 0; g < kNumGroups; ++g) reps[g].resize(sizes[g]);

  std::vector<ad::Var> cols(ne);
  for (std::size_t j = 0; j < ne; ++j) {
    const ExpertKind kind = kind_of(j);
    const auto g = static_cast<std::size_t>(kind);
    const bool need_rep = eir_on && sizes[g] >= 2;
    std::vector<std::size_t> rows;  // samples this expert processes
    for (std::size_t b = 0; b < nb; ++b)
      if (need_rep || active[j][b]) rows.push_back(b);
    if (rows.empty()) {
      cols[j] = ad::constant(Tensor(nb, 1));
      continue;
    }
    const std::size_t m = rows.size();
    ad::Var per_sample, out;
    if (kind == ExpertKind::Component) {
      std::size_t total = 0;
      for (std::size_t b : rows) total += batch[b]->pooled.embeddings.rows;
      Tensor x(total, d);
      std::vector<std::size_t> offsets{0};
      for (std::size_t b : rows) {
        const Tensor& e = batch[b]->pooled.embeddings;
        std::copy_n(e.data.data(), e.size(), x.data.data() + offsets.back() * d);
        offsets.push_back(offsets.back() + e.rows);
      }
      auto xv = ad::constant(std::move(x));
      out = component_[local_index(j)].forward(xv);
      per_sample = ad::segment_mean(ad::row_cosine_distance(xv, out), offsets);
      if (need_rep) reps[g][local_index(j)] = ad::segment_mean(out, offsets);
    } else {
      Tensor x(m * n, d);
      for (std::size_t r = 0; r < m; ++r) {
        const std::size_t b = rows[r];
        double* dst = x.data.data() + r * n * d;
        if (kind == ExpertKind::Patch && opt.corrupt && active[j][b]) {
          const Tensor c = corrupt(batch[b]->target, cfg_.corruption, rng, batch_std);
          std::copy_n(c.data.data(), n * d, dst);
        } else {
          std::copy_n(batch[b]->target.data.data(), n * d, dst);
        }
      }
      ad::Var tgt = target_var;
      if (m != nb) {
        Tensor t(m * n, d);
        for (std::size_t r = 0; r < m; ++r)
          std::copy_n(target_stack.data.data() + rows[r] * n * d, n * d, t.data.data() + r * n * d);
        tgt = ad::constant(std::move(t));
      }
      auto xv = ad::constant(std::move(x));
      if (kind == ExpertKind::Patch) {
        out = patch_[local_index(j)].forward(xv, n);
        per_sample = ad::segment_mean(ad::row_cosine_distance(tgt, out), n);
      } else {
        out = global_[local_index(j)].forward(xv, m, cfg_.grid);
        per_sample = ad::scale(ad::segment_mean(ad::row_sq_dist(tgt, out), n), 1.0 / static_cast<double>(d));
      }
      if (need_rep) reps[g][local_index(j)] = ad::segment_mean(out, n);
    }
    if (m == nb) {
      cols[j] = per_sample;
    } else {
      std::vector<int> table(nb, -1);
      for (std::size_t r = 0; r < m; ++r) table[rows[r]] = static_cast<int>(r);
      cols[j] = ad::gather_rows(per_sample, std::move(table), 1);
    }
  }

  auto loss_matrix = ad::assemble_columns(cols, active);
  auto gate_term = opt.freeze_gates ? ad::detach(gates) : gates;
  auto rec = ad::scale(ad::sum(ad::mul(gate_term, loss_matrix)), 1.0 / static_cast<double>(nb));

  ForwardResult res;
  const auto stats = batch_stats(gates->value, selected, 0.0);
  const double capacity = static_cast<double>(default_capacity(nb, cfg_.top_k, ne, cfg_.capacity_factor));
  const auto esb = esb_loss_graph(logits, gates, stats.counts, capacity, cfg_.esb);

  ad::Var total = ad::add(rec, ad::scale(esb.total, opt.lambda_esb));
  if (eir_on) {
    std::vector<std::vector<std::vector<int>>> perms(kNumGroups);
    std::vector<std::vector<ad::Var>> eir_reps(kNumGroups);
    std::vector<ClubGroup> eir_groups;
    bool any_pairs = false;
    for (std::size_t g = 0; g < kNumGroups; ++g) any_pairs = any_pairs || sizes[g] >= 2;
    if (any_pairs) {
      if (nb < 2) throw std::invalid_argument("forward_loss: EIR needs a batch of at least 2 samples");
      if (opt.update_club)
        for (std::size_t g = 0; g < kNumGroups; ++g)
          for (std::size_t j = 0; j < sizes[g]; ++j)
            for (std::size_t k = j + 1; k < sizes[g]; ++k)
              club_net_update(reps[g][j]->value, reps[g][k]->value, clubs_[g].nets[ClubGroup::pair_index(j, k, sizes[g])]);
      const auto perm = random_permutation(nb, rng);
      for (std::size_t g = 0; g < kNumGroups; ++g) {
        if (sizes[g] < 2) {
          eir_groups.push_back(ClubGroup{});
          continue;
        }
        eir_groups.push_back(clubs_[g]);
        eir_reps[g] = reps[g];
        perms[g].assign(clubs_[g].nets.size(), perm);
      }
      const auto eir = eir_loss(eir_reps, eir_groups, perms);
      res.parts.eir = ad::scalar(eir.loss);
      res.parts.eir_pairs = eir.pair_terms;
      total = ad::add(total, ad::scale(eir.loss, opt.lambda_eir));
    }
  }

  res.total = total;
  res.parts.total = ad::scalar(total);
  res.parts.rec = ad::scalar(rec);
  res.parts.esb = esb.terms;
  res.parts.importance = stats.importance;
  res.parts.counts = stats.counts;
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t j = 0; j < ne; ++j)
      res.parts.gate_mass[static_cast<std::size_t>(kind_of(j))] += gates->value(b, j) / static_cast<double>(nb);
  return res;
}

AnomalyResult AnomalyMoE::infer(const PreparedSample& s) const {
  AnomalyResult r;
  const auto dec = route(s.cls.row(0), router_params());
  r.topk = dec.topk;
  r.gates = dec.gates;
  std::array<double, kNumGroups> mass{};
  std::array<Tensor, kNumGroups> acc;
  for (int j : dec.topk) {
    const auto kind = kind_of(static_cast<std::size_t>(j));
    const auto g = static_cast<std::size_t>(kind);
    const std::size_t li = local_index(static_cast<std::size_t>(j));
    Tensor map;
    switch (kind) {
      case ExpertKind::Patch: {
        Tensor in = s.target;
        if (cfg_.corruption.enabled_at_inference) {
          std::mt19937_64 rng(cfg_.seed);
          in = corrupt(s.target, cfg_.corruption, rng);
        }
        map = patch_score(s.target, patch_[li].forward(in), cfg_.grid);
        break;
      }
      case ExpertKind::Component: {
        const Tensor rec = component_[li].forward(s.pooled.embeddings);
        const auto scores = component_scores(s.pooled.embeddings, rec);
        map = scatter_component_scores(scores, s.pooled.component_ids, s.masks);
        break;
      }
      case ExpertKind::Global:
        map = global_score(s.target, global_[li].forward(s.target, cfg_.grid), cfg_.grid);
        break;
    }
    const double gate = dec.gates[static_cast<std::size_t>(j)];
    if (acc[g].empty()) acc[g] = Tensor(map.rows, map.cols);
    for (std::size_t i = 0; i < map.size(); ++i) acc[g].data[i] += gate * map.data[i];
    mass[g] += gate;
  }
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    r.group_mass[g] = mass[g];
    if (mass[g] > 0.0) {
      for (double& v : acc[g].data) v /= mass[g];
      r.maps[g] = std::move(acc[g]);
    }
  }
  return r;
}

}  // namespace amoe
