#include "amoe/checkpoint.hpp"
#include "amoe/config.hpp"
#include "amoe/evaluate.hpp"
#include "amoe/pipeline.hpp"
#include "amoe/synthetic.hpp"
#include "amoe/trainer.hpp"

#include <doctest.h>

#include <sstream>

using namespace amoe;

namespace {

SyntheticConfig tiny_synth() {
  SyntheticConfig s;
  s.n_classes = 2;
  s.train_per_class = 8;
  s.test_per_class = 6;
  s.grid_h = s.grid_w = 4;
  s.dim = 8;
  s.manifold_rank = 2;
  return s;
}

RunConfig tiny_run(std::size_t per_group = 2, std::size_t k = 2) {
  RunConfig c;
  c.seed = 3;
  c.synth = tiny_synth();
  c.model.dim = 8;
  c.model.grid = {4, 4};
  c.model.n_patch = c.model.n_component = c.model.n_global = per_group;
  c.model.top_k = k;
  c.model.patch_depth = 1;
  c.model.kb_clusters = 3;
  c.train.batch_size = 4;
  c.train.lr = 1e-3;
  c.resolve();
  return c;
}

const Dataset& tiny_data() {
  static const Dataset ds = gen_synthetic(tiny_synth());
  return ds;
}

std::vector<Tensor> snapshot(const AnomalyMoE& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.var->value);
  return out;
}

std::vector<const PreparedSample*> first(const std::vector<PreparedSample>& s, std::size_t n) {
  std::vector<const PreparedSample*> b;
  for (std::size_t i = 0; i < n; ++i) b.push_back(&s[i]);
  return b;
}

}  // namespace

TEST_CASE("single expert at gate one: total equals its reconstruction loss") {
  RunConfig c = tiny_run(1, 1);
  c.model.n_component = c.model.n_global = 0;
  c.model.identity_init = false;
  c.resolve();
  AnomalyMoE m(c.model);
  std::vector<PreparedSample> s;
  for (const auto& e : tiny_data().classes[0].train) s.push_back(m.prepare(e.bundle));
  const auto batch = first(s, 4);
  LossOptions o{0.0, 0.0, false, false, false};
  const auto r = m.forward_loss(batch, 1, o);
  double expect = 0.0;
  for (const auto* p : batch) expect += patch_loss(p->target, m.patch_experts()[0].forward(p->target));
  CHECK(r.parts.total == doctest::Approx(expect / 4).epsilon(1e-12));
}

TEST_CASE("reconstruction term weights expert losses by their gates") {
  RunConfig c = tiny_run(1, 2);
  c.model.n_patch = 2;
  c.model.n_component = c.model.n_global = 0;
  c.model.identity_init = false;
  c.resolve();
  AnomalyMoE m(c.model);
  m.gate_weights()->value.fill(0.0);  // equal logits -> gates (0.5, 0.5)
  std::vector<PreparedSample> s;
  for (const auto& e : tiny_data().classes[0].train) s.push_back(m.prepare(e.bundle));
  const auto batch = first(s, 1);
  const LossOptions o{0.0, 0.0, false, false, false};
  const double l0 = patch_loss(s[0].target, m.patch_experts()[0].forward(s[0].target));
  const double l1 = patch_loss(s[0].target, m.patch_experts()[1].forward(s[0].target));
  CHECK(m.forward_loss(batch, 1, o).parts.rec == doctest::Approx(0.5 * l0 + 0.5 * l1).epsilon(1e-12));
}

TEST_CASE("inactive experts receive exactly zero reconstruction gradient") {
  RunConfig c = tiny_run(3, 1);
  c.model.identity_init = false;
  c.resolve();
  AnomalyMoE m(c.model);
  TrainConfig tc = c.train;
  Trainer t(m, tiny_data(), tc);
  const auto batch = first(t.samples(), 2);
  for (const auto& p : m.parameters()) p.var->grad = Tensor();
  const auto r = m.forward_loss(batch, 5, {0.0, 0.0, false, true, false});
  ad::backward(r.total);
  std::size_t idle = 0;
  for (std::size_t e = 0; e < m.config().num_experts(); ++e) {
    if (r.parts.counts[e] > 0) continue;
    ++idle;
    const std::string prefix = std::string(to_string(m.kind_of(e))) + std::to_string(m.local_index(e)) + ".";
    for (const auto& p : m.parameters())
      if (p.name.rfind(prefix, 0) == 0)
        for (double g : p.var->grad.data) CHECK(g == 0.0);
  }
  CHECK(idle > 0);
}

TEST_CASE("zero learning rate leaves parameters and loss unchanged") {
  RunConfig c = tiny_run();
  c.train.lr = 0.0;
  c.train.lambda_eir = 0.0;
  c.resolve();
  AnomalyMoE m(c.model);
  Trainer t(m, tiny_data(), c.train);
  const auto before = snapshot(m);
  const auto batch = first(t.samples(), 4);
  const LossOptions o{c.train.lambda_esb, 0.0, false, true, false};
  const double l0 = m.forward_loss(batch, 9, o).parts.total;
  t.run(5);
  CHECK(snapshot(m) == before);
  CHECK(m.forward_loss(batch, 9, o).parts.total == l0);
}

TEST_CASE("training reduces the smoothed loss") {
  RunConfig c = tiny_run(1, 2);
  c.train.iterations = 2000;
  c.train.lr = 2e-3;
  c.resolve();
  const auto run = train_model(c, tiny_data());
  REQUIRE(run.metrics.size() == 2000);
  CHECK(windowed_loss(run.metrics, 2000, 500) < windowed_loss(run.metrics, 100, 500));
}

TEST_CASE("checkpoint resume equals the uninterrupted run") {
  RunConfig c = tiny_run();
  c.model.identity_init = false;
  c.resolve();
  AnomalyMoE a(c.model);
  Trainer ta(a, tiny_data(), c.train);
  ta.run(3);
  const auto bytes = encode_checkpoint(c, a, &ta);
  const auto next = ta.step();

  const Checkpoint ck = decode_checkpoint(bytes);
  AnomalyMoE b = build_model(ck);
  Trainer tb(b, tiny_data(), ck.config.train);
  restore_trainer(tb, ck);
  const auto resumed = tb.step();
  CHECK(resumed.loss.total == next.loss.total);
  CHECK(resumed.to_json().dump() == next.to_json().dump());
  CHECK(snapshot(a) == snapshot(b));
  CHECK(ta.iteration() == tb.iteration());
}

TEST_CASE("checkpoint integrity errors") {
  RunConfig c = tiny_run(1, 2);
  AnomalyMoE m(c.model);
  Trainer t(m, tiny_data(), c.train);
  auto bytes = encode_checkpoint(c, m, &t);
  auto code_of = [](std::span<const std::uint8_t> b) {
    try {
      decode_checkpoint(b);
    } catch (const CheckpointError& e) {
      return e.code();
    }
    return CheckpointErrc::Io;
  };
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x01;
  CHECK(code_of(flipped) == CheckpointErrc::Checksum);
  auto magic = bytes;
  magic[1] = 'x';
  CHECK(code_of(magic) == CheckpointErrc::BadMagic);
  CHECK(code_of(std::span(bytes).first(10)) == CheckpointErrc::Truncated);

  RunConfig wide = c;
  wide.model.dim = 16;
  wide.resolve();
  AnomalyMoE other(wide.model);
  try {
    restore_model(other, decode_checkpoint(bytes));
    FAIL("expected ShapeMismatch");
  } catch (const CheckpointError& e) {
    CHECK(e.code() == CheckpointErrc::ShapeMismatch);
  }
}

TEST_CASE("score statistics cover every class and present group") {
  RunConfig c = tiny_run(1, 3);
  c.train.iterations = 5;
  c.resolve();
  const auto run = train_model(c, tiny_data());
  const auto& st = run.model->score_stats();
  REQUIRE(st.per_class.size() == 2);
  for (const auto& [cls, groups] : st.per_class)
    for (const auto& g : groups) {
      CHECK(g.valid);
      CHECK(g.std > 0.0);
    }
}

TEST_CASE("config round trip, strict keys and overrides") {
  RunConfig c;
  apply_override(c, "train.lr=0.002");
  apply_override(c, "model.group_constrained=true");
  apply_override(c, "aggregate.weighting=\"uniform\"");
  CHECK(c.train.lr == 0.002);
  CHECK(c.model.group_constrained);
  CHECK(c.aggregate.weighting == Weighting::Uniform);
  RunConfig d;
  merge_json(d, to_json(c));
  CHECK(to_json(d) == to_json(c));
  CHECK_THROWS_AS(apply_override(c, "train.bogus=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "train.lr=\"fast\""), ConfigError);
  CHECK_THROWS_AS(merge_json(c, nlohmann::json::parse(R"({"model":{"dimm":3}})")), ConfigError);
  RunConfig bad;
  bad.train.batch_size = 0;
  CHECK_THROWS(bad.resolve());
}

TEST_CASE("identical seeds give identical metric streams") {
  RunConfig c = tiny_run();
  c.train.iterations = 15;
  c.resolve();
  std::ostringstream a, b;
  train_model(c, tiny_data(), &a);
  train_model(c, tiny_data(), &b);
  CHECK(a.str() == b.str());
  CHECK(!a.str().empty());
}

TEST_CASE("evaluation reports are byte-identical on regeneration") {
  RunConfig c = tiny_run();
  c.train.iterations = 10;
  c.resolve();
  const auto run = train_model(c, tiny_data());
  EvalOptions eo;
  eo.aggregate = c.aggregate;
  const auto r1 = evaluate(*run.model, tiny_data(), eo);
  const auto r2 = evaluate(*run.model, tiny_data(), eo);
  CHECK(r1.to_json().dump(2) == r2.to_json().dump(2));
  CHECK(r1.table() == r2.table());
  CHECK(r1.mean_image_auroc >= 0.0);
  CHECK(r1.mean_image_auroc <= 1.0);
}
