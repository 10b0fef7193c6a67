// Acceptance run: one PASS/FAIL line per criterion. Exit status is the number
// of failed criteria. `--only 1,4` restricts the run to selected criteria.
#include "amoe/component_kb.hpp"
#include "amoe/config.hpp"
#include "amoe/eir.hpp"
#include "amoe/evaluate.hpp"
#include "amoe/experts.hpp"
#include "amoe/gradcheck.hpp"
#include "amoe/pipeline.hpp"
#include "amoe/router.hpp"
#include "amoe/scoring.hpp"
#include "amoe/synthetic.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

using namespace amoe;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr int kRoutingCases = 10000;
constexpr double kGateSumTol = 1e-6;
constexpr int kSimplexPoints = 10000;
constexpr double kAttentionTol = 1e-5;
constexpr double kAttentionRatio = 12.0;
constexpr std::size_t kClubBatch = 4096;
constexpr std::size_t kClubSteps = 4000;
constexpr double kClubLower = 0.8, kClubSlack = 0.15, kClubZero = 0.05;
constexpr double kClubSeconds = 300.0;
constexpr int kAurocInstances = 1000;
constexpr double kCentroidTol = 1e-6;
constexpr double kTypeAuroc = 0.90;
constexpr double kPatchLocal = 0.90;
constexpr double kAblationGap = 0.05;
constexpr double kE2eSeconds = 900.0;
constexpr std::size_t kImportanceWindow = 500;

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
  std::printf("[%s] %2d %-22s %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void gradient_correctness() {
  GradcheckOptions o;  // D=8, 2x2 grid, one expert per group, K=3
  o.tolerance = kGradTol;
  const auto r = gradcheck(o);
  report(1, "gradient-correctness", r.passed && r.seconds < kGradSeconds,
         fmt("tensors=%zu max_rel_err=%.3g (<%g) time=%.2fs (<%gs)", r.tensors.size(), r.max_rel_err, kGradTol,
             r.seconds, kGradSeconds));
}

void routing_algebra() {
  std::mt19937_64 rng(101);
  std::normal_distribution<double> g(0.0, 3.0);
  int bad_count = 0, bad_sum = 0, bad_shift = 0, bad_mono = 0;
  for (int t = 0; t < kRoutingCases; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 24)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    RouterParams p;
    p.w_gate = Tensor(n, d);
    for (double& v : p.w_gate.data) v = g(rng);
    p.k = std::uniform_int_distribution<std::size_t>(1, n)(rng);
    std::vector<double> cls(d);
    for (double& v : cls) v = g(rng);
    const auto r = route(cls, p);
    const auto nz = std::count_if(r.gates.begin(), r.gates.end(), [](double x) { return x > 0.0; });
    bad_count += nz != static_cast<long>(p.k);
    bad_sum += std::abs(std::accumulate(r.gates.begin(), r.gates.end(), 0.0) - 1.0) > kGateSumTol;

    std::vector<double> shifted = r.logits;
    const double c = g(rng) * 10.0;
    for (double& v : shifted) v += c;
    bad_shift += select_topk(shifted, p.k) != r.topk;

    // Raising one selected logit keeps it selected and cannot lower its gate.
    const auto j = static_cast<std::size_t>(r.topk[std::uniform_int_distribution<std::size_t>(0, p.k - 1)(rng)]);
    std::vector<double> up = r.logits;
    up[j] += std::abs(g(rng));
    const auto sel = select_topk(up, p.k);
    const auto gates = restricted_softmax(up, sel);
    bad_mono += std::find(sel.begin(), sel.end(), static_cast<int>(j)) == sel.end() || gates[j] < r.gates[j];
  }
  report(2, "routing-algebra", bad_count + bad_sum + bad_shift + bad_mono == 0,
         fmt("cases=%d k_nonzero_violations=%d sum_violations=%d shift_violations=%d monotonicity_violations=%d",
             kRoutingCases, bad_count, bad_sum, bad_shift, bad_mono));
}

void esb_analytics() {
  // Uniform importance from a balanced one-hot batch.
  const std::size_t n = 6;
  Tensor gates(n, n, 0.0);
  std::vector<std::vector<int>> sel(n);
  for (std::size_t b = 0; b < n; ++b) gates(b, b) = 1.0, sel[b] = {static_cast<int>(b)};
  const auto uni = esb_loss(batch_stats(gates, sel, 10), Tensor(n, n, 0.0), {});
  const bool uniform_exact = uni.importance == 1.0;

  std::mt19937_64 rng(202);
  std::exponential_distribution<double> ex(1.0);
  double min_imp = 1e300;
  for (int t = 0; t < kSimplexPoints; ++t) {
    const std::size_t m = std::uniform_int_distribution<std::size_t>(1, 20)(rng);
    BatchRoutingStats s;
    s.importance.resize(m);
    double z = 0.0;
    for (double& v : s.importance) z += (v = ex(rng));
    for (double& v : s.importance) v /= z;
    s.counts.assign(m, 0);
    s.batch = 1;
    s.capacity = 1;
    min_imp = std::min(min_imp, esb_loss(s, Tensor(1, m, 0.0), {}).importance);
  }
  const bool simplex_ok = min_imp >= 1.0 - 1e-12;

  BatchRoutingStats s;
  s.importance = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  s.batch = 2;
  s.capacity = 6;
  s.counts = {8, 2, 2};
  Tensor zl(2, 3);
  zl.data = {1.0, -2.0, 0.5, 0.0, 3.0, -1.0};  // sum of squares 15.25 over B=2
  const auto a = esb_loss(s, zl, {});
  s.counts = {5, 5, 6};
  const auto b = esb_loss(s, zl, {});
  const bool hand = a.load == 4.0 && b.load == 0.0 && a.z == 7.625;
  report(3, "esb-analytics", uniform_exact && simplex_ok && hand,
         fmt("uniform_L_imp=%.17g min_L_imp_over_%d_points=%.6f L_load=(%g,%g) expect (4,0) L_z=%g expect 7.625",
             uni.importance, kSimplexPoints, min_imp, a.load, b.load, a.z));
}

Tensor randn(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Tensor t(r, c);
  for (double& v : t.data) v = g(rng);
  return t;
}

void linear_attention_oracle() {
  std::mt19937_64 rng(303);
  double worst = 0.0;
  for (std::size_t n : {1, 16, 64})
    for (std::size_t d : {4, 16}) {
      const Tensor q = randn(n, d, rng), k = randn(n, d, rng), v = randn(n, d, rng);
      const Tensor pq = phi(q), pk = phi(k);
      const Tensor got = linear_attention(q, k, v);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> num(d, 0.0);
        double den = kAttentionEps;
        for (std::size_t j = 0; j < n; ++j) {
          double a = 0.0;
          for (std::size_t c = 0; c < d; ++c) a += pq(i, c) * pk(j, c);
          den += a;
          for (std::size_t e = 0; e < d; ++e) num[e] += a * v(j, e);
        }
        for (std::size_t e = 0; e < d; ++e) worst = std::max(worst, std::abs(num[e] / den - got(i, e)));
      }
    }
  auto best_time = [&](std::size_t n) {
    const Tensor q = randn(n, 16, rng), k = randn(n, 16, rng), v = randn(n, 16, rng);
    double best = 1e300;
    for (int rep = 0; rep < 9; ++rep) {
      const auto t0 = Clock::now();
      const Tensor o = linear_attention(q, k, v);
      best = std::min(best, since(t0));
      if (o.data[0] != o.data[0]) std::puts("nan");
    }
    return best;
  };
  const double t512 = best_time(512), t4096 = best_time(4096);
  const double ratio = t4096 / t512;
  report(4, "linear-attention", worst < kAttentionTol && ratio < kAttentionRatio,
         fmt("max_abs_err=%.3g (<%g) T(4096)/T(512)=%.2f (<%g)", worst, kAttentionTol, ratio, kAttentionRatio));
}

void club_fidelity() {
  const auto t0 = Clock::now();
  std::string detail;
  bool ok = true;
  for (double rho : {0.0, 0.5, 0.9}) {
    std::mt19937_64 rng(404 + static_cast<std::uint64_t>(rho * 10));
    std::normal_distribution<double> g;
    auto draw = [&](Tensor& x, Tensor& y) {
      x = Tensor(kClubBatch, 1);
      y = Tensor(kClubBatch, 1);
      for (std::size_t i = 0; i < kClubBatch; ++i) {
        x.data[i] = g(rng);
        y.data[i] = rho * x.data[i] + std::sqrt(1.0 - rho * rho) * g(rng);
      }
    };
    ClubNetConfig cfg;
    cfg.dim = 1;
    cfg.lr = 1e-2;
    ClubNet net(cfg, rng);
    Tensor x, y;
    for (std::size_t s = 0; s < kClubSteps; ++s) {
      draw(x, y);
      club_net_update(x, y, net);
    }
    draw(x, y);
    const double est = club_estimate(x, y, net, random_permutation(kClubBatch, rng));
    const double mi = -0.5 * std::log(1.0 - rho * rho);
    const double exact_q = rho * rho / (1.0 - rho * rho);  // the bound with the true conditional
    const bool pass = rho == 0.0 ? std::abs(est) < kClubZero : est >= kClubLower * mi && est <= mi + kClubSlack;
    ok = ok && pass;
    detail += fmt("rho=%.1f est=%.4f MI=%.4f window=[%.4f,%.4f] exact-q-bound=%.4f; ", rho, est, mi,
                  rho == 0.0 ? -kClubZero : kClubLower * mi, rho == 0.0 ? kClubZero : mi + kClubSlack, exact_q);
  }
  const double secs = since(t0);
  report(5, "club-fidelity", ok && secs < kClubSeconds, detail + fmt("time=%.1fs (<%gs)", secs, kClubSeconds));
}

void auroc_oracle() {
  std::mt19937_64 rng(505);
  int mismatches = 0;
  for (int t = 0; t < kAurocInstances; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 200)(rng);
    const int levels = std::uniform_int_distribution<int>(1, 12)(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::uniform_int_distribution<int>(0, levels)(rng) * 0.25;
      y[i] = static_cast<int>(rng() & 1u);
    }
    y[0] = 0;
    y[n - 1] = 1;
    long double num = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) pairs += 1, num += s[i] > s[j] ? 1.0L : (s[i] == s[j] ? 0.5L : 0.0L);
    mismatches += auroc(s, y) != static_cast<double>(num / pairs);
  }
  report(6, "auroc-oracle", mismatches == 0, fmt("instances=%d mismatches=%d", kAurocInstances, mismatches));
}

void kmeans_oracle() {
  std::mt19937_64 rng(606);
  std::normal_distribution<double> g(0.0, 0.5);
  double worst = 0.0;
  int non_monotone = 0, fits = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t per = 100, d = 4;
    Tensor p(2 * per, d);
    std::vector<double> m0(d, 0.0), m1(d, 0.0);
    for (std::size_t i = 0; i < 2 * per; ++i)
      for (std::size_t k = 0; k < d; ++k) {
        p(i, k) = g(rng) + (i < per ? -5.0 : 5.0);
        (i < per ? m0 : m1)[k] += p(i, k) / static_cast<double>(per);
      }
    const auto r = kmeans_fit(p, 2, seed);
    const auto c0 = static_cast<std::size_t>(r.assignment[0]), c1 = static_cast<std::size_t>(r.assignment[per]);
    for (std::size_t k = 0; k < d; ++k)
      worst = std::max({worst, std::abs(r.centroids(c0, k) - m0[k]), std::abs(r.centroids(c1, k) - m1[k])});
    if (c0 == c1) worst = 1e300;
    // Inertia monotonicity on this fit and on unstructured data.
    for (const auto& h : {r.inertia_history, kmeans_fit(randn(300, 3, rng), 7, seed).inertia_history}) {
      ++fits;
      for (std::size_t i = 1; i < h.size(); ++i) non_monotone += h[i] > h[i - 1];
    }
  }
  report(7, "kmeans-oracle", worst < kCentroidTol && non_monotone == 0,
         fmt("max_centroid_err=%.3g (<%g) inertia_increases=%d over %d fits", worst, kCentroidTol, non_monotone, fits));
}

struct E2eRun {
  EvalReport report;
  std::vector<StepMetrics> metrics;
  double seconds = 0.0;
};

E2eRun e2e_run(RunConfig cfg, const Dataset& ds) {
  bind_model_to_data(cfg, ds);
  auto run = train_model(cfg, ds);
  EvalOptions eo;
  eo.aggregate = cfg.aggregate;
  E2eRun out;
  out.report = evaluate(*run.model, ds, eo);
  out.metrics = std::move(run.metrics);
  out.seconds = run.seconds;
  return out;
}

RunConfig e2e_config() {
  RunConfig cfg;  // defaults: 3 classes, D=32, 14x14, rank 4, 200/60 per class
  cfg.train.iterations = 2000;
  return cfg;
}

double type_auroc(const EvalReport& r, const std::string& t) {
  auto it = r.mean_type_auroc.find(t);
  return it == r.mean_type_auroc.end() ? -1.0 : it->second;
}

void end_to_end(bool want8, bool want9) {
  RunConfig cfg = e2e_config();
  cfg.resolve();
  const Dataset ds = gen_synthetic(cfg.synth);
  std::fprintf(stderr, "e2e: training the full model\n");
  const E2eRun full = e2e_run(cfg, ds);

  if (want8) {
    RunConfig patch = cfg;
    patch.model.n_component = 0;
    patch.model.n_global = 0;
    std::fprintf(stderr, "e2e: training the patch-only model\n");
    const E2eRun po = e2e_run(patch, ds);
    const double loc = type_auroc(full.report, "local"), com = type_auroc(full.report, "component"),
                 glo = type_auroc(full.report, "global");
    const double po_loc = type_auroc(po.report, "local"), po_glo = type_auroc(po.report, "global");
    const bool types = loc >= kTypeAuroc && com >= kTypeAuroc && glo >= kTypeAuroc;
    const bool ablation = po_loc >= kPatchLocal && glo - po_glo >= kAblationGap;
    report(8, "end-to-end-synthetic", types && ablation && full.seconds < kE2eSeconds,
           fmt("full: local=%.4f component=%.4f global=%.4f image=%.4f (each >=%.2f) | patch-only: local=%.4f "
               "(>=%.2f) global=%.4f gap=%.4f (>=%.2f) | train time=%.0fs (<%gs) gate mass P/C/G=%.3f/%.3f/%.3f",
               loc, com, glo, full.report.mean_image_auroc, kTypeAuroc, po_loc, kPatchLocal, po_glo, glo - po_glo,
               kAblationGap, full.seconds, kE2eSeconds, full.report.gate_mass[0], full.report.gate_mass[1],
               full.report.gate_mass[2]));
  }
  if (want9) {
    RunConfig nobal = cfg;
    nobal.train.lambda_esb = 0.0;
    std::fprintf(stderr, "e2e: training without the balance loss\n");
    const E2eRun nb = e2e_run(nobal, ds);
    const auto imp_with = mean_importance(full.metrics, kImportanceWindow);
    const auto imp_without = mean_importance(nb.metrics, kImportanceWindow);
    const double min_with = *std::min_element(imp_with.begin(), imp_with.end());
    const double min_without = *std::min_element(imp_without.begin(), imp_without.end());
    report(9, "balance-effect", min_with >= min_without,
           fmt("min importance over last %zu steps: lambda_esb=0.01 -> %.5f, lambda_esb=0 -> %.5f", kImportanceWindow,
               min_with, min_without));
  }
}

void determinism() {
  RunConfig cfg;
  cfg.synth.n_classes = 2;
  cfg.synth.train_per_class = 20;
  cfg.synth.test_per_class = 10;
  cfg.synth.grid_h = cfg.synth.grid_w = 6;
  cfg.synth.dim = 16;
  cfg.train.iterations = 40;
  cfg.seed = 17;
  cfg.resolve();
  const Dataset ds = gen_synthetic(cfg.synth);
  auto once = [&] {
    RunConfig c = cfg;
    bind_model_to_data(c, ds);
    std::ostringstream metrics;
    auto run = train_model(c, ds, &metrics);
    EvalOptions eo;
    eo.aggregate = c.aggregate;
    const auto rep = evaluate(*run.model, ds, eo);
    return std::make_pair(metrics.str(), rep.to_json().dump(2) + rep.table());
  };
  const auto a = once(), b = once();
  report(10, "determinism", !a.first.empty() && a == b,
         fmt("metric stream %s (%zu bytes), report %s (%zu bytes)", a.first == b.first ? "identical" : "DIFFERS",
             a.first.size(), a.second == b.second ? "identical" : "DIFFERS", a.second.size()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Acceptance criteria");
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const std::set<int> sel(only.begin(), only.end());
  auto want = [&](int id) { return sel.empty() || sel.count(id) > 0; };

  try {
    if (want(1)) gradient_correctness();
    if (want(2)) routing_algebra();
    if (want(3)) esb_analytics();
    if (want(4)) linear_attention_oracle();
    if (want(5)) club_fidelity();
    if (want(6)) auroc_oracle();
    if (want(7)) kmeans_oracle();
    if (want(8) || want(9)) end_to_end(want(8), want(9));
    if (want(10)) determinism();
  } catch (const std::exception& e) {
    std::printf("[FAIL] aborted: %s\n", e.what());
    return 100;
  }
  std::printf("%d criteria failed\n", failures);
  return failures;
}
