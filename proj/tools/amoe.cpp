// amoe: command-line driver.
//
//   amoe gen-synth --out DIR
//   amoe train     --data DIR/manifest.json --out RUN
//   amoe gradcheck
//   amoe infer     --checkpoint RUN/checkpoint.amoc --bundle FILE
//   amoe eval      --checkpoint RUN/checkpoint.amoc --data DIR/manifest.json --out EVAL
//   amoe sweep     --data DIR/manifest.json --out SWEEP --top-k 1,2,3
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage or config error, 3 gradient
// check failed. Failures print one line to stderr:
//   error: code=<code> msg="<text>"
// Relative --out paths are resolved under $AMOE_OUT_ROOT when it is set.

#include "amoe/checkpoint.hpp"
#include "amoe/config.hpp"
#include "amoe/evaluate.hpp"
#include "amoe/gradcheck.hpp"
#include "amoe/pipeline.hpp"
#include "amoe/synthetic.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace amoe;

namespace {

enum Exit { kOk = 0, kRuntime = 1, kUsage = 2, kGradcheck = 3 };

struct Failure {
  int exit;
  std::string code;
  std::string msg;
};

int report(const Failure& f) {
  std::string msg;
  for (char c : f.msg) {
    if (c == '"' || c == '\\') msg += '\\';
    msg += (c == '\n' || c == '\r') ? ' ' : c;
  }
  std::cerr << "error: code=" << f.code << " msg=\"" << msg << "\"\n";
  return f.exit;
}

fs::path out_path(const std::string& p) {
  fs::path path(p);
  if (const char* root = std::getenv("AMOE_OUT_ROOT"); root && *root && path.is_relative()) path = fs::path(root) / path;
  return path;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_snapshot(const fs::path& dir, const RunConfig& cfg) { write_text(dir / "config.json", to_json(cfg).dump(2) + "\n"); }

// Options shared by every subcommand that builds a RunConfig.
struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--config", file, "JSON config file (unknown keys are rejected)")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override one key, e.g. --set train.lr=1e-3 (repeatable)");
    seed_opt = app->add_option("--seed", seed, "Master seed");
  }

  // defaults < base < file < --set < dedicated flags
  RunConfig build(RunConfig base = {}) const {
    if (!file.empty()) base = load_config_file(file, base);
    for (const auto& s : sets) apply_override(base, s);
    if (seed_opt && seed_opt->count()) base.seed = seed;
    return base;
  }
};

struct TrainFlags {
  std::size_t iterations = 0, batch_size = 0;
  double lr = 0, weight_decay = 0, lambda_esb = 0, lambda_eir = 0;
  std::string optimizer;
  bool freeze_gates = false;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app) {
    opts = {app->add_option("--iterations", iterations, "Training steps"),
            app->add_option("--batch-size", batch_size, "Samples per step"),
            app->add_option("--lr", lr, "Learning rate"),
            app->add_option("--weight-decay", weight_decay, "Decoupled weight decay"),
            app->add_option("--lambda-esb", lambda_esb, "Weight of the balance loss"),
            app->add_option("--lambda-eir", lambda_eir, "Weight of the redundancy loss"),
            app->add_option("--optimizer", optimizer, "stable_adamw or adamw"),
            app->add_flag("--freeze-gates", freeze_gates, "Treat gates as constants in the reconstruction term")};
  }

  void apply(RunConfig& c) const {
    if (opts[0]->count()) c.train.iterations = iterations;
    if (opts[1]->count()) c.train.batch_size = batch_size;
    if (opts[2]->count()) c.train.lr = lr;
    if (opts[3]->count()) c.train.weight_decay = weight_decay;
    if (opts[4]->count()) c.train.lambda_esb = lambda_esb;
    if (opts[5]->count()) c.train.lambda_eir = lambda_eir;
    if (opts[6]->count()) c.train.optimizer = optimizer;
    if (opts[7]->count()) c.train.freeze_gates = freeze_gates;
  }
};

struct AggregateFlags {
  std::string weighting, image_stat;
  double top_fraction = 0;
  bool no_normalize = false;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app) {
    opts = {app->add_option("--weighting", weighting, "gate, uniform or max"),
            app->add_option("--image-stat", image_stat, "max or top_mean"),
            app->add_option("--top-fraction", top_fraction, "Fraction of cells averaged by top_mean"),
            app->add_flag("--no-normalize", no_normalize, "Skip per-class standardization")};
  }

  void apply(RunConfig& c) const {
    try {
      if (opts[0]->count()) c.aggregate.weighting = weighting_from_string(weighting);
      if (opts[1]->count()) c.aggregate.image_stat = image_stat_from_string(image_stat);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (opts[2]->count()) c.aggregate.top_fraction = top_fraction;
    if (opts[3]->count()) c.aggregate.normalize = !no_normalize;
  }
};

int cmd_gen_synth(const ConfigFlags& cf, const std::string& out, const std::map<std::string, CLI::Option*>& o,
                  const SyntheticConfig& flags) {
  RunConfig cfg = cf.build();
  if (o.at("classes")->count()) cfg.synth.n_classes = flags.n_classes;
  if (o.at("train")->count()) cfg.synth.train_per_class = flags.train_per_class;
  if (o.at("test")->count()) cfg.synth.test_per_class = flags.test_per_class;
  if (o.at("dim")->count()) cfg.synth.dim = flags.dim;
  if (o.at("grid")->count()) cfg.synth.grid_h = cfg.synth.grid_w = flags.grid_h;
  cfg.resolve();
  const fs::path dir = out_path(out);
  fs::create_directories(dir);
  const Dataset ds = gen_synthetic(cfg.synth);
  write_dataset(ds, dir);
  write_snapshot(dir, cfg);
  std::size_t n = 0;
  for (const auto& c : ds.classes) n += c.train.size() + c.test.size();
  std::cout << "wrote " << n << " bundles in " << ds.classes.size() << " classes to " << (dir / "manifest.json").string()
            << "\n";
  return kOk;
}

int cmd_train(const ConfigFlags& cf, const TrainFlags& tf, const std::string& data, const std::string& out,
              const std::string& resume_path, std::size_t checkpoint_every) {
  std::optional<Checkpoint> resume;
  RunConfig base;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    base = resume->config;
  }
  RunConfig cfg = cf.build(base);
  tf.apply(cfg);
  const Dataset ds = load_dataset(data);
  bind_model_to_data(cfg, ds);
  const fs::path dir = out_path(out);
  fs::create_directories(dir);
  write_snapshot(dir, cfg);
  std::ofstream metrics(dir / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());
  const auto run = train_model(cfg, ds, &metrics, resume ? &*resume : nullptr, dir / "checkpoint.amoc", checkpoint_every);
  const auto imp = run.metrics.empty() ? std::vector<double>{} : mean_importance(run.metrics, 500);
  json summary = {{"steps_run", run.metrics.size()},
                  {"final_total", run.metrics.empty() ? json(nullptr) : json(run.metrics.back().loss.total)},
                  {"mean_importance_last500", imp},
                  {"seconds", run.seconds}};
  std::cout << summary.dump() << "\n";
  return kOk;
}

int cmd_gradcheck(const GradcheckOptions& opt, const std::string& out) {
  const auto rep = gradcheck(opt);
  for (const auto& t : rep.tensors)
    std::printf("%-32s n=%-5zu rel_err=%.3e %s\n", t.name.c_str(), t.size, t.rel_err, t.passed ? "ok" : "FAIL");
  std::printf("max rel_err %.3e over %zu tensors in %.2fs: %s\n", rep.max_rel_err, rep.tensors.size(), rep.seconds,
              rep.passed ? "PASS" : "FAIL");
  if (!out.empty()) {
    const fs::path p = out_path(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_text(p, rep.to_json().dump(2) + "\n");
  }
  if (!rep.passed) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "max relative error %.3e >= %.1e", rep.max_rel_err, opt.tolerance);
    return report({kGradcheck, "gradcheck", buf});
  }
  return kOk;
}

int cmd_infer(const ConfigFlags& cf, const AggregateFlags& af, const std::string& ckpt, const std::string& bundle_path,
              const std::string& maps) {
  const Checkpoint ck = load_checkpoint(ckpt);
  RunConfig cfg = cf.build(ck.config);
  af.apply(cfg);
  const AnomalyMoE model = build_model(ck);
  const FeatureBundle b = read_bundle(bundle_path);
  const auto r = score_sample(model, model.prepare(b), cfg.aggregate);
  json j = {{"sample_id", b.sample_id}, {"class_id", b.class_id}, {"image_score", r.image_score},
            {"topk", r.topk},           {"gates", r.gates},       {"group_mass", r.group_mass}};
  if (!maps.empty()) {
    const fs::path dir = out_path(maps);
    fs::create_directories(dir);
    const auto [lo, hi] = std::minmax_element(r.aggregated.data.begin(), r.aggregated.data.end());
    write_pgm(dir / (b.sample_id + "_aggregate.pgm"), r.aggregated, *lo, *hi);
  }
  std::cout << j.dump() << "\n";
  return kOk;
}

int cmd_eval(const ConfigFlags& cf, const AggregateFlags& af, const std::string& ckpt, const std::string& data,
             const std::string& out, bool dump_maps) {
  const Checkpoint ck = load_checkpoint(ckpt);
  RunConfig cfg = cf.build(ck.config);
  af.apply(cfg);
  cfg.resolve();
  const AnomalyMoE model = build_model(ck);
  const Dataset ds = load_dataset(data);
  const fs::path dir = out_path(out);
  fs::create_directories(dir);
  EvalOptions eo{cfg.aggregate, dump_maps ? dir / "maps" : fs::path{}};
  const auto rep = evaluate(model, ds, eo);
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
  write_snapshot(dir, cfg);
  write_text(dir / "report.json", rep.to_json().dump(2) + "\n");
  write_text(dir / "report.txt", rep.table());
  std::cout << rep.table();
  return kOk;
}

struct SweepAxes {
  std::vector<std::size_t> n_experts;
  std::vector<std::size_t> top_k;
  std::vector<double> lambda_esb;
  std::vector<double> lambda_eir;
  bool parallel = false;
};

int cmd_sweep(const ConfigFlags& cf, const TrainFlags& tf, const std::string& data, const std::string& out,
              SweepAxes ax) {
  RunConfig base = cf.build();
  tf.apply(base);
  const Dataset ds = load_dataset(data);
  bind_model_to_data(base, ds);
  if (ax.n_experts.empty()) ax.n_experts = {base.model.num_experts()};
  if (ax.top_k.empty()) ax.top_k = {base.model.top_k};
  if (ax.lambda_esb.empty()) ax.lambda_esb = {base.train.lambda_esb};
  if (ax.lambda_eir.empty()) ax.lambda_eir = {base.train.lambda_eir};

  std::vector<RunConfig> cells;
  for (std::size_t n : ax.n_experts)
    for (std::size_t k : ax.top_k)
      for (double le : ax.lambda_esb)
        for (double li : ax.lambda_eir) {
          if (n == 0 || n % 3 != 0) throw ConfigError("sweep: n_experts must be a positive multiple of 3, got " + std::to_string(n));
          RunConfig c = base;
          c.model.n_patch = c.model.n_component = c.model.n_global = n / 3;
          c.model.top_k = k;
          c.train.lambda_esb = le;
          c.train.lambda_eir = li;
          try {
            c.resolve();
            c.model.validate();
          } catch (const std::invalid_argument& e) {
            throw ConfigError("sweep cell n=" + std::to_string(n) + " k=" + std::to_string(k) + ": " + e.what());
          }
          cells.push_back(c);
        }

  const fs::path dir = out_path(out);
  fs::create_directories(dir);
  write_snapshot(dir, base);
  auto run_cell = [&](std::size_t i) {
    const RunConfig& c = cells[i];
    char name[128];
    std::snprintf(name, sizeof name, "cell%03zu_n%zu_k%zu_esb%g_eir%g", i, c.model.num_experts(), c.model.top_k,
                  c.train.lambda_esb, c.train.lambda_eir);
    const fs::path cd = dir / name;
    fs::create_directories(cd);
    write_snapshot(cd, c);
    std::ofstream metrics(cd / "metrics.jsonl");
    const auto run = train_model(c, ds, &metrics, nullptr, cd / "checkpoint.amoc");
    const auto rep = evaluate(*run.model, ds, EvalOptions{c.aggregate, {}});
    write_text(cd / "report.json", rep.to_json().dump(2) + "\n");
    write_text(cd / "report.txt", rep.table());
    const auto imp = mean_importance(run.metrics, 500);
    auto type = [&](const char* k) {
      auto it = rep.mean_type_auroc.find(k);
      return it == rep.mean_type_auroc.end() ? std::string("") : std::to_string(it->second);
    };
    std::ostringstream row;
    row << i << "," << c.model.num_experts() << "," << c.model.top_k << "," << c.train.lambda_esb << ","
        << c.train.lambda_eir << "," << rep.mean_image_auroc << ","
        << (rep.mean_pixel_auroc ? std::to_string(*rep.mean_pixel_auroc) : "") << "," << type("local") << ","
        << type("component") << "," << type("global") << "," << *std::min_element(imp.begin(), imp.end()) << ","
        << run.metrics.back().loss.total;
    std::cout << name << " done in " << run.seconds << "s\n";
    return row.str();
  };

  std::vector<std::string> rows(cells.size());
  if (ax.parallel) {
    std::vector<std::future<std::string>> futs;
    for (std::size_t i = 0; i < cells.size(); ++i) futs.push_back(std::async(std::launch::async, run_cell, i));
    for (std::size_t i = 0; i < cells.size(); ++i) rows[i] = futs[i].get();
  } else {
    for (std::size_t i = 0; i < cells.size(); ++i) rows[i] = run_cell(i);
  }
  std::ostringstream csv;
  csv << "cell,n_experts,top_k,lambda_esb,lambda_eir,image_auroc,pixel_auroc,local_auroc,component_auroc,"
         "global_auroc,min_importance,final_loss\n";
  for (const auto& r : rows) csv << r << "\n";
  write_text(dir / "summary.csv", csv.str());
  std::cout << csv.str();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical mixture-of-experts anomaly detection on precomputed patch features"};
  app.require_subcommand(1);

  ConfigFlags gen_cf, train_cf, infer_cf, eval_cf, sweep_cf;
  TrainFlags train_tf, sweep_tf;
  AggregateFlags infer_af, eval_af;
  std::string out, data, ckpt, bundle, maps, resume;
  std::size_t checkpoint_every = 0;
  bool dump_maps = false;

  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic feature dataset");
  gen_cf.add(gen);
  gen->add_option("--out", out, "Output directory")->required();
  SyntheticConfig sflags;
  std::map<std::string, CLI::Option*> gen_opts{
      {"classes", gen->add_option("--classes", sflags.n_classes, "Number of classes")},
      {"train", gen->add_option("--train-per-class", sflags.train_per_class, "Normal training samples per class")},
      {"test", gen->add_option("--test-per-class", sflags.test_per_class, "Test samples per class")},
      {"dim", gen->add_option("--dim", sflags.dim, "Feature dimension")},
      {"grid", gen->add_option("--grid", sflags.grid_h, "Grid side length")}};

  auto* train = app.add_subcommand("train", "Train a model");
  train_cf.add(train);
  train_tf.add(train);
  train->add_option("--data", data, "Dataset manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Run directory")->required();
  train->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train->add_option("--checkpoint-every", checkpoint_every, "Also checkpoint every N steps");

  auto* grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients on a tiny model");
  GradcheckOptions gopt;
  grad->add_option("--dim", gopt.dim, "Feature dimension");
  grad->add_option("--grid", gopt.grid, "Grid side length");
  grad->add_option("--experts-per-group", gopt.experts_per_group, "Experts in each group");
  grad->add_option("--eps", gopt.eps, "Finite-difference step");
  grad->add_option("--tolerance", gopt.tolerance, "Maximum relative error");
  grad->add_option("--seed", gopt.seed, "Seed");
  grad->add_option("--out", out, "Optional JSON report path");

  auto* infer = app.add_subcommand("infer", "Score one bundle");
  infer_cf.add(infer);
  infer_af.add(infer);
  infer->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  infer->add_option("--bundle", bundle, "Feature bundle")->required()->check(CLI::ExistingFile);
  infer->add_option("--maps", maps, "Directory for a PGM dump of the aggregated map");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cf.add(eval);
  eval_af.add(eval);
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data, "Dataset manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out, "Report directory")->required();
  eval->add_flag("--dump-maps", dump_maps, "Write PGM maps for every test sample");

  auto* sweep = app.add_subcommand("sweep", "Train and evaluate a grid of settings");
  sweep_cf.add(sweep);
  sweep_tf.add(sweep);
  SweepAxes axes;
  sweep->add_option("--data", data, "Dataset manifest")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", out, "Sweep directory")->required();
  sweep->add_option("--n-experts", axes.n_experts, "Total expert counts (split evenly over the groups)")->delimiter(',');
  sweep->add_option("--top-k", axes.top_k, "K values")->delimiter(',');
  sweep->add_option("--lambda-esb-grid", axes.lambda_esb, "Balance-loss weights")->delimiter(',');
  sweep->add_option("--lambda-eir-grid", axes.lambda_eir, "Redundancy-loss weights")->delimiter(',');
  sweep->add_flag("--parallel", axes.parallel, "Run cells concurrently");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report({kUsage, "usage", e.what()});
  }

  try {
    if (*gen) return cmd_gen_synth(gen_cf, out, gen_opts, sflags);
    if (*train) return cmd_train(train_cf, train_tf, data, out, resume, checkpoint_every);
    if (*grad) return cmd_gradcheck(gopt, out);
    if (*infer) return cmd_infer(infer_cf, infer_af, ckpt, bundle, maps);
    if (*eval) return cmd_eval(eval_cf, eval_af, ckpt, data, out, dump_maps);
    if (*sweep) return cmd_sweep(sweep_cf, sweep_tf, data, out, axes);
  } catch (const ConfigError& e) {
    return report({kUsage, "config", e.what()});
  } catch (const BundleError& e) {
    return report({kRuntime, "bundle." + to_string(e.code()), e.what()});
  } catch (const CheckpointError& e) {
    return report({kRuntime, "checkpoint." + to_string(e.code()), e.what()});
  } catch (const NonFiniteLoss& e) {
    return report({kRuntime, "nonfinite", e.what()});
  } catch (const std::exception& e) {
    return report({kRuntime, "runtime", e.what()});
  }
  return report({kUsage, "usage", "no subcommand"});
}
