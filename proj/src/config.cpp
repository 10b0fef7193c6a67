#include "amoe/config.hpp"

#include <fstream>
#include <functional>
#include <vector>

namespace amoe {

using nlohmann::json;

namespace {

// One configurable leaf: reads from and writes to JSON.
struct Field {
  std::string key;
  std::function<void(const json&)> read;
  std::function<json()> write;
};

template <class T>
Field field(std::string key, T& ref) {
  return Field{std::move(key), [&ref](const json& j) { ref = j.get<T>(); }, [&ref]() { return json(ref); }};
}

template <class E>
Field field_enum(std::string key, E& ref, E (*parse)(const std::string&), std::string (*print)(E)) {
  return Field{std::move(key), [&ref, parse](const json& j) { ref = parse(j.get<std::string>()); },
               [&ref, print]() { return json(print(ref)); }};
}

using Section = std::vector<Field>;

// Sections keyed by name; built against a live RunConfig.
std::vector<std::pair<std::string, Section>> sections(RunConfig& c) {
  auto& m = c.model;
  auto& t = c.train;
  auto& a = c.aggregate;
  auto& s = c.synth;
  return {
      {"model",
       {field("dim", m.dim), field("grid_h", m.grid.h), field("grid_w", m.grid.w), field("n_patch", m.n_patch),
        field("n_component", m.n_component), field("n_global", m.n_global), field("top_k", m.top_k),
        field("group_constrained", m.group_constrained), field("patch_depth", m.patch_depth),
        field("patch_ffn", m.patch_ffn), field("component_bottleneck", m.component_bottleneck),
        field("global_channels", m.global_channels), field("identity_init", m.identity_init),
        field("kb_clusters", m.kb_clusters), field("noise_std", m.corruption.noise_std),
        field("dropout_p", m.corruption.dropout_p), field("corrupt_at_inference", m.corruption.enabled_at_inference),
        field("capacity_factor", m.capacity_factor), field("esb_importance", m.esb.importance),
        field("esb_load", m.esb.load), field("esb_z", m.esb.z), field("club_hidden", m.club_hidden),
        field("club_lr", m.club_lr)}},
      {"train",
       {field("iterations", t.iterations), field("batch_size", t.batch_size), field("lr", t.lr),
        field("weight_decay", t.weight_decay), field("lambda_esb", t.lambda_esb), field("lambda_eir", t.lambda_eir),
        field("optimizer", t.optimizer), field("freeze_gates", t.freeze_gates), field("update_club", t.update_club),
        field("corrupt", t.corrupt), field("kb_max_points", t.kb_max_points)}},
      {"aggregate",
       {field("normalize", a.normalize), field_enum("weighting", a.weighting, weighting_from_string, to_string),
        field_enum("image_stat", a.image_stat, image_stat_from_string, to_string),
        field("top_fraction", a.top_fraction)}},
      {"synth",
       {field("n_classes", s.n_classes), field("train_per_class", s.train_per_class),
        field("test_per_class", s.test_per_class), field("anomaly_fraction", s.anomaly_fraction),
        field("grid_h", s.grid_h), field("grid_w", s.grid_w), field("dim", s.dim), field("manifold_rank", s.manifold_rank),
        field("extra_layers", s.extra_layers), field("noise_std", s.noise_std), field("patch_spread", s.patch_spread),
        field("sample_jitter", s.sample_jitter), field("mix_local", s.anomaly_mix.local),
        field("mix_component", s.anomaly_mix.component), field("mix_global", s.anomaly_mix.global)}},
  };
}

}  // namespace

void RunConfig::resolve() {
  model.seed = seed;
  train.seed = seed;
  synth.seed = seed;
  try {
    train.validate();
    aggregate.top_fraction > 0.0 && aggregate.top_fraction <= 1.0
        ? void()
        : throw std::invalid_argument("aggregate: top_fraction must lie in (0, 1]");
    synth.validate();
    if (model.dim != 0) model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

json to_json(const RunConfig& c) {
  RunConfig copy = c;
  json out;
  out["seed"] = copy.seed;
  for (auto& [name, fields] : sections(copy))
    for (auto& f : fields) out[name][f.key] = f.write();
  return out;
}

void merge_json(RunConfig& c, const json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  auto secs = sections(c);
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") {
      try {
        c.seed = value.get<std::uint64_t>();
      } catch (const json::exception&) {
        throw ConfigError("config key 'seed' must be a non-negative integer");
      }
      continue;
    }
    auto sec = std::find_if(secs.begin(), secs.end(), [&](const auto& s) { return s.first == key; });
    if (sec == secs.end()) throw ConfigError("unknown config key '" + key + "'");
    if (!value.is_object()) throw ConfigError("config section '" + key + "' must be an object");
    for (const auto& [leaf, v] : value.items()) {
      auto f = std::find_if(sec->second.begin(), sec->second.end(), [&](const Field& x) { return x.key == leaf; });
      if (f == sec->second.end()) throw ConfigError("unknown config key '" + key + "." + leaf + "'");
      try {
        f->read(v);
      } catch (const json::exception& e) {
        throw ConfigError("config key '" + key + "." + leaf + "': " + e.what());
      } catch (const std::invalid_argument& e) {
        throw ConfigError("config key '" + key + "." + leaf + "': " + e.what());
      }
    }
  }
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  merge_json(base, j);
  return base;
}

void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json patch;
  const auto dot = key.find('.');
  if (dot == std::string::npos)
    patch[key] = value;
  else
    patch[key.substr(0, dot)][key.substr(dot + 1)] = value;
  merge_json(c, patch);
}

}  // namespace amoe
