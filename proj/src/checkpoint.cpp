#include "amoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <zlib.h>

namespace amoe {

using nlohmann::json;

std::string to_string(CheckpointErrc e) {
  switch (e) {
    case CheckpointErrc::BadMagic: return "BadMagic";
    case CheckpointErrc::VersionMismatch: return "VersionMismatch";
    case CheckpointErrc::Truncated: return "Truncated";
    case CheckpointErrc::Checksum: return "Checksum";
    case CheckpointErrc::ShapeMismatch: return "ShapeMismatch";
    case CheckpointErrc::BadHeader: return "BadHeader";
    case CheckpointErrc::Io: return "Io";
  }
  return "Unknown";
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[4] = {'A', 'M', 'O', 'C'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(std::span<const std::uint8_t> bytes, std::size_t at) {
  T v;
  std::memcpy(&v, bytes.data() + at, sizeof(T));
  return v;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(c, bytes.data(), static_cast<uInt>(bytes.size())));
}

struct TensorSink {
  json manifest = json::array();
  std::vector<std::uint8_t> payload;

  std::set<std::string> names;

  void add(const std::string& name, const Tensor& t) {
    if (!names.insert(name).second) throw std::logic_error("checkpoint: duplicate tensor " + name);
    manifest.push_back({{"name", name}, {"shape", {t.rows, t.cols}}, {"offset", payload.size()}, {"dtype", "f64"}});
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data.data());
    payload.insert(payload.end(), p, p + t.size() * sizeof(double));
  }
};

void add_params(TensorSink& sink, const std::string& prefix, const ParamList& params) {
  for (const auto& p : params) sink.add(prefix + p.name, p.var->value);
}

void add_slots(TensorSink& sink, const std::string& prefix, const AdamW& opt) {
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    sink.add(prefix + ".m/" + opt.params()[i].name, opt.slots()[i].m);
    sink.add(prefix + ".v/" + opt.params()[i].name, opt.slots()[i].v);
  }
}

json stats_to_json(const ScoreStats& s) {
  json out = json::object();
  for (const auto& [cls, groups] : s.per_class) {
    json arr = json::array();
    for (const auto& g : groups) arr.push_back({{"mean", g.mean}, {"std", g.std}, {"valid", g.valid}});
    out[cls] = arr;
  }
  return out;
}

ScoreStats stats_from_json(const json& j) {
  ScoreStats s;
  for (const auto& [cls, arr] : j.items()) {
    if (arr.size() != kNumGroups) throw CheckpointError(CheckpointErrc::BadHeader, "score stats for " + cls);
    auto& groups = s.per_class[cls];
    for (std::size_t g = 0; g < kNumGroups; ++g)
      groups[g] = GroupStat{arr[g].at("mean").get<double>(), arr[g].at("std").get<double>(), arr[g].at("valid").get<bool>()};
  }
  return s;
}

const Tensor& find(const Checkpoint& ck, const std::string& name) {
  auto it = ck.tensors.find(name);
  if (it == ck.tensors.end()) throw CheckpointError(CheckpointErrc::ShapeMismatch, "tensor '" + name + "' missing");
  return it->second;
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (!dst.same_shape(src))
    throw CheckpointError(CheckpointErrc::ShapeMismatch,
                          "tensor '" + name + "' is " + src.shape_str() + ", model expects " + dst.shape_str());
  dst.data = src.data;
}

void restore_params(const Checkpoint& ck, const std::string& prefix, const ParamList& params) {
  for (const auto& p : params) copy_into(p.var->value, find(ck, prefix + p.name), prefix + p.name);
}

void restore_slots(const Checkpoint& ck, const std::string& prefix, AdamW& opt) {
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const std::string& n = opt.params()[i].name;
    copy_into(opt.slots()[i].m, find(ck, prefix + ".m/" + n), prefix + ".m/" + n);
    copy_into(opt.slots()[i].v, find(ck, prefix + ".v/" + n), prefix + ".v/" + n);
  }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const RunConfig& cfg, const AnomalyMoE& model, const Trainer* trainer) {
  TensorSink sink;
  json meta;
  meta["config"] = to_json(cfg);
  // The model section of the stored config must describe this model exactly.
  meta["config"]["model"]["dim"] = model.config().dim;
  meta["config"]["model"]["grid_h"] = model.config().grid.h;
  meta["config"]["model"]["grid_w"] = model.config().grid.w;

  add_params(sink, "param/", model.parameters());
  json club_steps = json::array();
  for (std::size_t g = 0; g < model.club_groups().size(); ++g) {
    const auto& nets = model.club_groups()[g].nets;
    for (std::size_t p = 0; p < nets.size(); ++p) {
      const std::string prefix = "club.g" + std::to_string(g) + ".p" + std::to_string(p);
      ParamList params;
      nets[p].collect(prefix, params);
      add_params(sink, "club/", params);
      add_slots(sink, "club_adam." + prefix, nets[p].optimizer());
      club_steps.push_back(nets[p].optimizer().steps());
    }
  }
  meta["club_steps"] = club_steps;

  json kb = {{"k_c", model.kb().k_c}, {"classes", json::array()}};
  for (const auto& [cls, entry] : model.kb().classes) {
    kb["classes"].push_back({{"class_id", cls}, {"inertia", entry.inertia}, {"iterations", entry.iterations}});
    sink.add("kb/" + cls, entry.centroids);
  }
  meta["kb"] = kb;
  meta["score_stats"] = stats_to_json(model.score_stats());

  if (trainer) {
    const auto st = trainer->state();
    meta["trainer"] = {{"iteration", st.iteration},
                       {"rng", st.rng},
                       {"order", st.order},
                       {"cursor", st.cursor},
                       {"optimizer_steps", trainer->optimizer().steps()}};
    add_slots(sink, "adam", trainer->optimizer());
  }
  meta["tensors"] = sink.manifest;

  const std::string header = meta.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint16_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), sink.payload.begin(), sink.payload.end());
  put<std::uint32_t>(out, crc32_of(out));
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError(CheckpointErrc::BadMagic, "not an AMOC checkpoint");
  if (bytes.size() < 14) throw CheckpointError(CheckpointErrc::Truncated, "file too short");
  const auto version = get<std::uint16_t>(bytes, 4);
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrc::VersionMismatch,
                          "version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  const std::size_t body = bytes.size() - 4;
  if (crc32_of(bytes.first(body)) != get<std::uint32_t>(bytes, body))
    throw CheckpointError(CheckpointErrc::Checksum, "CRC32 mismatch");
  const auto hlen = get<std::uint32_t>(bytes, 6);
  if (10 + static_cast<std::size_t>(hlen) > body) throw CheckpointError(CheckpointErrc::Truncated, "header overruns file");

  Checkpoint ck;
  try {
    ck.meta = json::parse(bytes.begin() + 10, bytes.begin() + 10 + hlen);
    merge_json(ck.config, ck.meta.at("config"));
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrc::BadHeader, e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrc::BadHeader, e.what());
  }
  const std::size_t payload_at = 10 + hlen, payload_len = body - payload_at;
  try {
    for (const auto& t : ck.meta.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      if (t.at("dtype").get<std::string>() != "f64") throw CheckpointError(CheckpointErrc::BadHeader, name + ": dtype");
      const auto rows = t.at("shape").at(0).get<std::size_t>(), cols = t.at("shape").at(1).get<std::size_t>();
      const auto off = t.at("offset").get<std::size_t>();
      const std::size_t n = rows * cols * sizeof(double);
      if (off > payload_len || n > payload_len - off)
        throw CheckpointError(CheckpointErrc::Truncated, "tensor '" + name + "' overruns payload");
      Tensor tensor(rows, cols);
      std::memcpy(tensor.data.data(), bytes.data() + payload_at + off, n);
      if (!ck.tensors.emplace(name, std::move(tensor)).second)
        throw CheckpointError(CheckpointErrc::BadHeader, "duplicate tensor '" + name + "'");
    }
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrc::BadHeader, e.what());
  }
  ck.meta.erase("tensors");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const AnomalyMoE& model,
                     const Trainer* trainer) {
  const auto bytes = encode_checkpoint(cfg, model, trainer);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError(CheckpointErrc::Io, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointErrc::Io, "short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrc::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void restore_model(AnomalyMoE& model, const Checkpoint& ck) {
  restore_params(ck, "param/", model.parameters());
  const auto& stored_club = ck.meta.at("club_steps");
  std::size_t idx = 0;
  for (std::size_t g = 0; g < model.club_groups().size(); ++g) {
    auto& nets = model.club_groups()[g].nets;
    for (std::size_t p = 0; p < nets.size(); ++p, ++idx) {
      ParamList params;
      const std::string prefix = "club.g" + std::to_string(g) + ".p" + std::to_string(p);
      nets[p].collect(prefix, params);
      restore_params(ck, "club/", params);
      restore_slots(ck, "club_adam." + prefix, nets[p].optimizer());
      if (idx >= stored_club.size()) throw CheckpointError(CheckpointErrc::ShapeMismatch, "ClubNet count differs");
      nets[p].optimizer().set_steps(stored_club[idx].get<std::uint64_t>());
    }
  }
  if (idx != stored_club.size()) throw CheckpointError(CheckpointErrc::ShapeMismatch, "ClubNet count differs");

  ComponentKB kb;
  kb.k_c = ck.meta.at("kb").at("k_c").get<std::size_t>();
  for (const auto& c : ck.meta.at("kb").at("classes")) {
    const auto id = c.at("class_id").get<std::string>();
    ClassKB entry{find(ck, "kb/" + id), c.at("inertia").get<double>(), c.at("iterations").get<std::size_t>()};
    if (entry.centroids.cols != model.config().dim)
      throw CheckpointError(CheckpointErrc::ShapeMismatch, "KB centroids for " + id + " have dim " +
                                                               std::to_string(entry.centroids.cols));
    kb.classes.emplace(id, std::move(entry));
  }
  model.kb() = std::move(kb);
  model.score_stats() = stats_from_json(ck.meta.at("score_stats"));
}

AnomalyMoE build_model(const Checkpoint& ck) {
  ModelConfig mc = ck.config.model;
  mc.seed = ck.config.seed;
  AnomalyMoE model(mc);
  restore_model(model, ck);
  return model;
}

void restore_trainer(Trainer& trainer, const Checkpoint& ck) {
  if (!ck.meta.contains("trainer")) throw CheckpointError(CheckpointErrc::BadHeader, "checkpoint has no trainer state");
  const auto& t = ck.meta.at("trainer");
  restore_slots(ck, "adam", trainer.optimizer());
  trainer.optimizer().set_steps(t.at("optimizer_steps").get<std::uint64_t>());
  trainer.set_state(Trainer::State{t.at("iteration").get<std::size_t>(), t.at("rng").get<std::string>(),
                                   t.at("order").get<std::vector<std::size_t>>(), t.at("cursor").get<std::size_t>()});
}

}  // namespace amoe
