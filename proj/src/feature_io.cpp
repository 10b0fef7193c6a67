#include "amoe/feature_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace amoe {

using nlohmann::json;

std::string to_string(Label l) { return l == Label::Normal ? "normal" : "anomalous"; }

Label label_from_string(const std::string& s) {
  if (s == "normal") return Label::Normal;
  if (s == "anomalous") return Label::Anomalous;
  throw BundleError(BundleErrc::BadHeader, "unknown label '" + s + "'");
}

std::string to_string(BundleErrc e) {
  switch (e) {
    case BundleErrc::BadMagic: return "BadMagic";
    case BundleErrc::VersionMismatch: return "VersionMismatch";
    case BundleErrc::Truncated: return "Truncated";
    case BundleErrc::DimMismatch: return "DimMismatch";
    case BundleErrc::BadHeader: return "BadHeader";
    case BundleErrc::Invalid: return "Invalid";
    case BundleErrc::Io: return "Io";
  }
  return "Unknown";
}

void validate(const FeatureBundle& b) {
  const std::size_t n = b.num_patches();
  if (b.grid_h == 0 || b.grid_w == 0 || b.dim == 0) throw BundleError(BundleErrc::DimMismatch, b.sample_id + ": zero dimension");
  if (b.patch_embeddings.size() != n * b.dim)
    throw BundleError(BundleErrc::DimMismatch, b.sample_id + ": patch_embeddings size does not match grid*dim");
  if (b.cls_embedding.size() != b.dim) throw BundleError(BundleErrc::DimMismatch, b.sample_id + ": cls size != dim");
  for (const auto& layer : b.layer_stack)
    if (layer.size() != n * b.dim) throw BundleError(BundleErrc::DimMismatch, b.sample_id + ": layer size mismatch");
  auto finite = [](const std::vector<float>& v) {
    for (float x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };
  if (!finite(b.patch_embeddings) || !finite(b.cls_embedding))
    throw BundleError(BundleErrc::Invalid, b.sample_id + ": non-finite embedding");
  for (const auto& layer : b.layer_stack)
    if (!finite(layer)) throw BundleError(BundleErrc::Invalid, b.sample_id + ": non-finite layer");
  if (b.pixel_mask) {
    if (b.pixel_mask->size() != n) throw BundleError(BundleErrc::DimMismatch, b.sample_id + ": mask size mismatch");
    bool any = false;
    for (auto m : *b.pixel_mask) {
      if (m > 1) throw BundleError(BundleErrc::Invalid, b.sample_id + ": mask is not binary");
      any = any || m != 0;
    }
    if (b.label == Label::Normal && any) throw BundleError(BundleErrc::Invalid, b.sample_id + ": normal sample with anomalous mask");
  }
}

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_floats(std::vector<std::uint8_t>& out, const std::vector<float>& v) {
  for (float f : v) put_le(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw BundleError(BundleErrc::Truncated, std::string("truncated while reading ") + what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T get_le(const char* what) {
    auto s = take(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(s[i]) << (8 * i));
    return v;
  }
  std::vector<float> get_floats(std::size_t count, const char* what) {
    if ((bytes_.size() - pos_) / 4 < count) throw BundleError(BundleErrc::Truncated, std::string("truncated payload: ") + what);
    std::vector<float> v(count);
    for (auto& f : v) f = std::bit_cast<float>(get_le<std::uint32_t>(what));
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_bundle(const FeatureBundle& b) {
  validate(b);
  json h = {{"sample_id", b.sample_id},
            {"class_id", b.class_id},
            {"grid_h", b.grid_h},
            {"grid_w", b.grid_w},
            {"dim", b.dim},
            {"n_layers", b.layer_stack.size()},
            {"label", to_string(b.label)},
            {"has_mask", b.pixel_mask.has_value()}};
  const std::string header = h.dump();
  std::vector<std::uint8_t> out(std::begin(kBundleMagic), std::end(kBundleMagic));
  put_le<std::uint16_t>(out, kBundleVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  put_floats(out, b.patch_embeddings);
  put_floats(out, b.cls_embedding);
  for (const auto& layer : b.layer_stack) put_floats(out, layer);
  if (b.pixel_mask) out.insert(out.end(), b.pixel_mask->begin(), b.pixel_mask->end());
  return out;
}

FeatureBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kBundleMagic)))
    throw BundleError(BundleErrc::BadMagic, "bad magic (expected AMOE)");
  const auto version = r.get_le<std::uint16_t>("version");
  if (version != kBundleVersion)
    throw BundleError(BundleErrc::VersionMismatch, "unsupported bundle version " + std::to_string(version));
  const auto header_len = r.get_le<std::uint32_t>("header length");
  auto hb = r.take(header_len, "header");
  json h;
  try {
    h = json::parse(hb.begin(), hb.end());
  } catch (const json::exception& e) {
    throw BundleError(BundleErrc::BadHeader, std::string("header is not valid JSON: ") + e.what());
  }
  FeatureBundle b;
  std::size_t n_layers = 0;
  bool has_mask = false;
  try {
    b.sample_id = h.at("sample_id").get<std::string>();
    b.class_id = h.at("class_id").get<std::string>();
    b.grid_h = h.at("grid_h").get<std::size_t>();
    b.grid_w = h.at("grid_w").get<std::size_t>();
    b.dim = h.at("dim").get<std::size_t>();
    n_layers = h.at("n_layers").get<std::size_t>();
    b.label = label_from_string(h.at("label").get<std::string>());
    has_mask = h.at("has_mask").get<bool>();
  } catch (const json::exception& e) {
    throw BundleError(BundleErrc::BadHeader, std::string("header field error: ") + e.what());
  }
  if (b.grid_h == 0 || b.grid_w == 0 || b.dim == 0) throw BundleError(BundleErrc::DimMismatch, "header declares a zero dimension");
  const std::size_t n = b.num_patches();
  b.patch_embeddings = r.get_floats(n * b.dim, "patch_embeddings");
  b.cls_embedding = r.get_floats(b.dim, "cls_embedding");
  for (std::size_t l = 0; l < n_layers; ++l) b.layer_stack.push_back(r.get_floats(n * b.dim, "layer_stack"));
  if (has_mask) {
    auto m = r.take(n, "pixel_mask");
    b.pixel_mask = std::vector<std::uint8_t>(m.begin(), m.end());
  }
  if (r.remaining() != 0)
    throw BundleError(BundleErrc::DimMismatch, "payload has " + std::to_string(r.remaining()) + " bytes beyond the declared dims");
  validate(b);
  return b;
}

void write_bundle(const FeatureBundle& b, const std::filesystem::path& path) {
  const auto bytes = encode_bundle(b);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw BundleError(BundleErrc::Io, "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw BundleError(BundleErrc::Io, "write failed: " + path.string());
}

FeatureBundle read_bundle(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw BundleError(BundleErrc::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_bundle(bytes);
}

std::vector<std::size_t> all_layers(const FeatureBundle& b) {
  std::vector<std::size_t> sel(b.layer_stack.size() + 1);
  for (std::size_t i = 0; i < sel.size(); ++i) sel[i] = i;
  return sel;
}

Tensor fuse_target(const FeatureBundle& b, std::span<const std::size_t> layer_select) {
  if (layer_select.empty()) throw std::invalid_argument("fuse_target: empty layer selection");
  const std::size_t n = b.num_patches();
  Tensor out(n, b.dim);
  // Accumulate in index order so the result does not depend on selection order.
  std::vector<std::size_t> sorted(layer_select.begin(), layer_select.end());
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t idx : sorted) {
    if (idx > b.layer_stack.size()) throw std::out_of_range("fuse_target: layer index " + std::to_string(idx));
    const auto& src = idx == 0 ? b.patch_embeddings : b.layer_stack[idx - 1];
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += static_cast<double>(src[i]);
  }
  const double inv = 1.0 / static_cast<double>(layer_select.size());
  for (double& v : out.data) v *= inv;
  return out;
}

Tensor cls_tensor(const FeatureBundle& b) {
  Tensor t(1, b.dim);
  for (std::size_t i = 0; i < b.dim; ++i) t.data[i] = b.cls_embedding[i];
  return t;
}

std::size_t Dataset::dim() const {
  for (const auto& c : classes) {
    if (!c.train.empty()) return c.train.front().bundle.dim;
    if (!c.test.empty()) return c.test.front().bundle.dim;
  }
  return 0;
}

void Dataset::validate() const {
  const std::size_t d = dim();
  for (const auto& c : classes) {
    for (const auto& e : c.train) {
      if (e.bundle.label != Label::Normal)
        throw BundleError(BundleErrc::Invalid, "training bundle " + e.bundle.sample_id + " is not normal");
      if (e.bundle.dim != d) throw BundleError(BundleErrc::DimMismatch, e.bundle.sample_id + ": inconsistent dim");
    }
    for (const auto& e : c.test)
      if (e.bundle.dim != d) throw BundleError(BundleErrc::DimMismatch, e.bundle.sample_id + ": inconsistent dim");
  }
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json m;
  m["seed"] = ds.seed;
  m["classes"] = json::array();
  for (const auto& c : ds.classes) {
    json jc;
    jc["class_id"] = c.class_id;
    for (const char* split : {"train", "test"}) {
      const auto& entries = std::string(split) == "train" ? c.train : c.test;
      json arr = json::array();
      for (const auto& e : entries) {
        const fs::path rel = e.path.empty() ? fs::path(c.class_id) / split / (e.bundle.sample_id + ".amoe") : fs::path(e.path);
        fs::create_directories((dir / rel).parent_path());
        write_bundle(e.bundle, dir / rel);
        arr.push_back({{"path", rel.generic_string()}, {"label", to_string(e.bundle.label)}, {"anomaly_type", e.anomaly_type}});
      }
      jc[split] = std::move(arr);
    }
    m["classes"].push_back(std::move(jc));
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw BundleError(BundleErrc::Io, "cannot write manifest in " + dir.string());
  f << m.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw BundleError(BundleErrc::Io, "cannot open manifest " + manifest_path.string());
  json m;
  try {
    m = json::parse(f);
  } catch (const json::exception& e) {
    throw BundleError(BundleErrc::BadHeader, std::string("manifest is not valid JSON: ") + e.what());
  }
  const auto root = manifest_path.parent_path();
  Dataset ds;
  ds.seed = m.value("seed", std::uint64_t{0});
  for (const auto& jc : m.at("classes")) {
    ClassSplit c;
    c.class_id = jc.at("class_id").get<std::string>();
    for (const char* split : {"train", "test"}) {
      auto& entries = std::string(split) == "train" ? c.train : c.test;
      if (!jc.contains(split)) continue;
      for (const auto& je : jc.at(split)) {
        DatasetEntry e;
        e.path = je.at("path").get<std::string>();
        e.bundle = read_bundle(root / e.path);
        e.anomaly_type = je.value("anomaly_type", e.bundle.label == Label::Normal ? "none" : "unknown");
        entries.push_back(std::move(e));
      }
    }
    ds.classes.push_back(std::move(c));
  }
  ds.validate();
  return ds;
}

}  // namespace amoe
