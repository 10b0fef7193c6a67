#pragma once

#include "amoe/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace amoe {

enum class Label : std::uint8_t { Normal = 0, Anomalous = 1 };

std::string to_string(Label l);
Label label_from_string(const std::string& s);

// One sample as produced by the encoder: patch grid, cls token, optional
// extra encoder layers and an optional patch-resolution ground-truth mask.
// Payloads are kept in float so that file round trips are bit-exact.
struct FeatureBundle {
  std::string sample_id;
  std::string class_id;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t dim = 0;
  std::vector<float> patch_embeddings;         // (grid_h*grid_w) x dim, row-major
  std::vector<float> cls_embedding;            // dim
  std::vector<std::vector<float>> layer_stack; // each (grid_h*grid_w) x dim
  Label label = Label::Normal;
  std::optional<std::vector<std::uint8_t>> pixel_mask;  // grid_h*grid_w, 0/1

  std::size_t num_patches() const { return grid_h * grid_w; }
  bool operator==(const FeatureBundle&) const = default;
};

enum class BundleErrc { BadMagic, VersionMismatch, Truncated, DimMismatch, BadHeader, Invalid, Io };

std::string to_string(BundleErrc e);

class BundleError : public std::runtime_error {
 public:
  BundleError(BundleErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  BundleErrc code() const { return code_; }

 private:
  BundleErrc code_;
};

inline constexpr char kBundleMagic[4] = {'A', 'M', 'O', 'E'};
inline constexpr std::uint16_t kBundleVersion = 1;

// Throws BundleError(Invalid / DimMismatch) when an invariant is violated.
void validate(const FeatureBundle& b);

std::vector<std::uint8_t> encode_bundle(const FeatureBundle& b);
FeatureBundle decode_bundle(std::span<const std::uint8_t> bytes);

void write_bundle(const FeatureBundle& b, const std::filesystem::path& path);
FeatureBundle read_bundle(const std::filesystem::path& path);

// Layer index 0 is patch_embeddings, index i>0 is layer_stack[i-1]. An empty
// selection is an error; callers wanting "all layers" use all_layers().
Tensor fuse_target(const FeatureBundle& b, std::span<const std::size_t> layer_select);
std::vector<std::size_t> all_layers(const FeatureBundle& b);

Tensor cls_tensor(const FeatureBundle& b);  // 1 x dim

// A bundle together with its manifest annotations.
struct DatasetEntry {
  FeatureBundle bundle;
  std::string path;          // relative to the manifest directory
  std::string anomaly_type;  // "none", "local", "component", "global" or free text
};

struct ClassSplit {
  std::string class_id;
  std::vector<DatasetEntry> train;
  std::vector<DatasetEntry> test;
};

// Manifest: JSON listing relative bundle paths per class/split.
struct Dataset {
  std::uint64_t seed = 0;
  std::vector<ClassSplit> classes;

  std::size_t dim() const;
  // Enforces the normal-only training contract and consistent dims.
  void validate() const;
};

void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& manifest_path);

}  // namespace amoe
