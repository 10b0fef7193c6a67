#pragma once

#include "amoe/config.hpp"
#include "amoe/model.hpp"
#include "amoe/trainer.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace amoe {

// File layout: "AMOC" | u16 version | u32 header length | JSON header |
// raw little-endian f64 tensors | u32 CRC32 of everything before it.
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class CheckpointErrc { BadMagic, VersionMismatch, Truncated, Checksum, ShapeMismatch, BadHeader, Io };
std::string to_string(CheckpointErrc e);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& msg)
      : std::runtime_error(to_string(code) + ": " + msg), code_(code) {}
  CheckpointErrc code() const { return code_; }

 private:
  CheckpointErrc code_;
};

struct Checkpoint {
  RunConfig config;
  nlohmann::json meta;  // header without the tensor manifest
  std::map<std::string, Tensor> tensors;
};

// trainer may be null for inference-only checkpoints.
std::vector<std::uint8_t> encode_checkpoint(const RunConfig& cfg, const AnomalyMoE& model, const Trainer* trainer);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const AnomalyMoE& model,
                     const Trainer* trainer);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Builds a model from the stored config and restores every parameter, the
// ClubNets with their optimizer slots, the KB and the score statistics.
AnomalyMoE build_model(const Checkpoint& ck);
// Restores into an existing model; any shape difference is ShapeMismatch.
void restore_model(AnomalyMoE& model, const Checkpoint& ck);
// Restores optimizer slots, iteration, rng state and data order.
void restore_trainer(Trainer& trainer, const Checkpoint& ck);

}  // namespace amoe
