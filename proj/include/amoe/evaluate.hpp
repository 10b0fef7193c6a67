#pragma once

#include "amoe/model.hpp"
#include "amoe/scoring.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace amoe {

struct SampleScore {
  std::string sample_id;
  std::string class_id;
  std::string anomaly_type;
  int label = 0;
  double image_score = 0.0;
  std::vector<int> topk;
  std::array<double, kNumGroups> group_mass{};
};

struct ClassReport {
  std::string class_id;
  std::size_t n_normal = 0;
  std::size_t n_anomalous = 0;
  double image_auroc = 0.0;
  std::optional<double> pixel_auroc;
  // Normals of the class against the anomalies of one type.
  std::map<std::string, double> type_auroc;
  std::array<double, kNumGroups> gate_mass{};  // mean over test samples
  std::vector<double> expert_gate;             // mean gate per expert
};

struct EvalReport {
  std::vector<ClassReport> classes;
  double mean_image_auroc = 0.0;
  std::optional<double> mean_pixel_auroc;
  std::map<std::string, double> mean_type_auroc;  // averaged over classes holding that type
  std::array<double, kNumGroups> gate_mass{};
  std::vector<std::string> warnings;
  std::vector<SampleScore> samples;

  nlohmann::json to_json() const;
  std::string table() const;
};

struct EvalOptions {
  AggregateOptions aggregate;
  std::filesystem::path map_dir;  // empty -> no PGM dumps
};

// Scores every test sample; aggregation uses the model's per-class score stats.
EvalReport evaluate(const AnomalyMoE& model, const Dataset& ds, const EvalOptions& opt);

// Scores one prepared sample end to end.
AnomalyResult score_sample(const AnomalyMoE& model, const PreparedSample& s, const AggregateOptions& opt);

// Binary PGM (P5). Values are mapped linearly from [lo, hi] to [0, 255] and
// each cell is drawn as a scale x scale block.
void write_pgm(const std::filesystem::path& path, const Tensor& map, double lo, double hi, std::size_t scale = 8);

}  // namespace amoe
