#pragma once

#include "amoe/tensor.hpp"

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace amoe {

inline constexpr std::size_t kNumGroups = 3;  // patch, component, global

struct AnomalyResult {
  std::array<std::optional<Tensor>, kNumGroups> maps;  // S_p, S_c, S_g (grid_h x grid_w)
  std::array<double, kNumGroups> group_mass{};          // summed gates of activated experts per group
  std::vector<int> topk;
  std::vector<double> gates;
  Tensor aggregated;
  double image_score = 0.0;
};

struct GroupStat {
  double mean = 0.0;
  double std = 0.0;
  bool valid = false;  // false -> group excluded from standardization
};

// Per class and per group mean/std of map values on normal training samples.
struct ScoreStats {
  std::map<std::string, std::array<GroupStat, kNumGroups>> per_class;
};

enum class Weighting { Gate, Uniform, Max };
enum class ImageStat { Max, TopMean };

struct AggregateOptions {
  bool normalize = true;
  Weighting weighting = Weighting::Gate;
  ImageStat image_stat = ImageStat::TopMean;
  double top_fraction = 0.01;
};

Weighting weighting_from_string(const std::string& s);
ImageStat image_stat_from_string(const std::string& s);
std::string to_string(Weighting w);
std::string to_string(ImageStat s);

// Standardizes present maps with the class stats, combines them with group
// weights renormalized over present groups and fills aggregated/image_score.
void aggregate(AnomalyResult& r, const std::array<GroupStat, kNumGroups>* stats, const AggregateOptions& opt);

// Mean of the top ceil(fraction * n) values (at least one).
double top_mean(std::span<const double> values, double fraction);

// Mann-Whitney AUROC with average ranks for ties. Labels are 0/1 and both
// classes must be present.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Streaming accumulator for mean/std.
struct RunningStat {
  double n = 0.0, mean = 0.0, m2 = 0.0;
  void push(double x) {
    n += 1.0;
    const double d = x - mean;
    mean += d / n;
    m2 += d * (x - mean);
  }
  double std() const { return n > 0 ? std::sqrt(m2 / n) : 0.0; }
};

}  // namespace amoe
