#include "amoe/scoring.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace amoe {

Weighting weighting_from_string(const std::string& s) {
  if (s == "gate") return Weighting::Gate;
  if (s == "uniform") return Weighting::Uniform;
  if (s == "max") return Weighting::Max;
  throw std::invalid_argument("unknown weighting '" + s + "' (expected gate|uniform|max)");
}

ImageStat image_stat_from_string(const std::string& s) {
  if (s == "max") return ImageStat::Max;
  if (s == "top_mean") return ImageStat::TopMean;
  throw std::invalid_argument("unknown image statistic '" + s + "' (expected max|top_mean)");
}

std::string to_string(Weighting w) {
  switch (w) {
    case Weighting::Gate: return "gate";
    case Weighting::Uniform: return "uniform";
    case Weighting::Max: return "max";
  }
  return "?";
}

std::string to_string(ImageStat s) { return s == ImageStat::Max ? "max" : "top_mean"; }

double top_mean(std::span<const double> values, double fraction) {
  if (values.empty()) throw std::invalid_argument("top_mean: empty input");
  if (!(fraction > 0.0) || fraction > 1.0) throw std::invalid_argument("top_mean: fraction must lie in (0, 1]");
  const auto n = values.size();
  const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-12)), 1, n);
  std::vector<double> v(values.begin(), values.end());
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(), std::greater<>());
  return std::accumulate(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / static_cast<double>(k);
}

void aggregate(AnomalyResult& r, const std::array<GroupStat, kNumGroups>* stats, const AggregateOptions& opt) {
  std::array<Tensor, kNumGroups> z;
  std::array<double, kNumGroups> w{};
  std::size_t rows = 0, cols = 0;
  bool any = false;
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    if (!r.maps[g]) continue;
    const Tensor& m = *r.maps[g];
    if (any && (m.rows != rows || m.cols != cols)) throw std::invalid_argument("aggregate: group maps differ in shape");
    rows = m.rows;
    cols = m.cols;
    any = true;
    z[g] = m;
    if (opt.normalize && stats && (*stats)[g].valid) {
      const double sd = std::max((*stats)[g].std, 1e-12);
      for (double& v : z[g].data) v = (v - (*stats)[g].mean) / sd;
    }
    w[g] = opt.weighting == Weighting::Gate ? r.group_mass[g] : 1.0;
  }
  if (!any) throw std::invalid_argument("aggregate: no group map present");
  Tensor out(rows, cols);
  if (opt.weighting == Weighting::Max) {
    out.fill(-std::numeric_limits<double>::infinity());
    for (std::size_t g = 0; g < kNumGroups; ++g)
      if (r.maps[g])
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::max(out.data[i], z[g].data[i]);
  } else {
    double wsum = 0.0;
    for (std::size_t g = 0; g < kNumGroups; ++g)
      if (r.maps[g]) wsum += w[g];
    for (std::size_t g = 0; g < kNumGroups; ++g) {
      if (!r.maps[g]) continue;
      const double a = wsum > 0.0 ? w[g] / wsum : 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += a * z[g].data[i];
    }
  }
  r.image_score = opt.image_stat == ImageStat::Max ? *std::max_element(out.data.begin(), out.data.end())
                                                   : top_mean(out.data, opt.top_fraction);
  r.aggregated = std::move(out);
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (labels[idx[t]] == 1) rank_sum += avg;
    i = j;
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("auroc: labels must be 0 or 1");
    n_pos += static_cast<std::size_t>(l);
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auroc: both classes must be present");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

}  // namespace amoe
