#include "amoe/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace amoe {

using nlohmann::json;

AnomalyResult score_sample(const AnomalyMoE& model, const PreparedSample& s, const AggregateOptions& opt) {
  auto r = model.infer(s);
  const auto& stats = model.score_stats().per_class;
  auto it = stats.find(s.class_id);
  aggregate(r, it == stats.end() ? nullptr : &it->second, opt);
  return r;
}

void write_pgm(const std::filesystem::path& path, const Tensor& map, double lo, double hi, std::size_t scale) {
  if (scale == 0) throw std::invalid_argument("write_pgm: scale must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::size_t w = map.cols * scale, h = map.rows * scale;
  out << "P5\n" << w << " " << h << "\n255\n";
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<unsigned char> row(w);
  for (std::size_t r = 0; r < map.rows; ++r) {
    for (std::size_t c = 0; c < map.cols; ++c) {
      const double v = std::clamp((map(r, c) - lo) / span, 0.0, 1.0);
      std::fill_n(row.begin() + static_cast<std::ptrdiff_t>(c * scale), scale, static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    for (std::size_t k = 0; k < scale; ++k) out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(w));
  }
}

namespace {

void dump_maps(const std::filesystem::path& dir, const std::string& id, const AnomalyResult& r) {
  static const char* names[kNumGroups] = {"patch", "component", "global"};
  auto range = [](const Tensor& t) {
    const auto [lo, hi] = std::minmax_element(t.data.begin(), t.data.end());
    return std::pair{*lo, *hi};
  };
  for (std::size_t g = 0; g < kNumGroups; ++g)
    if (r.maps[g]) {
      const auto [lo, hi] = range(*r.maps[g]);
      write_pgm(dir / (id + "_" + names[g] + ".pgm"), *r.maps[g], lo, hi);
    }
  const auto [lo, hi] = range(r.aggregated);
  write_pgm(dir / (id + "_aggregate.pgm"), r.aggregated, lo, hi);
}

}  // namespace

EvalReport evaluate(const AnomalyMoE& model, const Dataset& ds, const EvalOptions& opt) {
  if (!opt.map_dir.empty()) std::filesystem::create_directories(opt.map_dir);
  const std::size_t ne = model.config().num_experts();
  EvalReport rep;
  std::map<std::string, std::vector<double>> type_acc;
  std::vector<double> pixel_acc;
  double n_total = 0.0;

  for (const auto& c : ds.classes) {
    ClassReport cr;
    cr.class_id = c.class_id;
    cr.expert_gate.assign(ne, 0.0);
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<std::string> types;
    std::vector<double> pix_scores;
    std::vector<int> pix_labels;
    bool masks_complete = true;
    for (const auto& e : c.test) {
      const auto s = model.prepare(e.bundle);
      const auto r = score_sample(model, s, opt.aggregate);
      const int label = e.bundle.label == Label::Anomalous ? 1 : 0;
      scores.push_back(r.image_score);
      labels.push_back(label);
      types.push_back(label ? e.anomaly_type : "none");
      (label ? cr.n_anomalous : cr.n_normal)++;
      for (std::size_t g = 0; g < kNumGroups; ++g) cr.gate_mass[g] += r.group_mass[g];
      for (std::size_t j = 0; j < ne; ++j) cr.expert_gate[j] += r.gates[j];
      if (e.bundle.pixel_mask) {
        const auto& m = *e.bundle.pixel_mask;
        for (std::size_t i = 0; i < m.size(); ++i) {
          pix_scores.push_back(r.aggregated.data[i]);
          pix_labels.push_back(m[i]);
        }
      } else {
        masks_complete = false;
      }
      rep.samples.push_back(SampleScore{e.bundle.sample_id, c.class_id, types.back(), label, r.image_score, r.topk, r.group_mass});
      if (!opt.map_dir.empty()) dump_maps(opt.map_dir, e.bundle.sample_id, r);
    }
    if (cr.n_normal == 0 || cr.n_anomalous == 0)
      throw std::invalid_argument("evaluate: test split of class " + c.class_id + " needs both normal and anomalous samples");
    const double n = static_cast<double>(c.test.size());
    for (double& v : cr.gate_mass) v /= n;
    for (double& v : cr.expert_gate) v /= n;
    cr.image_auroc = auroc(scores, labels);

    const bool both = std::count(pix_labels.begin(), pix_labels.end(), 1) > 0 &&
                      std::count(pix_labels.begin(), pix_labels.end(), 0) > 0;
    if (masks_complete && both) {
      cr.pixel_auroc = auroc(pix_scores, pix_labels);
      pixel_acc.push_back(*cr.pixel_auroc);
    } else {
      rep.warnings.push_back("class " + c.class_id + ": pixel AUROC omitted (" +
                             (masks_complete ? "masks hold a single label" : "missing masks") + ")");
    }

    std::set<std::string> kinds;
    for (std::size_t i = 0; i < types.size(); ++i)
      if (labels[i]) kinds.insert(types[i]);
    for (const auto& kind : kinds) {
      std::vector<double> s;
      std::vector<int> l;
      for (std::size_t i = 0; i < types.size(); ++i)
        if (!labels[i] || types[i] == kind) {
          s.push_back(scores[i]);
          l.push_back(labels[i]);
        }
      cr.type_auroc[kind] = auroc(s, l);
      type_acc[kind].push_back(cr.type_auroc[kind]);
    }
    for (std::size_t g = 0; g < kNumGroups; ++g) rep.gate_mass[g] += cr.gate_mass[g] * n;
    n_total += n;
    rep.mean_image_auroc += cr.image_auroc;
    rep.classes.push_back(std::move(cr));
  }
  if (rep.classes.empty()) throw std::invalid_argument("evaluate: dataset has no classes");
  rep.mean_image_auroc /= static_cast<double>(rep.classes.size());
  for (double& v : rep.gate_mass) v /= n_total;
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  if (!pixel_acc.empty()) rep.mean_pixel_auroc = mean(pixel_acc);
  for (const auto& [kind, v] : type_acc) rep.mean_type_auroc[kind] = mean(v);
  return rep;
}

json EvalReport::to_json() const {
  json j;
  j["mean_image_auroc"] = mean_image_auroc;
  j["mean_pixel_auroc"] = mean_pixel_auroc ? json(*mean_pixel_auroc) : json(nullptr);
  j["mean_type_auroc"] = mean_type_auroc;
  j["gate_mass"] = {{"patch", gate_mass[0]}, {"component", gate_mass[1]}, {"global", gate_mass[2]}};
  j["warnings"] = warnings;
  j["classes"] = json::array();
  for (const auto& c : classes)
    j["classes"].push_back({{"class_id", c.class_id},
                            {"n_normal", c.n_normal},
                            {"n_anomalous", c.n_anomalous},
                            {"image_auroc", c.image_auroc},
                            {"pixel_auroc", c.pixel_auroc ? json(*c.pixel_auroc) : json(nullptr)},
                            {"type_auroc", c.type_auroc},
                            {"gate_mass", {{"patch", c.gate_mass[0]}, {"component", c.gate_mass[1]}, {"global", c.gate_mass[2]}}},
                            {"expert_gate", c.expert_gate}});
  j["samples"] = json::array();
  for (const auto& s : samples)
    j["samples"].push_back({{"sample_id", s.sample_id},
                            {"class_id", s.class_id},
                            {"anomaly_type", s.anomaly_type},
                            {"label", s.label},
                            {"image_score", s.image_score},
                            {"topk", s.topk},
                            {"group_mass", s.group_mass}});
  return j;
}

std::string EvalReport::table() const {
  std::ostringstream os;
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string("-"); };
  auto cell = [](const std::map<std::string, double>& m, const char* k) {
    auto it = m.find(k);
    if (it == m.end()) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", it->second);
    return std::string(buf);
  };
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %6s %6s %8s %8s %8s %9s %8s %6s %6s %6s\n", "class", "normal", "anom",
                "image", "pixel", "local", "component", "global", "gP", "gC", "gG");
  os << line;
  for (const auto& c : classes) {
    std::snprintf(line, sizeof line, "%-12s %6zu %6zu %8s %8s %8s %9s %8s %6.3f %6.3f %6.3f\n", c.class_id.c_str(),
                  c.n_normal, c.n_anomalous, num(c.image_auroc).c_str(), opt(c.pixel_auroc).c_str(),
                  cell(c.type_auroc, "local").c_str(), cell(c.type_auroc, "component").c_str(),
                  cell(c.type_auroc, "global").c_str(), c.gate_mass[0], c.gate_mass[1], c.gate_mass[2]);
    os << line;
  }
  std::snprintf(line, sizeof line, "%-12s %6s %6s %8s %8s %8s %9s %8s %6.3f %6.3f %6.3f\n", "mean", "", "",
                num(mean_image_auroc).c_str(), opt(mean_pixel_auroc).c_str(), cell(mean_type_auroc, "local").c_str(),
                cell(mean_type_auroc, "component").c_str(), cell(mean_type_auroc, "global").c_str(), gate_mass[0],
                gate_mass[1], gate_mass[2]);
  os << line;
  for (const auto& w : warnings) os << "warning: " << w << "\n";
  return os.str();
}

}  // namespace amoe
