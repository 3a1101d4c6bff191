#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/errors.hpp"
#include "moelab/pipeline.hpp"

namespace moelab {

namespace detail {

struct SeriesKey {
  int block, expert;
  std::string branch;
  bool operator<(const SeriesKey& o) const {
    return std::tie(block, expert, branch) < std::tie(o.block, o.expert, o.branch);
  }
};

inline std::string svg_polyline(const std::vector<float>& ys, float y_max, int w, int h, const std::string& color) {
  std::ostringstream os;
  os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1\" points=\"";
  for (size_t i = 0; i < ys.size(); ++i) {
    const double x = ys.size() > 1 ? double(i) / double(ys.size() - 1) * (w - 20) + 10 : 10 + (w - 20) / 2.0;
    const double y = h - 10 - (y_max > 0 ? double(ys[i]) / y_max * (h - 20) : 0.0);
    os << x << "," << y << " ";
  }
  os << "\"/>\n";
  return os.str();
}

}  // namespace detail

// Emits the per-expert gradient series CSV, the cluster heat grid CSV, and a
// simple line-chart SVG per block from a finished run's trace artifacts.
inline void emit_plot_data(const RunPaths& paths) {
  std::ifstream trace_in(paths.trace_jsonl());
  if (!trace_in) throw IoError("missing trace log " + paths.trace_jsonl().string() + "; run pretrain first");

  std::map<detail::SeriesKey, std::vector<float>> series;
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(trace_in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    rows.push_back(j);
    series[{j.at("block").get<int>(), j.at("expert").get<int>(), j.at("branch").get<std::string>()}].push_back(
        j.at("grad_l2").get<float>());
  }

  {
    std::ofstream out(paths.plots() / "grad_series.csv");
    if (!out) throw IoError("cannot write grad series csv");
    out << "step,block,expert,branch,grad_l2,act_mean\n";
    for (const auto& j : rows)
      out << j.at("step").get<int>() << "," << j.at("block").get<int>() << "," << j.at("expert").get<int>() << ","
          << j.at("branch").get<std::string>() << "," << j.at("grad_l2").get<float>() << ","
          << j.at("act_mean").get<float>() << "\n";
  }

  std::ifstream cin_(paths.cluster_json());
  if (!cin_) throw IoError("missing cluster file " + paths.cluster_json().string());
  nlohmann::json cj;
  cin_ >> cj;
  auto cluster = ExpertCluster::from_json(cj);
  int n_experts = 0;
  for (const auto& [key, s] : series) n_experts = std::max(n_experts, key.expert + 1);
  {
    std::ofstream out(paths.plots() / "cluster_grid.csv");
    if (!out) throw IoError("cannot write cluster grid csv");
    out << "block,expert,selected\n";
    for (size_t b = 0; b < cluster.blocks.size(); ++b) {
      std::vector<int> marks(size_t(n_experts), 0);
      for (int e : cluster.blocks[b]) marks[size_t(e)] = 1;
      for (int e = 0; e < n_experts; ++e) out << b << "," << e << "," << marks[size_t(e)] << "\n";
    }
  }

  int n_blocks = int(cluster.blocks.size());
  const int w = 480, h = 240;
  for (int b = 0; b < n_blocks; ++b) {
    float y_max = 0.0f;
    for (const auto& [key, s] : series)
      if (key.block == b)
        for (float v : s) y_max = std::max(y_max, v);
    std::ofstream out(paths.plots() / ("grad_series_block" + std::to_string(b) + ".svg"));
    if (!out) throw IoError("cannot write block svg");
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    out << "<rect x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
    out << "<text x=\"12\" y=\"16\" font-size=\"11\">block " << b
        << " expert grad L2 (clean solid-ish gray, poison red)</text>\n";
    for (const auto& [key, s] : series) {
      if (key.block != b) continue;
      out << detail::svg_polyline(s, y_max, w, h, key.branch == "poison" ? "#cc2222" : "#888888");
    }
    out << "</svg>\n";
  }
}

}  // namespace moelab
