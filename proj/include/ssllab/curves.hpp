// Loss-curve artifacts: parse run metrics CSVs into per-epoch series and
// render a self-contained SVG line chart (one series per run) plus a merged
// tidy CSV for downstream analysis.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ssllab/common.hpp"

namespace ssllab {

/// Per-epoch mean of every metric logged by one run.
struct RunCurve {
  std::string name;
  // metric -> (epoch -> mean value), epochs sorted by map order.
  std::map<std::string, std::map<int64_t, double>> epoch_mean;
};

namespace curvedetail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline double parse_num(const std::string& v, const std::string& where) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    throw FormatError(where + ": expected a number, got '" + v + "'");
  return x;
}

}  // namespace curvedetail

/// Parse one metrics log (the `epoch,step,split,metric,value,lr` format the
/// trainers write). Malformed content raises FormatError naming the 1-based
/// line; a log with no data rows is an error too.
inline RunCurve parse_metrics_log(const std::string& name,
                                  const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int64_t lineno = 0;
  if (!std::getline(in, line))
    throw FormatError(name + ": empty metrics CSV");
  ++lineno;
  if (line == "epoch,step,split,metric,value,lr\r")
    line.pop_back();  // tolerate CRLF
  if (line != "epoch,step,split,metric,value,lr")
    throw FormatError(name + " line 1: expected header "
                      "'epoch,step,split,metric,value,lr', got '" + line +
                      "'");

  RunCurve curve;
  curve.name = name;
  std::map<std::string, std::map<int64_t, std::pair<double, int64_t>>> acc;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = name + " line " + std::to_string(lineno);
    const auto f = curvedetail::split_fields(line);
    if (f.size() != 6)
      throw FormatError(where + ": expected 6 fields, got " +
                        std::to_string(f.size()));
    const int64_t epoch =
        static_cast<int64_t>(curvedetail::parse_num(f[0], where));
    curvedetail::parse_num(f[1], where);  // step: validated, not aggregated
    const std::string& metric = f[3];
    const double value = curvedetail::parse_num(f[4], where);
    curvedetail::parse_num(f[5], where);  // lr: validated only
    if (metric.empty()) throw FormatError(where + ": empty metric name");
    auto& slot = acc[metric][epoch];
    slot.first += value;
    slot.second += 1;
  }
  if (acc.empty()) throw FormatError(name + ": no data rows");
  for (const auto& [metric, epochs] : acc)
    for (const auto& [epoch, sum_count] : epochs)
      curve.epoch_mean[metric][epoch] =
          sum_count.first / static_cast<double>(sum_count.second);
  return curve;
}

inline RunCurve load_metrics_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open metrics CSV: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  // Name series by file stem (strip directory and extension).
  std::string name = path;
  const size_t slash = name.find_last_of("/\\");
  if (slash != std::string::npos) name = name.substr(slash + 1);
  const size_t dot = name.rfind('.');
  if (dot != std::string::npos && dot > 0) name = name.substr(0, dot);
  RunCurve c = parse_metrics_log(path, ss.str());
  c.name = name;
  return c;
}

/// Merged long-format table: `run,epoch,metric,value`, sorted by
/// (run, metric, epoch) — deterministic for bitwise comparisons.
inline std::string merged_tidy_csv(const std::vector<RunCurve>& runs) {
  std::ostringstream out;
  out << "run,epoch,metric,value\n";
  for (const auto& r : runs)
    for (const auto& [metric, epochs] : r.epoch_mean)
      for (const auto& [epoch, value] : epochs) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", value);
        out << r.name << "," << epoch << "," << metric << "," << buf << "\n";
      }
  return out.str();
}

namespace curvedetail {

inline const char* series_color(size_t i) {
  static const char* palette[] = {"#1c6fb8", "#d2452c", "#2b8b57", "#8450a8",
                                  "#b8860b", "#3aa6a6", "#c2428a", "#6b6b6b"};
  return palette[i % (sizeof(palette) / sizeof(palette[0]))];
}

struct Panel {
  std::string title;
  double y_min, y_max;
  // One polyline per run: (epoch, value) pairs.
  std::vector<std::pair<std::string, std::vector<std::pair<int64_t, double>>>>
      series;
};

inline void render_panel(std::ostringstream& svg, const Panel& p, double x0,
                         double y0, double w, double h, int64_t epoch_max) {
  const double plot_x = x0 + 56, plot_y = y0 + 28;
  const double plot_w = w - 72, plot_h = h - 64;
  svg << "<text x='" << (x0 + w / 2) << "' y='" << (y0 + 16)
      << "' text-anchor='middle' font-size='14' fill='#222'>" << p.title
      << "</text>\n";
  svg << "<rect x='" << plot_x << "' y='" << plot_y << "' width='" << plot_w
      << "' height='" << plot_h
      << "' fill='none' stroke='#888' stroke-width='1'/>\n";
  auto sx = [&](double e) {
    return epoch_max == 0 ? plot_x
                          : plot_x + plot_w * (e / static_cast<double>(epoch_max));
  };
  auto sy = [&](double v) {
    const double t = (v - p.y_min) / (p.y_max - p.y_min);
    return plot_y + plot_h * (1.0 - std::min(1.0, std::max(0.0, t)));
  };
  // Y ticks at min, mid, max; x ticks at 0, mid, max epoch.
  for (double v : {p.y_min, (p.y_min + p.y_max) / 2, p.y_max}) {
    svg << "<line x1='" << (plot_x - 4) << "' y1='" << sy(v) << "' x2='"
        << plot_x << "' y2='" << sy(v) << "' stroke='#888'/>\n";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    svg << "<text x='" << (plot_x - 8) << "' y='" << (sy(v) + 4)
        << "' text-anchor='end' font-size='11' fill='#444'>" << buf
        << "</text>\n";
  }
  for (int64_t e : {static_cast<int64_t>(0), epoch_max / 2, epoch_max}) {
    svg << "<line x1='" << sx(static_cast<double>(e)) << "' y1='"
        << (plot_y + plot_h) << "' x2='" << sx(static_cast<double>(e))
        << "' y2='" << (plot_y + plot_h + 4) << "' stroke='#888'/>\n";
    svg << "<text x='" << sx(static_cast<double>(e)) << "' y='"
        << (plot_y + plot_h + 16)
        << "' text-anchor='middle' font-size='11' fill='#444'>" << e
        << "</text>\n";
  }
  svg << "<text x='" << (plot_x + plot_w / 2) << "' y='" << (y0 + h - 6)
      << "' text-anchor='middle' font-size='12' fill='#222'>epoch</text>\n";

  for (size_t i = 0; i < p.series.size(); ++i) {
    const auto& [run, pts] = p.series[i];
    if (pts.empty()) continue;
    svg << "<polyline fill='none' stroke='" << series_color(i)
        << "' stroke-width='1.8' points='";
    for (const auto& [e, v] : pts)
      svg << sx(static_cast<double>(e)) << "," << sy(v) << " ";
    svg << "'/>\n";
  }
}

}  // namespace curvedetail

/// Self-contained SVG: a loss panel (y clamped to [-1, 0], the symmetric
/// cosine bound) plus, when any run logged it, a representation_std panel.
/// A legend names each input run with its series color.
inline std::string render_curves_svg(const std::vector<RunCurve>& runs) {
  if (runs.empty()) throw ValueError("curves: no runs to draw");
  int64_t epoch_max = 0;
  bool any_repstd = false;
  double repstd_max = 0.0;
  for (const auto& r : runs) {
    for (const auto& [metric, epochs] : r.epoch_mean) {
      if (!epochs.empty()) epoch_max = std::max(epoch_max, epochs.rbegin()->first);
      if (metric == "representation_std") {
        any_repstd = true;
        for (const auto& [e, v] : epochs) repstd_max = std::max(repstd_max, v);
      }
    }
  }

  curvedetail::Panel loss_panel;
  loss_panel.title = "loss (epoch mean)";
  loss_panel.y_min = -1.0;
  loss_panel.y_max = 0.0;
  curvedetail::Panel std_panel;
  std_panel.title = "representation_std (epoch mean)";
  std_panel.y_min = 0.0;
  std_panel.y_max = repstd_max > 0 ? repstd_max * 1.1 : 1.0;
  for (const auto& r : runs) {
    std::vector<std::pair<int64_t, double>> loss_pts, std_pts;
    auto it = r.epoch_mean.find("loss");
    if (it != r.epoch_mean.end())
      for (const auto& [e, v] : it->second) loss_pts.emplace_back(e, v);
    it = r.epoch_mean.find("representation_std");
    if (it != r.epoch_mean.end())
      for (const auto& [e, v] : it->second) std_pts.emplace_back(e, v);
    loss_panel.series.emplace_back(r.name, std::move(loss_pts));
    std_panel.series.emplace_back(r.name, std::move(std_pts));
  }

  const double W = 880;
  const double panel_h = 300;
  const double legend_h = 28.0 + 18.0 * static_cast<double>(runs.size());
  const double H = panel_h * (any_repstd ? 2 : 1) + legend_h;
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W
      << "' height='" << H << "' viewBox='0 0 " << W << " " << H << "'>\n";
  svg << "<rect width='" << W << "' height='" << H << "' fill='white'/>\n";
  curvedetail::render_panel(svg, loss_panel, 0, 0, W, panel_h, epoch_max);
  double y = panel_h;
  if (any_repstd) {
    curvedetail::render_panel(svg, std_panel, 0, y, W, panel_h, epoch_max);
    y += panel_h;
  }
  // Legend.
  svg << "<text x='16' y='" << (y + 18)
      << "' font-size='12' fill='#222'>runs:</text>\n";
  for (size_t i = 0; i < runs.size(); ++i) {
    const double ly = y + 28 + 18 * static_cast<double>(i);
    svg << "<rect x='24' y='" << (ly - 9) << "' width='18' height='4' fill='"
        << curvedetail::series_color(i) << "'/>\n";
    svg << "<text x='48' y='" << ly << "' font-size='12' fill='#222'>"
        << runs[i].name << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace ssllab
