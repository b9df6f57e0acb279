#pragma once

// Minimal SVG emitters for the run report: heatmaps, a labelled scatter with
// per-model trajectories, and bar charts.

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "repspace/common.hpp"
#include "repspace/io.hpp"

namespace repspace::svg {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string open(double w, double h, const std::string& title) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
         "\" viewBox=\"0 0 " + num(w) + " " + num(h) + "\" font-family=\"sans-serif\" font-size=\"11\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n" + "<text x=\"" + num(w / 2) +
         "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) + "</text>\n";
}

inline std::string text(double x, double y, const std::string& s, const std::string& anchor = "middle",
                        const std::string& extra = "") {
  return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + anchor + "\"" + extra + ">" + escape(s) +
         "</text>\n";
}

inline std::string rgb(int r, int g, int b) {
  return "rgb(" + std::to_string(r) + "," + std::to_string(g) + "," + std::to_string(b) + ")";
}

// Sequential white->blue for nonnegative data, blue-white-red otherwise.
inline std::string color(double v, double lo, double hi) {
  if (lo >= 0.0) {
    const double t = hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.0;
    return rgb(static_cast<int>(255 - 200 * t), static_cast<int>(255 - 150 * t), 255);
  }
  const double m = std::max(std::abs(lo), std::abs(hi));
  const double t = m > 0.0 ? std::clamp(v / m, -1.0, 1.0) : 0.0;
  if (t >= 0) return rgb(255, static_cast<int>(255 - 200 * t), static_cast<int>(255 - 200 * t));
  return rgb(static_cast<int>(255 + 200 * t), static_cast<int>(255 + 200 * t), 255);
}

inline const char* palette(std::size_t k) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[k % 10];
}

/// Cell values are printed when the matrix is small enough to read.
inline std::string heatmap(const std::string& title, const std::vector<std::string>& row_ids,
                           const std::vector<std::string>& col_ids, const Matrix& m) {
  require(static_cast<Eigen::Index>(row_ids.size()) == m.rows() && static_cast<Eigen::Index>(col_ids.size()) == m.cols(),
          "heatmap: label counts differ from matrix shape");
  const double cell = std::clamp(480.0 / static_cast<double>(std::max<Eigen::Index>(1, m.cols())), 6.0, 48.0);
  const double left = 90, top = 90;
  const double w = left + cell * static_cast<double>(m.cols()) + 20, h = top + cell * static_cast<double>(m.rows()) + 20;
  const double lo = m.size() ? m.minCoeff() : 0.0, hi = m.size() ? m.maxCoeff() : 0.0;
  std::string s = open(std::max(w, 240.0), h, title);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double y = top + cell * static_cast<double>(r);
    s += text(left - 4, y + cell / 2 + 4, row_ids[static_cast<std::size_t>(r)], "end");
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double x = left + cell * static_cast<double>(c);
      s += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(cell) + "\" height=\"" + num(cell) +
           "\" fill=\"" + color(m(r, c), lo, hi) + "\"><title>" + escape(row_ids[static_cast<std::size_t>(r)]) + " / " +
           escape(col_ids[static_cast<std::size_t>(c)]) + ": " + Header::format_double(m(r, c)) + "</title></rect>\n";
      if (cell >= 30) s += text(x + cell / 2, y + cell / 2 + 4, num(m(r, c)), "middle", " font-size=\"9\"");
    }
  }
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    const double x = left + cell * static_cast<double>(c) + cell / 2;
    s += "<text x=\"" + num(x) + "\" y=\"" + num(top - 6) + "\" transform=\"rotate(-60 " + num(x) + " " +
         num(top - 6) + ")\">" + escape(col_ids[static_cast<std::size_t>(c)]) + "</text>\n";
  }
  return s + "</svg>\n";
}

struct ScatterPoint {
  std::string id;
  double x = 0, y = 0;
  std::string group;
  std::optional<std::size_t> layer;
};

/// Points coloured by group; points of one group with layer indices are
/// joined in layer order.
inline std::string scatter(const std::string& title, const std::vector<ScatterPoint>& pts, const std::string& xlabel,
                           const std::string& ylabel) {
  const double W = 560, H = 480, left = 60, right = 20, top = 40, bottom = 50;
  double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  if (!pts.empty()) {
    x0 = x1 = pts[0].x;
    y0 = y1 = pts[0].y;
    for (const auto& p : pts) {
      x0 = std::min(x0, p.x), x1 = std::max(x1, p.x), y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
    }
  }
  const double padx = std::max(1e-9, 0.08 * (x1 - x0)), pady = std::max(1e-9, 0.08 * (y1 - y0));
  x0 -= padx, x1 += padx, y0 -= pady, y1 += pady;
  auto px = [&](double v) { return left + (v - x0) / (x1 - x0) * (W - left - right); };
  auto py = [&](double v) { return H - bottom - (v - y0) / (y1 - y0) * (H - top - bottom); };

  std::map<std::string, std::size_t> group_index;
  for (const auto& p : pts) group_index.emplace(p.group, group_index.size());

  std::string s = open(W, H, title);
  s += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(W - left - right) + "\" height=\"" +
       num(H - top - bottom) + "\" fill=\"none\" stroke=\"#888\"/>\n";
  if (x0 < 0 && x1 > 0)
    s += "<line x1=\"" + num(px(0)) + "\" y1=\"" + num(top) + "\" x2=\"" + num(px(0)) + "\" y2=\"" + num(H - bottom) +
         "\" stroke=\"#ddd\"/>\n";
  if (y0 < 0 && y1 > 0)
    s += "<line x1=\"" + num(left) + "\" y1=\"" + num(py(0)) + "\" x2=\"" + num(W - right) + "\" y2=\"" + num(py(0)) +
         "\" stroke=\"#ddd\"/>\n";
  s += text((left + W - right) / 2, H - 12, xlabel);
  s += "<text x=\"16\" y=\"" + num((top + H - bottom) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       num((top + H - bottom) / 2) + ")\">" + escape(ylabel) + "</text>\n";

  for (const auto& [g, gi] : group_index) {
    std::vector<const ScatterPoint*> chain;
    for (const auto& p : pts)
      if (p.group == g && p.layer) chain.push_back(&p);
    if (chain.size() < 2) continue;
    std::sort(chain.begin(), chain.end(), [](auto* a, auto* b) { return *a->layer < *b->layer; });
    s += "<polyline fill=\"none\" stroke=\"" + std::string(palette(gi)) + "\" stroke-opacity=\"0.5\" points=\"";
    for (auto* p : chain) s += num(px(p->x)) + "," + num(py(p->y)) + " ";
    s += "\"/>\n";
  }
  for (const auto& p : pts) {
    const char* c = palette(group_index[p.group]);
    s += "<circle cx=\"" + num(px(p.x)) + "\" cy=\"" + num(py(p.y)) + "\" r=\"4\" fill=\"" + c + "\"><title>" +
         escape(p.id) + "</title></circle>\n";
    s += text(px(p.x) + 6, py(p.y) - 4, p.id, "start", " font-size=\"9\"");
  }
  double ly = top + 12;
  for (const auto& [g, gi] : group_index) {
    s += "<rect x=\"" + num(W - right - 110) + "\" y=\"" + num(ly - 8) + "\" width=\"8\" height=\"8\" fill=\"" +
         palette(gi) + "\"/>\n";
    s += text(W - right - 98, ly, g.empty() ? "(none)" : g, "start");
    ly += 14;
  }
  return s + "</svg>\n";
}

inline std::string bars(const std::string& title, const std::vector<std::string>& labels, const std::vector<double>& values,
                        const std::string& ylabel, std::optional<double> y_max = std::nullopt) {
  require(labels.size() == values.size(), "bars: label count differs from value count");
  const double slot = std::clamp(480.0 / static_cast<double>(std::max<std::size_t>(1, values.size())), 8.0, 60.0);
  const double left = 60, top = 40, plot_h = 280, bottom = 90;
  const double W = left + slot * static_cast<double>(values.size()) + 20, H = top + plot_h + bottom;
  double hi = y_max.value_or(0.0);
  for (double v : values) hi = std::max(hi, v);
  if (!(hi > 0.0)) hi = 1.0;
  std::string s = open(std::max(W, 240.0), H, title);
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(top + plot_h) + "\" x2=\"" + num(W - 10) + "\" y2=\"" +
       num(top + plot_h) + "\" stroke=\"#444\"/>\n";
  s += text(left - 4, top + 4, num(hi), "end");
  s += text(left - 4, top + plot_h, "0", "end");
  s += "<text x=\"16\" y=\"" + num(top + plot_h / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       num(top + plot_h / 2) + ")\">" + escape(ylabel) + "</text>\n";
  for (std::size_t k = 0; k < values.size(); ++k) {
    const double v = std::max(0.0, values[k]);
    const double bh = v / hi * plot_h, x = left + slot * static_cast<double>(k);
    s += "<rect x=\"" + num(x + slot * 0.15) + "\" y=\"" + num(top + plot_h - bh) + "\" width=\"" + num(slot * 0.7) +
         "\" height=\"" + num(bh) + "\" fill=\"#4c72b0\"><title>" + escape(labels[k]) + ": " +
         Header::format_double(values[k]) + "</title></rect>\n";
    const double lx = x + slot / 2, ly = top + plot_h + 12;
    s += "<text x=\"" + num(lx) + "\" y=\"" + num(ly) + "\" text-anchor=\"end\" transform=\"rotate(-60 " + num(lx) +
         " " + num(ly) + ")\">" + escape(labels[k]) + "</text>\n";
  }
  return s + "</svg>\n";
}

}  // namespace repspace::svg
