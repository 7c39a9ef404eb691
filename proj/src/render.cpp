#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>

#include "trajguide/cli.hpp"

namespace trajguide::cli {
namespace {

constexpr const char* kPalette[] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// "--" is not allowed inside XML comments.
std::string comment_safe(std::string s) {
  for (std::size_t i = s.find("--"); i != std::string::npos; i = s.find("--", i)) s.replace(i, 2, "- -");
  if (!s.empty() && s.back() == '-') s += ' ';
  return s;
}

struct Frame {
  double min_x, max_y, scale, margin;
  double x(double wx) const { return (wx - min_x) * scale + margin; }
  double y(double wy) const { return (max_y - wy) * scale + margin; }
};

}  // namespace

std::string render_svg(const Scenario& s, const RenderOptions& opt, const std::string& comment) {
  double min_x = std::numeric_limits<double>::infinity(), min_y = min_x;
  double max_x = -min_x, max_y = -min_x;
  auto grow = [&](double x, double y) {
    min_x = std::min(min_x, x);
    max_x = std::max(max_x, x);
    min_y = std::min(min_y, y);
    max_y = std::max(max_y, y);
  };
  for (const MapPolyline& p : s.polylines)
    for (const Vec2& v : p.points) grow(v.x, v.y);
  for (const AgentTrack& a : s.agents)
    for (const AgentState& st : a.states) grow(st.x, st.y);
  if (!std::isfinite(min_x)) min_x = min_y = max_x = max_y = 0.0;
  const double pad = 5.0;
  min_x -= pad, min_y -= pad, max_x += pad, max_y += pad;
  const Frame f{min_x, max_y, opt.scale, opt.margin};
  const double w = (max_x - min_x) * opt.scale + 2 * opt.margin;
  const double h = (max_y - min_y) * opt.scale + 2 * opt.margin;

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  if (!comment.empty()) o << "<!-- " << comment_safe(comment) << " -->\n";
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << num(w) << "\" height=\"" << num(h)
    << "\" viewBox=\"0 0 " << num(w) << ' ' << num(h) << "\">\n";
  o << "<rect x=\"0\" y=\"0\" width=\"" << num(w) << "\" height=\"" << num(h) << "\" fill=\"#f4f4f0\"/>\n";

  auto points = [&](const std::vector<Vec2>& pts) {
    std::string out;
    for (const Vec2& v : pts) out += num(f.x(v.x)) + "," + num(f.y(v.y)) + " ";
    if (!out.empty()) out.pop_back();
    return out;
  };

  o << "<g id=\"lanes\" fill=\"none\" stroke-linejoin=\"round\">\n";
  // Surfaces first so centerlines and edges stay visible on top.
  for (const MapPolyline& p : s.polylines) {
    if (p.lane_type == LaneType::edge) continue;
    const char* fill = p.lane_type == LaneType::shoulder ? "#e6dcc0" : "#cfcfcf";
    o << "<polyline points=\"" << points(p.points) << "\" stroke=\"" << fill << "\" stroke-width=\""
      << num(p.width * opt.scale) << "\"/>\n";
  }
  for (const MapPolyline& p : s.polylines) {
    if (p.lane_type == LaneType::edge) {
      o << "<polyline id=\"edge-" << p.id << "\" points=\"" << points(p.points)
        << "\" stroke=\"#333333\" stroke-width=\"2\"/>\n";
    } else {
      o << "<polyline id=\"lane-" << p.id << "\" points=\"" << points(p.points)
        << "\" stroke=\"#ffffff\" stroke-width=\"1\" stroke-dasharray=\"6 6\"/>\n";
    }
  }
  o << "</g>\n";

  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    const AgentTrack& a = s.agents[i];
    const std::string color = kPalette[i % std::size(kPalette)];
    o << "<g id=\"agent-" << a.agent_id << "\">\n";
    const int n = static_cast<int>(a.states.size());
    if (opt.trajectories && n > 1) {
      const int future = std::max(1, n - 1 - s.t_now);
      for (int t = 1; t < n; ++t) {
        const AgentState &p0 = a.states[t - 1], &p1 = a.states[t];
        const bool hist = t <= s.t_now;
        // Future fades from opaque at t_now to faint at the horizon.
        const double alpha = hist ? 0.6 : 1.0 - 0.85 * (t - s.t_now - 1) / static_cast<double>(future);
        o << "<line x1=\"" << num(f.x(p0.x)) << "\" y1=\"" << num(f.y(p0.y)) << "\" x2=\"" << num(f.x(p1.x))
          << "\" y2=\"" << num(f.y(p1.y)) << "\" stroke=\"" << (hist ? "#555555" : color)
          << "\" stroke-width=\"2\" stroke-linecap=\"round\" stroke-opacity=\"" << num(alpha) << "\"/>\n";
      }
    }
    if (s.t_now < n) {
      const AgentState& c = a.states[s.t_now];
      const double deg = -c.heading * 180.0 / std::numbers::pi;
      const double L = a.extent.length * opt.scale, W = a.extent.width * opt.scale;
      o << "<rect class=\"agent\" x=\"" << num(-L / 2) << "\" y=\"" << num(-W / 2) << "\" width=\"" << num(L)
        << "\" height=\"" << num(W) << "\" transform=\"translate(" << num(f.x(c.x)) << ' ' << num(f.y(c.y))
        << ") rotate(" << num(deg) << ")\" fill=\"" << color << "\" stroke=\"#000000\" stroke-width=\"1\"/>\n";
      o << "<text x=\"" << num(f.x(c.x)) << "\" y=\"" << num(f.y(c.y) - W) << "\" font-family=\"sans-serif\" "
        << "font-size=\"12\" text-anchor=\"middle\">a" << i << "</text>\n";
    }
    o << "</g>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace trajguide::cli
