#include "trajguide/frenet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>

namespace trajguide {

namespace {

constexpr double kCellSlack = 1e-12;

struct CellParams {
  Vec2 v;      // segment start
  Vec2 e;      // segment vector
  double len;  // |e|
  Vec2 n;      // unit left normal of the segment
  Vec2 nk;     // miter normal at the start vertex
  Vec2 dn;     // miter normal change across the segment (parallel to e)
};

CellParams cell(const RefPath& path, std::size_t k) {
  const Vec2 v = path.vertices[k];
  const Vec2 e = path.vertices[k + 1] - v;
  return {v, e, path.cum_s[k + 1] - path.cum_s[k], left_normal(path.seg_dir[k]), path.vertex_normal[k],
          path.vertex_normal[k + 1] - path.vertex_normal[k]};
}

}  // namespace

RefPath build_ref_path(std::span<const Vec2> points) {
  if (points.size() < 2) throw std::invalid_argument("reference path needs at least 2 points");
  RefPath path;
  path.vertices.assign(points.begin(), points.end());
  path.cum_s.push_back(0.0);
  for (std::size_t i = 1; i < points.size(); ++i) {
    const Vec2 e = points[i] - points[i - 1];
    const double len = norm(e);
    if (!(len > 0.0)) {
      throw std::invalid_argument("reference path has duplicate consecutive points at index " +
                                  std::to_string(i));
    }
    path.cum_s.push_back(path.cum_s.back() + len);
    path.seg_dir.push_back((1.0 / len) * e);
  }
  const std::size_t m = path.seg_dir.size();
  path.vertex_normal.resize(m + 1);
  path.vertex_normal[0] = left_normal(path.seg_dir[0]);
  path.vertex_normal[m] = left_normal(path.seg_dir[m - 1]);
  for (std::size_t i = 1; i < m; ++i) {
    const Vec2 a = left_normal(path.seg_dir[i - 1]);
    const Vec2 b = left_normal(path.seg_dir[i]);
    const double c = 1.0 + dot(a, b);
    path.vertex_normal[i] = c > 1e-9 ? (1.0 / c) * (a + b) : b;
  }
  return path;
}

RefPath build_ref_path(const MapPolyline& polyline) { return build_ref_path(polyline.points); }

Projection project_detailed(const RefPath& path, Vec2 p) {
  std::optional<Projection> best;
  for (std::size_t k = 0; k < path.segments(); ++k) {
    const CellParams c = cell(path, k);
    const Vec2 w = p - c.v;
    const double d = dot(w, c.n);
    const double den = c.len * c.len + d * dot(c.dn, c.e);
    if (!(den > 0.0)) continue;
    const double u = (dot(w, c.e) - d * dot(c.nk, c.e)) / den;
    if (u < -kCellSlack || u > 1.0 + kCellSlack) continue;
    if (!best || std::abs(d) < std::abs(best->coord.d)) {
      const double uc = std::clamp(u, 0.0, 1.0);
      best = Projection{{path.cum_s[k] + uc * c.len, d}, static_cast<int>(k), uc, false};
    }
  }
  if (best) return *best;

  // Outside every cell: nearest segment, with u clamped to the segment.
  std::size_t k_best = 0;
  double dist_best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < path.segments(); ++k) {
    const double dist = point_segment_distance(p, path.vertices[k], path.vertices[k + 1]);
    if (dist < dist_best) {
      dist_best = dist;
      k_best = k;
    }
  }
  const CellParams c = cell(path, k_best);
  const Vec2 w = p - c.v;
  const double u = std::clamp(dot(w, c.e) / (c.len * c.len), 0.0, 1.0);
  return Projection{{path.cum_s[k_best] + u * c.len, dot(w, c.n)}, static_cast<int>(k_best), u, true};
}

FrenetCoord project(const RefPath& path, Vec2 p) { return project_detailed(path, p).coord; }

Vec2 to_cartesian(const RefPath& path, FrenetCoord fc) {
  if (!(fc.s >= 0.0 && fc.s <= path.length())) {
    throw std::out_of_range("arc length " + std::to_string(fc.s) + " outside [0, " +
                            std::to_string(path.length()) + "]");
  }
  auto it = std::upper_bound(path.cum_s.begin(), path.cum_s.end(), fc.s);
  std::size_t k = static_cast<std::size_t>(std::distance(path.cum_s.begin(), it));
  k = std::min(k == 0 ? 0 : k - 1, path.segments() - 1);
  const CellParams c = cell(path, k);
  const double u = (fc.s - path.cum_s[k]) / c.len;
  return c.v + u * c.e + fc.d * (c.nk + u * c.dn);
}

FrenetTrajectory project_trajectory(const RefPath& path, std::span<const Vec2> traj) {
  FrenetTrajectory out;
  out.s.reserve(traj.size());
  out.d.reserve(traj.size());
  out.frozen.reserve(traj.size());
  for (const Vec2& p : traj) {
    const Projection pr = project_detailed(path, p);
    out.s.push_back(pr.coord.s);
    out.d.push_back(pr.coord.d);
    out.frozen.push_back(pr);
  }
  return out;
}

FrenetVars project_trajectory(const RefPath& path, grad::Var xy, const std::vector<Projection>& frozen) {
  namespace g = grad;
  const std::size_t T = frozen.size();
  if (xy.shape() != g::Shape{T, 2}) {
    throw g::ShapeError("project_trajectory expects [" + std::to_string(T) + ", 2], got " +
                        g::shape_str(xy.shape()));
  }
  g::Tensor origin({T, 2}), normal({T, 2}), tangent({T, 2});
  g::Tensor a({T}), b({T}), len2({T}), len({T}), base({T}), free({T}), fixed_u({T});
  for (std::size_t t = 0; t < T; ++t) {
    const CellParams c = cell(path, static_cast<std::size_t>(frozen[t].segment));
    origin.at(t, 0) = c.v.x;
    origin.at(t, 1) = c.v.y;
    normal.at(t, 0) = c.n.x;
    normal.at(t, 1) = c.n.y;
    tangent.at(t, 0) = c.e.x;
    tangent.at(t, 1) = c.e.y;
    a[t] = dot(c.nk, c.e);
    b[t] = dot(c.dn, c.e);
    len2[t] = c.len * c.len;
    len[t] = c.len;
    base[t] = path.cum_s[frozen[t].segment];
    free[t] = frozen[t].clamped ? 0.0 : 1.0;
    fixed_u[t] = frozen[t].clamped ? frozen[t].u : 0.0;
  }
  g::Tape& tape = xy.tape();
  auto k = [&tape](g::Tensor v) { return tape.constant(std::move(v)); };

  g::Var w = g::sub(xy, k(origin));
  g::Var d = g::sum(g::mul(w, k(normal)), 1);
  g::Var along = g::sum(g::mul(w, k(tangent)), 1);
  g::Var u = g::div(g::sub(along, g::mul(d, k(a))), g::add(k(len2), g::mul(d, k(b))));
  u = g::add(g::mul(u, k(free)), k(fixed_u));
  g::Var s = g::add(k(base), g::mul(u, k(len)));
  return {s, d};
}

FrenetVars project_trajectory(const RefPath& path, grad::Var xy) {
  const grad::Tensor& v = xy.value();
  if (v.rank() != 2 || v.dim(1) != 2) {
    throw grad::ShapeError("project_trajectory expects [T, 2], got " + grad::shape_str(v.shape()));
  }
  std::vector<Vec2> pts(v.dim(0));
  for (std::size_t t = 0; t < pts.size(); ++t) pts[t] = {v.at(t, 0), v.at(t, 1)};
  return project_trajectory(path, xy, project_trajectory(path, pts).frozen);
}

}  // namespace trajguide
