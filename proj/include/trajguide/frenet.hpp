#pragma once

// Arc-length parameterized reference paths and (s, d) projection.
//
// Each segment owns a cell bounded by the miter normals at its two vertices.
// Inside a cell, d is the signed offset from the segment line (left positive)
// and s interpolates linearly along the segment, so to_cartesian and project
// are exact inverses wherever the cells do not overlap (|d| below the local
// radius of curvature). On straight stretches this is ordinary perpendicular
// projection.

#include <span>
#include <vector>

#include "trajguide/geometry.hpp"
#include "trajguide/grad.hpp"
#include "trajguide/scene.hpp"

namespace trajguide {

struct RefPath {
  std::vector<Vec2> vertices;
  std::vector<double> cum_s;
  std::vector<Vec2> seg_dir;        // unit tangent per segment
  std::vector<Vec2> vertex_normal;  // miter normal, dot with adjacent segment normals = 1

  double length() const { return cum_s.back(); }
  std::size_t segments() const { return seg_dir.size(); }
};

struct FrenetCoord {
  double s = 0.0;
  double d = 0.0;
};

RefPath build_ref_path(std::span<const Vec2> points);
RefPath build_ref_path(const MapPolyline& polyline);

struct Projection {
  FrenetCoord coord;
  int segment = 0;
  double u = 0.0;         // position within the segment, [0, 1]
  bool clamped = false;   // u was clamped (endpoint or outside every cell)
};

Projection project_detailed(const RefPath& path, Vec2 p);
FrenetCoord project(const RefPath& path, Vec2 p);

// Throws std::out_of_range when s lies outside [0, length].
Vec2 to_cartesian(const RefPath& path, FrenetCoord c);

struct FrenetTrajectory {
  std::vector<double> s;
  std::vector<double> d;
  std::vector<Projection> frozen;
};

FrenetTrajectory project_trajectory(const RefPath& path, std::span<const Vec2> traj);

struct FrenetVars {
  grad::Var s;  // [T]
  grad::Var d;  // [T]
};

// Differentiable projection of xy ([T, 2]) with the per-step segment
// assignment (and clamping) taken from `frozen`.
FrenetVars project_trajectory(const RefPath& path, grad::Var xy, const std::vector<Projection>& frozen);

// Convenience: projects xy's current values, then records the frozen graph.
FrenetVars project_trajectory(const RefPath& path, grad::Var xy);

}  // namespace trajguide
