#include "trajguide/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <random>

#include "trajguide/costdsl.hpp"
#include "trajguide/metrics.hpp"

namespace trajguide::synth {

namespace {

constexpr double kW = kDefaultLaneWidth;
constexpr double kEdgeWidth = 0.5;
constexpr int kSteps = 91;
constexpr int kNow = 10;
constexpr double kDt = kTimestep;
constexpr double kHorizon = (kSteps - 1) * kDt;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double quintic(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
}

// Centerline in the local frame: lead-in, arc, lead-out (curve) or a line.
struct Centerline {
  double length = 0.0;
  double arc_begin = 0.0, arc_end = 0.0;
  double radius = 0.0;
  double turn = 1.0;  // +1 left, -1 right

  Vec2 at(double s) const {
    if (radius == 0.0 || s <= arc_begin) return {s, 0.0};
    const double a = (std::min(s, arc_end) - arc_begin) / radius;
    Vec2 p{arc_begin + radius * std::sin(a), turn * radius * (1.0 - std::cos(a))};
    if (s > arc_end) {
      const double phi = (arc_end - arc_begin) / radius;
      p = p + (s - arc_end) * Vec2{std::cos(phi), turn * std::sin(phi)};
    }
    return p;
  }
};

struct Pose {
  double angle = 0.0;
  Vec2 offset;
  Vec2 apply(Vec2 p) const { return rotate(p, angle) + offset; }
};

std::vector<double> sample_s(double a, double b, const Centerline& c) {
  std::vector<double> s{a};
  auto add_range = [&](double lo, double hi, double step) {
    const int n = std::max(1, static_cast<int>(std::ceil((hi - lo) / step)));
    for (int i = 1; i <= n; ++i) s.push_back(lo + (hi - lo) * i / n);
  };
  double cur = a;
  if (c.radius > 0.0) {
    const double lo = std::clamp(c.arc_begin, a, b);
    const double hi = std::clamp(c.arc_end, a, b);
    if (lo > cur) add_range(cur, lo, b - a);
    cur = lo;
    if (hi > cur) add_range(cur, hi, 2.0);
    cur = hi;
  }
  if (b > cur) add_range(cur, b, b - a);
  return s;
}

std::vector<Vec2> offset_points(const RefPath& center, double s0, double s1, double offset) {
  std::vector<Vec2> pts;
  for (std::size_t i = 0; i < center.cum_s.size(); ++i) {
    const double s = center.cum_s[i];
    if (s < s0 - 1e-9 || s > s1 + 1e-9) continue;
    pts.push_back(to_cartesian(center, {s, offset}));
  }
  return pts;
}

std::vector<Vec2> concat_route(const std::vector<MapPolyline>& polylines, const std::vector<int>& ids) {
  std::vector<Vec2> pts;
  for (int id : ids) {
    const MapPolyline& p = polylines[id - 1];
    for (const Vec2& q : p.points) {
      if (!pts.empty() && norm(pts.back() - q) < 1e-9) continue;
      pts.push_back(q);
    }
  }
  return pts;
}

AgentState state_at(const Plan& plan, int t) {
  const Vec2 p = to_cartesian(*plan.path, {plan.s[t], plan.d[t]});
  return {p.x, p.y, 0.0};
}

}  // namespace

std::string_view to_string(MapKind k) {
  switch (k) {
    case MapKind::straight: return "straight";
    case MapKind::curve: return "curve";
    case MapKind::merge: return "merge";
  }
  return "straight";
}

MapKind map_kind_from_string(std::string_view s) {
  for (MapKind k : {MapKind::straight, MapKind::curve, MapKind::merge}) {
    if (to_string(k) == s) return k;
  }
  throw SynthError("unknown map kind '" + std::string(s) + "'");
}

void MapSpec::validate() const {
  if (lanes < 1) throw SynthError("map spec: lanes must be >= 1");
  if (!(length >= 100.0)) throw SynthError("map spec: length must be >= 100 m");
  if (piece_length < 0.0) throw SynthError("map spec: piece_length must be >= 0");
  if (kind == MapKind::curve) {
    if (!(radius > 0.5 * lanes * kW + 1.0)) throw SynthError("map spec: radius too small for the lane count");
    if (length / 3.0 / radius > std::numbers::pi) throw SynthError("map spec: curve turns more than 180 degrees");
  }
  if (kind == MapKind::merge && length < 250.0) throw SynthError("map spec: merge needs length >= 250 m");
}

nlohmann::json MapSpec::to_json() const {
  return {{"kind", std::string(synth::to_string(kind))},
          {"lanes", lanes},
          {"length", length},
          {"radius", radius},
          {"piece_length", piece_length},
          {"road_edges", road_edges},
          {"random_pose", random_pose}};
}

MapSpec MapSpec::from_json(const nlohmann::json& j) {
  MapSpec m;
  m.kind = map_kind_from_string(j.value("kind", std::string("straight")));
  m.lanes = j.value("lanes", m.lanes);
  m.length = j.value("length", m.length);
  m.radius = j.value("radius", m.radius);
  m.piece_length = j.value("piece_length", m.piece_length);
  m.road_edges = j.value("road_edges", m.road_edges);
  m.random_pose = j.value("random_pose", m.random_pose);
  m.validate();
  return m;
}

SynthMap gen_map(const MapSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  SynthMap m;
  m.spec = spec;

  Centerline c;
  c.length = spec.length;
  if (spec.kind == MapKind::curve) {
    c.radius = spec.radius;
    c.arc_begin = spec.length / 3.0;
    c.arc_end = 2.0 * spec.length / 3.0;
    c.turn = uniform(rng, 0.0, 1.0) < 0.5 ? 1.0 : -1.0;
  }
  Pose pose;
  if (spec.random_pose) {
    pose.angle = uniform(rng, -std::numbers::pi, std::numbers::pi);
    pose.offset = {uniform(rng, -200.0, 200.0), uniform(rng, -200.0, 200.0)};
  }

  // Piece breakpoints along the centerline.
  std::vector<double> breaks{0.0};
  const double merge_at = 0.35 * spec.length;
  const double accel_len = 60.0, taper_len = 45.0, approach_len = 80.0;
  std::vector<double> forced;
  if (spec.kind == MapKind::merge) forced = {merge_at, merge_at + accel_len, merge_at + accel_len + taper_len};
  if (spec.piece_length > 0.0) {
    for (double s = spec.piece_length; s < spec.length - 0.5 * spec.piece_length; s += spec.piece_length) {
      breaks.push_back(s);
    }
  }
  for (double f : forced) {
    breaks.erase(std::remove_if(breaks.begin(), breaks.end(), [&](double b) { return b > 0 && std::abs(b - f) < 15.0; }),
                 breaks.end());
    breaks.push_back(f);
  }
  breaks.push_back(spec.length);
  std::sort(breaks.begin(), breaks.end());

  std::vector<double> all_s;
  for (std::size_t p = 0; p + 1 < breaks.size(); ++p) {
    auto s = sample_s(breaks[p], breaks[p + 1], c);
    all_s.insert(all_s.end(), s.begin() + (p == 0 ? 0 : 1), s.end());
  }
  std::vector<Vec2> center_pts;
  for (double s : all_s) center_pts.push_back(pose.apply(c.at(s)));
  m.centerline = build_ref_path(center_pts);
  // Chord arc lengths differ slightly from the analytic ones on the arc.
  std::vector<double> chord_breaks;
  for (double b : breaks) {
    const auto it = std::lower_bound(all_s.begin(), all_s.end(), b - 1e-9);
    chord_breaks.push_back(m.centerline.cum_s[it - all_s.begin()]);
  }

  const int n = spec.lanes;
  for (int k = 0; k < n; ++k) m.offsets.push_back((k - 0.5 * (n - 1)) * kW);
  const int pieces = static_cast<int>(breaks.size()) - 1;

  std::vector<LaneEdge> edges;
  auto add_polyline = [&](std::vector<Vec2> pts, LaneType type, double width) {
    MapPolyline pl;
    pl.id = static_cast<int>(m.polylines.size()) + 1;
    pl.points = std::move(pts);
    pl.lane_type = type;
    pl.width = width;
    m.polylines.push_back(std::move(pl));
    return m.polylines.back().id;
  };

  std::vector<std::vector<int>> lane_id(pieces, std::vector<int>(n));
  for (int p = 0; p < pieces; ++p) {
    for (int k = 0; k < n; ++k) {
      lane_id[p][k] = add_polyline(offset_points(m.centerline, chord_breaks[p], chord_breaks[p + 1], m.offsets[k]),
                                   LaneType::driving, kW);
      if (p > 0) edges.push_back({lane_id[p - 1][k], lane_id[p][k], Relation::successor});
      if (k > 0) edges.push_back({lane_id[p][k - 1], lane_id[p][k], Relation::left_neighbor});
    }
  }

  const bool merge = spec.kind == MapKind::merge;
  auto in_merge_zone = [&](int p) {
    return merge && breaks[p] >= merge_at - 1e-9 && breaks[p] < merge_at + accel_len + taper_len - 1e-9;
  };
  if (spec.road_edges) {
    int prev_right = -1, prev_left = -1;
    for (int p = 0; p < pieces; ++p) {
      const int left = add_polyline(
          offset_points(m.centerline, chord_breaks[p], chord_breaks[p + 1], m.offsets[n - 1] + 0.5 * kW),
          LaneType::edge, kEdgeWidth);
      edges.push_back({lane_id[p][n - 1], left, Relation::left_neighbor});
      if (prev_left > 0) edges.push_back({prev_left, left, Relation::successor});
      prev_left = left;
      if (in_merge_zone(p)) {
        prev_right = -1;
        continue;
      }
      const int right = add_polyline(
          offset_points(m.centerline, chord_breaks[p], chord_breaks[p + 1], m.offsets[0] - 0.5 * kW),
          LaneType::edge, kEdgeWidth);
      edges.push_back({lane_id[p][0], right, Relation::right_neighbor});
      if (prev_right > 0) edges.push_back({prev_right, right, Relation::successor});
      prev_right = right;
    }
  }

  for (int k = 0; k < n; ++k) {
    Route r;
    r.lane_index = k;
    for (int p = 0; p < pieces; ++p) r.ids.push_back(lane_id[p][k]);
    m.routes.push_back(std::move(r));
  }

  if (merge) {
    const double acc_off = m.offsets[0] - kW;
    std::vector<Vec2> approach;
    for (int i = 0; i <= 32; ++i) {
      const double x = merge_at - approach_len + approach_len * i / 32.0;
      const double u = (merge_at - x) / approach_len;
      approach.push_back(pose.apply({x, acc_off - 25.0 * u * u}));
    }
    std::vector<Vec2> accel, taper;
    for (int i = 0; i <= 2; ++i) accel.push_back(pose.apply({merge_at + accel_len * i / 2.0, acc_off}));
    for (int i = 0; i <= 9; ++i) {
      const double u = i / 9.0;
      taper.push_back(pose.apply({merge_at + accel_len + taper_len * u, acc_off + kW * quintic(u)}));
    }
    const int a_id = add_polyline(approach, LaneType::driving, kW);
    const int c_id = add_polyline(accel, LaneType::driving, kW);
    const int t_id = add_polyline(taper, LaneType::driving, kW);
    edges.push_back({a_id, c_id, Relation::successor});
    edges.push_back({c_id, t_id, Relation::successor});
    int after = -1;
    for (int p = 0; p < pieces; ++p) {
      if (std::abs(breaks[p] - (merge_at + accel_len + taper_len)) < 1e-9) after = p;
      if (std::abs(breaks[p] - merge_at) < 1e-9) edges.push_back({lane_id[p][0], c_id, Relation::right_neighbor});
    }
    Route r;
    r.lane_index = -1;
    r.ids = {a_id, c_id, t_id};
    if (after >= 0) {
      edges.push_back({t_id, lane_id[after][0], Relation::successor});
      for (int p = after; p < pieces; ++p) r.ids.push_back(lane_id[p][0]);
    }
    if (spec.road_edges) {
      const int e = add_polyline({pose.apply({merge_at, acc_off - 0.5 * kW}),
                                  pose.apply({merge_at + accel_len, acc_off - 0.5 * kW})},
                                 LaneType::edge, kEdgeWidth);
      edges.push_back({c_id, e, Relation::right_neighbor});
    }
    m.ramp = build_ref_path(concat_route(m.polylines, r.ids));
    m.routes.push_back(std::move(r));
  }
  m.graph = LaneGraph(std::move(edges));
  return m;
}

nlohmann::json BehaviorMix::to_json() const {
  return {{"speed_min", speed_min},
          {"speed_max", speed_max},
          {"speed_variation", speed_variation},
          {"lane_change_prob", lane_change_prob},
          {"ramp_prob", ramp_prob}};
}

BehaviorMix BehaviorMix::from_json(const nlohmann::json& j) {
  BehaviorMix b;
  b.speed_min = j.value("speed_min", b.speed_min);
  b.speed_max = j.value("speed_max", b.speed_max);
  b.speed_variation = j.value("speed_variation", b.speed_variation);
  b.lane_change_prob = j.value("lane_change_prob", b.lane_change_prob);
  b.ramp_prob = j.value("ramp_prob", b.ramp_prob);
  if (!(b.speed_min > 0.0) || b.speed_max < b.speed_min) throw SynthError("behavior mix: bad speed range");
  if (b.speed_variation < 0.0 || b.speed_variation > 1.0) throw SynthError("behavior mix: speed_variation in [0, 1]");
  return b;
}

AgentTrack track_from_plan(int agent_id, const Plan& plan) {
  AgentTrack a;
  a.agent_id = agent_id;
  const int n = static_cast<int>(plan.s.size());
  for (int t = 0; t < n; ++t) a.states.push_back(state_at(plan, t));
  double last = std::numeric_limits<double>::quiet_NaN();
  for (int t = 0; t < n; ++t) {
    const int lo = std::max(0, t - 1), hi = std::min(n - 1, t + 1);
    Vec2 v = a.states[hi].position() - a.states[lo].position();
    const double ds = plan.s[hi] - plan.s[lo];
    if (ds < 0.0) v = -1.0 * v;
    double h;
    if (norm(v) > 1e-6) {
      h = std::atan2(v.y, v.x);
    } else if (!std::isnan(last)) {
      h = last;
    } else {
      const Projection pr = project_detailed(*plan.path, a.states[t].position());
      const Vec2 dir = plan.path->seg_dir[pr.segment];
      h = std::atan2(dir.y, dir.x);
    }
    a.states[t].heading = wrap_angle(h);
    last = a.states[t].heading;
  }
  return a;
}

Scenario make_scenario(const SynthMap& map, std::vector<AgentTrack> agents) {
  Scenario s;
  s.polylines = map.polylines;
  s.graph = map.graph;
  s.agents = std::move(agents);
  s.t_now = kNow;
  s.dt = kDt;
  return s;
}

namespace {

bool conflicts(const AgentTrack& a, const AgentTrack& b) {
  for (std::size_t t = 0; t < a.states.size(); ++t) {
    const metrics::Box ba{a.states[t].position(), a.states[t].heading, a.extent.length + kMinGap, a.extent.width};
    const metrics::Box bb{b.states[t].position(), b.states[t].heading, b.extent.length + kMinGap, b.extent.width};
    if (norm(ba.center - bb.center) > 20.0) continue;
    if (metrics::boxes_overlap(ba, bb)) return true;
  }
  return false;
}

struct SpeedProfile {
  double v0 = 10.0, trend = 0.0, amp = 0.0, omega = 0.5, phase = 0.0;

  double v(double t) const { return v0 + trend * t + amp * std::sin(omega * t + phase); }
  double s(double t) const {
    return v0 * t + 0.5 * trend * t * t + (omega > 0 ? amp / omega * (std::cos(phase) - std::cos(omega * t + phase)) : 0.0);
  }
};

}  // namespace

std::vector<AgentTrack> gen_agents(const SynthMap& map, int n, const BehaviorMix& mix, std::uint64_t seed) {
  if (n < 1) throw SynthError("gen_agents: n must be >= 1");
  std::mt19937_64 rng(seed);
  const Scenario base = make_scenario(map, {});
  const double travel_max = mix.speed_max * kHorizon + 0.5 * (0.5 * mix.speed_variation) * kHorizon * kHorizon + 3.0;
  const double margin = 5.0;
  if (map.centerline.length() < travel_max + 2.0 * margin + 10.0) {
    throw SynthError("gen_agents: map too short for the requested speeds");
  }
  const int ramp_agent = map.ramp && uniform(rng, 0.0, 1.0) < mix.ramp_prob ? uniform_int(rng, 0, n - 1) : -1;

  std::vector<AgentTrack> out;
  std::vector<Plan> plans;
  plans.reserve(n);
  for (int i = 0; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 300 && !placed; ++attempt) {
      const bool on_ramp = i == ramp_agent && attempt < 150;
      Plan plan;
      int lane = 0;
      if (on_ramp) {
        plan.path = &*map.ramp;
      } else {
        plan.path = &map.centerline;
        lane = uniform_int(rng, 0, static_cast<int>(map.offsets.size()) - 1);
      }
      SpeedProfile sp;
      sp.v0 = uniform(rng, mix.speed_min, mix.speed_max);
      sp.trend = uniform(rng, -0.5, 0.5) * mix.speed_variation;
      sp.amp = uniform(rng, 0.0, 1.5) * mix.speed_variation;
      sp.omega = uniform(rng, 0.3, 1.0);
      sp.phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      if (mix.speed_variation == 0.0) sp.trend = sp.amp = 0.0;
      bool slow = false;
      for (int t = 0; t < kSteps; ++t) slow = slow || sp.v(t * kDt) < 0.5;
      if (slow) continue;

      const double travel = sp.s(kHorizon);
      const double room = plan.path->length() - 1.1 * travel - 2.0 * margin;
      if (room <= 0.0) continue;
      const double s0 = margin + uniform(rng, 0.0, room);

      const bool change = !on_ramp && uniform(rng, 0.0, 1.0) < mix.lane_change_prob;
      int target = lane;
      double tc = 0.0, dur = 4.0;
      if (change) {
        std::vector<int> options;
        if (lane > 0) options.push_back(lane - 1);
        if (lane + 1 < static_cast<int>(map.offsets.size())) options.push_back(lane + 1);
        if (!options.empty()) {
          target = options[uniform_int(rng, 0, static_cast<int>(options.size()) - 1)];
          dur = uniform(rng, 3.0, 5.0);
          tc = uniform(rng, 0.0, kHorizon - dur);
        }
      }
      const double d0 = on_ramp ? 0.0 : map.offsets[lane];
      const double d1 = on_ramp ? 0.0 : map.offsets[target];
      for (int t = 0; t < kSteps; ++t) plan.d.push_back(d0 + (d1 - d0) * quintic((t * kDt - tc) / dur));
      // Speeds are along the driven offset curve, not the reference path.
      double s = s0;
      bool fits = true;
      for (int t = 0; t < kSteps && fits; ++t) {
        if (t > 0) {
          const double ds = sp.s(t * kDt) - sp.s((t - 1) * kDt);
          const double d = 0.5 * (plan.d[t - 1] + plan.d[t]);
          const double h = std::min(0.5, plan.path->length() - s);
          const double scale = h > 1e-3 ? norm(to_cartesian(*plan.path, {s + h, d}) - to_cartesian(*plan.path, {s, d})) / h : 1.0;
          s += ds / scale;
        }
        fits = s <= plan.path->length() - 1.0;
        plan.s.push_back(s);
      }
      if (!fits) continue;
      AgentTrack track = track_from_plan(i, plan);
      // Lane changes add lateral speed the profile does not bound.
      bool ok = true;
      for (std::size_t t = 2; t < track.states.size() && ok; ++t) {
        const double v1 = norm(track.states[t].position() - track.states[t - 1].position()) / kDt;
        const double v0 = norm(track.states[t - 1].position() - track.states[t - 2].position()) / kDt;
        ok = std::abs(v1 - v0) / kDt <= kMaxAccel;
      }
      for (const AgentState& st : track.states) {
        if (!ok) break;
        if (metrics::is_offroad(base, st.position())) {
          ok = false;
          break;
        }
      }
      for (const AgentTrack& other : out) {
        if (!ok) break;
        ok = !conflicts(track, other);
      }
      if (!ok) continue;
      out.push_back(std::move(track));
      plans.push_back(std::move(plan));
      placed = true;
    }
    if (!placed) throw SynthError("gen_agents: map too short to place " + std::to_string(n) + " agents");
  }
  return out;
}

nlohmann::json ScenarioSpec::to_json() const {
  nlohmann::json m = nlohmann::json::array();
  for (const MapSpec& s : maps) m.push_back(s.to_json());
  return {{"maps", m}, {"min_agents", min_agents}, {"max_agents", max_agents}, {"mix", mix.to_json()}};
}

ScenarioSpec ScenarioSpec::from_json(const nlohmann::json& j) {
  ScenarioSpec s;
  if (j.contains("maps")) {
    for (const auto& m : j.at("maps")) s.maps.push_back(MapSpec::from_json(m));
  } else {
    s.maps = default_dataset_spec().maps;
  }
  s.min_agents = j.value("min_agents", s.min_agents);
  s.max_agents = j.value("max_agents", s.max_agents);
  if (j.contains("mix")) s.mix = BehaviorMix::from_json(j.at("mix"));
  if (s.maps.empty()) throw SynthError("scenario spec: no maps");
  if (s.min_agents < 1 || s.max_agents < s.min_agents) throw SynthError("scenario spec: bad agent range");
  return s;
}

ScenarioSpec default_dataset_spec() {
  ScenarioSpec s;
  for (int lanes : {2, 3}) {
    MapSpec st;
    st.kind = MapKind::straight;
    st.lanes = lanes;
    st.length = 300.0;
    st.piece_length = 100.0;
    st.road_edges = true;
    s.maps.push_back(st);
    MapSpec cu = st;
    cu.kind = MapKind::curve;
    cu.radius = lanes == 2 ? 80.0 : 120.0;
    s.maps.push_back(cu);
  }
  MapSpec mg;
  mg.kind = MapKind::merge;
  mg.lanes = 2;
  mg.length = 300.0;
  mg.piece_length = 100.0;
  mg.road_edges = true;
  s.maps.push_back(mg);
  return s;
}

std::uint64_t scenario_seed(std::uint64_t base, std::size_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Scenario gen_scenario(const ScenarioSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const MapSpec& ms = spec.maps[uniform_int(rng, 0, static_cast<int>(spec.maps.size()) - 1)];
  const std::uint64_t map_seed = rng();
  const SynthMap map = gen_map(ms, map_seed);
  int n = uniform_int(rng, spec.min_agents, spec.max_agents);
  const std::uint64_t agent_seed = rng();
  for (;; --n) {
    try {
      return make_scenario(map, gen_agents(map, n, spec.mix, agent_seed));
    } catch (const SynthError&) {
      if (n <= 1) throw;
    }
  }
}

Dataset gen_dataset(const ScenarioSpec& spec, std::size_t count, std::uint64_t seed) {
  Dataset d;
  for (std::size_t i = 0; i < count; ++i) {
    d.seeds.push_back(scenario_seed(seed, i));
    d.scenarios.push_back(gen_scenario(spec, d.seeds.back()));
  }
  return d;
}

void save_dataset(const Dataset& data, const ScenarioSpec& spec, const std::string& path, const nlohmann::json& meta) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  for (const Scenario& s : data.scenarios) f << to_json(s).dump() << '\n';
  nlohmann::json m = {{"count", data.scenarios.size()}, {"seeds", data.seeds}, {"spec", spec.to_json()}};
  if (!meta.is_null()) m["meta"] = meta;
  std::ofstream mf(path + ".manifest.json");
  if (!mf) throw std::runtime_error("cannot write " + path + ".manifest.json");
  mf << m.dump(2) << '\n';
}

std::vector<Scenario> load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::vector<Scenario> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(scenario_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- fixtures ----------------------------------------------------------------------------

std::string_view to_string(FixtureType t) {
  switch (t) {
    case FixtureType::cut_in: return "cut_in";
    case FixtureType::out_of_road: return "out_of_road";
    case FixtureType::yield: return "yield";
    case FixtureType::rightmost: return "rightmost";
    case FixtureType::weaving: return "weaving";
    case FixtureType::reverse: return "reverse";
  }
  return "cut_in";
}

const std::vector<FixtureType>& all_fixture_types() {
  static const std::vector<FixtureType> v{FixtureType::cut_in,    FixtureType::out_of_road, FixtureType::yield,
                                          FixtureType::rightmost, FixtureType::weaving,     FixtureType::reverse};
  return v;
}

FixtureType fixture_type_from_string(std::string_view s) {
  for (FixtureType t : all_fixture_types()) {
    if (to_string(t) == s) return t;
  }
  throw SynthError("unknown fixture type '" + std::string(s) + "'");
}

namespace {

MapSpec fixture_map(MapKind kind, int lanes) {
  MapSpec m;
  m.kind = kind;
  m.lanes = lanes;
  m.length = 300.0;
  m.piece_length = 100.0;
  m.road_edges = true;
  return m;
}

Plan lane_plan(const SynthMap& map, double s0, const std::vector<double>& speed, const std::function<double(double)>& d) {
  Plan p;
  p.path = &map.centerline;
  double s = s0;
  for (int t = 0; t < kSteps; ++t) {
    if (t > 0) s += 0.5 * (speed[t - 1] + speed[t]) * kDt;
    p.s.push_back(s);
    p.d.push_back(d(t * kDt));
  }
  return p;
}

std::vector<double> constant(double v) { return std::vector<double>(kSteps, v); }

}  // namespace

Fixture gen_fixture(FixtureType type, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Fixture fx;
  fx.type = type;
  const double now = kNow * kDt;
  std::vector<AgentTrack> agents;
  SynthMap map;

  switch (type) {
    case FixtureType::cut_in: {
      map = gen_map(fixture_map(MapKind::straight, 2), rng());
      const double v1 = uniform(rng, 9.0, 12.0);
      const double dv = uniform(rng, 0.5, 1.2);
      const double tc = now + uniform(rng, 1.0, 2.5);
      const double dur = uniform(rng, 3.5, 4.5);
      const double gap = uniform(rng, 9.0, 12.0);
      const double s1 = 60.0 + uniform(rng, 0.0, 20.0);
      const double s0 = s1 + gap - dv * (tc + dur);
      const double o0 = map.offsets[0], o1 = map.offsets[1];
      const Plan p0 = lane_plan(map, s0, constant(v1 + dv), [&](double t) { return o1 + (o0 - o1) * quintic((t - tc) / dur); });
      const Plan p1 = lane_plan(map, s1, constant(v1), [&](double) { return o0; });
      agents = {track_from_plan(0, p0), track_from_plan(1, p1)};
      fx.program = "cut_in";
      break;
    }
    case FixtureType::out_of_road: {
      map = gen_map(fixture_map(MapKind::straight, 2), rng());
      const double v = uniform(rng, 8.0, 12.0);
      const double tc = now + uniform(rng, 0.5, 2.0);
      const double dur = uniform(rng, 2.5, 3.5);
      const double out = 0.5 * kW + uniform(rng, 3.0, 4.0);
      const double o0 = map.offsets[0];
      const double s0 = 40.0 + uniform(rng, 0.0, 20.0);
      const Plan p0 = lane_plan(map, s0, constant(v), [&](double t) { return o0 - out * quintic((t - tc) / dur); });
      const double s1 = s0 + (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0) * uniform(rng, 25.0, 35.0);
      const Plan p1 = lane_plan(map, s1, constant(v), [&](double) { return map.offsets[1]; });
      agents = {track_from_plan(0, p0), track_from_plan(1, p1)};
      fx.program = "out_of_road";
      break;
    }
    case FixtureType::yield: {
      map = gen_map(fixture_map(MapKind::merge, 2), rng());
      const RefPath& ramp = *map.ramp;
      const double v0 = uniform(rng, 5.0, 8.0);
      const double ts = now + uniform(rng, 0.0, 1.0);
      const double stop_dur = 0.75 * v0;  // peak deceleration 2.5 m/s^2
      // Stop well inside the acceleration lane (ramp approach is 80 m).
      const double s_stop = 80.0 + uniform(rng, 15.0, 35.0);
      std::vector<double> speed(kSteps);
      for (int t = 0; t < kSteps; ++t) {
        const double time = t * kDt;
        speed[t] = v0 * (1.0 - quintic((time - ts) / stop_dur));
      }
      double travel = 0.0;
      for (int t = 1; t < kSteps; ++t) travel += 0.5 * (speed[t - 1] + speed[t]) * kDt;
      Plan p0;
      p0.path = &ramp;
      double s = s_stop - travel;
      for (int t = 0; t < kSteps; ++t) {
        if (t > 0) s += 0.5 * (speed[t - 1] + speed[t]) * kDt;
        p0.s.push_back(s);
        p0.d.push_back(0.0);
      }
      // The main-road vehicle draws level with the stopped one mid-stop.
      const double v1 = uniform(rng, 10.0, 13.0);
      const Vec2 stop_xy = to_cartesian(ramp, {s_stop, 0.0});
      const double s_level = project(map.centerline, stop_xy).s;
      const double t_level = ts + stop_dur + uniform(rng, 0.3, 0.8);
      const Plan p1 = lane_plan(map, s_level - v1 * t_level, constant(v1), [&](double) { return map.offsets[0]; });
      agents = {track_from_plan(0, p0), track_from_plan(1, p1)};
      fx.program = "yield";
      break;
    }
    case FixtureType::rightmost: {
      map = gen_map(fixture_map(MapKind::straight, 3), rng());
      const int from = uniform_int(rng, 1, 2);
      const double v = uniform(rng, 9.0, 12.0);
      const double tc = now + uniform(rng, 0.5, 1.5);
      const double dur = from == 2 ? uniform(rng, 5.0, 6.0) : uniform(rng, 3.5, 4.5);
      const double s0 = 40.0 + uniform(rng, 0.0, 20.0);
      const double o_from = map.offsets[from], o_to = map.offsets[0];
      const Plan p0 = lane_plan(map, s0, constant(v), [&](double t) { return o_from + (o_to - o_from) * quintic((t - tc) / dur); });
      const double s1 = s0 + uniform(rng, 35.0, 45.0);
      const Plan p1 = lane_plan(map, s1, constant(v), [&](double) { return o_to; });
      agents = {track_from_plan(0, p0), track_from_plan(1, p1)};
      fx.program = "rightmost";
      break;
    }
    case FixtureType::weaving: {
      map = gen_map(fixture_map(MapKind::straight, 2), rng());
      fx.amplitude = uniform(rng, 0.5, 1.0);
      fx.omega = uniform(rng, 1.0, 1.7);
      const double v = uniform(rng, 8.0, 12.0);
      const double s0 = 40.0 + uniform(rng, 0.0, 20.0);
      const double o0 = map.offsets[0];
      const double amp = fx.amplitude, omega = fx.omega;
      const Plan p0 = lane_plan(map, s0, constant(v), [&](double t) {
        return t <= now ? o0 : o0 + amp * std::sin(omega * (t - now));
      });
      const Plan p1 = lane_plan(map, s0 + uniform(rng, 25.0, 35.0), constant(v), [&](double) { return map.offsets[1]; });
      agents = {track_from_plan(0, p0), track_from_plan(1, p1)};
      fx.program = "weaving";
      break;
    }
    case FixtureType::reverse: {
      map = gen_map(fixture_map(MapKind::straight, 2), rng());
      const double v = uniform(rng, 2.0, 4.0);
      const double s0 = 100.0 + uniform(rng, 0.0, 40.0);
      const Plan p0 = lane_plan(map, s0, constant(-v), [&](double) { return map.offsets[0]; });
      const double v1 = uniform(rng, 8.0, 12.0);
      const Plan p1 = lane_plan(map, s0 - 60.0, constant(v1), [&](double) { return map.offsets[1]; });
      agents = {track_from_plan(0, p0), track_from_plan(1, p1)};
      fx.program = "reverse";
      break;
    }
  }
  fx.scenario = make_scenario(map, std::move(agents));
  fx.description = dsl::builtin(fx.program).description;
  return fx;
}

}  // namespace trajguide::synth
