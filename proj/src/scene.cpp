#include "trajguide/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

namespace trajguide {

std::string_view to_string(LaneType t) {
  switch (t) {
    case LaneType::driving: return "driving";
    case LaneType::shoulder: return "shoulder";
    case LaneType::edge: return "edge";
  }
  return "driving";
}

std::string_view to_string(Relation r) {
  switch (r) {
    case Relation::predecessor: return "predecessor";
    case Relation::successor: return "successor";
    case Relation::left_neighbor: return "left_neighbor";
    case Relation::right_neighbor: return "right_neighbor";
  }
  return "successor";
}

LaneType lane_type_from_string(std::string_view s) {
  if (s == "driving") return LaneType::driving;
  if (s == "shoulder") return LaneType::shoulder;
  if (s == "edge") return LaneType::edge;
  throw SceneError("unknown lane_type '" + std::string(s) + "'");
}

Relation relation_from_string(std::string_view s) {
  if (s == "predecessor") return Relation::predecessor;
  if (s == "successor") return Relation::successor;
  if (s == "left_neighbor") return Relation::left_neighbor;
  if (s == "right_neighbor") return Relation::right_neighbor;
  throw SceneError("unknown relation '" + std::string(s) + "'");
}

Relation inverse(Relation r) {
  switch (r) {
    case Relation::predecessor: return Relation::successor;
    case Relation::successor: return Relation::predecessor;
    case Relation::left_neighbor: return Relation::right_neighbor;
    case Relation::right_neighbor: return Relation::left_neighbor;
  }
  return r;
}

double MapPolyline::length() const {
  double total = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) total += norm(points[i] - points[i - 1]);
  return total;
}

LaneGraph::LaneGraph(std::vector<LaneEdge> edges) {
  auto key = [](const LaneEdge& e) { return std::tuple(e.src, e.dst, static_cast<int>(e.relation)); };
  std::set<std::tuple<int, int, int>> seen;
  for (const LaneEdge& e : edges) {
    seen.insert(key(e));
    seen.insert(key(LaneEdge{e.dst, e.src, inverse(e.relation)}));
  }
  for (const auto& [src, dst, rel] : seen) {
    edges_.push_back(LaneEdge{src, dst, static_cast<Relation>(rel)});
  }
}

std::vector<int> LaneGraph::related(int src, Relation relation) const {
  std::vector<int> out;
  for (const LaneEdge& e : edges_) {
    if (e.src == src && e.relation == relation) out.push_back(e.dst);
  }
  return out;
}

const MapPolyline& Scenario::polyline(int id) const {
  for (const MapPolyline& p : polylines) {
    if (p.id == id) return p;
  }
  throw SceneError("unknown lane id " + std::to_string(id));
}

bool Scenario::has_polyline(int id) const {
  return std::any_of(polylines.begin(), polylines.end(), [id](const MapPolyline& p) { return p.id == id; });
}

int Scenario::steps() const {
  std::size_t n = 0;
  for (const AgentTrack& a : agents) n = std::max(n, a.states.size());
  return static_cast<int>(n);
}

void validate(const Scenario& s) {
  std::set<int> ids;
  for (const MapPolyline& p : s.polylines) {
    if (!ids.insert(p.id).second) throw SceneError("duplicate polyline id " + std::to_string(p.id));
    if (p.points.size() < 2) {
      throw SceneError("polyline " + std::to_string(p.id) + " has fewer than 2 points");
    }
    for (std::size_t i = 1; i < p.points.size(); ++i) {
      if (p.points[i] == p.points[i - 1]) {
        throw SceneError("polyline " + std::to_string(p.id) + " has duplicate consecutive points");
      }
    }
    if (!(p.width > 0.0)) throw SceneError("polyline " + std::to_string(p.id) + " has width <= 0");
  }
  for (const LaneEdge& e : s.graph.edges()) {
    if (!ids.count(e.src) || !ids.count(e.dst)) {
      throw SceneError("edge references unknown lane id (" + std::to_string(e.src) + " -> " +
                       std::to_string(e.dst) + ")");
    }
  }
  if (s.agents.empty()) throw SceneError("scenario has no agents");
  for (const AgentTrack& a : s.agents) {
    if (!(a.extent.length > 0.0) || !(a.extent.width > 0.0)) {
      throw SceneError("agent " + std::to_string(a.agent_id) + " has non-positive extent");
    }
    if (s.t_now < 0 || s.t_now >= static_cast<int>(a.states.size())) {
      throw SceneError("t_now " + std::to_string(s.t_now) + " outside track of agent " +
                       std::to_string(a.agent_id));
    }
  }
  if (!(s.dt > 0.0)) throw SceneError("dt must be positive");
}

RelFeature relative_feature(const AgentState& pi, const AgentState& pj) {
  const double c = std::cos(pi.heading);
  const double sn = std::sin(pi.heading);
  const double wx = pj.x - pi.x;
  const double wy = pj.y - pi.y;
  const double dh = wrap_angle(pj.heading - pi.heading);
  return RelFeature{c * wx + sn * wy, -sn * wx + c * wy, std::cos(dh), std::sin(dh)};
}

Vec2 from_relative(const AgentState& pi, const RelFeature& f) {
  const double c = std::cos(pi.heading);
  const double sn = std::sin(pi.heading);
  return {pi.x + c * f.dx - sn * f.dy, pi.y + sn * f.dx + c * f.dy};
}

Scenario transform_scenario(const Scenario& scenario, double angle, Vec2 offset) {
  Scenario out = scenario;
  const double c = std::cos(angle);
  const double sn = std::sin(angle);
  auto apply = [&](Vec2 p) { return Vec2{c * p.x - sn * p.y + offset.x, sn * p.x + c * p.y + offset.y}; };
  for (MapPolyline& p : out.polylines) {
    for (Vec2& v : p.points) v = apply(v);
  }
  for (AgentTrack& a : out.agents) {
    for (AgentState& st : a.states) {
      const Vec2 q = apply(st.position());
      st = AgentState{q.x, q.y, wrap_angle(st.heading + angle)};
    }
  }
  return out;
}

Scenario normalize_to_frame(const Scenario& scenario, const AgentState& anchor) {
  Scenario out = scenario;
  const double c = std::cos(anchor.heading);
  const double sn = std::sin(anchor.heading);
  auto apply = [&](Vec2 p) {
    const double wx = p.x - anchor.x;
    const double wy = p.y - anchor.y;
    return Vec2{c * wx + sn * wy, -sn * wx + c * wy};
  };
  for (MapPolyline& p : out.polylines) {
    for (Vec2& v : p.points) v = apply(v);
  }
  for (AgentTrack& a : out.agents) {
    for (AgentState& st : a.states) {
      const Vec2 q = apply(st.position());
      st = AgentState{q.x, q.y, wrap_angle(st.heading - anchor.heading)};
    }
  }
  return out;
}

std::string_view to_string(LaneQuery::Kind k) {
  using K = LaneQuery::Kind;
  switch (k) {
    case K::current_lane: return "current_lane";
    case K::left_lane: return "left_lane";
    case K::right_lane: return "right_lane";
    case K::rightmost_lane: return "rightmost_lane";
    case K::leftmost_lane: return "leftmost_lane";
    case K::successor_chain: return "successor_chain";
    case K::road_edge_left: return "road_edge_left";
    case K::road_edge_right: return "road_edge_right";
  }
  return "current_lane";
}

std::optional<LaneQuery::Kind> lane_query_kind_from_string(std::string_view s) {
  using K = LaneQuery::Kind;
  for (K k : {K::current_lane, K::left_lane, K::right_lane, K::rightmost_lane, K::leftmost_lane,
              K::successor_chain, K::road_edge_left, K::road_edge_right}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

namespace {

double polyline_distance(const MapPolyline& p, Vec2 q) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < p.points.size(); ++i) {
    best = std::min(best, point_segment_distance(q, p.points[i - 1], p.points[i]));
  }
  return best;
}

std::vector<int> driving_neighbors(const Scenario& s, int lane, Relation rel) {
  std::vector<int> out;
  for (int id : s.graph.related(lane, rel)) {
    if (s.has_polyline(id) && s.polyline(id).lane_type == LaneType::driving) out.push_back(id);
  }
  return out;
}

int walk_to_fixed_point(const Scenario& s, int lane, Relation rel) {
  std::set<int> visited{lane};
  int cur = lane;
  for (;;) {
    std::vector<int> next = driving_neighbors(s, cur, rel);
    if (next.empty() || visited.count(next.front())) return cur;
    cur = next.front();
    visited.insert(cur);
  }
}

std::vector<int> road_edge(const Scenario& s, int lane, Relation rel) {
  const int outer = walk_to_fixed_point(s, lane, rel);
  std::vector<int> out;
  for (int id : s.graph.related(outer, rel)) {
    if (s.polyline(id).lane_type == LaneType::edge) out.push_back(id);
  }
  return out;
}

}  // namespace

std::optional<int> current_lane_at(const Scenario& s, Vec2 position) {
  std::optional<int> best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (const MapPolyline& p : s.polylines) {
    if (p.lane_type != LaneType::driving) continue;
    const double dist = polyline_distance(p, position);
    if (dist > 2.0 * p.width) continue;
    if (dist < best_dist || (dist == best_dist && best && p.id < *best)) {
      best_dist = dist;
      best = p.id;
    }
  }
  return best;
}

std::optional<int> current_lane_at(const Scenario& s, int agent, int t) {
  if (agent < 0 || agent >= static_cast<int>(s.agents.size())) {
    throw SceneError("agent index " + std::to_string(agent) + " out of range");
  }
  const AgentTrack& a = s.agents[agent];
  if (t < 0 || t >= static_cast<int>(a.states.size())) {
    throw SceneError("timestep " + std::to_string(t) + " out of range for agent " + std::to_string(agent));
  }
  return current_lane_at(s, a.states[t].position());
}

std::vector<int> lane_query(const Scenario& s, const LaneQuery& q) {
  using K = LaneQuery::Kind;
  if (q.kind == K::current_lane) {
    auto lane = current_lane_at(s, q.agent, s.t_now);
    return lane ? std::vector<int>{*lane} : std::vector<int>{};
  }
  if (!s.has_polyline(q.lane)) throw SceneError("unknown lane id " + std::to_string(q.lane));
  switch (q.kind) {
    case K::left_lane: return driving_neighbors(s, q.lane, Relation::left_neighbor);
    case K::right_lane: return driving_neighbors(s, q.lane, Relation::right_neighbor);
    case K::rightmost_lane: return {walk_to_fixed_point(s, q.lane, Relation::right_neighbor)};
    case K::leftmost_lane: return {walk_to_fixed_point(s, q.lane, Relation::left_neighbor)};
    case K::road_edge_left: return road_edge(s, q.lane, Relation::left_neighbor);
    case K::road_edge_right: return road_edge(s, q.lane, Relation::right_neighbor);
    case K::successor_chain: {
      std::vector<int> chain{q.lane};
      std::set<int> visited{q.lane};
      int cur = q.lane;
      for (int i = 0; i < q.depth; ++i) {
        std::vector<int> next = s.graph.related(cur, Relation::successor);
        if (next.empty() || visited.count(next.front())) break;
        cur = next.front();
        visited.insert(cur);
        chain.push_back(cur);
      }
      return chain;
    }
    case K::current_lane: break;
  }
  return {};
}

std::vector<int> lane_corridor(const Scenario& s, int lane) {
  if (!s.has_polyline(lane)) throw SceneError("unknown lane id " + std::to_string(lane));
  std::vector<int> back;
  std::set<int> visited{lane};
  int cur = lane;
  for (;;) {
    std::vector<int> prev = s.graph.related(cur, Relation::predecessor);
    if (prev.empty() || visited.count(prev.front())) break;
    cur = prev.front();
    visited.insert(cur);
    back.push_back(cur);
  }
  std::vector<int> out(back.rbegin(), back.rend());
  out.push_back(lane);
  cur = lane;
  for (;;) {
    std::vector<int> next = s.graph.related(cur, Relation::successor);
    if (next.empty() || visited.count(next.front())) break;
    cur = next.front();
    visited.insert(cur);
    out.push_back(cur);
  }
  return out;
}

bool same_corridor(const Scenario& s, int lane_a, int lane_b) {
  const std::vector<int> c = lane_corridor(s, lane_a);
  return std::find(c.begin(), c.end(), lane_b) != c.end();
}

std::vector<Vec2> corridor_points(const Scenario& s, int lane) {
  std::vector<Vec2> pts;
  for (int id : lane_corridor(s, lane)) {
    for (const Vec2& p : s.polyline(id).points) {
      if (!pts.empty() && norm(p - pts.back()) < 1e-9) continue;
      pts.push_back(p);
    }
  }
  return pts;
}

// ---- JSON ----------------------------------------------------------------------

nlohmann::json to_json(const Scenario& s) {
  nlohmann::json j;
  j["polylines"] = nlohmann::json::array();
  for (const MapPolyline& p : s.polylines) {
    nlohmann::json pts = nlohmann::json::array();
    for (const Vec2& v : p.points) pts.push_back({v.x, v.y});
    j["polylines"].push_back(
        {{"id", p.id}, {"points", pts}, {"lane_type", to_string(p.lane_type)}, {"width", p.width}});
  }
  j["edges"] = nlohmann::json::array();
  for (const LaneEdge& e : s.graph.edges()) j["edges"].push_back({e.src, e.dst, to_string(e.relation)});
  j["agents"] = nlohmann::json::array();
  for (const AgentTrack& a : s.agents) {
    nlohmann::json states = nlohmann::json::array();
    for (const AgentState& st : a.states) states.push_back({st.x, st.y, st.heading});
    j["agents"].push_back({{"agent_id", a.agent_id},
                           {"extent", {a.extent.length, a.extent.width}},
                           {"states", states}});
  }
  j["t_now"] = s.t_now;
  j["dt"] = s.dt;
  return j;
}

Scenario scenario_from_json(const nlohmann::json& j) {
  try {
    Scenario s;
    for (const auto& p : j.at("polylines")) {
      MapPolyline pl;
      pl.id = p.at("id").get<int>();
      for (const auto& v : p.at("points")) pl.points.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
      pl.lane_type = lane_type_from_string(p.at("lane_type").get<std::string>());
      pl.width = p.at("width").get<double>();
      s.polylines.push_back(std::move(pl));
    }
    std::vector<LaneEdge> edges;
    for (const auto& e : j.at("edges")) {
      edges.push_back({e.at(0).get<int>(), e.at(1).get<int>(),
                       relation_from_string(e.at(2).get<std::string>())});
    }
    s.graph = LaneGraph(std::move(edges));
    for (const auto& a : j.at("agents")) {
      AgentTrack t;
      t.agent_id = a.at("agent_id").get<int>();
      t.extent = {a.at("extent").at(0).get<double>(), a.at("extent").at(1).get<double>()};
      for (const auto& st : a.at("states")) {
        t.states.push_back({st.at(0).get<double>(), st.at(1).get<double>(), st.at(2).get<double>()});
      }
      s.agents.push_back(std::move(t));
    }
    s.t_now = j.at("t_now").get<int>();
    s.dt = j.at("dt").get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SceneError(std::string("malformed scenario JSON: ") + e.what());
  }
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SceneError("cannot open scenario file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SceneError("invalid JSON in " + path + ": " + e.what());
  }
  Scenario s = scenario_from_json(j);
  validate(s);
  return s;
}

void save_scenario(const Scenario& s, const std::string& path, const nlohmann::json& meta) {
  nlohmann::json j = to_json(s);
  if (!meta.is_null()) j["meta"] = meta;
  std::ofstream out(path);
  if (!out) throw SceneError("cannot write scenario file " + path);
  out << j.dump() << '\n';
}

}  // namespace trajguide
