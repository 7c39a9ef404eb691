#pragma once

// Scenario data model: lane polylines, lane-graph connectivity, agent tracks,
// relative-coordinate features and lane-topology queries.

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "trajguide/geometry.hpp"

namespace trajguide {

inline constexpr double kDefaultLaneWidth = 3.7;
inline constexpr double kDefaultVehicleLength = 4.8;
inline constexpr double kDefaultVehicleWidth = 2.0;
inline constexpr double kTimestep = 0.1;

class SceneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LaneType { driving, shoulder, edge };
enum class Relation { predecessor, successor, left_neighbor, right_neighbor };

std::string_view to_string(LaneType t);
std::string_view to_string(Relation r);
LaneType lane_type_from_string(std::string_view s);
Relation relation_from_string(std::string_view s);
Relation inverse(Relation r);

struct MapPolyline {
  int id = 0;
  std::vector<Vec2> points;
  LaneType lane_type = LaneType::driving;
  double width = kDefaultLaneWidth;

  double length() const;
};

struct LaneEdge {
  int src = 0;
  int dst = 0;
  Relation relation = Relation::successor;

  friend bool operator==(const LaneEdge&, const LaneEdge&) = default;
};

// Connectivity between polylines. Construction completes every edge with its
// inverse (successor <-> predecessor, left <-> right) and sorts/dedupes, so
// neighbor symmetry always holds.
class LaneGraph {
 public:
  LaneGraph() = default;
  explicit LaneGraph(std::vector<LaneEdge> edges);

  const std::vector<LaneEdge>& edges() const noexcept { return edges_; }
  // Destinations of edges src --relation--> dst, ascending.
  std::vector<int> related(int src, Relation relation) const;

 private:
  std::vector<LaneEdge> edges_;
};

struct AgentState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;

  Vec2 position() const { return {x, y}; }
};

struct Extent {
  double length = kDefaultVehicleLength;
  double width = kDefaultVehicleWidth;
};

struct AgentTrack {
  int agent_id = 0;
  std::vector<AgentState> states;
  Extent extent;
};

struct Scenario {
  std::vector<MapPolyline> polylines;
  LaneGraph graph;
  std::vector<AgentTrack> agents;
  int t_now = 0;
  double dt = kTimestep;

  // Throws SceneError for unknown ids.
  const MapPolyline& polyline(int id) const;
  bool has_polyline(int id) const;
  int steps() const;  // longest track length
};

// Checks all structural invariants; throws SceneError describing the first
// violation.
void validate(const Scenario& scenario);

struct RelFeature {
  double dx = 0.0;
  double dy = 0.0;
  double cos_dh = 1.0;
  double sin_dh = 0.0;
};

// Pose j expressed in the frame of pose i.
RelFeature relative_feature(const AgentState& pose_i, const AgentState& pose_j);

// Inverse of relative_feature: global position of j given pose i.
Vec2 from_relative(const AgentState& pose_i, const RelFeature& f);

// Rigidly transforms everything so that anchor maps to the origin with zero
// heading.
Scenario normalize_to_frame(const Scenario& scenario, const AgentState& anchor);

// Applies p -> R(angle) p + offset to every point and state.
Scenario transform_scenario(const Scenario& scenario, double angle, Vec2 offset);

struct LaneQuery {
  enum class Kind {
    current_lane,
    left_lane,
    right_lane,
    rightmost_lane,
    leftmost_lane,
    successor_chain,
    road_edge_left,
    road_edge_right,
  };

  Kind kind = Kind::current_lane;
  int agent = -1;  // agent index, for current_lane
  int lane = -1;   // lane id, for every other kind
  int depth = 0;   // successor_chain only
};

std::string_view to_string(LaneQuery::Kind k);
std::optional<LaneQuery::Kind> lane_query_kind_from_string(std::string_view s);

// Evaluates a lane-topology query. Unknown lane ids throw SceneError. An agent
// farther than two lane widths from every driving lane yields an empty result.
std::vector<int> lane_query(const Scenario& scenario, const LaneQuery& query);

// Driving lane closest to agent `agent` (index) at timestep t, or nullopt when
// it is farther than two lane widths from all of them. Ties go to the smallest
// id.
std::optional<int> current_lane_at(const Scenario& scenario, int agent, int t);
std::optional<int> current_lane_at(const Scenario& scenario, Vec2 position);

// Lane ids reached by walking predecessors back and successors forward from
// `lane` (first edge at each step), in driving order.
std::vector<int> lane_corridor(const Scenario& scenario, int lane);

// True when both lanes lie on the same predecessor/successor corridor.
bool same_corridor(const Scenario& scenario, int lane_a, int lane_b);

// Points of the concatenated corridor with duplicate junction points removed.
std::vector<Vec2> corridor_points(const Scenario& scenario, int lane);

// JSON (de)serialization; schema keys: polylines, edges, agents, t_now, dt.
nlohmann::json to_json(const Scenario& scenario);
Scenario scenario_from_json(const nlohmann::json& j);
Scenario load_scenario(const std::string& path);
void save_scenario(const Scenario& scenario, const std::string& path,
                   const nlohmann::json& meta = nullptr);

}  // namespace trajguide
