#pragma once

// Procedural roads, lane-following traffic and labeled behavior fixtures.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajguide/frenet.hpp"
#include "trajguide/scene.hpp"

namespace trajguide::synth {

class SynthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MapKind { straight, curve, merge };

std::string_view to_string(MapKind k);
MapKind map_kind_from_string(std::string_view s);

struct MapSpec {
  MapKind kind = MapKind::straight;
  int lanes = 2;
  double length = 300.0;
  double radius = 80.0;        // curve: centerline radius of the arc section
  double piece_length = 0.0;   // > 0 splits lanes into successor-linked pieces
  bool road_edges = false;     // edge polylines on both sides of the road
  bool random_pose = true;     // seed-driven global rotation and offset

  void validate() const;  // throws SynthError
  nlohmann::json to_json() const;
  static MapSpec from_json(const nlohmann::json& j);
};

// A drivable path through the map: a lane of the main road (index 0 is the
// rightmost) or the on-ramp.
struct Route {
  int lane_index = 0;   // -1 for the on-ramp
  std::vector<int> ids;  // polyline ids in driving order
};

struct SynthMap {
  MapSpec spec;
  std::vector<MapPolyline> polylines;
  LaneGraph graph;
  RefPath centerline;            // main road reference (after the global pose)
  std::vector<double> offsets;   // lateral offset of each main lane from the centerline
  std::optional<RefPath> ramp;   // merge only
  std::vector<Route> routes;
};

// Parallel lane centerlines at kDefaultLaneWidth spacing with full neighbor and
// successor edges. Merge maps add an on-ramp joining the rightmost lane
// through an acceleration lane.
SynthMap gen_map(const MapSpec& spec, std::uint64_t seed);

struct BehaviorMix {
  double speed_min = 8.0;
  double speed_max = 15.0;
  double speed_variation = 1.0;  // 0 gives constant speeds
  double lane_change_prob = 0.3;
  double ramp_prob = 0.5;        // merge maps: chance one agent uses the ramp

  nlohmann::json to_json() const;
  static BehaviorMix from_json(const nlohmann::json& j);
};

inline constexpr double kMaxAccel = 3.0;
inline constexpr double kMinGap = 5.0;  // bumper to bumper, same lane

// Motion plan of one agent along a path: s and lateral offset d per step.
struct Plan {
  const RefPath* path = nullptr;
  std::vector<double> s;
  std::vector<double> d;
};

// 91 states (t_now = 10) per agent. Collision-free, on-road and with
// same-lane gaps of at least kMinGap; throws SynthError when the map cannot
// host the agents.
std::vector<AgentTrack> gen_agents(const SynthMap& map, int n, const BehaviorMix& mix, std::uint64_t seed);

// Positions from a plan, with headings from the path direction of travel.
AgentTrack track_from_plan(int agent_id, const Plan& plan);

Scenario make_scenario(const SynthMap& map, std::vector<AgentTrack> agents);

struct ScenarioSpec {
  std::vector<MapSpec> maps;  // one is drawn per scenario
  int min_agents = 2;
  int max_agents = 6;
  BehaviorMix mix;

  nlohmann::json to_json() const;
  static ScenarioSpec from_json(const nlohmann::json& j);
};

// Default training mix: straight, curve and merge roads with 2 or 3 lanes.
ScenarioSpec default_dataset_spec();

std::uint64_t scenario_seed(std::uint64_t base, std::size_t index);

Scenario gen_scenario(const ScenarioSpec& spec, std::uint64_t seed);

struct Dataset {
  std::vector<Scenario> scenarios;
  std::vector<std::uint64_t> seeds;
};

Dataset gen_dataset(const ScenarioSpec& spec, std::size_t count, std::uint64_t seed);

// One Scenario JSON per line, plus <path>.manifest.json {count, seeds, spec}.
void save_dataset(const Dataset& data, const ScenarioSpec& spec, const std::string& path,
                  const nlohmann::json& meta = nullptr);
std::vector<Scenario> load_dataset(const std::string& path);

// ---- fixtures --------------------------------------------------------------------------

enum class FixtureType { cut_in, out_of_road, yield, rightmost, weaving, reverse };

std::string_view to_string(FixtureType t);
FixtureType fixture_type_from_string(std::string_view s);
const std::vector<FixtureType>& all_fixture_types();

struct Fixture {
  FixtureType type = FixtureType::cut_in;
  Scenario scenario;          // ground truth; agent 0 acts, agent 1 is the counterpart
  std::string description;
  std::string program;        // matching builtin program name
  double amplitude = 0.0;     // weaving: lateral amplitude, m
  double omega = 0.0;         // weaving: angular frequency, rad/s
};

Fixture gen_fixture(FixtureType type, std::uint64_t seed);

}  // namespace trajguide::synth
