#include "trajguide/synth.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "trajguide/metrics.hpp"

using namespace trajguide;
using namespace trajguide::synth;

namespace {

int count_relation(const LaneGraph& g, Relation r) {
  int n = 0;
  for (const LaneEdge& e : g.edges()) n += e.relation == r;
  return n;
}

std::vector<FrenetCoord> frenet_track(const RefPath& path, const AgentTrack& a) {
  std::vector<FrenetCoord> out;
  for (const AgentState& s : a.states) out.push_back(project(path, s.position()));
  return out;
}

}  // namespace

TEST(GenMap, StraightThreeLanesCounts) {
  MapSpec spec;
  spec.lanes = 3;
  const SynthMap m = gen_map(spec, 1);
  EXPECT_EQ(m.polylines.size(), 3u);
  EXPECT_EQ(count_relation(m.graph, Relation::left_neighbor), 2);
  EXPECT_EQ(count_relation(m.graph, Relation::right_neighbor), 2);
  EXPECT_EQ(count_relation(m.graph, Relation::successor), 0);
}

TEST(GenMap, PiecesAndEdgesAreLinked) {
  MapSpec spec;
  spec.lanes = 2;
  spec.piece_length = 100;
  spec.road_edges = true;
  const SynthMap m = gen_map(spec, 1);
  Scenario s = make_scenario(m, {});
  // 3 pieces x (2 lanes + 2 edges)
  EXPECT_EQ(m.polylines.size(), 12u);
  EXPECT_EQ(lane_corridor(s, m.routes[0].ids[1]), m.routes[0].ids);
  const auto edge = lane_query(s, {LaneQuery::Kind::road_edge_right, -1, m.routes[1].ids[0], 0});
  ASSERT_EQ(edge.size(), 1u);
  EXPECT_EQ(s.polyline(edge[0]).lane_type, LaneType::edge);
}

TEST(GenMap, CurveInnerLaneShorter) {
  MapSpec spec;
  spec.kind = MapKind::curve;
  spec.lanes = 3;
  spec.radius = 50;
  spec.length = 240;
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    const SynthMap m = gen_map(spec, seed);
    const double right = m.polylines[0].length(), left = m.polylines[2].length();
    // The arc section is a third of the road; lanes sit 3.7 m apart.
    const double arc = 80.0 / 50.0;
    EXPECT_NEAR(std::abs(right - left), 2 * kDefaultLaneWidth * arc, 0.05);
  }
}

TEST(GenMap, DeterministicPerSeed) {
  MapSpec spec;
  spec.kind = MapKind::merge;
  spec.piece_length = 100;
  spec.road_edges = true;
  const SynthMap ma = gen_map(spec, 9);
  const Scenario a = make_scenario(ma, gen_agents(ma, 3, {}, 1));
  const SynthMap mb = gen_map(spec, 9);
  const Scenario b = make_scenario(mb, gen_agents(mb, 3, {}, 1));
  const SynthMap mc = gen_map(spec, 10);
  const Scenario c = make_scenario(mc, gen_agents(mc, 3, {}, 1));
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_NE(to_json(a).dump(), to_json(c).dump());
  EXPECT_NO_THROW(validate(a));
}

TEST(GenMap, InvalidSpecsThrow) {
  MapSpec spec;
  spec.lanes = 0;
  EXPECT_THROW(gen_map(spec, 1), SynthError);
  spec.lanes = 2;
  spec.kind = MapKind::curve;
  spec.radius = 2;
  EXPECT_THROW(gen_map(spec, 1), SynthError);
  EXPECT_THROW(map_kind_from_string("roundabout"), SynthError);
}

TEST(GenAgents, ConstantSpeedStaysOnLaneWithUnitSpacing) {
  MapSpec spec;
  spec.lanes = 1;
  const SynthMap m = gen_map(spec, 3);
  BehaviorMix mix;
  mix.speed_min = mix.speed_max = 10.0;
  mix.speed_variation = 0.0;
  mix.lane_change_prob = 0.0;
  const auto agents = gen_agents(m, 1, mix, 4);
  ASSERT_EQ(agents.size(), 1u);
  ASSERT_EQ(agents[0].states.size(), 91u);
  const RefPath lane = build_ref_path(m.polylines[0]);
  const auto f = frenet_track(lane, agents[0]);
  for (std::size_t t = 0; t < f.size(); ++t) {
    EXPECT_NEAR(f[t].d, 0.0, 1e-9);
    if (t > 0) EXPECT_NEAR(f[t].s - f[t - 1].s, 1.0, 1e-9);
  }
}

TEST(GenAgents, LaneChangeIsMonotoneOneLaneWidth) {
  MapSpec spec;
  spec.lanes = 3;
  const SynthMap m = gen_map(spec, 5);
  BehaviorMix mix;
  mix.lane_change_prob = 1.0;
  int changes = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto agents = gen_agents(m, 1, mix, seed);
    const auto f = frenet_track(m.centerline, agents[0]);
    const double delta = f.back().d - f.front().d;
    EXPECT_NEAR(std::abs(delta), kDefaultLaneWidth, 1e-6);
    const double sign = delta > 0 ? 1.0 : -1.0;
    for (std::size_t t = 1; t < f.size(); ++t) EXPECT_GE(sign * (f[t].d - f[t - 1].d), -1e-9);
    ++changes;
  }
  EXPECT_EQ(changes, 10);
}

TEST(GenAgents, TooShortMapThrows) {
  MapSpec spec;
  spec.length = 100;
  const SynthMap m = gen_map(spec, 1);
  BehaviorMix mix;
  mix.speed_min = mix.speed_max = 15;
  EXPECT_THROW(gen_agents(m, 2, mix, 1), SynthError);
  EXPECT_THROW(gen_agents(m, 0, mix, 1), SynthError);
}

TEST(Dataset, CollisionFreeOnRoadAndBoundedAcceleration) {
  const ScenarioSpec spec = default_dataset_spec();
  const Dataset d = gen_dataset(spec, 300, 7);
  ASSERT_EQ(d.scenarios.size(), 300u);
  for (const Scenario& s : d.scenarios) {
    validate(s);
    const metrics::SceneSafety safety = metrics::scene_safety(s);
    EXPECT_EQ(safety.colliding, 0);
    EXPECT_EQ(safety.offroad, 0);
    EXPECT_GE(s.agents.size(), 1u);
    for (const AgentTrack& a : s.agents) {
      ASSERT_EQ(a.states.size(), 91u);
      for (std::size_t t = 2; t < a.states.size(); ++t) {
        const double v1 = norm(a.states[t].position() - a.states[t - 1].position()) / 0.1;
        const double v0 = norm(a.states[t - 1].position() - a.states[t - 2].position()) / 0.1;
        EXPECT_LE(std::abs(v1 - v0) / 0.1, kMaxAccel + 0.1);
      }
    }
  }
}

TEST(Dataset, DeterministicAndRoundTrips) {
  const ScenarioSpec spec = default_dataset_spec();
  const Dataset a = gen_dataset(spec, 5, 3);
  const Dataset b = gen_dataset(spec, 5, 3);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(to_json(a.scenarios[i]).dump(), to_json(b.scenarios[i]).dump());
  const std::string path = (std::filesystem::temp_directory_path() / "trajguide_ds.jsonl").string();
  save_dataset(a, spec, path);
  const auto loaded = load_dataset(path);
  ASSERT_EQ(loaded.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(to_json(loaded[i]).dump(), to_json(a.scenarios[i]).dump());
  std::ifstream mf(path + ".manifest.json");
  const auto manifest = nlohmann::json::parse(mf);
  EXPECT_EQ(manifest.at("count"), 5);
  EXPECT_EQ(manifest.at("seeds").get<std::vector<std::uint64_t>>(), a.seeds);
  EXPECT_EQ(ScenarioSpec::from_json(manifest.at("spec")).to_json(), spec.to_json());
  std::remove(path.c_str());
  std::remove((path + ".manifest.json").c_str());
}

TEST(Fixture, WeavingMatchesAmplitudeAndFrequency) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Fixture fx = gen_fixture(FixtureType::weaving, seed);
    const Scenario& s = fx.scenario;
    const RefPath lane = build_ref_path(corridor_points(s, *current_lane_at(s, 0, s.t_now)));
    const auto f = frenet_track(lane, s.agents[0]);
    double peak = 0;
    int crossings = 0;
    for (std::size_t t = s.t_now + 1; t < f.size(); ++t) {
      peak = std::max(peak, std::abs(f[t].d));
      if ((f[t].d > 0) != (f[t - 1].d > 0) && t > static_cast<std::size_t>(s.t_now) + 1) ++crossings;
    }
    const double horizon = 8.0;
    EXPECT_NEAR(peak, fx.amplitude, 0.02 * fx.amplitude);
    // Sign changes of sin(w t) over the horizon.
    EXPECT_EQ(crossings, static_cast<int>(std::floor(fx.omega * horizon / std::numbers::pi)));
  }
}

TEST(Fixture, ReverseMovesBackwardThroughout) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Fixture fx = gen_fixture(FixtureType::reverse, seed);
    const Scenario& s = fx.scenario;
    const RefPath lane = build_ref_path(corridor_points(s, *current_lane_at(s, 0, 0)));
    const auto f = frenet_track(lane, s.agents[0]);
    for (std::size_t t = 1; t < f.size(); ++t) EXPECT_LT(f[t].s - f[t - 1].s, 0.0);
    // Facing along the lane while moving backwards.
    const Vec2 dir = lane.seg_dir[0];
    EXPECT_GT(std::cos(s.agents[0].states[50].heading - std::atan2(dir.y, dir.x)), 0.99);
  }
}

TEST(Fixture, AllTypesAreValidAndDeterministic) {
  for (FixtureType t : all_fixture_types()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Fixture a = gen_fixture(t, seed);
      const Fixture b = gen_fixture(t, seed);
      EXPECT_EQ(to_json(a.scenario).dump(), to_json(b.scenario).dump());
      EXPECT_NO_THROW(validate(a.scenario));
      EXPECT_EQ(metrics::scene_safety(a.scenario).colliding, 0) << to_string(t) << " " << seed;
      EXPECT_FALSE(a.description.empty());
    }
  }
  EXPECT_THROW(fixture_type_from_string("drift"), SynthError);
}
