#pragma once

// Trajectory evaluation: displacement errors, kinematic JSD bundle, SAT
// collision / off-road rates and kernel MMD.

#include <span>
#include <vector>

#include "json.hpp"
#include "trajguide/scene.hpp"

namespace trajguide::metrics {

struct Box {
  Vec2 center;
  double heading = 0.0;
  double length = kDefaultVehicleLength;
  double width = kDefaultVehicleWidth;
};

// Separating-axis test on the four edge normals. Boxes that only touch
// (separation exactly zero) count as overlapping.
bool boxes_overlap(const Box& a, const Box& b);

struct Displacement {
  double ade = 0.0;
  double fde = 0.0;
};

// Per-agent mean / final Euclidean error, averaged over agents. Throws
// std::invalid_argument on differing agent counts or horizons.
Displacement ade_fde(const std::vector<std::vector<Vec2>>& sim, const std::vector<std::vector<Vec2>>& gt);

// Future rows (t_now + 1 onward) of agents present in both, matched by
// agent_id.
Displacement ade_fde(const Scenario& sim, const Scenario& gt);

// Constant-velocity extrapolation of every agent from its last two history
// states.
Scenario constant_velocity(const Scenario& scenario);

struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  int bins = 1;
};

// Normalised histogram; out-of-range values land in the edge bins.
std::vector<double> histogram(std::span<const double> values, const Histogram& h);

// Jensen-Shannon distance: sqrt of the base-2 JS divergence, in [0, 1].
double js_distance(std::span<const double> p, std::span<const double> q);

struct KinematicFeatures {
  std::vector<double> speed;            // m/s
  std::vector<double> angular_speed;    // rad/s
  std::vector<double> acceleration;     // m/s^2
  std::vector<double> nearest_vehicle;  // m, center to center
};

// Per-step features over rows t_now..end of every agent.
KinematicFeatures kinematic_features(const Scenario& scenario);

inline const Histogram kSpeedBins{0.0, 30.0, 30};
inline const Histogram kAngularBins{-1.0, 1.0, 40};
inline const Histogram kAccelBins{-8.0, 8.0, 40};
inline const Histogram kNearestBins{0.0, 50.0, 50};

// Mean JS distance over the four kinematic features. Features empty on both
// sides are skipped, empty on one side count as 1; throws
// std::invalid_argument when none remain.
double jsd_bundle(const std::vector<Scenario>& real, const std::vector<Scenario>& sim);

struct SceneSafety {
  int agents = 0;
  int colliding = 0;
  int offroad = 0;
};

SceneSafety scene_safety(const Scenario& scenario);

struct SafetyRates {
  double collision_rate = 0.0;
  double offroad_rate = 0.0;
  double scr = 0.0;
};

SafetyRates collision_offroad(const Scenario& scenario);
SafetyRates collision_offroad(const std::vector<Scenario>& scenes);

// True when agents i and j overlap at any common timestep.
bool agents_collide(const Scenario& scenario, int i, int j);

// Center farther than width / 2 from every driving polyline.
bool is_offroad(const Scenario& scenario, Vec2 p);

// Unbiased MMD^2 with a Gaussian kernel whose bandwidth is the median pairwise
// distance of the pooled sample; clamped at 0. Returns 0 when the bandwidth
// is 0. Throws std::invalid_argument for fewer than two samples per side.
double mmd(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y);

double median_pairwise_distance(const std::vector<std::vector<double>>& pooled);

// Closest approach to another vehicle over the future, one value per agent.
std::vector<std::vector<double>> nearest_object_samples(const Scenario& scenario);
// Closest approach to a road-edge polyline over the future, one per agent;
// empty when the map has no edges.
std::vector<std::vector<double>> road_edge_samples(const Scenario& scenario);

struct MetricReport {
  double ade = 0.0;
  double fde = 0.0;
  double jsd = 0.0;  // in units of 1e-2
  double collision_rate = 0.0;
  double offroad_rate = 0.0;
  double scr = 0.0;
  double mmd_o = 0.0;
  double mmd_r = 0.0;

  nlohmann::json to_json() const;
};

// real[i] is the reference for sim[i].
MetricReport evaluate(const std::vector<Scenario>& real, const std::vector<Scenario>& sim);

}  // namespace trajguide::metrics
