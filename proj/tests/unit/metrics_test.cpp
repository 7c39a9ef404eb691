#include "trajguide/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace trajguide;
using namespace trajguide::metrics;

namespace {

// Polygon intersection by brute force: containment of any vertex or any
// crossing edge pair.
std::array<Vec2, 4> box_corners(const Box& b) {
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  std::array<Vec2, 4> out;
  const double sx[] = {1, -1, -1, 1};
  const double sy[] = {1, 1, -1, -1};
  for (int i = 0; i < 4; ++i) {
    const double lx = sx[i] * b.length / 2, ly = sy[i] * b.width / 2;
    out[i] = {b.center.x + c * lx - s * ly, b.center.y + s * lx + c * ly};
  }
  return out;
}

bool inside(const std::array<Vec2, 4>& poly, Vec2 p) {
  for (int i = 0; i < 4; ++i) {
    if (cross(poly[(i + 1) % 4] - poly[i], p - poly[i]) < 0) return false;
  }
  return true;
}

bool segments_cross(Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
  const double d1 = cross(b - a, c - a), d2 = cross(b - a, d - a);
  const double d3 = cross(d - c, a - c), d4 = cross(d - c, b - c);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0));
}

bool polygons_intersect(const Box& a, const Box& b) {
  const auto pa = box_corners(a), pb = box_corners(b);
  for (const Vec2& p : pa)
    if (inside(pb, p)) return true;
  for (const Vec2& p : pb)
    if (inside(pa, p)) return true;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (segments_cross(pa[i], pa[(i + 1) % 4], pb[j], pb[(j + 1) % 4])) return true;
  return false;
}

Scenario two_agents(std::vector<AgentState> a, std::vector<AgentState> b) {
  Scenario s;
  s.polylines.push_back({1, {{-1000, 0}, {1000, 0}}, LaneType::driving, kDefaultLaneWidth});
  s.agents.push_back({0, std::move(a), {}});
  s.agents.push_back({1, std::move(b), {}});
  s.t_now = 0;
  return s;
}

std::vector<double> reference_histogram(const std::vector<double>& v, double lo, double hi, int bins) {
  std::vector<double> counts(bins, 0.0);
  for (double x : v) {
    int idx = 0;
    for (int b = 0; b < bins; ++b) {
      if (x >= lo + (hi - lo) * b / bins) idx = b;
    }
    counts[idx] += 1.0;
  }
  for (double& c : counts) c /= v.size();
  return counts;
}

double reference_js(const std::vector<double>& p, const std::vector<double>& q) {
  double kl_p = 0, kl_q = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = (p[i] + q[i]) / 2;
    if (p[i] > 0) kl_p += p[i] * std::log(p[i] / m);
    if (q[i] > 0) kl_q += q[i] * std::log(q[i] / m);
  }
  return std::sqrt((kl_p + kl_q) / 2 / std::log(2.0));
}

std::vector<std::vector<double>> gaussian_samples(std::mt19937_64& rng, int n, double mu) {
  std::normal_distribution<double> nd(mu, 1.0);
  std::vector<std::vector<double>> out(n);
  for (auto& v : out) v = {nd(rng)};
  return out;
}

}  // namespace

TEST(Displacement, IdenticalIsZero) {
  std::vector<std::vector<Vec2>> a{{{0, 0}, {1, 1}, {2, 2}}, {{5, 5}, {6, 6}, {7, 7}}};
  const Displacement d = ade_fde(a, a);
  EXPECT_EQ(d.ade, 0.0);
  EXPECT_EQ(d.fde, 0.0);
}

TEST(Displacement, ConstantOffset) {
  std::vector<std::vector<Vec2>> gt{{{0, 0}, {1, 0}, {2, 0}, {3, 0}}};
  std::vector<std::vector<Vec2>> sim{{{0, 2}, {1, 2}, {2, 2}, {3, 2}}};
  const Displacement d = ade_fde(sim, gt);
  EXPECT_DOUBLE_EQ(d.ade, 2.0);
  EXPECT_DOUBLE_EQ(d.fde, 2.0);
}

TEST(Displacement, LinearlyGrowingOffset) {
  const int T = 81;
  std::vector<Vec2> gt, sim;
  for (int t = 0; t < T; ++t) {
    gt.push_back({double(t), 0});
    sim.push_back({double(t), 4.0 * t / (T - 1)});
  }
  const Displacement d = ade_fde(std::vector<std::vector<Vec2>>{sim}, std::vector<std::vector<Vec2>>{gt});
  EXPECT_NEAR(d.ade, 2.0, 1e-12);
  EXPECT_NEAR(d.fde, 4.0, 1e-12);
}

TEST(Displacement, MismatchThrows) {
  std::vector<std::vector<Vec2>> a{{{0, 0}, {1, 1}}};
  std::vector<std::vector<Vec2>> b{{{0, 0}}};
  EXPECT_THROW(ade_fde(a, b), std::invalid_argument);
  EXPECT_THROW(ade_fde(a, {}), std::invalid_argument);
}

TEST(Displacement, BoundedByMaxStepError) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<std::vector<Vec2>> a(3), b(3);
    double worst = 0;
    for (int k = 0; k < 3; ++k) {
      for (int t = 0; t < 10; ++t) {
        a[k].push_back({u(rng), u(rng)});
        b[k].push_back({u(rng), u(rng)});
        worst = std::max(worst, norm(a[k].back() - b[k].back()));
      }
    }
    const Displacement d = ade_fde(a, b);
    EXPECT_LE(d.ade, worst);
    EXPECT_LE(d.fde, worst);
  }
}

TEST(Sat, AxisAlignedContactFlipsExactly) {
  const Box a{{0, 0}, 0, 4.0, 2.0};
  EXPECT_TRUE(boxes_overlap(a, {{4.0, 0}, 0, 4.0, 2.0}));  // touching faces
  EXPECT_TRUE(boxes_overlap(a, {{std::nextafter(4.0, 0.0), 0}, 0, 4.0, 2.0}));
  EXPECT_FALSE(boxes_overlap(a, {{std::nextafter(4.0, 5.0), 0}, 0, 4.0, 2.0}));
  EXPECT_TRUE(boxes_overlap(a, {{0, 2.0}, 0, 4.0, 2.0}));
  EXPECT_FALSE(boxes_overlap(a, {{0, 2.0 + 1e-12}, 0, 4.0, 2.0}));
}

TEST(Sat, RotatedCornerContact) {
  // A unit-diagonal square rotated 45 degrees pokes its corner at a face of
  // the axis-aligned box: contact when the center is 2 + sqrt(2) away.
  const Box a{{0, 0}, 0, 4.0, 2.0};
  const double contact = 2.0 + std::sqrt(2.0);
  EXPECT_TRUE(boxes_overlap(a, {{contact - 1e-9, 0}, std::numbers::pi / 4, 2.0, 2.0}));
  EXPECT_FALSE(boxes_overlap(a, {{contact + 1e-9, 0}, std::numbers::pi / 4, 2.0, 2.0}));
  // Corner-to-corner diagonal approach of two unrotated boxes.
  EXPECT_TRUE(boxes_overlap(a, {{4.0 - 1e-9, 2.0 - 1e-9}, 0, 4.0, 2.0}));
  EXPECT_FALSE(boxes_overlap(a, {{4.0 + 1e-9, 2.0 - 1e-9}, 0, 4.0, 2.0}));
}

TEST(Sat, MatchesPolygonOracleAndIsSymmetric) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> pos(-6, 6), ang(-3.2, 3.2), size(0.5, 5);
  int hits = 0;
  for (int i = 0; i < 2000; ++i) {
    const Box a{{pos(rng), pos(rng)}, ang(rng), size(rng), size(rng)};
    const Box b{{pos(rng), pos(rng)}, ang(rng), size(rng), size(rng)};
    const bool o = boxes_overlap(a, b);
    EXPECT_EQ(o, boxes_overlap(b, a));
    EXPECT_EQ(o, polygons_intersect(a, b)) << i;
    hits += o;
  }
  EXPECT_GT(hits, 100);
}

TEST(Safety, FarApartIsClean) {
  std::vector<AgentState> a, b;
  for (int t = 0; t < 20; ++t) {
    a.push_back({double(t), 0, 0});
    b.push_back({100.0 + t, 0, 0});
  }
  const SafetyRates r = collision_offroad(two_agents(a, b));
  EXPECT_EQ(r.collision_rate, 0.0);
  EXPECT_EQ(r.offroad_rate, 0.0);
  EXPECT_EQ(r.scr, 0.0);
}

TEST(Safety, SharedPointCollides) {
  std::vector<AgentState> a, b;
  for (int t = 0; t < 21; ++t) {
    a.push_back({-10.0 + t, 0, 0});
    b.push_back({10.0 - t, 0, std::numbers::pi});
  }
  const SafetyRates r = collision_offroad(two_agents(a, b));
  EXPECT_EQ(r.collision_rate, 1.0);
  EXPECT_EQ(r.scr, 1.0);
}

TEST(Safety, OffroadAndPermutationInvariance) {
  std::vector<AgentState> a, b;
  for (int t = 0; t < 20; ++t) {
    a.push_back({double(t), 0.1 * t, 0});  // leaves the 1.85 m corridor
    b.push_back({50.0 + t, 0, 0});
  }
  Scenario s = two_agents(a, b);
  const SafetyRates r = collision_offroad(s);
  EXPECT_EQ(r.offroad_rate, 0.5);
  std::swap(s.agents[0], s.agents[1]);
  const SafetyRates r2 = collision_offroad(s);
  EXPECT_EQ(r2.offroad_rate, r.offroad_rate);
  EXPECT_EQ(r2.collision_rate, r.collision_rate);
}

TEST(Jsd, DistanceProperties) {
  const std::vector<double> p{0.5, 0.5, 0, 0}, q{0, 0, 0.5, 0.5};
  EXPECT_DOUBLE_EQ(js_distance(p, q), 1.0);
  EXPECT_EQ(js_distance(p, p), 0.0);
  const std::vector<double> u{0.25, 0.25, 0.25, 0.25};
  EXPECT_NEAR(js_distance(p, u), js_distance(u, p), 1e-15);
}

TEST(Jsd, BinnedGaussiansMatchReferenceHistogram) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> a(10, 3), b(14, 4);
  std::vector<double> x(5000), y(5000);
  for (double& v : x) v = a(rng);
  for (double& v : y) v = b(rng);
  const auto hx = histogram(x, kSpeedBins);
  const auto hy = histogram(y, kSpeedBins);
  const auto rx = reference_histogram(x, 0, 30, 30);
  const auto ry = reference_histogram(y, 0, 30, 30);
  for (int i = 0; i < 30; ++i) {
    EXPECT_NEAR(hx[i], rx[i], 1e-12);
    EXPECT_NEAR(hy[i], ry[i], 1e-12);
  }
  EXPECT_NEAR(js_distance(hx, hy), reference_js(rx, ry), 1e-12);
}

TEST(Jsd, BundleOfIdenticalScenesIsZero) {
  std::vector<AgentState> a, b;
  for (int t = 0; t < 30; ++t) {
    a.push_back({0.1 * t * t, 0, 0.01 * t});
    b.push_back({20.0 + t, 3.7, 0});
  }
  std::vector<Scenario> s{two_agents(a, b), two_agents(b, a)};
  EXPECT_EQ(jsd_bundle(s, s), 0.0);
}

TEST(Jsd, DisjointSpeedsGiveMaximumDistance) {
  std::vector<AgentState> slow, fast;
  for (int t = 0; t < 30; ++t) {
    slow.push_back({0.1 * t, 0, 0});
    fast.push_back({2.5 * t, 0, 0});
  }
  Scenario a, b;
  a.polylines = b.polylines = two_agents({}, {}).polylines;
  a.agents = {{0, slow, {}}};
  b.agents = {{0, fast, {}}};
  const KinematicFeatures fa = kinematic_features(a), fb = kinematic_features(b);
  EXPECT_DOUBLE_EQ(js_distance(histogram(fa.speed, kSpeedBins), histogram(fb.speed, kSpeedBins)), 1.0);
  EXPECT_THROW(jsd_bundle({}, {b}), std::invalid_argument);
}

TEST(Mmd, SelfIsZero) {
  std::mt19937_64 rng(1);
  const auto x = gaussian_samples(rng, 200, 0.0);
  EXPECT_LT(mmd(x, x), 1e-9);
}

TEST(Mmd, MedianBandwidthHandValue) {
  // Pairwise distances 1, 3, 4, 2, 3, 1 -> sorted middle pair (2, 3).
  EXPECT_DOUBLE_EQ(median_pairwise_distance({{0}, {1}, {3}, {4}}), 2.5);
  // Hand evaluation of the unbiased estimate with h = 2.5.
  const double k = [](double d) { return std::exp(-d * d / (2 * 2.5 * 2.5)); }(1.0);
  const double kxy = std::exp(-9.0 / 12.5) + std::exp(-16.0 / 12.5) + std::exp(-4.0 / 12.5) + std::exp(-9.0 / 12.5);
  const double expected = 2 * k / 2 + 2 * k / 2 - 2 * kxy / 4;
  EXPECT_NEAR(mmd({{0}, {1}}, {{3}, {4}}), expected, 1e-15);
}

TEST(Mmd, DegenerateAndTooFewSamples) {
  EXPECT_EQ(mmd({{1}, {1}}, {{1}, {1}}), 0.0);
  EXPECT_THROW(mmd({{1}}, {{1}, {2}}), std::invalid_argument);
}

TEST(Mmd, SymmetricInArguments) {
  std::mt19937_64 rng(2);
  const auto x = gaussian_samples(rng, 150, 0.0);
  const auto y = gaussian_samples(rng, 120, 0.7);
  EXPECT_LT(std::abs(mmd(x, y) - mmd(y, x)), 1e-12);
}

TEST(Mmd, SeparatesShiftedGaussians) {
  std::vector<double> null_values;
  std::vector<double> shifted;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const auto a = gaussian_samples(rng, 500, 0.0);
    const auto b = gaussian_samples(rng, 500, 0.0);
    const auto c = gaussian_samples(rng, 500, 5.0);
    null_values.push_back(mmd(a, b));
    shifted.push_back(mmd(a, c));
  }
  double mean = 0, var = 0;
  for (double v : null_values) mean += v / null_values.size();
  for (double v : null_values) var += (v - mean) * (v - mean) / (null_values.size() - 1);
  for (double v : shifted) EXPECT_GT(v, mean + 5 * std::sqrt(var));
}

TEST(ConstantVelocity, ExtrapolatesLastStep) {
  std::vector<AgentState> a;
  for (int t = 0; t < 20; ++t) a.push_back({t * t * 0.1, 0, 0});
  Scenario s = two_agents(a, a);
  s.t_now = 10;
  const Scenario cv = constant_velocity(s);
  const double v = a[10].x - a[9].x;
  for (int t = 11; t < 20; ++t) EXPECT_NEAR(cv.agents[0].states[t].x, a[10].x + (t - 10) * v, 1e-12);
}
