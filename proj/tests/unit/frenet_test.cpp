#include "trajguide/frenet.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "fd.hpp"

using namespace trajguide;
namespace g = trajguide::grad;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<Vec2> arc(double radius, double sweep, int n) {
  std::vector<Vec2> pts;
  for (int i = 0; i < n; ++i) {
    const double a = sweep * i / (n - 1);
    pts.push_back({radius * std::sin(a), radius * (1.0 - std::cos(a))});
  }
  return pts;
}

}  // namespace

TEST(BuildRefPath, StraightAndTriangle) {
  const RefPath p = build_ref_path(std::vector<Vec2>{{0, 0}, {10, 0}});
  EXPECT_EQ(p.cum_s, (std::vector<double>{0, 10}));
  EXPECT_EQ(build_ref_path(std::vector<Vec2>{{0, 0}, {3, 4}}).length(), 5.0);
}

TEST(BuildRefPath, QuarterCircleLength) {
  const RefPath p = build_ref_path(arc(10.0, kPi / 2, 100));
  EXPECT_NEAR(p.length(), 5.0 * kPi, 0.005 * 5.0 * kPi);
  for (const Vec2& t : p.seg_dir) EXPECT_NEAR(norm(t), 1.0, 1e-9);
  for (std::size_t i = 1; i < p.cum_s.size(); ++i) EXPECT_GT(p.cum_s[i], p.cum_s[i - 1]);
}

TEST(BuildRefPath, DuplicatePointsRejected) {
  EXPECT_THROW(build_ref_path(std::vector<Vec2>{{0, 0}, {1, 1}, {1, 1}}), std::invalid_argument);
  EXPECT_THROW(build_ref_path(std::vector<Vec2>{{0, 0}}), std::invalid_argument);
}

TEST(Project, AxisAlignedExamples) {
  const RefPath p = build_ref_path(std::vector<Vec2>{{0, 0}, {10, 0}});
  FrenetCoord c = project(p, {3, 2});
  EXPECT_DOUBLE_EQ(c.s, 3.0);
  EXPECT_DOUBLE_EQ(c.d, 2.0);
  c = project(p, {3, -2});
  EXPECT_DOUBLE_EQ(c.s, 3.0);
  EXPECT_DOUBLE_EQ(c.d, -2.0);
  EXPECT_EQ(project(p, {7.5, 0}).d, 0.0);
}

TEST(Project, EndpointsClamp) {
  const RefPath p = build_ref_path(std::vector<Vec2>{{0, 0}, {10, 0}, {20, 0}});
  EXPECT_EQ(project(p, {-5, 1}).s, 0.0);
  EXPECT_EQ(project(p, {-5, 1}).d, 1.0);
  EXPECT_EQ(project(p, {25, -1}).s, 20.0);
  EXPECT_EQ(project(p, {25, -1}).d, -1.0);
}

TEST(ToCartesian, InverseExamplesAndRange) {
  const RefPath p = build_ref_path(std::vector<Vec2>{{0, 0}, {10, 0}});
  const Vec2 q = to_cartesian(p, {3, 2});
  EXPECT_DOUBLE_EQ(q.x, 3.0);
  EXPECT_DOUBLE_EQ(q.y, 2.0);
  EXPECT_EQ(to_cartesian(p, {4, 0}).y, 0.0);
  EXPECT_THROW(to_cartesian(p, {10.5, 0}), std::out_of_range);
  EXPECT_THROW(to_cartesian(p, {-0.1, 0}), std::out_of_range);
}

TEST(RoundTrip, StraightPathRandomPoints) {
  std::mt19937_64 rng(4);
  const RefPath p = build_ref_path(std::vector<Vec2>{{-3, 1}, {20, 9}, {60, 23}});
  std::uniform_real_distribution<double> s(0.0, p.length());
  std::uniform_real_distribution<double> d(-20.0, 20.0);
  for (int i = 0; i < 10000; ++i) {
    const Vec2 q = to_cartesian(p, {s(rng), d(rng)});
    const Vec2 back = to_cartesian(p, project(p, q));
    ASSERT_LT(norm(back - q), 1e-6);
  }
}

TEST(RoundTrip, CurvedPathWithinHalfRadius) {
  std::mt19937_64 rng(8);
  const double radius = 30.0;
  const RefPath p = build_ref_path(arc(radius, 2.5, 60));
  std::uniform_real_distribution<double> s(0.0, p.length());
  std::uniform_real_distribution<double> d(-0.5 * radius, 0.5 * radius);
  for (int i = 0; i < 10000; ++i) {
    const Vec2 q = to_cartesian(p, {s(rng), d(rng)});
    const Vec2 back = to_cartesian(p, project(p, q));
    ASSERT_LT(norm(back - q), 1e-3);
  }
}

TEST(Project, ReflectionNegatesDExactly) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-10.0, 40.0);
  const RefPath p = build_ref_path(std::vector<Vec2>{{0, 0}, {12, 0}, {30, 0}});
  for (int i = 0; i < 1000; ++i) {
    const Vec2 q{u(rng), u(rng)};
    const FrenetCoord a = project(p, q);
    const FrenetCoord b = project(p, {q.x, -q.y});
    EXPECT_EQ(a.s, b.s);
    EXPECT_EQ(a.d, -b.d);
  }
}

TEST(ProjectTrajectory, AlongPathAndConstantOffset) {
  const RefPath p = build_ref_path(std::vector<Vec2>{{0, 0}, {50, 0}, {100, 0}});
  std::vector<Vec2> on, off;
  for (int t = 0; t < 30; ++t) {
    on.push_back({2.0 * t, 0.0});
    off.push_back({2.0 * t, 1.5});
  }
  const FrenetTrajectory a = project_trajectory(p, on);
  const FrenetTrajectory b = project_trajectory(p, off);
  for (int t = 0; t < 30; ++t) {
    EXPECT_EQ(a.d[t], 0.0);
    EXPECT_EQ(b.d[t], 1.5);
    if (t > 0) EXPECT_GT(a.s[t], a.s[t - 1]);
  }
}

TEST(ProjectTrajectory, LaneChangeCrossesOnce) {
  const RefPath p = build_ref_path(arc(80.0, 1.0, 40));
  std::vector<Vec2> traj;
  // Quintic blend from d = -1.85 to d = +1.85 over the middle of the path.
  for (int t = 0; t <= 60; ++t) {
    const double tau = std::clamp((t - 10) / 40.0, 0.0, 1.0);
    const double blend = tau * tau * tau * (10 - 15 * tau + 6 * tau * tau);
    traj.push_back(to_cartesian(p, {1.0 * t, -1.85 + 3.7 * blend}));
  }
  const FrenetTrajectory f = project_trajectory(p, traj);
  int flips = 0;
  for (std::size_t t = 1; t < f.d.size(); ++t) {
    if ((f.d[t] > 0) != (f.d[t - 1] > 0)) ++flips;
  }
  EXPECT_EQ(flips, 1);
}

TEST(ProjectTrajectory, SNonDecreasingForForwardMotion) {
  std::mt19937_64 rng(12);
  const RefPath p = build_ref_path(arc(40.0, 2.0, 50));
  std::uniform_real_distribution<double> wiggle(-0.3, 0.3);
  std::vector<Vec2> traj;
  double s = 0.5;
  double d = 0.0;
  while (s < p.length() - 1.0) {
    traj.push_back(to_cartesian(p, {s, d}));
    s += 0.7;
    d = std::clamp(d + wiggle(rng), -5.0, 5.0);
  }
  const FrenetTrajectory f = project_trajectory(p, traj);
  for (std::size_t t = 1; t < f.s.size(); ++t) EXPECT_GE(f.s[t], f.s[t - 1]);
}

TEST(ProjectTrajectory, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  const RefPath p = build_ref_path(arc(25.0, 2.0, 30));
  std::uniform_real_distribution<double> s(1.0, p.length() - 1.0);
  std::uniform_real_distribution<double> d(-6.0, 6.0);
  std::uniform_real_distribution<double> w(0.5, 1.5);
  for (int rep = 0; rep < 20; ++rep) {
    const int T = 12;
    std::vector<double> xy;
    std::vector<double> ws(2 * T);
    for (double& v : ws) v = w(rng);
    for (int t = 0; t < T; ++t) {
      const Vec2 q = to_cartesian(p, {s(rng), d(rng)});
      xy.push_back(q.x);
      xy.push_back(q.y);
    }
    std::vector<Vec2> pts;
    for (int t = 0; t < T; ++t) pts.push_back({xy[2 * t], xy[2 * t + 1]});
    const auto frozen = project_trajectory(p, pts).frozen;
    auto objective = [&](g::Tape& tape, g::Var x) {
      const FrenetVars f = project_trajectory(p, x, frozen);
      const g::Tensor ws_s({static_cast<std::size_t>(T)}, std::vector<double>(ws.begin(), ws.begin() + T));
      const g::Tensor ws_d({static_cast<std::size_t>(T)}, std::vector<double>(ws.begin() + T, ws.end()));
      return g::add(g::sum(g::mul(f.s, tape.constant(ws_s))), g::sum(g::mul(f.d, tape.constant(ws_d))));
    };
    g::Tape tape;
    g::Var x = tape.leaf(g::Tensor({static_cast<std::size_t>(T), 2}, xy));
    tape.backward(objective(tape, x));
    auto f = [&](const std::vector<double>& v) {
      g::Tape t2;
      return objective(t2, t2.constant(g::Tensor({static_cast<std::size_t>(T), 2}, v))).value().item();
    };
    EXPECT_LT(fd::rel_err(tape.grad(x).storage(), fd::central(f, xy)), 1e-5);
  }
}
