#include "trajguide/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace trajguide::metrics {

namespace {

std::array<Vec2, 4> corners(const Box& b) {
  const Vec2 f{std::cos(b.heading), std::sin(b.heading)};
  const Vec2 l = left_normal(f);
  const double hl = 0.5 * b.length;
  const double hw = 0.5 * b.width;
  return {b.center + hl * f + hw * l, b.center - hl * f + hw * l, b.center - hl * f - hw * l,
          b.center + hl * f - hw * l};
}

bool separated_on(Vec2 axis, const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b) {
  double amin = std::numeric_limits<double>::infinity(), amax = -amin;
  double bmin = amin, bmax = -amin;
  for (const Vec2& p : a) {
    const double v = dot(axis, p);
    amin = std::min(amin, v);
    amax = std::max(amax, v);
  }
  for (const Vec2& p : b) {
    const double v = dot(axis, p);
    bmin = std::min(bmin, v);
    bmax = std::max(bmax, v);
  }
  return amax < bmin || bmax < amin;
}

Box box_of(const AgentTrack& a, int t) {
  const AgentState& s = a.states[t];
  return {s.position(), s.heading, a.extent.length, a.extent.width};
}

double polyline_distance(const MapPolyline& p, Vec2 q) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < p.points.size(); ++i) {
    best = std::min(best, point_segment_distance(q, p.points[i - 1], p.points[i]));
  }
  return best;
}

std::vector<std::vector<double>> strided(const std::vector<std::vector<double>>& v, std::size_t cap) {
  if (v.size() <= cap) return v;
  std::vector<std::vector<double>> out;
  out.reserve(cap);
  for (std::size_t i = 0; i < cap; ++i) out.push_back(v[i * v.size() / cap]);
  return out;
}

double sqdist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

constexpr std::size_t kMmdCap = 1000;

}  // namespace

bool boxes_overlap(const Box& a, const Box& b) {
  const auto ca = corners(a);
  const auto cb = corners(b);
  for (const Box* box : {&a, &b}) {
    const Vec2 f{std::cos(box->heading), std::sin(box->heading)};
    if (separated_on(f, ca, cb) || separated_on(left_normal(f), ca, cb)) return false;
  }
  return true;
}

Displacement ade_fde(const std::vector<std::vector<Vec2>>& sim, const std::vector<std::vector<Vec2>>& gt) {
  if (sim.size() != gt.size()) throw std::invalid_argument("ade_fde: agent count mismatch");
  if (sim.empty()) throw std::invalid_argument("ade_fde: no agents");
  Displacement out;
  for (std::size_t a = 0; a < sim.size(); ++a) {
    if (sim[a].size() != gt[a].size()) throw std::invalid_argument("ade_fde: horizon mismatch");
    if (sim[a].empty()) throw std::invalid_argument("ade_fde: empty horizon");
    double sum = 0.0;
    for (std::size_t t = 0; t < sim[a].size(); ++t) sum += norm(sim[a][t] - gt[a][t]);
    out.ade += sum / static_cast<double>(sim[a].size());
    out.fde += norm(sim[a].back() - gt[a].back());
  }
  out.ade /= static_cast<double>(sim.size());
  out.fde /= static_cast<double>(sim.size());
  return out;
}

Displacement ade_fde(const Scenario& sim, const Scenario& gt) {
  std::map<int, const AgentTrack*> by_id;
  for (const AgentTrack& a : gt.agents) by_id[a.agent_id] = &a;
  std::vector<std::vector<Vec2>> s, g;
  for (const AgentTrack& a : sim.agents) {
    auto it = by_id.find(a.agent_id);
    if (it == by_id.end()) continue;
    std::vector<Vec2> ps, pg;
    for (std::size_t t = sim.t_now + 1; t < a.states.size(); ++t) ps.push_back(a.states[t].position());
    for (std::size_t t = gt.t_now + 1; t < it->second->states.size(); ++t) pg.push_back(it->second->states[t].position());
    s.push_back(std::move(ps));
    g.push_back(std::move(pg));
  }
  return ade_fde(s, g);
}

Scenario constant_velocity(const Scenario& scenario) {
  Scenario out = scenario;
  const int t0 = scenario.t_now;
  for (AgentTrack& a : out.agents) {
    if (t0 < 1 || t0 >= static_cast<int>(a.states.size())) throw SceneError("constant_velocity: no history");
    const AgentState cur = a.states[t0];
    const Vec2 v = cur.position() - a.states[t0 - 1].position();
    for (std::size_t t = t0 + 1; t < a.states.size(); ++t) {
      const double k = static_cast<double>(t - t0);
      a.states[t] = {cur.x + k * v.x, cur.y + k * v.y, cur.heading};
    }
  }
  return out;
}

std::vector<double> histogram(std::span<const double> values, const Histogram& h) {
  std::vector<double> out(h.bins, 0.0);
  if (values.empty()) return out;
  const double w = (h.hi - h.lo) / h.bins;
  for (double v : values) {
    int b = static_cast<int>(std::floor((v - h.lo) / w));
    b = std::clamp(b, 0, h.bins - 1);
    out[b] += 1.0;
  }
  for (double& v : out) v /= static_cast<double>(values.size());
  return out;
}

double js_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("js_distance: size mismatch");
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) js += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0.0) js += 0.5 * q[i] * std::log2(q[i] / m);
  }
  return std::sqrt(std::clamp(js, 0.0, 1.0));
}

KinematicFeatures kinematic_features(const Scenario& scenario) {
  KinematicFeatures f;
  const double dt = scenario.dt;
  const int n = static_cast<int>(scenario.agents.size());
  for (int i = 0; i < n; ++i) {
    const auto& st = scenario.agents[i].states;
    const int t0 = std::max(scenario.t_now, 1);
    double prev_speed = std::numeric_limits<double>::quiet_NaN();
    for (int t = t0; t < static_cast<int>(st.size()); ++t) {
      const double v = norm(st[t].position() - st[t - 1].position()) / dt;
      f.speed.push_back(v);
      f.angular_speed.push_back(wrap_angle(st[t].heading - st[t - 1].heading) / dt);
      if (!std::isnan(prev_speed)) f.acceleration.push_back((v - prev_speed) / dt);
      prev_speed = v;
    }
    for (int t = scenario.t_now; t < static_cast<int>(st.size()); ++t) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) {
        if (j == i || t >= static_cast<int>(scenario.agents[j].states.size())) continue;
        best = std::min(best, norm(st[t].position() - scenario.agents[j].states[t].position()));
      }
      if (std::isfinite(best)) f.nearest_vehicle.push_back(best);
    }
  }
  return f;
}

double jsd_bundle(const std::vector<Scenario>& real, const std::vector<Scenario>& sim) {
  if (real.empty() || sim.empty()) throw std::invalid_argument("jsd_bundle: need at least one scene per side");
  KinematicFeatures a, b;
  auto append = [](KinematicFeatures& dst, const KinematicFeatures& src) {
    dst.speed.insert(dst.speed.end(), src.speed.begin(), src.speed.end());
    dst.angular_speed.insert(dst.angular_speed.end(), src.angular_speed.begin(), src.angular_speed.end());
    dst.acceleration.insert(dst.acceleration.end(), src.acceleration.begin(), src.acceleration.end());
    dst.nearest_vehicle.insert(dst.nearest_vehicle.end(), src.nearest_vehicle.begin(), src.nearest_vehicle.end());
  };
  for (const Scenario& s : real) append(a, kinematic_features(s));
  for (const Scenario& s : sim) append(b, kinematic_features(s));

  double sum = 0.0;
  int used = 0;
  auto add = [&](const std::vector<double>& x, const std::vector<double>& y, const Histogram& h) {
    if (x.empty() && y.empty()) return;
    if (x.empty() || y.empty()) {
      sum += 1.0;
    } else {
      sum += js_distance(histogram(x, h), histogram(y, h));
    }
    ++used;
  };
  add(a.speed, b.speed, kSpeedBins);
  add(a.angular_speed, b.angular_speed, kAngularBins);
  add(a.acceleration, b.acceleration, kAccelBins);
  add(a.nearest_vehicle, b.nearest_vehicle, kNearestBins);
  if (used == 0) throw std::invalid_argument("jsd_bundle: empty feature set");
  return sum / used;
}

bool agents_collide(const Scenario& scenario, int i, int j) {
  const AgentTrack& a = scenario.agents[i];
  const AgentTrack& b = scenario.agents[j];
  const std::size_t n = std::min(a.states.size(), b.states.size());
  for (std::size_t t = 0; t < n; ++t) {
    const double reach = 0.5 * (std::hypot(a.extent.length, a.extent.width) + std::hypot(b.extent.length, b.extent.width));
    if (norm(a.states[t].position() - b.states[t].position()) > reach) continue;
    if (boxes_overlap(box_of(a, t), box_of(b, t))) return true;
  }
  return false;
}

bool is_offroad(const Scenario& scenario, Vec2 p) {
  for (const MapPolyline& pl : scenario.polylines) {
    if (pl.lane_type != LaneType::driving) continue;
    if (polyline_distance(pl, p) <= 0.5 * pl.width) return false;
  }
  return true;
}

SceneSafety scene_safety(const Scenario& scenario) {
  SceneSafety s;
  const int n = static_cast<int>(scenario.agents.size());
  s.agents = n;
  std::vector<char> hit(n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (agents_collide(scenario, i, j)) hit[i] = hit[j] = 1;
    }
  }
  for (int i = 0; i < n; ++i) {
    s.colliding += hit[i];
    for (const AgentState& st : scenario.agents[i].states) {
      if (is_offroad(scenario, st.position())) {
        ++s.offroad;
        break;
      }
    }
  }
  return s;
}

SafetyRates collision_offroad(const Scenario& scenario) { return collision_offroad(std::vector<Scenario>{scenario}); }

SafetyRates collision_offroad(const std::vector<Scenario>& scenes) {
  SafetyRates r;
  int agents = 0, colliding = 0, offroad = 0, bad_scenes = 0;
  for (const Scenario& s : scenes) {
    const SceneSafety ss = scene_safety(s);
    agents += ss.agents;
    colliding += ss.colliding;
    offroad += ss.offroad;
    bad_scenes += ss.colliding > 0 ? 1 : 0;
  }
  if (agents > 0) {
    r.collision_rate = static_cast<double>(colliding) / agents;
    r.offroad_rate = static_cast<double>(offroad) / agents;
  }
  if (!scenes.empty()) r.scr = static_cast<double>(bad_scenes) / static_cast<double>(scenes.size());
  return r;
}

double median_pairwise_distance(const std::vector<std::vector<double>>& pooled) {
  std::vector<double> d;
  d.reserve(pooled.size() * (pooled.size() - 1) / 2);
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    for (std::size_t j = i + 1; j < pooled.size(); ++j) d.push_back(std::sqrt(sqdist(pooled[i], pooled[j])));
  }
  if (d.empty()) return 0.0;
  std::sort(d.begin(), d.end());
  const std::size_t m = d.size() / 2;
  return d.size() % 2 == 1 ? d[m] : 0.5 * (d[m - 1] + d[m]);
}

double mmd(const std::vector<std::vector<double>>& x_in, const std::vector<std::vector<double>>& y_in) {
  if (x_in.size() < 2 || y_in.size() < 2) throw std::invalid_argument("mmd: need at least two samples per side");
  const auto x = strided(x_in, kMmdCap);
  const auto y = strided(y_in, kMmdCap);
  std::vector<std::vector<double>> pooled = x;
  pooled.insert(pooled.end(), y.begin(), y.end());
  const double h = median_pairwise_distance(pooled);
  if (h == 0.0) return 0.0;
  const double inv = 1.0 / (2.0 * h * h);
  auto k = [&](const std::vector<double>& a, const std::vector<double>& b) { return std::exp(-sqdist(a, b) * inv); };

  const double m = static_cast<double>(x.size());
  const double n = static_cast<double>(y.size());
  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) kxx += 2.0 * k(x[i], x[j]);
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = i + 1; j < y.size(); ++j) kyy += 2.0 * k(y[i], y[j]);
  for (const auto& a : x)
    for (const auto& b : y) kxy += k(a, b);
  const double v = kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n);
  return std::max(0.0, v);
}

std::vector<std::vector<double>> nearest_object_samples(const Scenario& scenario) {
  std::vector<std::vector<double>> out;
  const int n = static_cast<int>(scenario.agents.size());
  if (n < 2) return out;
  for (int i = 0; i < n; ++i) {
    const auto& st = scenario.agents[i].states;
    double best = std::numeric_limits<double>::infinity();
    for (int t = scenario.t_now; t < static_cast<int>(st.size()); ++t) {
      for (int j = 0; j < n; ++j) {
        if (j == i || t >= static_cast<int>(scenario.agents[j].states.size())) continue;
        best = std::min(best, norm(st[t].position() - scenario.agents[j].states[t].position()));
      }
    }
    if (std::isfinite(best)) out.push_back({best});
  }
  return out;
}

std::vector<std::vector<double>> road_edge_samples(const Scenario& scenario) {
  std::vector<const MapPolyline*> edges;
  for (const MapPolyline& p : scenario.polylines) {
    if (p.lane_type == LaneType::edge) edges.push_back(&p);
  }
  std::vector<std::vector<double>> out;
  if (edges.empty()) return out;
  for (const AgentTrack& a : scenario.agents) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t t = scenario.t_now; t < a.states.size(); ++t) {
      for (const MapPolyline* e : edges) best = std::min(best, polyline_distance(*e, a.states[t].position()));
    }
    out.push_back({best});
  }
  return out;
}

nlohmann::json MetricReport::to_json() const {
  return {{"ade", ade},           {"fde", fde}, {"jsd", jsd}, {"collision_rate", collision_rate},
          {"offroad_rate", offroad_rate}, {"scr", scr}, {"mmd_o", mmd_o}, {"mmd_r", mmd_r}};
}

MetricReport evaluate(const std::vector<Scenario>& real, const std::vector<Scenario>& sim) {
  if (real.size() != sim.size()) throw std::invalid_argument("evaluate: real and sim scene counts differ");
  if (real.empty()) throw std::invalid_argument("evaluate: no scenes");
  MetricReport r;
  for (std::size_t i = 0; i < real.size(); ++i) {
    const Displacement d = ade_fde(sim[i], real[i]);
    r.ade += d.ade;
    r.fde += d.fde;
  }
  r.ade /= static_cast<double>(real.size());
  r.fde /= static_cast<double>(real.size());
  r.jsd = 100.0 * jsd_bundle(real, sim);
  const SafetyRates s = collision_offroad(sim);
  r.collision_rate = s.collision_rate;
  r.offroad_rate = s.offroad_rate;
  r.scr = s.scr;

  std::vector<std::vector<double>> ro, so, rr, sr;
  for (const Scenario& s_ : real) {
    auto o = nearest_object_samples(s_);
    ro.insert(ro.end(), o.begin(), o.end());
    auto e = road_edge_samples(s_);
    rr.insert(rr.end(), e.begin(), e.end());
  }
  for (const Scenario& s_ : sim) {
    auto o = nearest_object_samples(s_);
    so.insert(so.end(), o.begin(), o.end());
    auto e = road_edge_samples(s_);
    sr.insert(sr.end(), e.begin(), e.end());
  }
  if (ro.size() >= 2 && so.size() >= 2) r.mmd_o = mmd(ro, so);
  if (rr.size() >= 2 && sr.size() >= 2) r.mmd_r = mmd(rr, sr);
  return r;
}

}  // namespace trajguide::metrics
