#include "trajguide/denoiser.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "../support/scenes.hpp"
#include "fd.hpp"

using namespace trajguide;
using testscenes::small_scene;
namespace g = trajguide::grad;

namespace {

// Cyclic Jacobi eigen-decomposition of a symmetric matrix; returns eigenvalues
// descending with matching eigenvector columns.
void jacobi_eigen(std::vector<std::vector<double>> a, std::vector<double>& vals,
                  std::vector<std::vector<double>>& vecs) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return a[i][i] > a[j][j]; });
  vals.clear();
  vecs.clear();
  for (std::size_t i : idx) {
    vals.push_back(a[i][i]);
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v[k][i];
    vecs.push_back(col);
  }
}

std::vector<std::vector<double>> correlated_samples(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::vector<double>> mix(dim, std::vector<double>(dim));
  for (auto& r : mix)
    for (double& v : r) v = nd(rng);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> z(dim), x(dim, 0.0);
    for (std::size_t k = 0; k < dim; ++k) z[k] = nd(rng) * (1.0 + static_cast<double>(dim - k));
    for (std::size_t r = 0; r < dim; ++r)
      for (std::size_t c = 0; c < dim; ++c) x[r] += mix[r][c] * z[c];
    x[0] += 3.0;
    out.push_back(x);
  }
  return out;
}

DenoiserConfig small_config() {
  DenoiserConfig c;
  c.d_model = 16;
  c.layers = 2;
  c.max_agents = 4;
  c.pca_k = 4;
  c.sigma_data = 0.8;
  c.init_seed = 7;
  return c;
}

// Initialised params with a non-zero output head so F actually contributes.
DenoiserParams live_params(const DenoiserConfig& c) {
  DenoiserParams p = init_params(c);
  std::mt19937_64 rng(99);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (double& v : p.tensors.at("head.w").storage()) v = nd(rng);
  for (double& v : p.tensors.at("head.b").storage()) v = nd(rng);
  return p;
}

g::Tensor random_x(std::size_t na, std::size_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  g::Tensor x({na, k});
  for (double& v : x.storage()) v = nd(rng);
  return x;
}

double max_abs_diff(const g::Tensor& a, const g::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Pca, MatchesJacobiOracle) {
  const std::size_t dim = 7;
  const auto samples = correlated_samples(400, dim, 3);
  const PcaBasis pca = fit_pca(samples, 4);
  std::vector<double> mean(dim, 0.0);
  for (const auto& s : samples)
    for (std::size_t j = 0; j < dim; ++j) mean[j] += s[j] / samples.size();
  std::vector<std::vector<double>> cov(dim, std::vector<double>(dim, 0.0));
  for (const auto& s : samples)
    for (std::size_t r = 0; r < dim; ++r)
      for (std::size_t c = 0; c < dim; ++c) cov[r][c] += (s[r] - mean[r]) * (s[c] - mean[c]) / samples.size();
  std::vector<double> vals;
  std::vector<std::vector<double>> vecs;
  jacobi_eigen(cov, vals, vecs);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(pca.eigenvalues[i], vals[i], 1e-9 * vals[0]);
    const double dot = std::inner_product(vecs[i].begin(), vecs[i].end(), pca.components[i].begin(), 0.0);
    EXPECT_NEAR(std::abs(dot), 1.0, 1e-9);
    EXPECT_DOUBLE_EQ(pca.scale[i], std::sqrt(pca.eigenvalues[i]));
  }
  // Mean reconstruction error equals the discarded variance.
  double mse = 0.0;
  for (const auto& s : samples) {
    const auto r = pca.decode(pca.encode(s));
    for (std::size_t j = 0; j < dim; ++j) mse += (r[j] - s[j]) * (r[j] - s[j]) / samples.size();
  }
  EXPECT_NEAR(mse, vals[4] + vals[5] + vals[6], 1e-8 * vals[0]);
}

TEST(Pca, FullRankRoundTripAndWhitening) {
  const auto samples = correlated_samples(300, 5, 11);
  const PcaBasis pca = fit_pca(samples, 5);
  std::vector<double> var(5, 0.0);
  for (const auto& s : samples) {
    const auto z = pca.encode(s);
    const auto r = pca.decode(z);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(r[j], s[j], 1e-9);
    for (std::size_t j = 0; j < 5; ++j) var[j] += z[j] * z[j] / samples.size();
  }
  for (double v : var) EXPECT_NEAR(v, 1.0, 1e-9);
  const g::Tensor m = pca.decode_matrix();
  EXPECT_DOUBLE_EQ(m.at(2, 3), pca.scale[2] * pca.components[2][3]);
}

TEST(Pca, RejectsBadK) {
  const auto samples = correlated_samples(10, 4, 1);
  EXPECT_THROW(fit_pca(samples, 0), std::invalid_argument);
  EXPECT_THROW(fit_pca(samples, 5), std::invalid_argument);
}

TEST(AgentWindow, CurrentStateIsOriginAndCoverageChecked) {
  Scenario s = small_scene();
  const auto w = agent_window(s, 2);
  ASSERT_EQ(w.size(), 2u * kWindowSteps);
  EXPECT_NEAR(w[2 * kCurrentIndex], 0.0, 1e-12);
  EXPECT_NEAR(w[2 * kCurrentIndex + 1], 0.0, 1e-12);
  const auto back = window_to_global(w, s.agents[2].states[s.t_now]);
  for (int t = 0; t < kWindowSteps; ++t) {
    EXPECT_NEAR(back[t].x, s.agents[2].states[t].x, 1e-9);
    EXPECT_NEAR(back[t].y, s.agents[2].states[t].y, 1e-9);
  }
  s.agents[1].states.resize(60);
  EXPECT_THROW(agent_window(s, 1), SceneError);
}

TEST(Edm, CoefficientValues) {
  const EdmCoefficients c = edm_coefficients(0.5, 0.5);
  EXPECT_DOUBLE_EQ(c.c_skip, 0.5);
  EXPECT_NEAR(c.c_out, 0.25 / std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(c.c_in, 1 / std::sqrt(0.5), 1e-15);
  EXPECT_DOUBLE_EQ(c.c_noise, std::log(0.5) / 4);
  // Unit variance of the network input for x = y + n with Var(y) = sd^2.
  for (double sigma : {0.01, 1.0, 80.0}) {
    const EdmCoefficients e = edm_coefficients(sigma, 0.7);
    EXPECT_NEAR(e.c_in * e.c_in * (sigma * sigma + 0.49), 1.0, 1e-12);
  }
}

TEST(Denoiser, ZeroHeadGivesSkipConnection) {
  const DenoiserConfig c = small_config();
  const DenoiserParams p = init_params(c);
  const SceneEncoding enc = encode_scene(p, small_scene());
  const g::Tensor x = random_x(3, 4, 1);
  const g::Tensor out = denoise(p, enc, x, 2.0);
  const double cs = edm_coefficients(2.0, c.sigma_data).c_skip;
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(out[i], cs * x[i]);
}

TEST(Denoiser, SmallSigmaReturnsInput) {
  const DenoiserParams p = live_params(small_config());
  const SceneEncoding enc = encode_scene(p, small_scene());
  const g::Tensor x = random_x(3, 4, 2);
  EXPECT_LT(max_abs_diff(denoise(p, enc, x, 1e-7), x), 1e-5);
}

TEST(Denoiser, RejectsNanAndNonPositiveSigma) {
  const DenoiserParams p = init_params(small_config());
  const SceneEncoding enc = encode_scene(p, small_scene());
  g::Tensor x = random_x(3, 4, 3);
  EXPECT_THROW(denoise(p, enc, x, 0.0), std::invalid_argument);
  x[4] = std::nan("");
  EXPECT_THROW(denoise(p, enc, x, 1.0), std::invalid_argument);
  EXPECT_THROW(denoise(p, enc, random_x(2, 4, 1), 1.0), g::ShapeError);
}

TEST(Denoiser, RigidMotionInvariance) {
  const DenoiserParams p = live_params(small_config());
  const Scenario s = small_scene();
  const g::Tensor x = random_x(3, 4, 5);
  const g::Tensor ref = denoise(p, encode_scene(p, s), x, 1.3);
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> ang(-M_PI, M_PI), off(-500, 500);
  for (int rep = 0; rep < 5; ++rep) {
    const Scenario moved = transform_scenario(s, ang(rng), {off(rng), off(rng)});
    const g::Tensor out = denoise(p, encode_scene(p, moved), x, 1.3);
    EXPECT_LT(max_abs_diff(out, ref), 1e-6);
  }
  const Scenario norm = normalize_to_frame(s, s.agents[0].states[s.t_now]);
  EXPECT_LT(max_abs_diff(denoise(p, encode_scene(p, norm), x, 1.3), ref), 1e-6);
}

TEST(Geometry, KinkAtPolylineMidpointIsStableUnderRigidMotion) {
  // Polyline 3 bends at its arc-length midpoint, where the pose is sampled.
  Scenario s = small_scene();
  s.polylines[2].points = {{60, 0}, {100, 0}, {100 + 40 * std::cos(0.5), 40 * std::sin(0.5)}};
  const DenoiserConfig c = small_config();
  const SceneGeometry ref = scene_geometry(s, c);
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> ang(-M_PI, M_PI), off(-500, 500);
  for (int rep = 0; rep < 50; ++rep) {
    const SceneGeometry moved = scene_geometry(transform_scenario(s, ang(rng), {off(rng), off(rng)}), c);
    EXPECT_LT(max_abs_diff(moved.point_features, ref.point_features), 1e-9);
    EXPECT_LT(max_abs_diff(moved.ll_rel, ref.ll_rel), 1e-9);
    EXPECT_LT(max_abs_diff(moved.al_rel, ref.al_rel), 1e-9);
  }
}

TEST(Geometry, MasksAtExactlyTheRadiusAreStableUnderRigidMotion) {
  // Collinear pieces: the gap between pieces 1 and 3 equals the radius.
  Scenario s = small_scene();
  const DenoiserConfig c = small_config();
  s.polylines.clear();
  for (int k = 0; k < 3; ++k) {
    const double x0 = -150 + c.radius * k;
    s.polylines.push_back({k + 1, {{x0, 0}, {x0 + 0.5 * c.radius, 0}, {x0 + c.radius, 0}}, LaneType::driving, kDefaultLaneWidth});
  }
  s.graph = LaneGraph({{1, 2, Relation::successor}, {2, 3, Relation::successor}});
  const SceneGeometry ref = scene_geometry(s, c);
  ASSERT_EQ(ref.ll_mask.at(0, 2), 1.0);
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> ang(-M_PI, M_PI), off(-5000, 5000);
  for (int rep = 0; rep < 100; ++rep) {
    const SceneGeometry moved = scene_geometry(transform_scenario(s, ang(rng), {off(rng), off(rng)}), c);
    EXPECT_EQ(max_abs_diff(moved.ll_mask, ref.ll_mask), 0.0);
    EXPECT_EQ(max_abs_diff(moved.al_mask, ref.al_mask), 0.0);
  }
}

TEST(Denoiser, PointOrderInsideAPolylineDoesNotMatterAfterPooling) {
  const DenoiserParams p = live_params(small_config());
  SceneGeometry geo = scene_geometry(small_scene(), p.config);
  const SceneEncoding a = encode_scene(p, geo);
  // Reverse the point rows of every polyline: max-pool is order free.
  const std::size_t P = static_cast<std::size_t>(p.config.points_per_polyline);
  g::Tensor& pf = geo.point_features;
  for (std::size_t j = 0; j < static_cast<std::size_t>(geo.n_polylines); ++j) {
    for (std::size_t i = 0; i < P / 2; ++i) {
      for (std::size_t f = 0; f < 9; ++f) std::swap(pf.data()[(j * P + i) * 9 + f], pf.data()[(j * P + P - 1 - i) * 9 + f]);
    }
  }
  const SceneEncoding b = encode_scene(p, geo);
  EXPECT_EQ(a.x_m, b.x_m);
}

TEST(Denoiser, PolylineOrderDoesNotMatter) {
  const DenoiserParams p = live_params(small_config());
  Scenario s = small_scene();
  const g::Tensor x = random_x(3, 4, 6);
  const g::Tensor ref = denoise(p, encode_scene(p, s), x, 0.9);
  std::reverse(s.polylines.begin(), s.polylines.end());
  EXPECT_LT(max_abs_diff(denoise(p, encode_scene(p, s), x, 0.9), ref), 1e-9);
}

TEST(Denoiser, DuplicateRoadsGetIdenticalFeatures) {
  const DenoiserParams p = live_params(small_config());
  Scenario s = small_scene();
  MapPolyline copy = s.polyline(5);
  copy.id = 6;
  s.polylines.push_back(copy);
  const SceneEncoding enc = encode_scene(p, s);
  const std::size_t d = static_cast<std::size_t>(p.config.d_model);
  const auto& ids = enc.geometry.polyline_ids;
  const std::size_t i5 = std::find(ids.begin(), ids.end(), 5) - ids.begin();
  const std::size_t i6 = std::find(ids.begin(), ids.end(), 6) - ids.begin();
  for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(enc.x_m.at(i5, k), enc.x_m.at(i6, k));
  for (const g::Tensor& lt : enc.lane_tokens) {
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(lt.at(i5, k), lt.at(i6, k), 1e-12);
  }
}

TEST(Denoiser, PaddedSlotsDoNotChangeRealAgents) {
  const DenoiserParams p = live_params(small_config());
  const Scenario s = small_scene();
  const SceneEncoding plain = encode_scene(p, scene_geometry(s, p.config, false));
  const SceneEncoding padded = encode_scene(p, scene_geometry(s, p.config, true));
  ASSERT_EQ(padded.geometry.n_agents, 4);
  const g::Tensor x = random_x(3, 4, 8);
  g::Tensor xp({4, 4});
  std::copy(x.storage().begin(), x.storage().end(), xp.data());
  xp.at(3, 0) = 5.0;
  const g::Tensor a = denoise(p, plain, x, 0.7);
  const g::Tensor b = denoise(p, padded, xp, 0.7);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(b.at(3, k), 0.0);
}

TEST(Denoiser, CachedEncodingMatchesFullGraph) {
  const DenoiserParams p = live_params(small_config());
  const Scenario s = small_scene();
  const SceneEncoding enc = encode_scene(p, s);
  const g::Tensor x = random_x(3, 4, 9);
  const g::Tensor cached = denoise(p, enc, x, 0.4);
  g::Tape tape;
  ParamVars pv(tape, p, true);
  const EncodingVars ev = encode_vars(tape, pv, enc.geometry, p.config);
  const g::Tensor full = denoise_var(pv, ev, tape.constant(x), 0.4, p.config).value();
  EXPECT_EQ(cached, full);
  // Repeated calls on the cached map are bit-identical.
  EXPECT_EQ(denoise(p, enc, x, 0.4), cached);
}

TEST(Denoiser, UpdateEncodingMatchesFreshEncoding) {
  const DenoiserParams p = live_params(small_config());
  Scenario s = small_scene();
  const SceneEncoding enc = encode_scene(p, s);
  for (auto& a : s.agents)
    for (auto& st : a.states) st.y += 0.5;
  const SceneEncoding upd = update_encoding(p, enc, s);
  const SceneEncoding fresh = encode_scene(p, s);
  const g::Tensor x = random_x(3, 4, 10);
  EXPECT_EQ(denoise(p, upd, x, 1.1), denoise(p, fresh, x, 1.1));
  EXPECT_EQ(upd.lane_tokens, enc.lane_tokens);
}

TEST(Denoiser, RadiusMaskDropsFarAgents) {
  const DenoiserConfig c = small_config();
  Scenario s = small_scene();
  for (auto& st : s.agents[2].states) st.x += 1000.0;
  const SceneGeometry geo = scene_geometry(s, c);
  EXPECT_EQ(geo.aa_mask.at(0, 2), 0.0);
  EXPECT_EQ(geo.aa_mask.at(0, 1), 1.0);
  for (int j = 0; j < geo.n_polylines; ++j) EXPECT_EQ(geo.al_mask.at(2, j), 0.0);
  const DenoiserParams p = live_params(c);
  EXPECT_NO_THROW(denoise(p, encode_scene(p, geo), random_x(3, 4, 1), 1.0));
}

TEST(Denoiser, PolylineSelectionKeepsClosest) {
  DenoiserConfig c = small_config();
  c.max_polylines = 2;
  const SceneGeometry geo = scene_geometry(small_scene(), c);
  // Agent 0 sits on lane 1 at x = -32; lanes 1 and 4 are nearest.
  EXPECT_EQ(geo.polyline_ids, (std::vector<int>{1, 4}));
}

TEST(Denoiser, ConnectivityOneHot) {
  const SceneGeometry geo = scene_geometry(small_scene(), small_config());
  const std::size_t nm = static_cast<std::size_t>(geo.n_polylines);
  auto slot = [&](int id) {
    return static_cast<std::size_t>(std::find(geo.polyline_ids.begin(), geo.polyline_ids.end(), id) -
                                    geo.polyline_ids.begin());
  };
  EXPECT_EQ(geo.ll_conn.at(slot(1) * nm + slot(3), 2), 1.0);  // successor
  EXPECT_EQ(geo.ll_conn.at(slot(3) * nm + slot(1), 1), 1.0);  // predecessor
  EXPECT_EQ(geo.ll_conn.at(slot(1) * nm + slot(2), 3), 1.0);  // left
  EXPECT_EQ(geo.ll_conn.at(slot(2) * nm + slot(1), 4), 1.0);  // right
  EXPECT_EQ(geo.ll_conn.at(slot(2) * nm + slot(5), 0), 1.0);  // none
  for (std::size_t r = 0; r < nm * nm; ++r) {
    double sum = 0;
    for (std::size_t k = 0; k < 5; ++k) sum += geo.ll_conn.at(r, k);
    EXPECT_EQ(sum, 1.0);
  }
}

TEST(Denoiser, GradientsMatchFiniteDifferences) {
  DenoiserConfig c = small_config();
  c.d_model = 8;
  const DenoiserParams p = live_params(c);
  const SceneGeometry geo = scene_geometry(small_scene(), c);
  const g::Tensor x0 = random_x(3, 4, 12);
  const g::Tensor w = random_x(3, 4, 13);
  auto value = [&](const DenoiserParams& params, const std::vector<double>& xv) {
    g::Tape tape;
    ParamVars pv(tape, params, false);
    const EncodingVars ev = encode_vars(tape, pv, geo, c);
    const g::Var out = denoise_var(pv, ev, tape.constant(g::Tensor({3, 4}, xv)), 0.9, c);
    return g::sum(g::mul(out, tape.constant(w))).value().item();
  };
  g::Tape tape;
  ParamVars pv(tape, p, true);
  const EncodingVars ev = encode_vars(tape, pv, geo, c);
  const g::Var xv = tape.leaf(x0);
  tape.backward(g::sum(g::mul(denoise_var(pv, ev, xv, 0.9, c), tape.constant(w))));
  const auto num_x = fd::central([&](const std::vector<double>& v) { return value(p, v); }, x0.storage());
  EXPECT_LT(fd::rel_err(tape.grad(xv).storage(), num_x), 1e-6);
  for (const char* name : {"mpn.w1", "rel_ll.conn", "blk0.ll.wq", "blk1.al.wk", "blk1.aa.wv", "agent.w1", "noise.w2"}) {
    const g::Tensor base = p.at(name);
    auto f = [&](const std::vector<double>& v) {
      DenoiserParams q = p;
      q.tensors.at(name).storage() = v;
      return value(q, x0.storage());
    };
    const auto num = fd::central(f, base.storage());
    EXPECT_LT(fd::rel_err(tape.grad(pv[name]).storage(), num), 1e-5) << name;
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = std::filesystem::temp_directory_path() / "trajguide_ckpt_test";
  std::filesystem::remove_all(dir);
  const DenoiserParams p = live_params(small_config());
  save_params(p, dir.string(), {{"seed", 3}});
  const DenoiserParams q = load_params(dir.string());
  EXPECT_EQ(q.names, p.names);
  EXPECT_EQ(q.tensors, p.tensors);
  EXPECT_EQ(q.config.to_json(), p.config.to_json());

  const PcaBasis pca = fit_pca(correlated_samples(50, 6, 2), 3);
  save_pca(pca, dir.string());
  const PcaBasis pca2 = load_pca(dir.string());
  EXPECT_EQ(pca2.mean, pca.mean);
  EXPECT_EQ(pca2.components, pca.components);
  EXPECT_EQ(pca2.scale, pca.scale);

  std::filesystem::resize_file(dir / "model.bin", std::filesystem::file_size(dir / "model.bin") - 8);
  EXPECT_THROW(load_params(dir.string()), std::runtime_error);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_params(dir.string()), std::runtime_error);
}

TEST(Denoiser, EncodeAgentsPadsWithZeros) {
  const Scenario s = small_scene();
  std::vector<std::vector<double>> windows;
  for (int a = 0; a < 3; ++a) windows.push_back(agent_window(s, a));
  for (int a = 0; a < 3; ++a) {
    auto w = windows[a];
    for (double& v : w) v *= 1.1;
    windows.push_back(w);
  }
  const PcaBasis pca = fit_pca(windows, 4);
  const SceneGeometry geo = scene_geometry(s, small_config(), true);
  const g::Tensor z = encode_agents(pca, s, geo);
  ASSERT_EQ(z.shape(), (g::Shape{4, 4}));
  const auto z1 = pca.encode(agent_window(s, 1));
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_DOUBLE_EQ(z.at(1, k), z1[k]);
    EXPECT_EQ(z.at(3, k), 0.0);
  }
}
