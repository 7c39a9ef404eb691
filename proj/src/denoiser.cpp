#include "trajguide/denoiser.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace trajguide {

namespace g = grad;

// ---- PCA ------------------------------------------------------------------------

std::vector<double> PcaBasis::encode(std::span<const double> v) const {
  if (v.size() != dim()) throw std::invalid_argument("pca encode: dimension mismatch");
  std::vector<double> z(k());
  for (std::size_t i = 0; i < k(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < dim(); ++j) acc += components[i][j] * (v[j] - mean[j]);
    z[i] = acc / scale[i];
  }
  return z;
}

std::vector<double> PcaBasis::decode(std::span<const double> z) const {
  if (z.size() != k()) throw std::invalid_argument("pca decode: coefficient count mismatch");
  std::vector<double> v = mean;
  for (std::size_t i = 0; i < k(); ++i) {
    const double c = z[i] * scale[i];
    for (std::size_t j = 0; j < dim(); ++j) v[j] += c * components[i][j];
  }
  return v;
}

g::Tensor PcaBasis::decode_matrix() const {
  g::Tensor m({k(), dim()});
  for (std::size_t i = 0; i < k(); ++i) {
    for (std::size_t j = 0; j < dim(); ++j) m.at(i, j) = scale[i] * components[i][j];
  }
  return m;
}

PcaBasis fit_pca(const std::vector<std::vector<double>>& samples, std::size_t k) {
  if (samples.empty()) throw std::invalid_argument("fit_pca: no samples");
  const std::size_t dim = samples[0].size();
  if (k == 0 || k > dim) {
    throw std::invalid_argument("fit_pca: k = " + std::to_string(k) + " must be in [1, " + std::to_string(dim) + "]");
  }
  if (samples.size() < k) throw std::invalid_argument("fit_pca: fewer samples than components");
  const double n = static_cast<double>(samples.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  for (const auto& s : samples) {
    if (s.size() != dim) throw std::invalid_argument("fit_pca: ragged samples");
    mean += Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(dim));
  }
  mean /= n;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
  for (const auto& s : samples) {
    const Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(dim)) - mean;
    cov.selfadjointView<Eigen::Lower>().rankUpdate(c);
  }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= n;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  PcaBasis pca;
  pca.mean.assign(mean.data(), mean.data() + dim);
  for (std::size_t i = 0; i < k; ++i) {
    const Eigen::Index col = static_cast<Eigen::Index>(dim - 1 - i);
    Eigen::VectorXd v = es.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    pca.components.emplace_back(v.data(), v.data() + dim);
    const double ev = std::max(es.eigenvalues()[col], 0.0);
    pca.eigenvalues.push_back(ev);
    pca.scale.push_back(std::sqrt(std::max(ev, 1e-6)));
  }
  return pca;
}

std::vector<double> agent_window(const Scenario& s, int agent) {
  const AgentTrack& a = s.agents.at(static_cast<std::size_t>(agent));
  const int first = s.t_now - kCurrentIndex;
  const int last = s.t_now + kFutureSteps;
  if (first < 0 || last >= static_cast<int>(a.states.size())) {
    throw SceneError("agent " + std::to_string(a.agent_id) + " track does not cover the window [" +
                     std::to_string(first) + ", " + std::to_string(last) + "]");
  }
  const AgentState& anchor = a.states[s.t_now];
  std::vector<double> flat;
  flat.reserve(2 * kWindowSteps);
  for (int t = first; t <= last; ++t) {
    const RelFeature f = relative_feature(anchor, a.states[t]);
    flat.push_back(f.dx);
    flat.push_back(f.dy);
  }
  return flat;
}

std::vector<Vec2> window_to_global(std::span<const double> flat, const AgentState& anchor) {
  std::vector<Vec2> out(flat.size() / 2);
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = from_relative(anchor, {flat[2 * t], flat[2 * t + 1], 1, 0});
  return out;
}

// ---- config / params ---------------------------------------------------------------

nlohmann::json DenoiserConfig::to_json() const {
  return {{"d_model", d_model},         {"layers", layers},
          {"max_agents", max_agents},   {"max_polylines", max_polylines},
          {"points_per_polyline", points_per_polyline},
          {"pca_k", pca_k},             {"sigma_data", sigma_data},
          {"radius", radius},           {"init_seed", init_seed}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.layers = j.at("layers").get<int>();
  c.max_agents = j.at("max_agents").get<int>();
  c.max_polylines = j.at("max_polylines").get<int>();
  c.points_per_polyline = j.at("points_per_polyline").get<int>();
  c.pca_k = j.at("pca_k").get<int>();
  c.sigma_data = j.at("sigma_data").get<double>();
  c.radius = j.at("radius").get<double>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

const g::Tensor& DenoiserParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t DenoiserParams::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

bool DenoiserParams::finite() const {
  for (const auto& [_, t] : tensors) {
    for (double v : t.storage()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

namespace {

constexpr int kPointFeatures = 9;
constexpr int kNoiseFeatures = 9;
constexpr int kRelFeatures = 4;
constexpr int kConnKinds = 5;
constexpr double kRelScale = 30.0;
constexpr double kPointScale = 20.0;

const char* const kAttnKinds[] = {"ll", "al", "aa"};

}  // namespace

DenoiserParams init_params(const DenoiserConfig& c) {
  DenoiserParams p;
  p.config = c;
  std::mt19937_64 rng(c.init_seed);
  const std::size_t D = static_cast<std::size_t>(c.d_model);
  const std::size_t K = static_cast<std::size_t>(c.pca_k);
  auto add = [&](const std::string& name, g::Shape shape, double fan_in) {
    g::Tensor t(shape);
    if (fan_in > 0) {
      std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(fan_in));
      for (double& v : t.storage()) v = n(rng);
    }
    p.names.push_back(name);
    p.tensors.emplace(name, std::move(t));
  };
  auto mlp = [&](const std::string& prefix, std::size_t in) {
    add(prefix + ".w1", {in, D}, static_cast<double>(in));
    add(prefix + ".b1", {D}, 0);
    add(prefix + ".w2", {D, D}, static_cast<double>(D));
    add(prefix + ".b2", {D}, 0);
  };
  mlp("mpn", kPointFeatures);
  add("mpn.w3", {D, D}, static_cast<double>(D));
  add("mpn.b3", {D}, 0);
  mlp("noise", kNoiseFeatures);
  mlp("agent", K);
  mlp("rel_ll", kRelFeatures);
  add("rel_ll.conn", {kConnKinds, D}, 1.0);
  mlp("rel_al", kRelFeatures);
  mlp("rel_aa", kRelFeatures);
  for (int l = 0; l < c.layers; ++l) {
    for (const char* kind : kAttnKinds) {
      const std::string pre = "blk" + std::to_string(l) + "." + kind;
      for (const char* w : {".wq", ".wk", ".wv", ".wo"}) add(pre + w, {D, D}, static_cast<double>(D));
      add(pre + ".ff1", {D, D}, static_cast<double>(D));
      add(pre + ".fb1", {D}, 0);
      add(pre + ".ff2", {D, D}, static_cast<double>(D));
      add(pre + ".fb2", {D}, 0);
    }
  }
  add("head.w", {D, K}, 0);  // zero init: F = 0 at start
  add("head.b", {K}, 0);
  return p;
}

// ---- checkpoint IO -----------------------------------------------------------------

namespace {

void write_le(std::ofstream& out, double v) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof bits);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

double read_le(std::ifstream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw std::runtime_error("checkpoint blob truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  double v = 0.0;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

void write_blob(const std::string& dir, const std::string& stem, const nlohmann::ordered_json& manifest_extra,
                const std::vector<std::pair<std::string, const g::Tensor*>>& tensors) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest = manifest_extra;
  nlohmann::ordered_json shapes = nlohmann::ordered_json::object();
  for (const auto& [name, t] : tensors) shapes[name] = t->shape();
  manifest["tensors"] = shapes;
  std::ofstream js(dir + "/" + stem + ".json");
  if (!js) throw std::runtime_error("cannot write " + dir + "/" + stem + ".json");
  js << manifest.dump(2) << '\n';
  std::ofstream bin(dir + "/" + stem + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + dir + "/" + stem + ".bin");
  for (const auto& [_, t] : tensors) {
    for (double v : t->storage()) write_le(bin, v);
  }
}

std::pair<nlohmann::ordered_json, std::vector<std::pair<std::string, g::Tensor>>> read_blob(const std::string& dir,
                                                                                           const std::string& stem) {
  const std::string jpath = dir + "/" + stem + ".json";
  std::ifstream js(jpath);
  if (!js) throw std::runtime_error("missing checkpoint file " + jpath);
  nlohmann::ordered_json manifest = nlohmann::ordered_json::parse(js);
  std::ifstream bin(dir + "/" + stem + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("missing checkpoint file " + dir + "/" + stem + ".bin");
  std::vector<std::pair<std::string, g::Tensor>> out;
  for (const auto& [name, shape] : manifest.at("tensors").items()) {
    g::Tensor t(shape.get<g::Shape>());
    for (double& v : t.storage()) v = read_le(bin);
    out.emplace_back(name, std::move(t));
  }
  if (bin.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint blob has trailing bytes");
  return {manifest, out};
}

}  // namespace

void save_params(const DenoiserParams& params, const std::string& dir, const nlohmann::json& meta) {
  nlohmann::ordered_json head;
  head["config"] = params.config.to_json();
  if (!meta.is_null()) head["meta"] = meta;
  std::vector<std::pair<std::string, const g::Tensor*>> ts;
  for (const std::string& n : params.names) ts.emplace_back(n, &params.tensors.at(n));
  write_blob(dir, "model", head, ts);
}

DenoiserParams load_params(const std::string& dir) {
  auto [manifest, tensors] = read_blob(dir, "model");
  DenoiserParams p;
  p.config = DenoiserConfig::from_json(nlohmann::json::parse(manifest.at("config").dump()));
  const DenoiserParams expected = init_params(p.config);
  for (auto& [name, t] : tensors) {
    auto it = expected.tensors.find(name);
    if (it == expected.tensors.end() || it->second.shape() != t.shape()) {
      throw std::runtime_error("checkpoint tensor '" + name + "' does not match the configured architecture");
    }
    p.names.push_back(name);
    p.tensors.emplace(name, std::move(t));
  }
  if (p.names != expected.names) throw std::runtime_error("checkpoint tensor list does not match the architecture");
  return p;
}

void save_pca(const PcaBasis& pca, const std::string& dir) {
  g::Tensor mean({pca.dim()}, pca.mean);
  g::Tensor comps({pca.k(), pca.dim()});
  for (std::size_t i = 0; i < pca.k(); ++i) {
    std::copy(pca.components[i].begin(), pca.components[i].end(), comps.data() + i * pca.dim());
  }
  g::Tensor eig({pca.k()}, pca.eigenvalues);
  g::Tensor scale({pca.k()}, pca.scale);
  nlohmann::ordered_json head;
  head["k"] = pca.k();
  head["dim"] = pca.dim();
  write_blob(dir, "pca", head, {{"mean", &mean}, {"components", &comps}, {"eigenvalues", &eig}, {"scale", &scale}});
}

PcaBasis load_pca(const std::string& dir) {
  auto [manifest, tensors] = read_blob(dir, "pca");
  std::map<std::string, g::Tensor> m(tensors.begin(), tensors.end());
  PcaBasis pca;
  pca.mean = m.at("mean").storage();
  const g::Tensor& c = m.at("components");
  for (std::size_t i = 0; i < c.dim(0); ++i) {
    pca.components.emplace_back(c.data() + i * c.dim(1), c.data() + (i + 1) * c.dim(1));
  }
  pca.eigenvalues = m.at("eigenvalues").storage();
  pca.scale = m.at("scale").storage();
  return pca;
}

// ---- scene geometry ----------------------------------------------------------------

namespace {

struct Resampled {
  std::vector<Vec2> pts;
  std::vector<Vec2> tangents;
  AgentState pose;  // midpoint and tangent heading
};

Resampled resample(const MapPolyline& p, int n) {
  std::vector<double> cum{0.0};
  for (std::size_t i = 1; i < p.points.size(); ++i) cum.push_back(cum.back() + norm(p.points[i] - p.points[i - 1]));
  const double total = cum.back();
  auto pos_at = [&](double s) {
    s = std::clamp(s, 0.0, total);
    std::size_t k = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), s) - cum.begin());
    k = std::clamp<std::size_t>(k == 0 ? 0 : k - 1, 0, p.points.size() - 2);
    const double len = cum[k + 1] - cum[k];
    const double u = len > 0.0 ? std::clamp((s - cum[k]) / len, 0.0, 1.0) : 0.0;
    return p.points[k] + u * (p.points[k + 1] - p.points[k]);
  };
  // Central difference over a fixed window: continuous in the vertex
  // positions, so a sample sitting on a kink cannot flip segments.
  const double h = 0.5 * total / std::max(1, n - 1);
  auto tan_at = [&](double s) {
    const Vec2 e = pos_at(s + h) - pos_at(s - h);
    const double l = norm(e);
    return l > 0.0 ? (1.0 / l) * e : Vec2{1.0, 0.0};
  };
  Resampled r;
  for (int i = 0; i < n; ++i) {
    const double s = total * i / std::max(1, n - 1);
    r.pts.push_back(pos_at(s));
    r.tangents.push_back(tan_at(s));
  }
  const Vec2 mid = pos_at(0.5 * total), tan = tan_at(0.5 * total);
  r.pose = {mid.x, mid.y, std::atan2(tan.y, tan.x)};
  return r;
}

// Map pieces are often laid out at exactly the radius apart; the slack keeps
// the mask from depending on rounding under rigid motion.
double neighbourhood(const DenoiserConfig& c) { return c.radius * (1.0 + 1e-9); }

double polyline_distance(const std::vector<Vec2>& pts, Vec2 q) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < pts.size(); ++i) best = std::min(best, point_segment_distance(q, pts[i - 1], pts[i]));
  return best;
}

void put_rel(g::Tensor& t, std::size_t row, const AgentState& from, const AgentState& to) {
  const RelFeature f = relative_feature(from, to);
  t.at(row, 0) = f.dx / kRelScale;
  t.at(row, 1) = f.dy / kRelScale;
  t.at(row, 2) = f.cos_dh;
  t.at(row, 3) = f.sin_dh;
}

struct MapSelection {
  std::vector<int> ids;
  std::vector<Resampled> shapes;
};

MapSelection select_polylines(const Scenario& s, const DenoiserConfig& c) {
  std::vector<std::size_t> order(s.polylines.size());
  std::iota(order.begin(), order.end(), 0);
  if (static_cast<int>(order.size()) > c.max_polylines) {
    const Vec2 ref = s.agents.at(0).states.at(s.t_now).position();
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t i : order) dist.emplace_back(polyline_distance(s.polylines[i].points, ref), i);
    std::sort(dist.begin(), dist.end(), [&](const auto& a, const auto& b) {
      return a.first != b.first ? a.first < b.first : s.polylines[a.second].id < s.polylines[b.second].id;
    });
    order.clear();
    for (int i = 0; i < c.max_polylines; ++i) order.push_back(dist[i].second);
    std::sort(order.begin(), order.end());
  }
  MapSelection m;
  for (std::size_t i : order) {
    m.ids.push_back(s.polylines[i].id);
    m.shapes.push_back(resample(s.polylines[i], c.points_per_polyline));
  }
  return m;
}

void fill_agents(SceneGeometry& geo, const Scenario& s, const DenoiserConfig& c, bool pad,
                 const std::vector<Resampled>& shapes) {
  const int real = std::min<int>(static_cast<int>(s.agents.size()), c.max_agents);
  const int Na = pad ? c.max_agents : real;
  const int Nm = geo.n_polylines;
  geo.n_agents = Na;
  geo.agent_index.clear();
  geo.agent_pose.clear();
  geo.agent_valid = g::Tensor({static_cast<std::size_t>(Na)});
  for (int i = 0; i < Na; ++i) {
    const bool valid = i < real;
    geo.agent_index.push_back(valid ? i : -1);
    geo.agent_pose.push_back(valid ? s.agents[i].states.at(s.t_now) : AgentState{});
    geo.agent_valid[i] = valid ? 1.0 : 0.0;
  }
  const std::size_t na = static_cast<std::size_t>(Na), nm = static_cast<std::size_t>(Nm);
  geo.al_rel = g::Tensor({na * nm, kRelFeatures});
  geo.al_mask = g::Tensor({na, nm});
  for (std::size_t i = 0; i < na; ++i) {
    for (std::size_t j = 0; j < nm; ++j) {
      put_rel(geo.al_rel, i * nm + j, geo.agent_pose[i], shapes[j].pose);
      const bool near = polyline_distance(shapes[j].pts, geo.agent_pose[i].position()) <= neighbourhood(c);
      geo.al_mask.at(i, j) = geo.agent_valid[i] > 0 && near ? 1.0 : 0.0;
    }
  }
  geo.aa_rel = g::Tensor({na * na, kRelFeatures});
  geo.aa_mask = g::Tensor({na, na});
  for (std::size_t i = 0; i < na; ++i) {
    for (std::size_t j = 0; j < na; ++j) {
      put_rel(geo.aa_rel, i * na + j, geo.agent_pose[i], geo.agent_pose[j]);
      const bool near = norm(geo.agent_pose[i].position() - geo.agent_pose[j].position()) <= neighbourhood(c);
      geo.aa_mask.at(i, j) = geo.agent_valid[i] > 0 && geo.agent_valid[j] > 0 && near ? 1.0 : 0.0;
    }
  }
}

std::vector<Resampled> shapes_of(const SceneGeometry& geo, const Scenario& s, const DenoiserConfig& c) {
  std::vector<Resampled> shapes;
  for (int id : geo.polyline_ids) shapes.push_back(resample(s.polyline(id), c.points_per_polyline));
  return shapes;
}

}  // namespace

SceneGeometry scene_geometry(const Scenario& s, const DenoiserConfig& c, bool pad_agents) {
  if (s.agents.empty()) throw SceneError("scene_geometry: scenario has no agents");
  SceneGeometry geo;
  const MapSelection sel = select_polylines(s, c);
  geo.polyline_ids = sel.ids;
  geo.n_polylines = static_cast<int>(sel.ids.size());
  const std::size_t nm = sel.ids.size();
  const std::size_t P = static_cast<std::size_t>(c.points_per_polyline);
  geo.point_features = g::Tensor({nm, P, kPointFeatures});
  geo.polyline_valid = g::Tensor({nm}, 1.0);
  for (std::size_t j = 0; j < nm; ++j) {
    const MapPolyline& pl = s.polyline(sel.ids[j]);
    const Resampled& r = sel.shapes[j];
    for (std::size_t p = 0; p < P; ++p) {
      const RelFeature pos = relative_feature(r.pose, {r.pts[p].x, r.pts[p].y, 0.0});
      const RelFeature dir = relative_feature({0, 0, r.pose.heading}, {0, 0, std::atan2(r.tangents[p].y, r.tangents[p].x)});
      double* f = geo.point_features.data() + (j * P + p) * kPointFeatures;
      f[0] = pos.dx / kPointScale;
      f[1] = pos.dy / kPointScale;
      f[2] = dir.cos_dh;
      f[3] = dir.sin_dh;
      f[4] = pl.lane_type == LaneType::driving ? 1.0 : 0.0;
      f[5] = pl.lane_type == LaneType::shoulder ? 1.0 : 0.0;
      f[6] = pl.lane_type == LaneType::edge ? 1.0 : 0.0;
      f[7] = pl.width / 4.0;
      f[8] = static_cast<double>(p) / static_cast<double>(std::max<std::size_t>(1, P - 1)) - 0.5;
    }
  }
  geo.ll_rel = g::Tensor({nm * nm, kRelFeatures});
  geo.ll_conn = g::Tensor({nm * nm, kConnKinds});
  geo.ll_mask = g::Tensor({nm, nm});
  for (std::size_t i = 0; i < nm; ++i) {
    for (std::size_t j = 0; j < nm; ++j) {
      put_rel(geo.ll_rel, i * nm + j, sel.shapes[i].pose, sel.shapes[j].pose);
      int kind = 0;
      const Relation rels[] = {Relation::predecessor, Relation::successor, Relation::left_neighbor,
                               Relation::right_neighbor};
      for (int r = 0; r < 4; ++r) {
        const auto rel = s.graph.related(sel.ids[i], rels[r]);
        if (std::find(rel.begin(), rel.end(), sel.ids[j]) != rel.end()) {
          kind = r + 1;
          break;
        }
      }
      geo.ll_conn.at(i * nm + j, static_cast<std::size_t>(kind)) = 1.0;
      double dmin = std::numeric_limits<double>::infinity();
      for (const Vec2& q : sel.shapes[j].pts) dmin = std::min(dmin, polyline_distance(sel.shapes[i].pts, q));
      geo.ll_mask.at(i, j) = dmin <= neighbourhood(c) ? 1.0 : 0.0;
    }
  }
  fill_agents(geo, s, c, pad_agents, sel.shapes);
  return geo;
}

SceneGeometry update_agents(const SceneGeometry& base, const Scenario& s, const DenoiserConfig& c) {
  SceneGeometry geo = base;
  const bool pad = base.n_agents > std::min<int>(static_cast<int>(s.agents.size()), c.max_agents);
  fill_agents(geo, s, c, pad, shapes_of(base, s, c));
  return geo;
}

// ---- network ----------------------------------------------------------------------

EdmCoefficients edm_coefficients(double sigma, double sd) {
  const double s2 = sigma * sigma + sd * sd;
  return {sd * sd / s2, sigma * sd / std::sqrt(s2), 1.0 / std::sqrt(s2), std::log(sigma) / 4.0};
}

ParamVars::ParamVars(g::Tape& tape, const DenoiserParams& params, bool trainable) {
  for (const std::string& n : params.names) {
    const g::Tensor& t = params.tensors.at(n);
    vars_.emplace(n, trainable ? tape.leaf(t) : tape.constant(t));
  }
}

g::Var ParamVars::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

namespace {

g::Var linear(const ParamVars& p, g::Var x, const std::string& w, const std::string& b) {
  return g::add(g::matmul(x, p[w]), p[b]);
}

g::Var mlp(const ParamVars& p, g::Var x, const std::string& pre) {
  return linear(p, g::relu(linear(p, x, pre + ".w1", pre + ".b1")), pre + ".w2", pre + ".b2");
}

// Relative attention: keys and values are shifted by the pair embedding R.
g::Var attend(const ParamVars& p, g::Var q_in, g::Var kv_in, g::Var R, const g::Tensor& mask, const std::string& pre,
              int D) {
  const std::size_t n = q_in.shape()[0];
  const std::size_t m = kv_in.shape()[0];
  const std::size_t d = static_cast<std::size_t>(D);
  g::Var q = g::matmul(q_in, p[pre + ".wq"]);
  g::Var k = g::matmul(kv_in, p[pre + ".wk"]);
  g::Var v = g::matmul(kv_in, p[pre + ".wv"]);
  g::Var s1 = g::matmul(q, k, true);
  g::Var s2 = g::reshape(g::matmul(g::reshape(q, {n, 1, d}), R, true), {n, m});
  g::Var scores = g::mul(g::add(s1, s2), 1.0 / std::sqrt(static_cast<double>(D)));
  g::Var a = g::softmax(scores, mask);
  g::Var o = g::add(g::matmul(a, v), g::reshape(g::matmul(g::reshape(a, {n, 1, m}), R), {n, d}));
  g::Var h = g::layernorm(g::add(q_in, g::matmul(o, p[pre + ".wo"])));
  g::Var f = linear(p, g::relu(linear(p, h, pre + ".ff1", pre + ".fb1")), pre + ".ff2", pre + ".fb2");
  return g::layernorm(g::add(h, f));
}

g::Var rel_table(const ParamVars& p, g::Tape& tape, const g::Tensor& rel, const std::string& pre, std::size_t rows,
                 std::size_t cols, std::size_t D) {
  g::Var r = mlp(p, tape.constant(rel), pre);
  return g::reshape(r, {rows, cols, D});
}

g::Var mini_pointnet(const ParamVars& p, g::Tape& tape, const SceneGeometry& geo, const DenoiserConfig& c) {
  const std::size_t D = static_cast<std::size_t>(c.d_model);
  const std::size_t nm = static_cast<std::size_t>(geo.n_polylines);
  const std::size_t P = static_cast<std::size_t>(c.points_per_polyline);
  g::Var pts = tape.constant(geo.point_features.reshaped({nm * P, kPointFeatures}));
  g::Var h = g::relu(linear(p, pts, "mpn.w1", "mpn.b1"));
  h = g::relu(linear(p, h, "mpn.w2", "mpn.b2"));
  return linear(p, g::max(g::reshape(h, {nm, P, D}), 1), "mpn.w3", "mpn.b3");
}

}  // namespace

EncodingVars encode_vars(g::Tape& tape, const ParamVars& p, const SceneGeometry& geo, const DenoiserConfig& c) {
  const std::size_t D = static_cast<std::size_t>(c.d_model);
  const std::size_t nm = static_cast<std::size_t>(geo.n_polylines);
  const std::size_t na = static_cast<std::size_t>(geo.n_agents);
  EncodingVars enc;
  enc.geometry = &geo;
  enc.x_m = mini_pointnet(p, tape, geo, c);
  g::Var lanes = enc.x_m;

  g::Var r_ll = g::add(mlp(p, tape.constant(geo.ll_rel), "rel_ll"), g::matmul(tape.constant(geo.ll_conn), p["rel_ll.conn"]));
  r_ll = g::reshape(r_ll, {nm, nm, D});
  for (int l = 0; l < c.layers; ++l) {
    lanes = attend(p, lanes, lanes, r_ll, geo.ll_mask, "blk" + std::to_string(l) + ".ll", c.d_model);
    enc.lane_tokens.push_back(lanes);
  }
  enc.al_r = rel_table(p, tape, geo.al_rel, "rel_al", na, nm, D);
  enc.aa_r = rel_table(p, tape, geo.aa_rel, "rel_aa", na, na, D);
  return enc;
}

EncodingVars encoding_constants(g::Tape& tape, const SceneEncoding& enc) {
  EncodingVars v;
  v.geometry = &enc.geometry;
  v.x_m = tape.constant(enc.x_m);
  for (const g::Tensor& t : enc.lane_tokens) v.lane_tokens.push_back(tape.constant(t));
  v.al_r = tape.constant(enc.al_r);
  v.aa_r = tape.constant(enc.aa_r);
  return v;
}

SceneEncoding encode_scene(const DenoiserParams& params, SceneGeometry geometry) {
  SceneEncoding enc;
  enc.geometry = std::move(geometry);
  g::Tape tape;
  ParamVars p(tape, params, false);
  const EncodingVars v = encode_vars(tape, p, enc.geometry, params.config);
  for (const g::Var& t : v.lane_tokens) enc.lane_tokens.push_back(t.value());
  enc.al_r = v.al_r.value();
  enc.aa_r = v.aa_r.value();
  enc.x_m = v.x_m.value();
  return enc;
}

SceneEncoding encode_scene(const DenoiserParams& params, const Scenario& scenario) {
  return encode_scene(params, scene_geometry(scenario, params.config));
}

SceneEncoding update_encoding(const DenoiserParams& params, const SceneEncoding& enc, const Scenario& scenario) {
  SceneEncoding out;
  out.geometry = update_agents(enc.geometry, scenario, params.config);
  out.x_m = enc.x_m;
  out.lane_tokens = enc.lane_tokens;
  g::Tape tape;
  ParamVars p(tape, params, false);
  const std::size_t D = static_cast<std::size_t>(params.config.d_model);
  const std::size_t na = static_cast<std::size_t>(out.geometry.n_agents);
  const std::size_t nm = static_cast<std::size_t>(out.geometry.n_polylines);
  out.al_r = rel_table(p, tape, out.geometry.al_rel, "rel_al", na, nm, D).value();
  out.aa_r = rel_table(p, tape, out.geometry.aa_rel, "rel_aa", na, na, D).value();
  return out;
}

g::Var denoise_var(const ParamVars& p, const EncodingVars& enc, g::Var x, double sigma, const DenoiserConfig& c) {
  g::Tape& tape = x.tape();
  const SceneGeometry& geo = *enc.geometry;
  const std::size_t na = static_cast<std::size_t>(geo.n_agents);
  const std::size_t K = static_cast<std::size_t>(c.pca_k);
  if (x.shape() != g::Shape{na, K}) {
    throw g::ShapeError("denoise expects x of shape [" + std::to_string(na) + ", " + std::to_string(K) + "], got " +
                        g::shape_str(x.shape()));
  }
  const EdmCoefficients co = edm_coefficients(sigma, c.sigma_data);
  g::Tensor nf({1, kNoiseFeatures});
  nf[0] = co.c_noise;
  for (int f = 0; f < 4; ++f) {
    nf[1 + 2 * f] = std::sin(co.c_noise * std::ldexp(1.0, f));
    nf[2 + 2 * f] = std::cos(co.c_noise * std::ldexp(1.0, f));
  }
  g::Var noise = mlp(p, tape.constant(nf), "noise");
  g::Var agents = g::add(mlp(p, g::mul(x, co.c_in), "agent"), g::reshape(noise, {static_cast<std::size_t>(c.d_model)}));
  for (int l = 0; l < c.layers; ++l) {
    const std::string pre = "blk" + std::to_string(l);
    agents = attend(p, agents, enc.lane_tokens[l], enc.al_r, geo.al_mask, pre + ".al", c.d_model);
    agents = attend(p, agents, agents, enc.aa_r, geo.aa_mask, pre + ".aa", c.d_model);
  }
  g::Var F = linear(p, agents, "head.w", "head.b");
  // Padded agent slots are zeroed so they never leak into the sample.
  g::Tensor valid({na, K});
  for (std::size_t i = 0; i < na * K; ++i) valid[i] = geo.agent_valid[i / K];
  g::Var out = g::add(g::mul(x, co.c_skip), g::mul(F, co.c_out));
  return g::mul(out, tape.constant(valid));
}

g::Tensor denoise(const DenoiserParams& params, const SceneEncoding& enc, const g::Tensor& x, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("denoise: sigma must be positive");
  for (double v : x.storage()) {
    if (std::isnan(v)) throw std::invalid_argument("denoise: NaN in input");
  }
  g::Tape tape;
  ParamVars p(tape, params, false);
  const EncodingVars ev = encoding_constants(tape, enc);
  return denoise_var(p, ev, tape.constant(x), sigma, params.config).value();
}

g::Tensor encode_agents(const PcaBasis& pca, const Scenario& s, const SceneGeometry& geo) {
  g::Tensor z({static_cast<std::size_t>(geo.n_agents), pca.k()});
  for (int i = 0; i < geo.n_agents; ++i) {
    if (geo.agent_index[i] < 0) continue;
    const std::vector<double> c = pca.encode(agent_window(s, geo.agent_index[i]));
    std::copy(c.begin(), c.end(), z.data() + static_cast<std::size_t>(i) * pca.k());
  }
  return z;
}

}  // namespace trajguide
