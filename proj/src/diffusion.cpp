#include "trajguide/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace trajguide {

namespace g = grad;

void NoiseSchedule::validate() const {
  if (!(sigma_min > 0.0 && sigma_min < sigma_max)) {
    throw std::invalid_argument("noise schedule needs 0 < sigma_min < sigma_max");
  }
  if (steps < 1) throw std::invalid_argument("noise schedule needs steps >= 1");
  if (!(rho > 0.0)) throw std::invalid_argument("noise schedule needs rho > 0");
}

std::vector<double> NoiseSchedule::sigmas() const {
  validate();
  std::vector<double> s;
  const double a = std::pow(sigma_max, 1.0 / rho);
  const double b = std::pow(sigma_min, 1.0 / rho);
  for (int i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    s.push_back(std::pow(a + f * (b - a), rho));
  }
  s.push_back(0.0);
  return s;
}

std::string_view to_string(GuidanceMode m) {
  return m == GuidanceMode::clean_space ? "clean_space" : "through_denoiser";
}

GuidanceMode guidance_mode_from_string(std::string_view s) {
  if (s == "clean_space") return GuidanceMode::clean_space;
  if (s == "through_denoiser") return GuidanceMode::through_denoiser;
  throw std::invalid_argument("unknown guidance mode '" + std::string(s) + "'");
}

double guidance_clamp_bound() { return std::nextafter(1.0, 0.0); }

g::Tensor score_from_denoiser(const g::Tensor& x, const g::Tensor& x_hat, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("score_from_denoiser: sigma must be positive");
  if (x.shape() != x_hat.shape()) throw g::ShapeError("score_from_denoiser: shape mismatch");
  g::Tensor s(x.shape());
  const double inv = 1.0 / (sigma * sigma);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = (x_hat[i] - x[i]) * inv;
  return s;
}

g::Tensor DenoiserFn::vjp(const g::Tensor&, double, const g::Tensor&) const {
  throw std::logic_error("this denoiser does not provide a vector-Jacobian product");
}

// ---- sampler ------------------------------------------------------------------------

ScoreParts guided_score(const DenoiserFn& denoiser, const g::Tensor& x, double sigma, const GuidanceCost* cost,
                        const GuidanceConfig& guidance) {
  ScoreParts out;
  out.x_hat = denoiser.denoise(x, sigma);
  out.prior = score_from_denoiser(x, out.x_hat, sigma);
  out.added = g::Tensor(x.shape());
  if (cost == nullptr) return out;
  if (guidance.lambda < 0.0) throw std::invalid_argument("guidance lambda must be >= 0");
  out.cost = cost->evaluate(out.x_hat);
  g::Tensor grad = out.cost.grad;
  if (guidance.mode == GuidanceMode::through_denoiser) {
    grad = denoiser.vjp(x, sigma, grad);
  } else {
    // A gradient step on x_hat shifts the score by -lambda * dL/dx_hat / sigma^2.
    for (double& v : grad.storage()) v /= sigma * sigma;
  }
  const double bound = guidance_clamp_bound();
  out.unclamped = g::Tensor(x.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) throw std::runtime_error("guidance gradient is not finite");
    out.unclamped[i] = -guidance.lambda * grad[i];
    out.added[i] = std::clamp(out.unclamped[i], -bound, bound);
  }
  return out;
}

namespace {

void account(SampleStats& st, const ScoreParts& p) {
  const double bound = guidance_clamp_bound();
  for (std::size_t i = 0; i < p.added.size(); ++i) {
    const double v = p.added[i];
    ++st.guidance_components;
    if (std::abs(p.unclamped[i]) >= bound) ++st.clamped_components;
    if (!(std::abs(v) < 1.0)) ++st.clamp_violations;
    st.max_abs_guidance = std::max(st.max_abs_guidance, std::abs(v));
  }
}

}  // namespace

SampleResult sample(const DenoiserFn& denoiser, const g::Shape& shape, const NoiseSchedule& schedule,
                    std::uint64_t seed, const GuidanceCost* cost, const GuidanceConfig& guidance) {
  const std::vector<double> sig = schedule.sigmas();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  SampleResult res;
  g::Tensor x(shape);
  for (double& v : x.storage()) v = sig[0] * nd(rng);

  auto slope = [&](const g::Tensor& at, double s, bool record) {
    const ScoreParts p = guided_score(denoiser, at, s, cost, guidance);
    if (cost != nullptr) {
      account(res.stats, p);
      if (record) res.stats.steps.push_back({s, p.cost.total, p.cost.terms});
    }
    g::Tensor d(at.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = -s * (p.prior[i] + p.added[i]);
    return d;
  };

  for (int i = 0; i + 1 < static_cast<int>(sig.size()); ++i) {
    const double s = sig[i], sn = sig[i + 1];
    const g::Tensor d = slope(x, s, true);
    g::Tensor xn(shape);
    for (std::size_t j = 0; j < x.size(); ++j) xn[j] = x[j] + (sn - s) * d[j];
    if (sn > 0.0) {
      const g::Tensor d2 = slope(xn, sn, false);
      for (std::size_t j = 0; j < x.size(); ++j) xn[j] = x[j] + (sn - s) * 0.5 * (d[j] + d2[j]);
    }
    x = std::move(xn);
  }
  res.x = std::move(x);
  return res;
}

// ---- known states -----------------------------------------------------------------

double known_states_cost(const g::Tensor& y, const KnownStatesCondition& c) {
  if (c.timesteps.size() != c.targets.size()) throw std::invalid_argument("known states: timesteps/targets mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < c.timesteps.size(); ++i) {
    const std::size_t t = static_cast<std::size_t>(c.timesteps[i]);
    if (t >= y.dim(0)) throw std::out_of_range("known states: timestep outside the horizon");
    const double dx = y.at(t, 0) - c.targets[i].x;
    const double dy = y.at(t, 1) - c.targets[i].y;
    acc += dx * dx + dy * dy;
  }
  return c.weight * acc;
}

g::Var known_states_cost(g::Var y, const KnownStatesCondition& c) {
  if (c.timesteps.size() != c.targets.size()) throw std::invalid_argument("known states: timesteps/targets mismatch");
  std::vector<std::size_t> rows;
  g::Tensor target({c.timesteps.size(), 2});
  for (std::size_t i = 0; i < c.timesteps.size(); ++i) {
    if (c.timesteps[i] < 0 || static_cast<std::size_t>(c.timesteps[i]) >= y.shape()[0]) {
      throw std::out_of_range("known states: timestep outside the horizon");
    }
    rows.push_back(static_cast<std::size_t>(c.timesteps[i]));
    target.at(i, 0) = c.targets[i].x;
    target.at(i, 1) = c.targets[i].y;
  }
  g::Var diff = g::sub(g::gather(y, rows), y.tape().constant(target));
  return g::mul(g::sum(g::square(diff)), c.weight);
}

std::vector<KnownStatesCondition> history_conditions(const Scenario& s, int n_agents, double weight) {
  std::vector<KnownStatesCondition> out;
  for (int a = 0; a < n_agents; ++a) {
    KnownStatesCondition c;
    c.agent = a;
    c.weight = weight;
    for (int r = 0; r < kHistorySteps; ++r) {
      c.timesteps.push_back(r);
      c.targets.push_back(s.agents.at(a).states.at(s.t_now - kCurrentIndex + r).position());
    }
    out.push_back(std::move(c));
  }
  return out;
}

// ---- scene cost ------------------------------------------------------------------

SceneCost::SceneCost(const PcaBasis& pca, const Scenario& scenario, const SceneGeometry& geometry,
                     std::optional<dsl::CostProgram> program, std::vector<KnownStatesCondition> known)
    : decode_matrix_(pca.decode_matrix()),
      mean_({pca.dim()}, pca.mean),
      anchors_(geometry.agent_pose),
      program_(std::move(program)),
      known_(std::move(known)),
      dt_(scenario.dt) {
  slot_of_agent_.assign(scenario.agents.size(), -1);
  for (int i = 0; i < geometry.n_agents; ++i) {
    if (geometry.agent_index[i] >= 0) slot_of_agent_[geometry.agent_index[i]] = i;
  }
  auto need = [&](int agent, const std::string& what) {
    if (agent < 0 || agent >= static_cast<int>(slot_of_agent_.size()) || slot_of_agent_[agent] < 0) {
      throw std::invalid_argument(what + " refers to agent a" + std::to_string(agent) + ", which is not simulated");
    }
  };
  if (program_) {
    for (int a = 0; a <= program_->max_agent(); ++a) need(a, "cost program");
    refpaths_ = dsl::resolve_refpaths(*program_, scenario);
  }
  for (const KnownStatesCondition& c : known_) need(c.agent, "known-state condition");
}

std::vector<g::Var> SceneCost::decode(g::Tape& tape, g::Var x) const {
  g::Var win = g::add(g::matmul(x, tape.constant(decode_matrix_)), tape.constant(mean_));
  std::vector<g::Var> out;
  for (std::size_t i = 0; i < anchors_.size(); ++i) {
    const AgentState& a = anchors_[i];
    const double c = std::cos(a.heading), s = std::sin(a.heading);
    g::Var local = g::reshape(g::gather(win, {i}), {static_cast<std::size_t>(kWindowSteps), 2});
    g::Var rot = g::matmul(local, tape.constant(g::Tensor({2, 2}, {c, s, -s, c})));
    out.push_back(g::add(rot, tape.constant(g::Tensor({2}, {a.x, a.y}))));
  }
  return out;
}

GuidanceEval SceneCost::evaluate(const g::Tensor& x_hat) const {
  g::Tape tape;
  g::Var x = tape.leaf(x_hat);
  const std::vector<g::Var> windows = decode(tape, x);
  GuidanceEval ev;
  std::optional<g::Var> total;
  auto accumulate = [&](g::Var v) { total = total ? g::add(*total, v) : v; };
  if (program_) {
    std::vector<std::size_t> future(kFutureSteps + 1);
    for (std::size_t r = 0; r < future.size(); ++r) future[r] = static_cast<std::size_t>(kCurrentIndex) + r;
    std::vector<g::Var> positions;
    for (int a = 0; a <= program_->max_agent(); ++a) positions.push_back(g::gather(windows[slot_of_agent_[a]], future));
    const dsl::CostVars cv = dsl::record(*program_, positions, refpaths_, dt_);
    for (std::size_t i = 0; i < cv.terms.size(); ++i) {
      const dsl::Term& t = program_->terms[i];
      const double v = cv.terms[i].value().item();
      if (!std::isfinite(v)) throw dsl::DslError(t.loc, "term '" + t.name + "' evaluated to a non-finite value");
      ev.terms.push_back({t.name, t.weight, v});
    }
    accumulate(cv.total);
  }
  if (!known_.empty()) {
    std::optional<g::Var> ks;
    for (const KnownStatesCondition& c : known_) {
      g::Var v = known_states_cost(windows[slot_of_agent_[c.agent]], c);
      ks = ks ? g::add(*ks, v) : v;
    }
    ev.terms.push_back({"known_states", 1.0, ks->value().item()});
    accumulate(*ks);
  }
  if (!total) {
    ev.grad = g::Tensor(x_hat.shape());
    return ev;
  }
  ev.total = total->value().item();
  tape.backward(*total);
  ev.grad = tape.grad(x);
  return ev;
}

g::Tensor NetworkDenoiser::denoise(const g::Tensor& x, double sigma) const {
  return trajguide::denoise(params_, encoding_, x, sigma);
}

g::Tensor NetworkDenoiser::vjp(const g::Tensor& x, double sigma, const g::Tensor& cotangent) const {
  g::Tape tape;
  ParamVars p(tape, params_, false);
  const EncodingVars ev = encoding_constants(tape, encoding_);
  g::Var xv = tape.leaf(x);
  g::Var out = denoise_var(p, ev, xv, sigma, params_.config);
  tape.backward(g::sum(g::mul(out, tape.constant(cotangent))));
  return tape.grad(xv);
}

// ---- training ---------------------------------------------------------------------

TrainingExample make_training_example(const PcaBasis& pca, const Scenario& scenario, const DenoiserConfig& config) {
  TrainingExample ex;
  ex.geometry = scene_geometry(scenario, config);
  ex.y = encode_agents(pca, scenario, ex.geometry);
  return ex;
}

namespace {

g::Var scene_loss(g::Tape& tape, const ParamVars& pv, const EncodingVars& ev, const TrainingExample& ex,
                  double sigma, const g::Tensor& noise, const DenoiserConfig& c) {
  g::Tensor x = ex.y;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += noise[i];
  g::Var out = denoise_var(pv, ev, tape.constant(x), sigma, c);
  const double sd = c.sigma_data;
  const double w = (sigma * sigma + sd * sd) / (sigma * sd * sigma * sd);
  return g::mul(g::mean(g::square(g::sub(out, tape.constant(ex.y)))), w);
}

}  // namespace

double edm_loss(const DenoiserParams& params, const TrainingExample& ex, const std::vector<double>& sigmas,
                const std::vector<g::Tensor>& noise) {
  g::Tape tape;
  ParamVars pv(tape, params, false);
  const EncodingVars ev = encode_vars(tape, pv, ex.geometry, params.config);
  double acc = 0.0;
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    acc += scene_loss(tape, pv, ev, ex, sigmas[i], noise[i], params.config).value().item();
  }
  return acc / static_cast<double>(sigmas.size());
}

TrainResult train(const std::vector<TrainingExample>& data, DenoiserParams init, const TrainConfig& cfg,
                  const std::function<void(int, double)>& progress) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.steps < 0 || cfg.batch < 1 || cfg.noise_draws < 1) throw std::invalid_argument("train: bad configuration");
  TrainResult res;
  res.params = std::move(init);
  DenoiserParams& p = res.params;
  std::map<std::string, g::Tensor> m, v;
  for (const auto& [name, t] : p.tensors) {
    m.emplace(name, g::Tensor(t.shape()));
    v.emplace(name, g::Tensor(t.shape()));
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int step = 1; step <= cfg.steps; ++step) {
    g::Tape tape;
    ParamVars pv(tape, p, true);
    std::optional<g::Var> total;
    int terms = 0;
    for (int b = 0; b < cfg.batch; ++b) {
      const TrainingExample& ex = data[pick(rng)];
      const EncodingVars ev = encode_vars(tape, pv, ex.geometry, p.config);
      for (int k = 0; k < cfg.noise_draws; ++k) {
        const double sigma = std::exp(cfg.p_mean + cfg.p_std * nd(rng));
        g::Tensor noise(ex.y.shape());
        for (double& e : noise.storage()) e = sigma * nd(rng);
        g::Var l = scene_loss(tape, pv, ev, ex, sigma, noise, p.config);
        total = total ? g::add(*total, l) : l;
        ++terms;
      }
    }
    g::Var loss = g::mul(*total, 1.0 / terms);
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": loss = " + std::to_string(lv) +
                             " (previous " + (res.loss.empty() ? std::string("n/a") : std::to_string(res.loss.back())) +
                             ")");
    }
    tape.backward(loss);
    std::map<std::string, g::Tensor> grads;
    double norm2 = 0.0;
    for (const auto& [name, var] : pv.all()) {
      g::Tensor gr = tape.grad(var);
      for (double e : gr.storage()) norm2 += e * e;
      grads.emplace(name, std::move(gr));
    }
    const double gnorm = std::sqrt(norm2);
    if (!std::isfinite(gnorm)) throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": gradient norm is not finite");
    const double scale = gnorm > cfg.grad_clip ? cfg.grad_clip / gnorm : 1.0;
    // Cosine decay to 10% of the base rate.
    const double progress_frac = static_cast<double>(step - 1) / std::max(1, cfg.steps - 1);
    const double lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress_frac)));
    const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
    for (auto& [name, t] : p.tensors) {
      const g::Tensor& gr = grads.at(name);
      g::Tensor& mm = m.at(name);
      g::Tensor& vv = v.at(name);
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double gi = gr[i] * scale;
        mm[i] = b1 * mm[i] + (1 - b1) * gi;
        vv[i] = b2 * vv[i] + (1 - b2) * gi * gi;
        t[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
      }
    }
    res.loss.push_back(lv);
    if (progress) progress(step, lv);
  }
  return res;
}

// ---- simulation --------------------------------------------------------------------

std::vector<AgentState> with_headings(const std::vector<Vec2>& pts, double fallback) {
  std::vector<AgentState> out;
  double prev = fallback;
  const std::size_t n = pts.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j0 = i == 0 ? 0 : i - 1;
    const std::size_t j1 = std::min(n - 1, i + 1);
    const Vec2 d = pts[j1] - pts[j0];
    double h = prev;
    if (j1 > j0 && norm(d) > 0.01 * static_cast<double>(j1 - j0)) {
      h = std::atan2(d.y, d.x);
      // Motion against the body axis is reversing, not a U-turn.
      if (std::abs(wrap_angle(h - prev)) > std::numbers::pi / 2) h = wrap_angle(h + std::numbers::pi);
    }
    out.push_back({pts[i].x, pts[i].y, h});
    prev = h;
  }
  return out;
}

namespace {

struct Plan {
  SimulationResult result;
  std::vector<std::vector<Vec2>> windows;  // per slot, global [91]
};

Plan plan_once(const DenoiserParams& params, const PcaBasis& pca, const Scenario& scenario, const SceneEncoding& enc,
               const SimulationConfig& cfg, const std::optional<dsl::CostProgram>& program, int elapsed = 0) {
  const SceneGeometry& geo = enc.geometry;
  std::vector<KnownStatesCondition> known;
  if (cfg.history_condition) known = history_conditions(scenario, geo.n_agents, cfg.history_weight);
  const int end_row = kWindowSteps - 1 - elapsed;
  for (const auto& [agent, target] : cfg.endpoints) {
    if (end_row <= kCurrentIndex) break;
    KnownStatesCondition c;
    c.agent = agent;
    c.timesteps = {end_row};
    c.targets = {target};
    c.weight = cfg.endpoint_weight;
    known.push_back(c);
  }
  std::optional<SceneCost> cost;
  if (program || !known.empty()) cost.emplace(pca, scenario, geo, program, known);
  const NetworkDenoiser den(params, enc);
  SampleResult sr = sample(den, {static_cast<std::size_t>(geo.n_agents), pca.k()}, cfg.schedule, cfg.seed,
                           cost ? &*cost : nullptr, cfg.guidance);
  Plan plan;
  plan.result.x = sr.x;
  plan.result.stats = std::move(sr.stats);

  const SceneCost decoder(pca, scenario, geo, std::nullopt, {});
  g::Tape tape;
  const std::vector<g::Var> win = decoder.decode(tape, tape.constant(sr.x));
  Scenario out = scenario;
  out.agents.clear();
  double herr = 0.0;
  int hcount = 0;
  for (int i = 0; i < geo.n_agents; ++i) {
    const AgentTrack& src = scenario.agents[geo.agent_index[i]];
    std::vector<Vec2> pts;
    const g::Tensor& w = win[i].value();
    for (int r = 0; r < kWindowSteps; ++r) pts.push_back({w.at(r, 0), w.at(r, 1)});
    for (int r = 0; r < kCurrentIndex; ++r) {
      herr += norm(pts[r] - src.states.at(scenario.t_now - kCurrentIndex + r).position());
      ++hcount;
    }
    AgentTrack t;
    t.agent_id = src.agent_id;
    t.extent = src.extent;
    t.states.assign(src.states.begin(), src.states.begin() + scenario.t_now + 1);
    std::vector<Vec2> fut(pts.begin() + kCurrentIndex, pts.end());
    fut[0] = t.states.back().position();
    const std::vector<AgentState> states = with_headings(fut, t.states.back().heading);
    t.states.insert(t.states.end(), states.begin() + 1, states.end());
    out.agents.push_back(std::move(t));
    plan.windows.push_back(std::move(pts));
  }
  plan.result.history_error = hcount ? herr / hcount : 0.0;
  plan.result.scenario = std::move(out);
  return plan;
}

}  // namespace

SimulationResult simulate(const DenoiserParams& params, const PcaBasis& pca, const Scenario& scenario,
                          const SimulationConfig& cfg, const std::optional<dsl::CostProgram>& program) {
  if (pca.k() != static_cast<std::size_t>(params.config.pca_k)) {
    throw std::invalid_argument("PCA basis has k = " + std::to_string(pca.k()) + " but the model expects " +
                                std::to_string(params.config.pca_k));
  }
  const SceneEncoding enc = encode_scene(params, scenario);
  return plan_once(params, pca, scenario, enc, cfg, program).result;
}

RolloutResult closed_loop_rollout(const DenoiserParams& params, const PcaBasis& pca, const Scenario& scenario,
                                  const RolloutConfig& cfg, const std::optional<dsl::CostProgram>& program) {
  if (cfg.replan_steps < 1 || cfg.replan_steps > kFutureSteps) {
    throw std::invalid_argument("replan_steps must be in [1, " + std::to_string(kFutureSteps) + "]");
  }
  Scenario cur = scenario;
  const int keep = std::min<int>(static_cast<int>(cur.agents.size()), params.config.max_agents);
  cur.agents.resize(static_cast<std::size_t>(keep));
  for (AgentTrack& a : cur.agents) a.states.resize(static_cast<std::size_t>(cur.t_now + 1));
  SceneEncoding enc = encode_scene(params, cur);
  RolloutResult res;
  SimulationConfig sim = cfg.sim;
  sim.history_condition = true;
  std::vector<std::vector<Vec2>> prev;
  int prev_offset = 0;
  int executed = 0;
  for (int k = 0; executed < cfg.execute_steps; ++k) {
    sim.seed = cfg.sim.seed + static_cast<std::uint64_t>(k);
    if (k > 0) enc = update_encoding(params, enc, cur);
    Plan plan = plan_once(params, pca, cur, enc, sim, program, executed);
    if (!prev.empty()) {
      for (std::size_t i = 0; i < plan.windows.size(); ++i) {
        const Vec2 now = plan.windows[i][kCurrentIndex + 1];
        const Vec2 before = prev[i][kCurrentIndex + 1 + prev_offset];
        res.max_splice_jump = std::max(res.max_splice_jump, norm(now - before));
      }
    }
    const int n = std::min(cfg.replan_steps, cfg.execute_steps - executed);
    for (std::size_t i = 0; i < cur.agents.size(); ++i) {
      const auto& planned = plan.result.scenario.agents[i].states;
      cur.agents[i].states.insert(cur.agents[i].states.end(), planned.begin() + cur.t_now + 1,
                                  planned.begin() + cur.t_now + 1 + n);
    }
    cur.t_now += n;
    executed += n;
    res.plans.push_back(std::move(plan.result.stats));
    prev = std::move(plan.windows);
    prev_offset = n;
  }
  res.scenario = std::move(cur);
  res.scenario.t_now = scenario.t_now;
  return res;
}

}  // namespace trajguide
