#include "trajguide/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "trajguide/costdsl.hpp"
#include "trajguide/denoiser.hpp"
#include "trajguide/diffusion.hpp"
#include "trajguide/llmguide.hpp"
#include "trajguide/metrics.hpp"
#include "trajguide/synth.hpp"

namespace fs = std::filesystem;

namespace trajguide::cli {
namespace {

constexpr const char* kVersion = "0.1.0";

// Runtime failures that should exit with a specific code.
struct ExitError : std::runtime_error {
  int code;
  ExitError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

void write_scenario(const Scenario& s, const std::string& path, const nlohmann::json& meta) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  save_scenario(s, path, meta);
}

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid JSON in " + path + ": " + e.what());
  }
}

bool is_jsonl(const std::string& path) { return fs::path(path).extension() == ".jsonl"; }

// Scenario plus the raw document (for its "meta" block).
struct LoadedScenario {
  Scenario scenario;
  nlohmann::json meta;
};

std::vector<LoadedScenario> load_scenarios(const std::string& path) {
  std::vector<LoadedScenario> out;
  if (is_jsonl(path)) {
    for (Scenario& s : synth::load_dataset(path)) out.push_back({std::move(s), nullptr});
    return out;
  }
  const nlohmann::json j = read_json(path);
  Scenario s = scenario_from_json(j);
  validate(s);
  out.push_back({std::move(s), j.value("meta", nlohmann::json())});
  return out;
}

LoadedScenario load_one(const std::string& path, int index) {
  auto all = load_scenarios(path);
  if (index < 0 || index >= static_cast<int>(all.size())) {
    throw ExitError(kExitUsage, "--index " + std::to_string(index) + " out of range for " + path + " (" +
                                    std::to_string(all.size()) + " scenarios)");
  }
  return std::move(all[index]);
}

struct Checkpoint {
  DenoiserParams params;
  PcaBasis pca;
};

// Existence only; called before any other work.
void require_checkpoint(const std::string& dir) {
  for (const char* f : {"model.json", "model.bin", "pca.json", "pca.bin"}) {
    if (!fs::exists(fs::path(dir) / f)) throw ExitError(kExitError, "checkpoint incomplete: missing " + (fs::path(dir) / f).string());
  }
}

Checkpoint load_checkpoint(const std::string& dir) {
  Checkpoint c{load_params(dir), load_pca(dir)};
  if (static_cast<int>(c.pca.k()) != c.params.config.pca_k) throw std::runtime_error("checkpoint PCA rank mismatch");
  return c;
}

std::pair<int, Vec2> parse_endpoint(const std::string& text) {
  // "x,y" for agent 0 or "i:x,y".
  int agent = 0;
  std::string xy = text;
  if (const auto colon = text.find(':'); colon != std::string::npos) {
    agent = std::stoi(text.substr(0, colon));
    xy = text.substr(colon + 1);
  }
  const auto comma = xy.find(',');
  if (comma == std::string::npos) throw std::invalid_argument("endpoint must be x,y or agent:x,y: " + text);
  const double x = std::stod(xy.substr(0, comma));
  const double y = std::stod(xy.substr(comma + 1));
  if (agent < 0) throw std::invalid_argument("endpoint agent must be >= 0");
  return {agent, {x, y}};
}

// ---- shared sampling options --------------------------------------------------------

struct SamplingOpts {
  std::uint64_t seed = 0;
  double lambda = kSceneGuidanceScale;
  std::string mode = "clean_space";
  int steps = 32;
  double history_weight = 20.0;

  void add(CLI::App* app) {
    app->add_option("--seed", seed, "Sampler seed")->capture_default_str();
    app->add_option("--lambda", lambda, "Guidance scale")->capture_default_str();
    app->add_option("--guidance-mode", mode, "clean_space | through_denoiser")
        ->check(CLI::IsMember({"clean_space", "through_denoiser"}))
        ->capture_default_str();
    app->add_option("--sampler-steps", steps, "Noise levels")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--history-weight", history_weight, "Weight of the history condition")->capture_default_str();
  }

  SimulationConfig config() const {
    SimulationConfig c;
    c.seed = seed;
    c.guidance.lambda = lambda;
    c.guidance.mode = guidance_mode_from_string(mode);
    c.schedule.steps = steps;
    c.history_weight = history_weight;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"seed", seed}, {"lambda", lambda}, {"guidance_mode", mode}, {"sampler_steps", steps},
            {"history_weight", history_weight}};
  }
};

nlohmann::json file_ref(const std::string& path) {
  // Inputs enter the hash by content so moved copies hash the same.
  return {{"fnv1a", config_hash(read_file(path))}};
}

dsl::CostProgram load_program(const std::string& spec, std::string& text) {
  if (spec.rfind("builtin:", 0) == 0) {
    const dsl::BuiltinProgram& b = dsl::builtin(spec.substr(8));
    text = b.text;
    return b.program;
  }
  text = read_file(spec);
  return dsl::parse(text);
}

// ---- synth ------------------------------------------------------------------------------

struct SynthCmd {
  std::string spec_path, out, fixture;
  std::size_t n = 100;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--spec", spec_path, "Scenario spec JSON (default mix when omitted)")->check(CLI::ExistingFile);
    app->add_option("--n", n, "Scenario count")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--seed", seed, "Base seed")->capture_default_str();
    app->add_option("--fixture", fixture, "Write one labeled fixture of this type instead of a dataset");
    app->add_option("--out", out, "Output .jsonl (dataset) or .json (fixture)")->required();
  }

  int run(std::ostream& os) const {
    if (!fixture.empty()) {
      const synth::Fixture fx = synth::gen_fixture(synth::fixture_type_from_string(fixture), seed);
      nlohmann::json meta = metadata("synth", {{"fixture", fixture}, {"seed", seed}});
      meta["fixture"] = fixture;
      meta["description"] = fx.description;
      meta["program"] = fx.program;
      write_scenario(fx.scenario, out, meta);
      os << "wrote " << fixture << " fixture to " << out << "\n";
      return kExitOk;
    }
    const synth::ScenarioSpec spec =
        spec_path.empty() ? synth::default_dataset_spec() : synth::ScenarioSpec::from_json(read_json(spec_path));
    const synth::Dataset d = synth::gen_dataset(spec, n, seed);
    const fs::path p(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    synth::save_dataset(d, spec, out, metadata("synth", {{"spec", spec.to_json()}, {"n", n}, {"seed", seed}}));
    os << "wrote " << d.scenarios.size() << " scenarios to " << out << "\n";
    return kExitOk;
  }
};

// ---- train ------------------------------------------------------------------------------

struct TrainCmd {
  std::string data, out;
  TrainConfig tc;
  DenoiserConfig dc;

  void add(CLI::App* app) {
    app->add_option("--data", data, "Training dataset (.jsonl)")->required()->check(CLI::ExistingFile);
    app->add_option("--out", out, "Checkpoint directory")->required();
    app->add_option("--steps", tc.steps, "Optimizer steps")->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_option("--lr", tc.lr, "Adam learning rate")->capture_default_str();
    app->add_option("--batch", tc.batch, "Scenes per step")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--noise-draws", tc.noise_draws, "Noise levels per scene")->capture_default_str();
    app->add_option("--p-mean", tc.p_mean, "Mean of log sigma")->capture_default_str();
    app->add_option("--p-std", tc.p_std, "Std of log sigma")->capture_default_str();
    app->add_option("--seed", tc.seed, "Training seed")->capture_default_str();
    app->add_option("--init-seed", dc.init_seed, "Parameter init seed")->capture_default_str();
    app->add_option("--d-model", dc.d_model, "Hidden width")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--layers", dc.layers, "Attention blocks")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--pca-k", dc.pca_k, "PCA rank")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--max-agents", dc.max_agents)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--max-polylines", dc.max_polylines)->check(CLI::PositiveNumber)->capture_default_str();
  }

  nlohmann::json config() const {
    return {{"data", file_ref(data)},     {"steps", tc.steps},       {"lr", tc.lr},
            {"batch", tc.batch},          {"noise_draws", tc.noise_draws}, {"p_mean", tc.p_mean},
            {"p_std", tc.p_std},          {"seed", tc.seed},         {"model", dc.to_json()}};
  }

  int run(std::ostream& os) const {
    const auto scenes = synth::load_dataset(data);
    if (scenes.empty()) throw std::runtime_error("no scenarios in " + data);
    std::vector<std::vector<double>> windows;
    for (const Scenario& s : scenes) {
      for (std::size_t a = 0; a < s.agents.size() && static_cast<int>(a) < dc.max_agents; ++a) {
        try {
          windows.push_back(agent_window(s, static_cast<int>(a)));
        } catch (const SceneError&) {
          // Tracks not covering the window do not enter the basis.
        }
      }
    }
    const PcaBasis pca = fit_pca(windows, static_cast<std::size_t>(dc.pca_k));
    std::vector<TrainingExample> examples;
    examples.reserve(scenes.size());
    for (const Scenario& s : scenes) examples.push_back(make_training_example(pca, s, dc));

    const nlohmann::json meta = metadata("train", config());
    os << "training on " << examples.size() << " scenes, " << windows.size() << " windows, config "
       << meta.at("config_hash").get<std::string>() << "\n";
    double acc = 0.0;
    const int every = std::max(1, tc.steps / 20);
    const TrainResult r = train(examples, init_params(dc), tc, [&](int step, double l) {
      acc += l;
      if (step % every == 0) {
        os << "step " << step << " loss " << acc / every << "\n";
        acc = 0.0;
      }
    });
    fs::create_directories(out);
    save_params(r.params, out, meta);
    save_pca(pca, out);
    std::ostringstream csv;
    csv << "# trajguide train config_hash=" << meta.at("config_hash").get<std::string>() << "\n";
    csv << "step,loss\n";
    csv << std::setprecision(9);
    for (std::size_t i = 0; i < r.loss.size(); ++i) csv << i + 1 << ',' << r.loss[i] << '\n';
    write_file((fs::path(out) / "loss.csv").string(), csv.str());
    os << "wrote checkpoint to " << out << "\n";
    return kExitOk;
  }
};

// ---- simulate ---------------------------------------------------------------------------

struct SimulateCmd {
  std::string ckpt, scenario, out, dsl_spec;
  int index = 0, count = 1;
  bool history_cond = false, closed_loop = false;
  std::vector<std::string> endpoints;
  double endpoint_weight = 1.0;
  int replan_steps = 5;
  SamplingOpts sampling;

  void add(CLI::App* app) {
    app->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
    app->add_option("--scenario", scenario, "Scenario .json or dataset .jsonl")->required()->check(CLI::ExistingFile);
    app->add_option("--index", index, "First scenario of a dataset")->capture_default_str();
    app->add_option("--count", count, "Scenarios to simulate from a dataset (directory output when > 1)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app->add_flag("--history-cond", history_cond, "Condition on the 11-step history");
    app->add_option("--endpoint", endpoints, "Final position: x,y (agent 0) or agent:x,y; repeatable");
    app->add_option("--endpoint-weight", endpoint_weight)->capture_default_str();
    app->add_flag("--closed-loop", closed_loop, "Replan every --replan-steps");
    app->add_option("--replan-steps", replan_steps)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--dsl", dsl_spec, "Guidance program file or builtin:NAME");
    app->add_option("--out", out, "Output scenario JSON (directory when --count > 1)")->required();
    sampling.add(app);
  }

  nlohmann::json config() const {
    nlohmann::json c = sampling.to_json();
    c["checkpoint"] = file_ref((fs::path(ckpt) / "model.bin").string());
    c["scenario"] = file_ref(scenario);
    c["index"] = index;
    c["count"] = count;
    c["history_cond"] = history_cond;
    c["endpoints"] = endpoints;
    c["endpoint_weight"] = endpoint_weight;
    c["closed_loop"] = closed_loop;
    c["replan_steps"] = replan_steps;
    c["dsl"] = dsl_spec.empty() ? nlohmann::json() : nlohmann::json(dsl_spec);
    if (!dsl_spec.empty() && dsl_spec.rfind("builtin:", 0) != 0) c["dsl_file"] = file_ref(dsl_spec);
    return c;
  }

  int run(std::ostream& os) const {
    require_checkpoint(ckpt);
    std::map<int, Vec2> ends;
    for (const std::string& e : endpoints) {
      try {
        ends.insert_or_assign(parse_endpoint(e).first, parse_endpoint(e).second);
      } catch (const std::exception& ex) {
        throw ExitError(kExitUsage, std::string("--endpoint: ") + ex.what());
      }
    }
    std::optional<dsl::CostProgram> program;
    std::string text;
    if (!dsl_spec.empty()) program = load_program(dsl_spec, text);

    auto scenes = load_scenarios(scenario);
    if (index < 0 || index + count > static_cast<int>(scenes.size())) {
      throw ExitError(kExitUsage, "--index/--count exceed the " + std::to_string(scenes.size()) + " scenarios in " + scenario);
    }
    const Checkpoint ck = load_checkpoint(ckpt);
    const nlohmann::json meta0 = metadata("simulate", config());
    if (count > 1) fs::create_directories(out);

    for (int i = index; i < index + count; ++i) {
      const Scenario& s = scenes[i].scenario;
      if (program) dsl::validate(*program, static_cast<int>(s.agents.size()));
      SimulationConfig sc = sampling.config();
      if (count > 1) sc.seed = synth::scenario_seed(sampling.seed, static_cast<std::size_t>(i));
      sc.history_condition = history_cond;
      sc.endpoints = ends;
      sc.endpoint_weight = endpoint_weight;
      for (const auto& [a, _] : ends) {
        if (a >= static_cast<int>(s.agents.size())) throw ExitError(kExitUsage, "--endpoint agent out of range");
      }

      nlohmann::json meta = meta0;
      meta["index"] = i;
      Scenario result;
      SampleStats stats;
      if (closed_loop) {
        RolloutConfig rc;
        rc.sim = sc;
        rc.replan_steps = replan_steps;
        const RolloutResult r = closed_loop_rollout(ck.params, ck.pca, s, rc, program);
        result = r.scenario;
        std::size_t viol = 0;
        for (const SampleStats& p : r.plans) viol += p.clamp_violations;
        meta["plans"] = r.plans.size();
        meta["max_splice_jump"] = r.max_splice_jump;
        meta["clamp_violations"] = viol;
      } else {
        const SimulationResult r = simulate(ck.params, ck.pca, s, sc, program);
        result = r.scenario;
        meta["history_error"] = r.history_error;
        meta["clamp_violations"] = r.stats.clamp_violations;
        meta["clamped_components"] = r.stats.clamped_components;
      }
      if (program) {
        meta["dsl"] = dsl::print(*program);
      }
      char name[32];
      std::snprintf(name, sizeof name, "sim_%05d.json", i);
      const std::string path = count > 1 ? (fs::path(out) / name).string() : out;
      write_scenario(result, path, meta);
      os << "wrote " << path << "\n";
    }
    return kExitOk;
  }
};

// ---- guide ------------------------------------------------------------------------------

struct GuideCmd {
  std::string ckpt, scenario, out, log, dsl_spec, describe, mock, check, replay_out;
  int index = 0;
  bool live = false;
  int max_iters = 3;
  std::string llm_url, llm_model;
  SamplingOpts sampling;

  void add(CLI::App* app) {
    app->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
    app->add_option("--scenario", scenario, "Scenario .json or dataset .jsonl")->required()->check(CLI::ExistingFile);
    app->add_option("--index", index, "Scenario of a dataset")->capture_default_str();
    auto* d = app->add_option("--dsl", dsl_spec, "Guidance program file or builtin:NAME");
    auto* t = app->add_option("--describe", describe, "Scene description for the language model");
    d->excludes(t);
    auto* m = app->add_option("--mock", mock, "Scripted chat responses (YAML)")->check(CLI::ExistingFile);
    auto* l = app->add_flag("--live", live, "Use the HTTP chat endpoint");
    m->excludes(l);
    m->needs(t);
    l->needs(t);
    app->add_option("--max-iters", max_iters, "Refinement iterations")->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_option("--check", check, "Success checker: cut_in | out_of_road | yield | rightmost");
    app->add_option("--llm-url", llm_url, "Chat completion URL (env TRAJGUIDE_LLM_ENDPOINT)");
    app->add_option("--llm-model", llm_model, "Model name (env TRAJGUIDE_LLM_MODEL)");
    app->add_option("--out", out, "Final scenario JSON");
    app->add_option("--log", log, "Session log JSON");
    app->add_option("--replay-out", replay_out, "Write a mock script reproducing this session");
    sampling.add(app);
  }

  nlohmann::json config() const {
    nlohmann::json c = sampling.to_json();
    c["checkpoint"] = file_ref((fs::path(ckpt) / "model.bin").string());
    c["scenario"] = file_ref(scenario);
    c["index"] = index;
    c["max_iters"] = max_iters;
    c["check"] = check;
    if (!dsl_spec.empty()) {
      c["dsl"] = dsl_spec;
      if (dsl_spec.rfind("builtin:", 0) != 0) c["dsl_file"] = file_ref(dsl_spec);
    } else {
      c["describe"] = describe;
      if (!mock.empty()) c["mock"] = file_ref(mock);
      if (live) c["live"] = {{"url", llm_url}, {"model", llm_model}};
    }
    return c;
  }

  int run(std::ostream& os) {
    require_checkpoint(ckpt);
    if (dsl_spec.empty() && describe.empty()) throw ExitError(kExitUsage, "guide needs --dsl or --describe");
    if (!describe.empty() && mock.empty() && !live) throw ExitError(kExitUsage, "--describe needs --mock or --live");
    if (live) {
      if (llm_url.empty()) llm_url = std::getenv("TRAJGUIDE_LLM_ENDPOINT") ? std::getenv("TRAJGUIDE_LLM_ENDPOINT") : "";
      if (llm_model.empty()) llm_model = std::getenv("TRAJGUIDE_LLM_MODEL") ? std::getenv("TRAJGUIDE_LLM_MODEL") : "";
    }

    const LoadedScenario ls = load_one(scenario, index);
    std::string type = check;
    if (type.empty() && ls.meta.is_object() && ls.meta.contains("fixture")) type = ls.meta.at("fixture");
    llm::Checker checker;
    if (!type.empty()) {
      try {
        checker = llm::success_checker(type);
      } catch (const std::invalid_argument& e) {
        throw ExitError(kExitUsage, std::string("--check: ") + e.what());
      }
    }

    const Checkpoint ck = load_checkpoint(ckpt);
    const llm::Sampler sampler = llm::make_sampler(ck.params, ck.pca, ls.scenario, sampling.config());
    nlohmann::json meta = metadata("guide", config());
    nlohmann::json logj;
    std::optional<Scenario> final_scene;
    bool success = false;

    if (!dsl_spec.empty()) {
      std::string text;
      const dsl::CostProgram program = load_program(dsl_spec, text);
      dsl::validate(program, static_cast<int>(ls.scenario.agents.size()));
      dsl::resolve_refpaths(program, ls.scenario);
      const llm::SampleOutcome o = sampler(program);
      final_scene = o.scenario;
      llm::Verdict v{true, "no checker"};
      if (checker) v = checker(o.scenario);
      success = v.success;
      nlohmann::json terms = nlohmann::json::array();
      for (const dsl::TermValue& t : o.final_cost.terms) {
        terms.push_back({{"name", t.name}, {"weight", t.weight}, {"value", t.value}});
      }
      logj = {{"mode", "dsl"},
              {"program", dsl::print(program)},
              {"final_cost", {{"total", o.final_cost.total}, {"terms", terms}}},
              {"verdict", {{"success", v.success}, {"reason", v.reason}}},
              {"clamp_violations", o.stats.clamp_violations},
              {"success", success}};
    } else {
      if (!checker) throw ExitError(kExitUsage, "--describe needs --check (or a fixture scenario carrying its type)");
      std::unique_ptr<llm::ChatClient> client;
      if (live) {
        llm::ChatClientConfig cc;
        if (!llm_url.empty()) cc.endpoint = llm_url;
        if (!llm_model.empty()) cc.model = llm_model;
        cc.validate();
        client = std::make_unique<llm::HttpChatClient>(cc);
      } else {
        client = std::make_unique<llm::MockChatClient>(llm::MockChatClient::from_file(mock));
      }
      llm::SessionConfig scfg;
      scfg.max_iters = max_iters;
      const llm::GuidanceSession session = llm::run_session(describe, ls.scenario, sampler, checker, *client, scfg);
      logj = session.to_json();
      logj["mode"] = live ? "live" : "mock";
      if (const llm::Iteration* it = session.last_sampled(); it && it->result) final_scene = *it->result;
      if (!replay_out.empty()) write_file(replay_out, llm::replay_script(session));
      if (session.aborted) {
        logj["meta"] = meta;
        if (!log.empty()) write_file(log, logj.dump(2) + "\n");
        throw ExitError(kExitError, "session aborted: " + session.abort_reason);
      }
      success = max_iters == 0 ? (session.trace && session.trace->ok) : session.success;
      os << "session: " << session.iterations.size() << " iteration(s), "
         << (success ? "success" : "guidance failed") << "\n";
    }

    logj["meta"] = meta;
    if (!log.empty()) write_file(log, logj.dump(2) + "\n");
    if (!out.empty() && final_scene) write_scenario(*final_scene, out, meta);
    if (!success) {
      os << "guidance failed after " << max_iters << " iteration(s)\n";
      return kExitGuidanceFailed;
    }
    return kExitOk;
  }
};

// ---- eval -------------------------------------------------------------------------------

struct EvalCmd {
  std::string real, sim, report;

  void add(CLI::App* app) {
    app->add_option("--real", real, "Reference dataset (.jsonl)")->required()->check(CLI::ExistingFile);
    app->add_option("--sim", sim, "Directory of simulated scenario JSONs or a .jsonl")->required()->check(CLI::ExistingPath);
    app->add_option("--report", report, "Metric report JSON")->required();
  }

  int run(std::ostream& os) const {
    const std::vector<Scenario> reals = synth::load_dataset(real);
    std::vector<Scenario> sims, refs;
    if (fs::is_directory(sim)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(sim)) {
        if (e.path().extension() == ".json") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (std::size_t k = 0; k < files.size(); ++k) {
        const nlohmann::json j = read_json(files[k].string());
        // Simulated files name their source scenario; otherwise pair by order.
        std::size_t i = k;
        if (j.contains("meta") && j["meta"].contains("index")) i = j["meta"]["index"].get<std::size_t>();
        if (i >= reals.size()) throw std::runtime_error(files[k].string() + " has no reference scenario");
        sims.push_back(scenario_from_json(j));
        refs.push_back(reals[i]);
      }
    } else {
      sims = synth::load_dataset(sim);
      if (sims.size() > reals.size()) throw std::runtime_error("more simulated than reference scenarios");
      refs.assign(reals.begin(), reals.begin() + static_cast<std::ptrdiff_t>(sims.size()));
    }
    if (sims.empty()) throw std::runtime_error("no simulated scenarios in " + sim);
    const metrics::MetricReport r = metrics::evaluate(refs, sims);
    nlohmann::json j = r.to_json();
    j["scenes"] = sims.size();
    j["meta"] = metadata("eval", {{"real", file_ref(real)}, {"sim_count", sims.size()}});
    write_file(report, j.dump(2) + "\n");
    os << r.to_json().dump() << "\n";
    return kExitOk;
  }
};

// ---- render -----------------------------------------------------------------------------

struct RenderCmd {
  std::string scenario, out;
  int index = 0;
  RenderOptions opt;
  bool no_traj = false;

  void add(CLI::App* app) {
    app->add_option("--scenario", scenario, "Scenario .json or dataset .jsonl")->required()->check(CLI::ExistingFile);
    app->add_option("--index", index, "Scenario of a dataset")->capture_default_str();
    app->add_option("--out", out, "Output SVG")->required();
    app->add_option("--scale", opt.scale, "Pixels per metre")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_flag("--no-trajectories", no_traj, "Boxes and lanes only");
  }

  int run(std::ostream& os) {
    opt.trajectories = !no_traj;
    const LoadedScenario ls = load_one(scenario, index);
    const nlohmann::json meta =
        metadata("render", {{"scenario", file_ref(scenario)}, {"index", index}, {"scale", opt.scale},
                            {"trajectories", opt.trajectories}});
    write_file(out, render_svg(ls.scenario, opt,
                               "trajguide render config_hash=" + meta.at("config_hash").get<std::string>()));
    os << "wrote " << out << "\n";
    return kExitOk;
  }
};

}  // namespace

std::map<std::string, std::string> parse_flat_config(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  for (int no = 1; std::getline(in, line); ++no) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(no) + ": expected key = value");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.rfind("--", 0) == 0) key.erase(0, 2);
    if (key.empty() || key.find_first_of(" \t") != std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(no) + ": bad key '" + key + "'");
    }
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (!kv.emplace(key, value).second) {
      throw std::invalid_argument("config line " + std::to_string(no) + ": duplicate key '" + key + "'");
    }
  }
  return kv;
}

std::vector<std::string> apply_config_file(const std::vector<std::string>& args) {
  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw std::invalid_argument("--config needs a file");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (path.empty()) return args;
  const auto kv = parse_flat_config(read_file(path));
  std::vector<std::string> merged;
  std::size_t sub = 0;
  // The subcommand is the first token that is not an option.
  while (sub < rest.size() && rest[sub].rfind("-", 0) == 0) ++sub;
  merged.insert(merged.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(std::min(sub + 1, rest.size())));
  for (const auto& [k, v] : kv) {
    const std::string flag = "--" + k;
    const bool given = std::any_of(rest.begin(), rest.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
    if (!given) merged.push_back(flag + "=" + v);
  }
  if (sub + 1 < rest.size()) merged.insert(merged.end(), rest.begin() + static_cast<std::ptrdiff_t>(sub + 1), rest.end());
  return merged;
}

std::string config_hash(const nlohmann::json& config) {
  const std::string text = config.is_string() ? config.get<std::string>() : config.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json metadata(std::string_view command, const nlohmann::json& config) {
  return {{"tool", "trajguide"},
          {"version", kVersion},
          {"command", std::string(command)},
          {"config_hash", config_hash(config)},
          {"config", config}};
}

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Guided diffusion traffic scenario generation", "trajguide"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  app.footer("Every command also accepts --config FILE (flat key = value; flags take precedence).");

  SynthCmd synth_cmd;
  TrainCmd train_cmd;
  SimulateCmd sim_cmd;
  GuideCmd guide_cmd;
  EvalCmd eval_cmd;
  RenderCmd render_cmd;
  auto* synth_app = app.add_subcommand("synth", "Generate a dataset or a labeled fixture");
  auto* train_app = app.add_subcommand("train", "Fit PCA and train the denoiser");
  auto* sim_app = app.add_subcommand("simulate", "Sample futures for a scenario");
  auto* guide_app = app.add_subcommand("guide", "Guided generation from a program or a description");
  auto* eval_app = app.add_subcommand("eval", "Realism and safety metrics");
  auto* render_app = app.add_subcommand("render", "Draw a scenario as SVG");
  synth_cmd.add(synth_app);
  train_cmd.add(train_app);
  sim_cmd.add(sim_app);
  guide_cmd.add(guide_app);
  eval_cmd.add(eval_app);
  render_cmd.add(render_app);
  for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; })) {
    sub->add_option("--config", "Flat key = value file");  // consumed by apply_config_file
  }

  try {
    std::vector<std::string> args;
    try {
      args = apply_config_file(raw_args);
    } catch (const std::invalid_argument& e) {
      err << "error: " << e.what() << "\n";
      return kExitUsage;
    }
    std::reverse(args.begin(), args.end());
    try {
      app.parse(args);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? kExitOk : kExitUsage;
    }
    if (synth_app->parsed()) return synth_cmd.run(out);
    if (train_app->parsed()) return train_cmd.run(out);
    if (sim_app->parsed()) return sim_cmd.run(out);
    if (guide_app->parsed()) return guide_cmd.run(out);
    if (eval_app->parsed()) return eval_cmd.run(out);
    if (render_app->parsed()) return render_cmd.run(out);
    return kExitUsage;
  } catch (const ExitError& e) {
    err << "error: " << e.what() << "\n";
    return e.code;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace trajguide::cli
