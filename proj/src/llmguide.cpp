#include "trajguide/llmguide.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "httplib.h"

namespace trajguide::llm {

namespace {

std::string fixed(double v, int decimals = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s == "-0.00") s = "0.00";
  return s;
}

std::string short_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

double step_speed(const AgentTrack& a, std::size_t t, double dt) {
  if (t == 0 || t >= a.states.size()) return 0.0;
  return norm(a.states[t].position() - a.states[t - 1].position()) / dt;
}

nlohmann::json messages_json(const Messages& m) {
  nlohmann::json out = nlohmann::json::array();
  for (const ChatMessage& c : m) out.push_back({{"role", c.role}, {"content", c.content}});
  return out;
}

}  // namespace

// ---- hashing and clients ---------------------------------------------------------

std::string prompt_hash(const Messages& messages) {
  std::uint64_t h = 14695981039346656037ull;
  auto feed = [&](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
  };
  for (const ChatMessage& m : messages) {
    feed(m.role);
    feed("\n");
    feed(m.content);
    feed("\n");
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void ChatClientConfig::validate() const {
  if (endpoint.empty()) throw std::invalid_argument("chat client: endpoint is empty");
  if (endpoint.rfind("http://", 0) != 0 && endpoint.rfind("https://", 0) != 0) {
    throw std::invalid_argument("chat client: endpoint must start with http:// or https://");
  }
  if (model.empty()) throw std::invalid_argument("chat client: model is empty");
  if (!(temperature >= 0.0 && temperature <= 2.0)) throw std::invalid_argument("chat client: temperature outside [0, 2]");
  if (max_tokens < 1) throw std::invalid_argument("chat client: max_tokens must be positive");
  if (api_key_env.empty()) throw std::invalid_argument("chat client: api_key_env is empty");
  if (!(timeout_s > 0.0)) throw std::invalid_argument("chat client: timeout must be positive");
}

HttpChatClient::HttpChatClient(ChatClientConfig config) : config_(std::move(config)) {
  config_.validate();
  const char* key = std::getenv(config_.api_key_env.c_str());
  if (!key || !*key) throw std::invalid_argument("environment variable " + config_.api_key_env + " is not set");
  key_ = key;
}

nlohmann::json HttpChatClient::request_body(const ChatClientConfig& config, const Messages& messages) {
  return {{"model", config.model},
          {"messages", messages_json(messages)},
          {"temperature", config.temperature},
          {"max_tokens", config.max_tokens}};
}

std::string HttpChatClient::parse_reply(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("malformed chat completion reply: ") + e.what());
  }
}

std::string HttpChatClient::complete(const Messages& messages) {
  const std::string& url = config_.endpoint;
  const auto scheme_end = url.find("://") + 3;
  const auto path_start = url.find('/', scheme_end);
  const std::string origin = url.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);
  httplib::Client cli(origin);
  const auto secs = static_cast<time_t>(config_.timeout_s);
  cli.set_connection_timeout(secs, 0);
  cli.set_read_timeout(secs, 0);
  cli.set_write_timeout(secs, 0);
  const httplib::Headers headers{{"Authorization", "Bearer " + key_}};
  auto res = cli.Post(path, headers, request_body(config_, messages).dump(), "application/json");
  if (!res) throw TransportError("chat request failed: " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300) {
    throw TransportError("chat request returned HTTP " + std::to_string(res->status));
  }
  return parse_reply(res->body);
}

MockChatClient::MockChatClient(std::map<std::string, std::vector<std::string>> script) : script_(std::move(script)) {
  for (const auto& [prefix, responses] : script_) {
    if (prefix.size() > 16 || prefix.find_first_not_of("0123456789abcdef") != std::string::npos) {
      throw std::invalid_argument("mock script key '" + prefix + "' is not a lowercase hex hash prefix");
    }
    if (responses.empty()) throw std::invalid_argument("mock script key '" + prefix + "' has no responses");
  }
}

MockChatClient MockChatClient::from_yaml(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw std::invalid_argument(std::string("mock script: ") + e.what());
  }
  if (!root.IsMap()) throw std::invalid_argument("mock script must be a mapping of hash prefix to response");
  std::map<std::string, std::vector<std::string>> script;
  for (const auto& kv : root) {
    const std::string key = kv.first.IsNull() ? std::string() : kv.first.as<std::string>();
    std::vector<std::string>& out = script[key];
    if (kv.second.IsSequence()) {
      for (const auto& r : kv.second) out.push_back(r.as<std::string>());
    } else if (kv.second.IsScalar()) {
      out.push_back(kv.second.as<std::string>());
    } else {
      throw std::invalid_argument("mock script key '" + key + "': expected a string or a list of strings");
    }
  }
  return MockChatClient(std::move(script));
}

MockChatClient MockChatClient::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open mock script " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_yaml(ss.str());
}

std::string MockChatClient::complete(const Messages& messages) {
  ++calls_;
  const std::string h = prompt_hash(messages);
  const std::string* best = nullptr;
  for (const auto& [prefix, responses] : script_) {
    if (h.rfind(prefix, 0) == 0 && (!best || prefix.size() > best->size())) best = &prefix;
  }
  if (!best) throw TransportError("mock script has no response for prompt hash " + h);
  const std::vector<std::string>& r = script_.at(*best);
  std::size_t& c = cursor_[*best];
  const std::string& out = r[std::min(c, r.size() - 1)];
  ++c;
  return out;
}

// ---- understanding ---------------------------------------------------------------

std::string scenario_summary(const Scenario& s, int max_agents) {
  std::ostringstream o;
  const int n = std::min<int>(static_cast<int>(s.agents.size()), max_agents);
  o << "Agents at the current time (global frame, metres, m/s):\n";
  for (int i = 0; i < n; ++i) {
    const AgentTrack& a = s.agents[i];
    const AgentState& st = a.states.at(s.t_now);
    const auto lane = current_lane_at(s, i, s.t_now);
    o << "  a" << i << " (vehicle " << i + 1 << ", id " << a.agent_id << "): x " << fixed(st.x) << ", y " << fixed(st.y)
      << ", heading " << fixed(st.heading) << " rad, speed " << fixed(step_speed(a, s.t_now, s.dt)) << ", lane "
      << (lane ? std::to_string(*lane) : std::string("none")) << "\n";
  }
  o << "Lanes:\n";
  for (const MapPolyline& p : s.polylines) {
    o << "  lane " << p.id << " (" << to_string(p.lane_type) << ", " << fixed(p.length(), 1) << " m)";
    for (Relation r : {Relation::left_neighbor, Relation::right_neighbor, Relation::successor}) {
      const std::vector<int> ids = s.graph.related(p.id, r);
      if (ids.empty()) continue;
      std::vector<std::string> parts;
      for (int id : ids) parts.push_back(std::to_string(id));
      o << ", " << to_string(r) << " " << join(parts, "/");
    }
    o << "\n";
  }
  return o.str();
}

namespace {

std::string grammar_reference() {
  return R"(Cost program language (s-expressions, minimised by the trajectory sampler):
  program := (decl | term)+
  decl    := (refpath NAME (QUERY aN)) | (refpath NAME (QUERY LANE_ID))
  term    := (term NAME WEIGHT expr)
  QUERY   := current_lane | left_lane | right_lane | rightmost_lane | leftmost_lane
             | successor_chain | road_edge_left | road_edge_right
Agents are a0, a1, ... (a0 is vehicle 1). Accessors give a series over the 8 s plan
(81 rows at 0.1 s, row 0 is now):
  (x aN) (y aN) (heading aN) (speed aN) (accel aN)
  (s aN PATH)  arc length along a declared refpath
  (d aN PATH)  signed lateral offset from the refpath, left positive
  (dist aN aM) centre distance      (sin_t w) sin(w * t)
Unary: neg abs sq sqrt relu sin cos exp ddt (time derivative)
Binary: add sub mul div min max      Bounded: (clamp e lo hi)
Reductions: mean_t sum_t min_t max_t (at_t k e); k < 0 counts from the end.
Every path from a term to an accessor passes exactly one reduction.
Lane widths are 3.7 m; vehicles are 4.8 m x 2.0 m.
Example:
  (refpath lane (current_lane a1))
  (term merge 1.0 (at_t -1 (sq (d a0 lane))))
)";
}

std::string fence(const std::string& dsl) { return "```dsl\n" + dsl + (dsl.ends_with('\n') ? "" : "\n") + "```\n"; }

}  // namespace

Messages build_understanding_prompt(const std::string& description, const std::string& summary) {
  std::string sys =
      "You turn driving-scene descriptions into cost programs that steer a trajectory sampler.\n\n" +
      grammar_reference() +
      "\nWork through these steps in order and write each answer on its own line:\n"
      "1. Identify the events in the description.\n"
      "2. Split multiple events apart and handle each one separately: \"event N: <text>\".\n"
      "3. Count the agents each event involves: \"agents N: a0 a1\".\n"
      "4. State each agent's behavior: \"behavior aK: <text>\".\n"
      "5. Decide whether the behavior is map related: \"map aK: yes|no\".\n"
      "6. Plan the lane queries you need: \"query: (current_lane a1)\".\n"
      "7. Emit the final cost program in one fenced ```dsl block.\n\n"
      "Map-related behaviors (lanes, lane changes, road edges, merging) should use Frenet accessors (s, d) "
      "along refpaths from lane queries rather than raw x/y coordinates. The last fenced block in your "
      "reply is taken as the program.\n";
  std::string user = "Description: " + description + "\n\n" + summary;
  return {{"system", std::move(sys)}, {"user", std::move(user)}};
}

nlohmann::json UnderstandingTrace::to_json() const {
  nlohmann::json ea = nlohmann::json::object();
  for (const auto& [e, ags] : event_agents) ea[std::to_string(e)] = ags;
  nlohmann::json beh = nlohmann::json::object();
  for (const auto& [a, b] : behaviors) beh["a" + std::to_string(a)] = b;
  nlohmann::json mr = nlohmann::json::object();
  for (const auto& [a, b] : map_related) mr["a" + std::to_string(a)] = b;
  return {{"events", events}, {"event_agents", ea},  {"behaviors", beh}, {"map_related", mr},
          {"lane_queries", lane_queries}, {"dsl", dsl_text}, {"ok", ok}, {"error", error}};
}

namespace {

std::optional<int> agent_token(std::string_view t) {
  if (t.size() < 2 || t[0] != 'a') return std::nullopt;
  int v = 0;
  for (char c : t.substr(1)) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
    v = v * 10 + (c - '0');
    if (v > 1000) return std::nullopt;
  }
  return v;
}

// "key N: rest" with key matched case-insensitively after optional list markers.
bool field(const std::string& line, std::string_view key, std::string& arg, std::string& rest) {
  std::string l = lower(line);
  std::size_t i = l.find_first_not_of(" \t-*0123456789.)");
  if (i == std::string::npos || l.compare(i, key.size(), key) != 0) return false;
  const std::size_t colon = line.find(':', i + key.size());
  if (colon == std::string::npos) return false;
  arg = trim(std::string_view(line).substr(i + key.size(), colon - i - key.size()));
  rest = trim(std::string_view(line).substr(colon + 1));
  return true;
}

}  // namespace

UnderstandingTrace parse_response(const std::string& text, int num_agents) {
  UnderstandingTrace tr;
  std::istringstream in(text);
  std::string line;
  bool in_block = false;
  std::string block;
  std::optional<std::string> last_block;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.rfind("```", 0) == 0) {
      if (in_block) {
        last_block = block;
        in_block = false;
      } else {
        in_block = true;
        block.clear();
      }
      continue;
    }
    if (in_block) {
      block += line + "\n";
      continue;
    }
    std::string arg, rest;
    if (field(t, "event", arg, rest) && !arg.empty() && std::all_of(arg.begin(), arg.end(), ::isdigit)) {
      tr.events.push_back(rest);
    } else if (field(t, "agents", arg, rest) && !arg.empty() && std::all_of(arg.begin(), arg.end(), ::isdigit)) {
      std::istringstream ws(rest);
      std::string w;
      std::vector<int>& out = tr.event_agents[std::stoi(arg)];
      while (ws >> w) {
        while (!w.empty() && (w.back() == ',' || w.back() == ';')) w.pop_back();
        if (auto a = agent_token(w)) out.push_back(*a);
      }
    } else if (field(t, "behavior", arg, rest)) {
      if (auto a = agent_token(arg)) tr.behaviors[*a] = rest;
    } else if (field(t, "map", arg, rest)) {
      if (auto a = agent_token(arg)) tr.map_related[*a] = lower(rest).rfind("yes", 0) == 0;
    } else if (field(t, "query", arg, rest) && arg.empty()) {
      tr.lane_queries.push_back(rest);
    }
  }
  if (!last_block) {
    tr.error = "no fenced program block in the reply";
    return tr;
  }
  tr.dsl_text = *last_block;
  try {
    dsl::CostProgram p = dsl::parse(tr.dsl_text);
    if (num_agents >= 0) dsl::validate(p, num_agents);
    tr.program = std::move(p);
    tr.ok = true;
  } catch (const dsl::DslError& e) {
    tr.error = std::to_string(e.loc().line) + ":" + std::to_string(e.loc().column) + ": " + e.message();
  }
  return tr;
}

// ---- refinement ------------------------------------------------------------------

RefinementInput make_refinement_input(const Scenario& result, const dsl::CostProgram& program,
                                      const std::vector<StepRecord>& steps, const dsl::CostValue& final_cost,
                                      const Verdict& verdict) {
  RefinementInput in;
  in.verdict = verdict;
  const int n_agents = static_cast<int>(result.agents.size());
  const int shown = std::min(n_agents, std::max(program.max_agent() + 1, 2));
  const int per_second = static_cast<int>(std::lround(1.0 / result.dt));
  for (int t = result.t_now; t < result.steps(); t += per_second) {
    for (int a = 0; a < shown; ++a) {
      const AgentTrack& tr = result.agents[a];
      if (t >= static_cast<int>(tr.states.size())) continue;
      const AgentState& st = tr.states[t];
      in.table.push_back({(t - result.t_now) * result.dt, a, st.x, st.y, step_speed(tr, t, result.dt)});
    }
  }
  for (const dsl::Term& term : program.terms) {
    TermHistory h;
    h.name = term.name;
    h.weight = term.weight;
    std::vector<double> all;
    for (const StepRecord& s : steps) {
      for (const dsl::TermValue& v : s.terms) {
        if (v.name == term.name) all.push_back(v.value);
      }
    }
    constexpr std::size_t kMaxValues = 8;
    if (all.size() <= kMaxValues) {
      h.values = all;
    } else {
      for (std::size_t j = 0; j < kMaxValues; ++j) h.values.push_back(all[j * (all.size() - 1) / (kMaxValues - 1)]);
    }
    for (const dsl::TermValue& v : final_cost.terms) {
      if (v.name == term.name) h.final_value = v.value;
    }
    in.terms.push_back(std::move(h));
  }
  return in;
}

const Iteration* GuidanceSession::last_sampled() const {
  for (auto it = iterations.rbegin(); it != iterations.rend(); ++it) {
    if (it->input) return &*it;
  }
  return nullptr;
}

Messages build_refinement_prompt(const GuidanceSession& session, const RefinementInput& input) {
  const Iteration* prior = session.last_sampled();
  if (!prior) throw std::invalid_argument("refinement prompt needs a sampled iteration");
  std::string sys =
      "You revise cost programs that steer a trajectory sampler, using the trajectories it produced.\n\n" +
      grammar_reference() +
      "\nJudge (a) whether the sampled trajectories match the description, (b) whether each cost function "
      "encodes the intended behavior correctly, and (c) whether each term weight is appropriate. Then emit "
      "the revised program in one fenced ```dsl block; the last fenced block in your reply is used.\n";
  std::ostringstream u;
  u << "Description: " << session.description << "\n\n" << session.summary << "\n";
  u << "Program used in round " << session.iterations.size() << ":\n" << fence(prior->dsl_text) << "\n";
  u << "Success check: " << (input.verdict.success ? "PASSED" : "FAILED");
  if (!input.verdict.reason.empty()) u << " (" << input.verdict.reason << ")";
  u << "\n\nSampled trajectories at 1 Hz (t [s], agent, x [m], y [m], speed [m/s]):\n";
  for (const CoordinateRow& r : input.table) {
    u << fixed(r.t) << " a" << r.agent << " " << fixed(r.x) << " " << fixed(r.y) << " " << fixed(r.speed) << "\n";
  }
  u << "\nCost terms: unweighted value while sampling (high to low noise) -> value on the final trajectory:\n";
  bool all_small = true;
  for (const TermHistory& h : input.terms) {
    std::vector<std::string> vs;
    for (double v : h.values) vs.push_back(short_double(v));
    u << h.name << " (weight " << short_double(h.weight) << "): " << join(vs, ", ") << " -> "
      << short_double(h.final_value) << "\n";
    all_small = all_small && h.weight * h.final_value < kNearZeroCost;
  }
  if (all_small && !input.verdict.success) {
    u << "\nNote: every cost term is close to zero on the final trajectory, yet the success check failed. "
         "The program is satisfied without producing the described behavior, so the cost functions "
         "themselves (not only the weights) need to change.\n";
  }
  return {{"system", std::move(sys)}, {"user", u.str()}};
}

// ---- success checks --------------------------------------------------------------

namespace {

std::optional<Verdict> need_agents(const Scenario& s, int n) {
  if (static_cast<int>(s.agents.size()) < n) return Verdict{false, "needs " + std::to_string(n) + " agents"};
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(s.agents[i].states.size()) <= s.t_now + 1) return Verdict{false, "no future states"};
  }
  return std::nullopt;
}

int last_row(const Scenario& s, int a) { return static_cast<int>(s.agents[a].states.size()) - 1; }

}  // namespace

Verdict check_cut_in(const Scenario& s) {
  if (auto v = need_agents(s, 2)) return *v;
  const auto l0 = current_lane_at(s, 0, s.t_now);
  const auto l1 = current_lane_at(s, 1, s.t_now);
  if (!l0 || !l1) return {false, "an agent is off every lane at the current time"};
  if (same_corridor(s, *l0, *l1)) return {false, "a0 already shares a1's lane"};
  const int end = std::min(last_row(s, 0), last_row(s, 1));
  for (int t = s.t_now + 1; t <= end; ++t) {
    const auto c0 = current_lane_at(s, 0, t);
    const auto c1 = current_lane_at(s, 1, t);
    if (!c0 || !c1 || !same_corridor(s, *c0, *c1)) continue;
    const RefPath path = build_ref_path(corridor_points(s, *c1));
    const double gap = project(path, s.agents[0].states[t].position()).s - project(path, s.agents[1].states[t].position()).s;
    const std::string at = "gap " + fixed(gap) + " m at t = " + fixed((t - s.t_now) * s.dt) + " s";
    if (gap > 0.0 && gap < kCutInMaxGap) return {true, "merged ahead of a1, " + at};
    return {false, "merged with " + at};
  }
  return {false, "a0 never enters a1's lane"};
}

Verdict check_out_of_road(const Scenario& s) {
  if (auto v = need_agents(s, 1)) return *v;
  const auto l0 = current_lane_at(s, 0, s.t_now);
  if (!l0) return {false, "a0 is off every lane at the current time"};
  const std::vector<int> right = lane_query(s, {LaneQuery::Kind::road_edge_right, -1, *l0, 0});
  const std::vector<int> left = lane_query(s, {LaneQuery::Kind::road_edge_left, -1, *l0, 0});
  RefPath edge;
  double width = 0.0;
  if (!right.empty() && !left.empty()) {
    edge = build_ref_path(corridor_points(s, right[0]));
    const RefPath other = build_ref_path(corridor_points(s, left[0]));
    width = std::abs(project(edge, other.vertices[other.vertices.size() / 2]).d);
  } else {
    // No edge polylines: boundaries half a lane outside the outermost lanes.
    const int rm = lane_query(s, {LaneQuery::Kind::rightmost_lane, -1, *l0, 0}).at(0);
    const int lm = lane_query(s, {LaneQuery::Kind::leftmost_lane, -1, *l0, 0}).at(0);
    const RefPath rp = build_ref_path(corridor_points(s, rm));
    const RefPath lp = build_ref_path(corridor_points(s, lm));
    const double half = 0.5 * s.polyline(rm).width;
    std::vector<Vec2> shifted;
    for (std::size_t i = 0; i < rp.vertices.size(); ++i) shifted.push_back(to_cartesian(rp, {rp.cum_s[i], -half}));
    edge = build_ref_path(shifted);
    width = std::abs(project(edge, lp.vertices[lp.vertices.size() / 2]).d) + 0.5 * s.polyline(lm).width;
  }
  const double half_width = 0.5 * width;
  int run = 0, best = 0;
  for (int t = s.t_now + 1; t <= last_row(s, 0); ++t) {
    const double off_center = project(edge, s.agents[0].states[t].position()).d - half_width;
    run = std::abs(off_center) > half_width ? run + 1 : 0;
    best = std::max(best, run);
  }
  const std::string dwell = "longest off-road dwell " + fixed(best * s.dt) + " s";
  return {best >= kOffRoadDwellSteps, dwell};
}

Verdict check_yield(const Scenario& s) {
  if (auto v = need_agents(s, 2)) return *v;
  const int end = std::min(last_row(s, 0), last_row(s, 1));
  double slowest = 1e9;
  for (int t = s.t_now + 1; t <= end; ++t) {
    const double v0 = step_speed(s.agents[0], t, s.dt);
    const double v1 = step_speed(s.agents[1], t, s.dt);
    const double dist = norm(s.agents[0].states[t].position() - s.agents[1].states[t].position());
    slowest = std::min(slowest, v0);
    if (v0 < kYieldSpeed && v1 > kYieldPassSpeed && dist < kYieldRadius) {
      return {true, "a0 waits at " + fixed(v0) + " m/s while a1 passes " + fixed(dist) + " m away"};
    }
  }
  return {false, "a0 slowest speed " + fixed(slowest) + " m/s; never waited while a1 passed"};
}

Verdict check_rightmost(const Scenario& s) {
  if (auto v = need_agents(s, 1)) return *v;
  const auto lane = current_lane_at(s, 0, last_row(s, 0));
  if (!lane) return {false, "a0 ends off every lane"};
  const int rm = lane_query(s, {LaneQuery::Kind::rightmost_lane, -1, *lane, 0}).at(0);
  if (same_corridor(s, *lane, rm)) return {true, "a0 ends on lane " + std::to_string(*lane)};
  return {false, "a0 ends on lane " + std::to_string(*lane) + ", rightmost is " + std::to_string(rm)};
}

Checker success_checker(const std::string& type) {
  if (type == "cut_in") return check_cut_in;
  if (type == "out_of_road") return check_out_of_road;
  if (type == "yield") return check_yield;
  if (type == "rightmost") return check_rightmost;
  throw std::invalid_argument("no success checker for scenario type '" + type + "'");
}

// ---- session ---------------------------------------------------------------------

Sampler make_sampler(const DenoiserParams& params, const PcaBasis& pca, const Scenario& scenario,
                     SimulationConfig config) {
  config.history_condition = true;
  return [&params, &pca, scenario, config](const dsl::CostProgram& program) {
    SimulationResult r = simulate(params, pca, scenario, config, program);
    dsl::EvalContext ctx;
    ctx.dt = scenario.dt;
    ctx.refpaths = dsl::resolve_refpaths(program, scenario);
    const int t0 = r.scenario.t_now;
    for (int a = 0; a <= program.max_agent(); ++a) {
      const auto& st = r.scenario.agents.at(a).states;
      grad::Tensor pos({static_cast<std::size_t>(kFutureSteps + 1), 2});
      for (int k = 0; k <= kFutureSteps; ++k) {
        pos.at(k, 0) = st.at(t0 + k).x;
        pos.at(k, 1) = st.at(t0 + k).y;
      }
      ctx.positions.push_back(std::move(pos));
    }
    SampleOutcome out;
    out.final_cost = dsl::evaluate(program, ctx);
    out.steps = r.stats.steps;
    out.stats = std::move(r.stats);
    out.scenario = std::move(r.scenario);
    return out;
  };
}

nlohmann::json GuidanceSession::to_json() const {
  nlohmann::json its = nlohmann::json::array();
  for (const Iteration& it : iterations) {
    nlohmann::json j{{"dsl", it.dsl_text},
                     {"parse_attempts", it.parse_attempts},
                     {"verdict", {{"success", it.verdict.success}, {"reason", it.verdict.reason}}}};
    if (it.input) {
      nlohmann::json table = nlohmann::json::array();
      for (const CoordinateRow& r : it.input->table) table.push_back({r.t, r.agent, r.x, r.y, r.speed});
      nlohmann::json terms = nlohmann::json::array();
      for (const TermHistory& h : it.input->terms) {
        terms.push_back({{"name", h.name}, {"weight", h.weight}, {"values", h.values}, {"final", h.final_value}});
      }
      j["table"] = table;
      j["terms"] = terms;
    }
    if (it.result) j["scenario"] = trajguide::to_json(*it.result);
    its.push_back(std::move(j));
  }
  nlohmann::json ex = nlohmann::json::array();
  for (const Exchange& e : exchanges) {
    ex.push_back({{"phase", e.phase},
                  {"hash", e.hash},
                  {"messages", messages_json(e.messages)},
                  {"response", e.response},
                  {"error", e.error}});
  }
  return {{"description", description},
          {"summary", summary},
          {"max_iters", max_iters},
          {"understanding", trace ? trace->to_json() : nlohmann::json()},
          {"iterations", its},
          {"exchanges", ex},
          {"success", success},
          {"aborted", aborted},
          {"abort_reason", abort_reason}};
}

GuidanceSession run_session(const std::string& description, const Scenario& scenario, const Sampler& sampler,
                            const Checker& checker, ChatClient& client, const SessionConfig& cfg) {
  if (cfg.max_iters < 0 || cfg.transport_retries < 0 || cfg.parse_retries < 0) {
    throw std::invalid_argument("session: negative limit");
  }
  GuidanceSession session;
  session.description = description;
  session.summary = scenario_summary(scenario);
  session.max_iters = cfg.max_iters;
  const int n_agents = static_cast<int>(scenario.agents.size());

  auto ask = [&](const std::string& phase, const Messages& msgs) -> std::optional<std::string> {
    std::string last_error;
    for (int attempt = 0; attempt <= cfg.transport_retries; ++attempt) {
      Exchange e{phase, prompt_hash(msgs), msgs, {}, {}};
      try {
        e.response = client.complete(msgs);
        session.exchanges.push_back(e);
        return e.response;
      } catch (const TransportError& err) {
        e.error = err.what();
        last_error = err.what();
        session.exchanges.push_back(std::move(e));
      }
    }
    session.aborted = true;
    session.abort_reason = "transport: " + last_error;
    return std::nullopt;
  };

  // Asks, parses and validates, re-asking with the error on failure.
  auto obtain = [&](const std::string& phase, Messages msgs, int& attempts) -> std::optional<UnderstandingTrace> {
    UnderstandingTrace tr;
    for (int k = 0; k <= cfg.parse_retries; ++k) {
      const std::optional<std::string> reply = ask(phase, msgs);
      if (!reply) return std::nullopt;
      ++attempts;
      tr = parse_response(*reply, n_agents);
      if (tr.ok) {
        try {
          dsl::resolve_refpaths(*tr.program, scenario);
        } catch (const std::exception& e) {
          tr.ok = false;
          tr.program.reset();
          tr.error = e.what();
        }
      }
      if (tr.ok) return tr;
      session.exchanges.back().error = "rejected: " + tr.error;
      msgs.push_back({"assistant", *reply});
      msgs.push_back({"user", "The program was rejected: " + tr.error +
                                  "\nReply again with one corrected program in a fenced ```dsl block."});
    }
    return tr;
  };

  int attempts = 0;
  std::optional<UnderstandingTrace> tr =
      obtain("understanding", build_understanding_prompt(description, session.summary), attempts);
  if (!tr) return session;
  session.trace = *tr;
  if (!tr->ok || cfg.max_iters == 0) return session;

  dsl::CostProgram program = *tr->program;
  std::string text = tr->dsl_text;
  bool pending = true;
  while (static_cast<int>(session.iterations.size()) < cfg.max_iters) {
    if (pending) {
      Iteration it;
      it.dsl_text = text;
      it.program = program;
      it.parse_attempts = attempts;
      SampleOutcome out = sampler(program);
      it.verdict = checker(out.scenario);
      it.input = make_refinement_input(out.scenario, program, out.steps, out.final_cost, it.verdict);
      it.result = std::move(out.scenario);
      session.iterations.push_back(std::move(it));
      if (session.iterations.back().verdict.success) {
        session.success = true;
        break;
      }
      if (static_cast<int>(session.iterations.size()) >= cfg.max_iters) break;
    }
    attempts = 0;
    const Messages msgs = build_refinement_prompt(session, *session.last_sampled()->input);
    std::optional<UnderstandingTrace> rt = obtain("refinement", msgs, attempts);
    if (!rt) return session;
    if (rt->ok) {
      program = *rt->program;
      text = rt->dsl_text;
      pending = true;
    } else {
      Iteration failed;
      failed.dsl_text = rt->dsl_text;
      failed.parse_attempts = attempts;
      failed.verdict = {false, "refinement rejected: " + rt->error};
      session.iterations.push_back(std::move(failed));
      pending = false;
    }
  }
  return session;
}

std::string replay_script(const GuidanceSession& session) {
  std::map<std::string, std::vector<std::string>> by_hash;
  for (const Exchange& e : session.exchanges) {
    if (e.response.empty() && !e.error.empty() && e.error.rfind("rejected", 0) != 0) continue;
    by_hash[e.hash].push_back(e.response);
  }
  YAML::Emitter out;
  out << YAML::BeginMap;
  for (const auto& [h, rs] : by_hash) {
    out << YAML::Key << h << YAML::Value;
    if (rs.size() == 1) {
      out << YAML::Literal << rs[0];
    } else {
      out << YAML::BeginSeq;
      for (const std::string& r : rs) out << YAML::Literal << r;
      out << YAML::EndSeq;
    }
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace trajguide::llm
