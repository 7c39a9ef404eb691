#pragma once

// Language-model guidance loop: staged understanding prompt, cost-program
// extraction, refinement prompts fed with sampled coordinates and per-term
// costs, rule-based success checks, and chat clients (HTTP and scripted mock).

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajguide/costdsl.hpp"
#include "trajguide/diffusion.hpp"
#include "trajguide/scene.hpp"

namespace trajguide::llm {

struct ChatMessage {
  std::string role;  // system | user | assistant
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

using Messages = std::vector<ChatMessage>;

// 64-bit FNV-1a over "role\ncontent\n" of every message, as 16 hex digits.
std::string prompt_hash(const Messages& messages);

// Network failures, non-2xx replies and malformed response bodies. Retried by
// run_session.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string complete(const Messages& messages) = 0;
};

struct ChatClientConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4o";
  double temperature = 0.0;
  int max_tokens = 2048;
  std::string api_key_env = "TRAJGUIDE_API_KEY";
  double timeout_s = 120.0;

  void validate() const;  // throws std::invalid_argument
};

// OpenAI-style chat completion over HTTP(S). The key is read from the named
// environment variable at construction.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(ChatClientConfig config);
  std::string complete(const Messages& messages) override;

  static nlohmann::json request_body(const ChatClientConfig& config, const Messages& messages);
  static std::string parse_reply(const std::string& body);  // throws TransportError

 private:
  ChatClientConfig config_;
  std::string key_;
};

// Replays scripted responses. The script maps prompt-hash prefixes to a
// response or a list of responses consumed in order (the last one repeats).
// The longest matching prefix wins; "" matches every prompt.
class MockChatClient : public ChatClient {
 public:
  explicit MockChatClient(std::map<std::string, std::vector<std::string>> script);
  static MockChatClient from_yaml(const std::string& text);
  static MockChatClient from_file(const std::string& path);

  std::string complete(const Messages& messages) override;
  int calls() const { return calls_; }

 private:
  std::map<std::string, std::vector<std::string>> script_;
  std::map<std::string, std::size_t> cursor_;
  int calls_ = 0;
};

// ---- understanding ---------------------------------------------------------------

// Agent ids, poses, speeds and lane ids at t_now plus the lane list.
std::string scenario_summary(const Scenario& scenario, int max_agents = 8);

Messages build_understanding_prompt(const std::string& description, const std::string& summary);

struct UnderstandingTrace {
  std::vector<std::string> events;
  std::map<int, std::vector<int>> event_agents;  // event index -> agent indices
  std::map<int, std::string> behaviors;          // agent index -> behavior
  std::map<int, bool> map_related;
  std::vector<std::string> lane_queries;
  std::string dsl_text;
  std::optional<dsl::CostProgram> program;
  bool ok = false;
  std::string error;

  nlohmann::json to_json() const;
};

// The last fenced block is the program; CoT fields are read from
// "event N:", "agents N:", "behavior aK:", "map aK:" and "query:" lines.
// With num_agents >= 0 agent references are also validated.
UnderstandingTrace parse_response(const std::string& text, int num_agents = -1);

// ---- refinement ------------------------------------------------------------------

struct Verdict {
  bool success = false;
  std::string reason;
};

struct TermHistory {
  std::string name;
  double weight = 0.0;
  std::vector<double> values;  // unweighted, across sampler noise levels
  double final_value = 0.0;    // on the returned trajectory
};

struct CoordinateRow {
  double t = 0.0;  // seconds after t_now
  int agent = 0;
  double x = 0.0;
  double y = 0.0;
  double speed = 0.0;
};

struct RefinementInput {
  std::vector<CoordinateRow> table;
  std::vector<TermHistory> terms;
  Verdict verdict;
};

// 1 Hz rows over the future for the agents the program references (at least
// two when available); at most 8 term values per history.
RefinementInput make_refinement_input(const Scenario& result, const dsl::CostProgram& program,
                                      const std::vector<StepRecord>& steps, const dsl::CostValue& final_cost,
                                      const Verdict& verdict);

// A term counts as satisfied below this weighted value.
inline constexpr double kNearZeroCost = 1e-2;

struct SampleOutcome {
  Scenario scenario;
  std::vector<StepRecord> steps;
  dsl::CostValue final_cost;
  SampleStats stats;
};

struct Iteration {
  std::string dsl_text;
  std::optional<dsl::CostProgram> program;
  std::optional<RefinementInput> input;
  std::optional<Scenario> result;
  Verdict verdict;
  int parse_attempts = 0;
};

struct Exchange {
  std::string phase;  // understanding | refinement
  std::string hash;
  Messages messages;
  std::string response;
  std::string error;  // transport or parse failure
};

struct GuidanceSession {
  std::string description;
  std::string summary;
  int max_iters = 0;
  std::optional<UnderstandingTrace> trace;
  std::vector<Iteration> iterations;
  std::vector<Exchange> exchanges;
  bool success = false;
  bool aborted = false;
  std::string abort_reason;

  const Iteration* last_sampled() const;
  nlohmann::json to_json() const;
};

// Prior DSL, the coordinate table, per-term histories and the verdict, with a
// request to revise. Requires a sampled iteration in the session.
Messages build_refinement_prompt(const GuidanceSession& session, const RefinementInput& input);

// ---- success checks --------------------------------------------------------------

inline constexpr double kCutInMaxGap = 15.0;      // m
inline constexpr double kYieldSpeed = 1.0;        // m/s
inline constexpr double kYieldPassSpeed = 2.0;    // m/s
inline constexpr double kYieldRadius = 30.0;      // m
inline constexpr int kOffRoadDwellSteps = 10;     // 1 s

using Checker = std::function<Verdict(const Scenario&)>;

// Agent 0 acts, agent 1 is the counterpart. Types: cut_in, out_of_road,
// yield, rightmost; others throw std::invalid_argument.
Checker success_checker(const std::string& type);

Verdict check_cut_in(const Scenario& s);
Verdict check_out_of_road(const Scenario& s);
Verdict check_yield(const Scenario& s);
Verdict check_rightmost(const Scenario& s);

// ---- session ---------------------------------------------------------------------

using Sampler = std::function<SampleOutcome(const dsl::CostProgram&)>;

// simulate() with the program, history conditioning on, plus the final
// cost on the sampled future.
Sampler make_sampler(const DenoiserParams& params, const PcaBasis& pca, const Scenario& scenario,
                     SimulationConfig config);

struct SessionConfig {
  int max_iters = 3;
  int transport_retries = 3;
  int parse_retries = 2;
};

// Understanding, then up to max_iters rounds of sample, check and (after a
// failure) refine. Transport errors past the retry budget abort the session
// with the log intact.
GuidanceSession run_session(const std::string& description, const Scenario& scenario, const Sampler& sampler,
                            const Checker& checker, ChatClient& client, const SessionConfig& config);

// Mock script reproducing the session's responses, keyed by full prompt hash.
std::string replay_script(const GuidanceSession& session);

}  // namespace trajguide::llm
