#pragma once

// EDM noise schedule, denoiser training, Heun ODE sampler with clamped cost
// guidance, and open/closed-loop scenario simulation.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "trajguide/costdsl.hpp"
#include "trajguide/denoiser.hpp"
#include "trajguide/grad.hpp"
#include "trajguide/scene.hpp"

namespace trajguide {

struct NoiseSchedule {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
  int steps = 32;

  void validate() const;  // throws std::invalid_argument
  // steps noise levels from sigma_max down to sigma_min, then a trailing 0.
  std::vector<double> sigmas() const;
};

enum class GuidanceMode { clean_space, through_denoiser };

std::string_view to_string(GuidanceMode m);
GuidanceMode guidance_mode_from_string(std::string_view s);

// clean_space moves the denoised estimate x_hat by -lambda * dL/dx_hat, so the
// score gains -lambda * dL/dx_hat / sigma^2. through_denoiser backpropagates
// dL/dx_hat through D and adds -lambda * dL/dx.
struct GuidanceConfig {
  double lambda = 1.0;
  GuidanceMode mode = GuidanceMode::clean_space;
};

// Largest double below 1: the added term lies in the open interval (-1, 1).
double guidance_clamp_bound();

// (x_hat - x) / sigma^2
grad::Tensor score_from_denoiser(const grad::Tensor& x, const grad::Tensor& x_hat, double sigma);

// ---- sampler ------------------------------------------------------------------------

// D(x; sigma) on the diffusion variable. vjp returns cotangent^T dD/dx and is
// only needed for through_denoiser guidance.
class DenoiserFn {
 public:
  virtual ~DenoiserFn() = default;
  virtual grad::Tensor denoise(const grad::Tensor& x, double sigma) const = 0;
  virtual grad::Tensor vjp(const grad::Tensor& x, double sigma, const grad::Tensor& cotangent) const;
};

struct GuidanceEval {
  double total = 0.0;
  std::vector<dsl::TermValue> terms;
  grad::Tensor grad;  // d total / d x_hat
};

// A differentiable cost on the clean variable.
class GuidanceCost {
 public:
  virtual ~GuidanceCost() = default;
  virtual GuidanceEval evaluate(const grad::Tensor& x_hat) const = 0;
};

struct StepRecord {
  double sigma = 0.0;
  double cost = 0.0;
  std::vector<dsl::TermValue> terms;
};

struct SampleStats {
  std::size_t guidance_components = 0;  // components added across all evaluations
  std::size_t clamped_components = 0;   // components that hit the bound
  std::size_t clamp_violations = 0;     // components outside (-1, 1) after clamping
  double max_abs_guidance = 0.0;
  std::vector<StepRecord> steps;  // one per noise level, guided runs only
};

struct SampleResult {
  grad::Tensor x;
  SampleStats stats;
};

// Heun integration of dx/dsigma = -sigma * score from sigma_max to 0, starting
// from sigma_max * N(0, I) drawn with `seed`. With a cost, the clamped
// guidance term is added to the score at every evaluation.
SampleResult sample(const DenoiserFn& denoiser, const grad::Shape& shape, const NoiseSchedule& schedule,
                    std::uint64_t seed, const GuidanceCost* cost = nullptr, const GuidanceConfig& guidance = {});

// Per-evaluation guided score; exposed for tests. Returns the unguided score
// and the added (clamped) term separately.
struct ScoreParts {
  grad::Tensor x_hat;
  grad::Tensor prior;
  grad::Tensor unclamped;
  grad::Tensor added;
  GuidanceEval cost;
};
ScoreParts guided_score(const DenoiserFn& denoiser, const grad::Tensor& x, double sigma, const GuidanceCost* cost,
                        const GuidanceConfig& guidance);

// ---- known-state conditioning -----------------------------------------------------

struct KnownStatesCondition {
  int agent = 0;                // scenario agent index
  std::vector<int> timesteps;   // window rows (0 = t_now - 10)
  std::vector<Vec2> targets;    // global positions, one per timestep
  double weight = 1.0;
};

// weight * sum_t |y_t - target_t|^2 for y given as [T, 2] rows of the window.
double known_states_cost(const grad::Tensor& y, const KnownStatesCondition& condition);
grad::Var known_states_cost(grad::Var y, const KnownStatesCondition& condition);

// Conditions every selected agent on its 11 history positions.
std::vector<KnownStatesCondition> history_conditions(const Scenario& scenario, int n_agents, double weight);

// ---- scene guidance --------------------------------------------------------------

// Decodes the [Na, k] variable into global windows and evaluates a cost
// program over the future rows plus any known-state conditions.
class SceneCost : public GuidanceCost {
 public:
  SceneCost(const PcaBasis& pca, const Scenario& scenario, const SceneGeometry& geometry,
            std::optional<dsl::CostProgram> program, std::vector<KnownStatesCondition> known);

  GuidanceEval evaluate(const grad::Tensor& x_hat) const override;

  // Global positions per slot: [91, 2].
  std::vector<grad::Var> decode(grad::Tape& tape, grad::Var x) const;

 private:
  grad::Tensor decode_matrix_;
  grad::Tensor mean_;
  std::vector<AgentState> anchors_;
  std::vector<int> slot_of_agent_;
  std::optional<dsl::CostProgram> program_;
  std::map<std::string, RefPath> refpaths_;
  std::vector<KnownStatesCondition> known_;
  double dt_;
};

// The trained network on a cached scene encoding.
class NetworkDenoiser : public DenoiserFn {
 public:
  NetworkDenoiser(const DenoiserParams& params, const SceneEncoding& encoding)
      : params_(params), encoding_(encoding) {}
  grad::Tensor denoise(const grad::Tensor& x, double sigma) const override;
  grad::Tensor vjp(const grad::Tensor& x, double sigma, const grad::Tensor& cotangent) const override;

 private:
  const DenoiserParams& params_;
  const SceneEncoding& encoding_;
};

// ---- training ---------------------------------------------------------------------

struct TrainConfig {
  int steps = 2000;
  int batch = 4;        // scenes per step
  int noise_draws = 2;  // sigma draws per scene
  double lr = 1e-3;
  double grad_clip = 1.0;
  double p_mean = -1.2;
  double p_std = 1.2;
  std::uint64_t seed = 0;
};

struct TrainingExample {
  SceneGeometry geometry;
  grad::Tensor y;  // [Na, k] clean variable
};

TrainingExample make_training_example(const PcaBasis& pca, const Scenario& scenario, const DenoiserConfig& config);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  DenoiserParams params;
  std::vector<double> loss;  // per step
};

// EDM-weighted denoising loss on one scene for fixed noise draws; exposed
// for tests.
double edm_loss(const DenoiserParams& params, const TrainingExample& example, const std::vector<double>& sigmas,
                const std::vector<grad::Tensor>& noise);

// Adam on the EDM objective. Throws TrainingDiverged on a non-finite loss.
TrainResult train(const std::vector<TrainingExample>& data, DenoiserParams init, const TrainConfig& config,
                  const std::function<void(int, double)>& progress = nullptr);

// ---- simulation --------------------------------------------------------------------

// Decoded positions move by tens of metres per whitened unit, so cost
// Hessians in the diffusion variable are large; Heun stays stable for
// lambda * weight * |dpos/dx|^2 of order one.
inline constexpr double kSceneGuidanceScale = 0.002;

struct SimulationConfig {
  NoiseSchedule schedule;
  GuidanceConfig guidance{kSceneGuidanceScale, GuidanceMode::clean_space};
  std::uint64_t seed = 0;
  bool history_condition = false;
  double history_weight = 20.0;
  std::map<int, Vec2> endpoints;  // scenario agent index -> position at the last future step
  double endpoint_weight = 1.0;
};

struct SimulationResult {
  Scenario scenario;   // history kept, futures replaced by the sample
  grad::Tensor x;      // [Na, k]
  SampleStats stats;
  double history_error = 0.0;  // mean |decoded - actual| over history rows
};

// Samples futures for the first max_agents agents. Tracks are cut at t_now
// and extended by 80 sampled steps; unselected agents are dropped.
SimulationResult simulate(const DenoiserParams& params, const PcaBasis& pca, const Scenario& scenario,
                          const SimulationConfig& config, const std::optional<dsl::CostProgram>& program = std::nullopt);

struct RolloutConfig {
  SimulationConfig sim;
  int replan_steps = 5;     // 0.5 s at 10 Hz
  int execute_steps = kFutureSteps;
};

struct RolloutResult {
  Scenario scenario;
  std::vector<SampleStats> plans;
  double max_splice_jump = 0.0;  // |new plan - previous plan| at the first step after each replan
};

// Plan, execute replan_steps, re-plan conditioned on the executed history.
RolloutResult closed_loop_rollout(const DenoiserParams& params, const PcaBasis& pca, const Scenario& scenario,
                                  const RolloutConfig& config,
                                  const std::optional<dsl::CostProgram>& program = std::nullopt);

// Headings from central differences of positions; keeps `fallback` when
// the motion is below 1 cm per step.
std::vector<AgentState> with_headings(const std::vector<Vec2>& positions, double fallback);

}  // namespace trajguide
