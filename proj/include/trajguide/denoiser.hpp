#pragma once

// Denoiser D(x; m, sigma): PCA trajectory embedding, MiniPointNet polyline
// encoder and three blocks of lane-lane / agent-lane / agent-agent relative
// attention, wrapped in EDM preconditioning.

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajguide/grad.hpp"
#include "trajguide/scene.hpp"

namespace trajguide {

inline constexpr int kHistorySteps = 11;  // including the current state
inline constexpr int kFutureSteps = 80;
inline constexpr int kWindowSteps = kHistorySteps + kFutureSteps;
inline constexpr int kCurrentIndex = kHistorySteps - 1;

// ---- PCA ------------------------------------------------------------------------

// Principal components of flattened agent-frame windows [x0, y0, x1, y1, ...].
// Coefficients are whitened: z_i = <components_i, v - mean> / scale_i.
struct PcaBasis {
  std::vector<double> mean;                     // dim
  std::vector<std::vector<double>> components;  // k x dim, orthonormal rows
  std::vector<double> eigenvalues;              // k, descending
  std::vector<double> scale;                    // k, sqrt(max(eigenvalue, floor))

  std::size_t k() const { return components.size(); }
  std::size_t dim() const { return mean.size(); }

  std::vector<double> encode(std::span<const double> v) const;
  std::vector<double> decode(std::span<const double> z) const;
  // Linear map z -> v as a [k, dim] matrix (rows = scale_i * component_i).
  grad::Tensor decode_matrix() const;
};

PcaBasis fit_pca(const std::vector<std::vector<double>>& samples, std::size_t k);

// Agent-frame window of agent `agent` around t_now, flattened; throws when
// the track does not cover [t_now - 10, t_now + 80].
std::vector<double> agent_window(const Scenario& scenario, int agent);

// Maps a flattened agent-frame window back to global positions.
std::vector<Vec2> window_to_global(std::span<const double> flat, const AgentState& anchor);

// ---- network ----------------------------------------------------------------------

struct DenoiserConfig {
  int d_model = 64;
  int layers = 3;
  int max_agents = 8;
  int max_polylines = 32;
  int points_per_polyline = 16;
  int pca_k = 16;
  double sigma_data = 1.0;
  double radius = 100.0;  // attention neighbourhood, meters
  std::uint64_t init_seed = 1;

  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

// Named parameter tensors in a fixed order.
struct DenoiserParams {
  DenoiserConfig config;
  std::vector<std::string> names;
  std::map<std::string, grad::Tensor> tensors;

  const grad::Tensor& at(const std::string& name) const;
  std::size_t count() const;  // total scalar parameters
  bool finite() const;
};

DenoiserParams init_params(const DenoiserConfig& config);

// Checkpoint layout: <dir>/model.json + model.bin (and pca.json + pca.bin).
void save_params(const DenoiserParams& params, const std::string& dir, const nlohmann::json& meta = nullptr);
DenoiserParams load_params(const std::string& dir);
void save_pca(const PcaBasis& pca, const std::string& dir);
PcaBasis load_pca(const std::string& dir);

// Geometry extracted from a scenario: everything the network sees, as
// relative features. Independent of parameters.
struct SceneGeometry {
  int n_agents = 0;
  int n_polylines = 0;
  std::vector<int> agent_index;     // scenario agent index per slot
  std::vector<int> polyline_ids;    // scenario polyline id per slot
  std::vector<AgentState> agent_pose;
  grad::Tensor agent_valid;         // [Na]
  grad::Tensor point_features;      // [Nm, P, 9]
  grad::Tensor polyline_valid;      // [Nm]
  grad::Tensor ll_rel;              // [Nm*Nm, 4]
  grad::Tensor ll_conn;             // [Nm*Nm, 5] one-hot connectivity
  grad::Tensor ll_mask;             // [Nm, Nm]
  grad::Tensor al_rel;              // [Na*Nm, 4]
  grad::Tensor al_mask;             // [Na, Nm]
  grad::Tensor aa_rel;              // [Na*Na, 4]
  grad::Tensor aa_mask;             // [Na, Na]
};

// Polylines: all of them when they fit, else the max_polylines closest to
// agent 0 at t_now. Agents: the first max_agents. pad_agents pads the agent
// slots up to max_agents with masked-out dummies.
SceneGeometry scene_geometry(const Scenario& scenario, const DenoiserConfig& config, bool pad_agents = false);

// Recomputes only the agent-dependent tables, reusing polyline selection and
// map tables from `base`.
SceneGeometry update_agents(const SceneGeometry& base, const Scenario& scenario, const DenoiserConfig& config);

// Cached, parameter-dependent encoding for inference.
struct SceneEncoding {
  SceneGeometry geometry;
  grad::Tensor x_m;                      // [Nm, d] MiniPointNet output
  std::vector<grad::Tensor> lane_tokens;  // per layer, [Nm, d], after lane-lane attention
  grad::Tensor al_r;                     // [Na, Nm, d]
  grad::Tensor aa_r;                     // [Na, Na, d]
};

SceneEncoding encode_scene(const DenoiserParams& params, SceneGeometry geometry);
SceneEncoding encode_scene(const DenoiserParams& params, const Scenario& scenario);
// Keeps the map part of `enc` and recomputes the agent tables.
SceneEncoding update_encoding(const DenoiserParams& params, const SceneEncoding& enc, const Scenario& scenario);

struct EdmCoefficients {
  double c_skip, c_out, c_in, c_noise;
};
EdmCoefficients edm_coefficients(double sigma, double sigma_data);

// Parameters as vars on a tape (leaves when training, constants otherwise).
class ParamVars {
 public:
  ParamVars(grad::Tape& tape, const DenoiserParams& params, bool trainable);
  grad::Var operator[](const std::string& name) const;
  const std::map<std::string, grad::Var>& all() const { return vars_; }

 private:
  std::map<std::string, grad::Var> vars_;
};

struct EncodingVars {
  grad::Var x_m;
  std::vector<grad::Var> lane_tokens;
  grad::Var al_r;
  grad::Var aa_r;
  const SceneGeometry* geometry = nullptr;
};

EncodingVars encode_vars(grad::Tape& tape, const ParamVars& p, const SceneGeometry& geometry,
                         const DenoiserConfig& config);
EncodingVars encoding_constants(grad::Tape& tape, const SceneEncoding& enc);

// Preconditioned denoiser on the tape; x is [Na, k] noisy whitened PCA coefficients.
grad::Var denoise_var(const ParamVars& p, const EncodingVars& enc, grad::Var x, double sigma,
                      const DenoiserConfig& config);

// Value-only denoiser. Throws std::invalid_argument on NaN input or sigma <= 0.
grad::Tensor denoise(const DenoiserParams& params, const SceneEncoding& enc, const grad::Tensor& x, double sigma);

// Encoded clean variable of a scenario: [Na, k] whitened coefficients of
// each agent's window in its own frame at t_now.
grad::Tensor encode_agents(const PcaBasis& pca, const Scenario& scenario, const SceneGeometry& geometry);

}  // namespace trajguide
