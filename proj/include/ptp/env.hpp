#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ptp/rng.hpp"
#include "ptp/tensor.hpp"

namespace ptp::env {

/// MaskedGoal: walk to the centre, pause, then go to a goal that was only
///   shown during the first frames.
/// CountToggle: walk to the centre button, press it exactly the number of
///   times shown at the start, then go to the exit.
/// StrategyCommit: reach the top goal through the corridor (left or right)
///   indicated at the start.
enum class Task { masked_goal, count_toggle, strategy_commit };

Task parse_task(const std::string& name);
std::string task_name(Task task);

struct EnvConfig {
  std::size_t grid = 16;
  int t_max = 60;
  int reveal_steps = 2;
  double max_displacement = 0.2;
  /// Proportional gain of the expert controller; the result is clipped to
  /// the action bounds, so the expert cruises far out and slows on approach.
  double expert_gain = 0.75;
  /// Steps the MaskedGoal expert waits at the centre.
  int dwell_steps = 4;

  std::size_t obs_dim() const { return grid * grid + 3; }
};

struct Action {
  std::array<double, 2> displacement{0.0, 0.0};
  double trigger = 0.0;

  static constexpr std::size_t kDim = 3;
  std::array<double, kDim> to_array() const { return {displacement[0], displacement[1], trigger}; }
  static Action from_span(std::span<const double> v);
  friend bool operator==(const Action&, const Action&) = default;
};

/// Clips each component to the environment bounds.
Action clip_action(const Action& a, const EnvConfig& cfg);

struct Observation {
  std::vector<double> grid;  // grid x grid, row = y cell, col = x cell
  std::array<double, 2> proprio{0.0, 0.0};
  double reveal = 0.0;       // 1 while the latent is on screen

  /// grid, proprio, reveal flag.
  std::vector<double> flatten() const;
  friend bool operator==(const Observation&, const Observation&) = default;
};

struct EnvState {
  Task task = Task::masked_goal;
  std::array<double, 2> pos{0.0, 0.0};
  // Latent, fixed at reset.
  std::array<double, 2> goal{0.0, 0.0};
  int count = 0;     // CountToggle presses required
  int strategy = 0;  // StrategyCommit: -1 left corridor, +1 right corridor
  int timestep = 0;
  std::uint64_t rng_state = 0;
  // Progress.
  bool visited_center = false;
  int center_steps = 0;
  int presses = 0;
  bool last_trigger = false;
  int waypoint = 0;
  bool hit_designated = false;
  bool hit_other = false;
  bool done = false;
  bool success = false;

  static constexpr std::size_t kFlatSize = 19;
  std::vector<double> flatten() const;
  static EnvState unflatten(std::span<const double> v);
  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct StepResult {
  EnvState state;
  Observation observation;
  bool done = false;
  bool success = false;
};

/// Stateless task dynamics; all episode state lives in EnvState values.
class Environment {
 public:
  explicit Environment(EnvConfig cfg = {});
  const EnvConfig& config() const noexcept { return cfg_; }

  std::pair<EnvState, Observation> reset(Task task, std::uint64_t seed) const;
  StepResult step(const EnvState& state, const Action& action) const;
  Observation observe(const EnvState& state) const;

  /// Privileged scripted controller toward the current waypoint plus Gaussian noise.
  Action expert_action(const EnvState& state, double noise_scale, Rng& rng) const;
  /// Current expert waypoint for the state.
  std::array<double, 2> expert_target(const EnvState& state) const;

 private:
  EnvConfig cfg_;
};

inline constexpr std::array<double, 2> kStart{0.0, -0.8};
inline constexpr std::array<double, 2> kCenter{0.0, 0.0};
inline constexpr double kGoalRadius = 0.6;
inline constexpr double kSuccessRadius = 0.05;
inline constexpr double kCenterRadius = 0.1;

/// One episode. actions[i] is the action whose execution produced
/// observations[i]; actions[0] is the zero action (nothing executed yet).
struct Trajectory {
  std::vector<Observation> observations;
  std::vector<Action> actions;
  std::vector<EnvState> states;
  bool success = false;

  std::size_t size() const { return observations.size(); }
  /// Number of environment steps taken.
  std::size_t steps() const { return observations.empty() ? 0 : observations.size() - 1; }
  /// (size x obs_dim) matrix of flattened observations.
  Tensor observation_matrix() const;
  /// (steps x 3) executed actions, excluding the leading zero action.
  Tensor executed_actions() const;
  void validate() const;
};

struct DemoMeta {
  Task task = Task::masked_goal;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  double noise_scale = 0.02;
  EnvConfig env;
  std::size_t attempts = 0;
  std::size_t failures = 0;
  static constexpr int kFormatVersion = 1;
};

struct DemoDataset {
  DemoMeta meta;
  std::vector<Trajectory> trajectories;
};

/// Runs the expert until `n` successful episodes are collected. Failed
/// attempts are discarded and counted; aborts when more than half fail.
DemoDataset generate_demos(Task task, std::size_t n, std::uint64_t seed, double noise_scale,
                           const EnvConfig& cfg = {});

/// Runs one expert episode from reset.
Trajectory run_expert_episode(const Environment& env, Task task, std::uint64_t seed,
                              double noise_scale);

void save_dataset(const DemoDataset& ds, const std::string& dir);
DemoDataset load_dataset(const std::string& dir);
std::string meta_json(const DemoMeta& meta);
/// SHA-256 hex over the metadata and every serialized episode.
std::string dataset_fingerprint(const DemoDataset& ds);

void write_trajectory(std::ostream& os, const Trajectory& traj, const EnvConfig& cfg);
Trajectory read_trajectory(std::istream& is, const EnvConfig& cfg);

}  // namespace ptp::env
