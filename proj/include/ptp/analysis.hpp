#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ptp/mlp.hpp"
#include "ptp/env.hpp"
#include "ptp/tensor.hpp"

namespace ptp {

struct PredictorConfig {
  /// Past actions conditioned on; 1 predicts a_t from a_{t-1} only.
  int window = 15;
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::relu;
  int epochs = 100;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  /// Fraction of pairs used for fitting; the rest is the holdout.
  double split = 0.8;

  void validate() const;
  std::string to_json() const;
};

struct PairSet {
  Tensor inputs;   // n x window*action_dim, oldest action first
  Tensor targets;  // n x action_dim
  std::size_t skipped_episodes = 0;  // shorter than window + 1
  std::size_t size() const { return targets.rows(); }
};

/// Pairs (a_{t-W} ... a_{t-1}) -> a_t inside each episode. `episodes` are
/// (length x action_dim) action sequences. Throws ConfigError when no pair can
/// be formed.
PairSet extract_pairs(const std::vector<Tensor>& episodes, int window);

/// Executed actions of each trajectory (the leading null action dropped).
std::vector<Tensor> executed_action_sequences(const std::vector<env::Trajectory>& trajs);

struct PredictorFit {
  double holdout_mse = 0.0;  // mean over holdout of |prediction - a_t|^2 / action_dim
  double train_mse = 0.0;
  std::size_t train_pairs = 0;
  std::size_t holdout_pairs = 0;
};

PredictorFit fit_predictor(const PairSet& pairs, const PredictorConfig& cfg, std::uint64_t seed);

/// Predictor MLP (past actions -> current action).
struct PredictorNet {
  explicit PredictorNet(const PredictorConfig& cfg, std::size_t action_dim, std::uint64_t seed);
  ParamStore params;
  MlpSpec spec;
};

struct PredictabilityReport {
  double eps_expert = 0.0;
  double eps_policy = 0.0;
  double ratio = 0.0;
  bool ratio_infinite = false;  // eps_policy == 0
  std::size_t expert_pairs = 0;
  std::size_t policy_pairs = 0;
  std::size_t expert_skipped = 0;
  std::size_t policy_skipped = 0;
  PredictorConfig config;

  std::string to_json() const;
};

/// Fits one predictor on expert pairs and one on policy pairs, each scored on
/// its own holdout. Both fits use `seed`.
PredictabilityReport predictability_ratio(const std::vector<Tensor>& expert_episodes,
                                          const std::vector<Tensor>& policy_episodes,
                                          const PredictorConfig& cfg, std::uint64_t seed);

inline constexpr const char* kRatioCsvHeader =
    "task,arm,ratio,eps_expert,eps_policy,success_rate,config_hash";
std::string ratio_csv_row(const std::string& task, const std::string& arm,
                          const PredictabilityReport& report, double success_rate,
                          const std::string& config_hash);

}  // namespace ptp
