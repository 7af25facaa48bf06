#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ptp/env.hpp"
#include "ptp/policy.hpp"

namespace ptp {

/// Receding log of recent observations (with their embeddings) and executed
/// actions. Holds the first frame separately so early-episode padding can
/// always repeat it.
class HistoryBuffer {
 public:
  HistoryBuffer(int k, int subsample_K, std::size_t embed_dim);

  void reset(const env::Observation& first, std::vector<double> first_embedding);
  /// Records an executed action and the observation it produced.
  void push(const env::Action& executed, const env::Observation& next,
            std::vector<double> next_embedding);

  /// Environment steps taken so far (= index of the latest observation).
  int timestep() const noexcept { return steps_; }
  std::size_t executed_count() const noexcept { return static_cast<std::size_t>(steps_); }
  /// Observation / embedding / executed action by absolute trajectory index.
  /// Action i is the one that produced observation i (i >= 1).
  const env::Observation& observation(int index) const;
  const std::vector<double>& embedding(int index) const;
  const env::Action& action(int index) const;

  /// k x embed_dim context embeddings for `cfg` at the current timestep.
  Tensor context_embeddings(const PolicyConfig& cfg) const;
  /// Normalized executed actions at the context indices (pad -> 0), 1 x k*action_dim.
  Tensor context_actions(const PolicyConfig& cfg) const;

 private:
  struct Slot {
    env::Observation obs;
    std::vector<double> embedding;
    env::Action action;
  };
  const Slot& slot(int index) const;

  std::size_t capacity_;
  Slot first_;
  std::vector<Slot> ring_;
  int steps_ = 0;
};

/// Sum over unpadded past positions of the squared distance between the
/// candidate's reconstructed past actions and the executed ones. Arguments
/// are c x action_dim blocks; only the past segment is ever passed in.
double score_candidate(const Tensor& candidate_past, const Tensor& executed_past,
                       const std::vector<bool>& mask);

struct Selection {
  std::size_t index = 0;
  std::vector<double> scores;
};
/// Lowest score wins; ties go to the lowest index.
Selection select_candidate(const std::vector<Tensor>& candidate_pasts, const Tensor& executed_past,
                           const std::vector<bool>& mask);

struct RolloutOptions {
  int B = 1;
  int chunk = 8;
  /// When false only one candidate is drawn and no scoring happens.
  bool verify = true;
};

struct RolloutResult {
  bool success = false;
  int length = 0;
  std::vector<int> selected;
  std::vector<std::vector<double>> scores;
  env::Trajectory trajectory;

  /// Executed actions, positions and per-decision selection; grids omitted.
  std::string to_json() const;
};

RolloutResult rollout(const DiffusionPolicy& policy, const env::Environment& env, env::Task task,
                      const RolloutOptions& opts, std::uint64_t env_seed, std::uint64_t policy_seed);

/// Episode runner used by evaluate(): (env, task, env_seed, policy_seed) -> result.
using EpisodeRunner = std::function<RolloutResult(const env::Environment&, env::Task, std::uint64_t,
                                                  std::uint64_t)>;

EpisodeRunner policy_runner(const DiffusionPolicy& policy, const RolloutOptions& opts);
/// The privileged scripted expert run as if it were a policy.
EpisodeRunner expert_runner(double noise_scale);
/// Never moves.
EpisodeRunner zero_runner();

struct Interval {
  double low = 0.0;
  double high = 0.0;
};
/// Wilson score interval (95% by default).
Interval wilson_interval(int successes, int trials, double z = 1.959963984540054);

struct SeedResult {
  std::uint64_t seed = 0;
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
  Interval ci;
};

struct EvalResult {
  std::vector<SeedResult> per_seed;
  SeedResult pooled;
  std::vector<RolloutResult> rollouts;  // seed-major
};

/// Environment seed of an evaluation episode; disjoint from demo generation.
std::uint64_t eval_env_seed(std::uint64_t seed, int episode);
std::uint64_t eval_policy_seed(std::uint64_t seed, int episode);

EvalResult evaluate(const EpisodeRunner& runner, env::Task task, int episodes,
                    const std::vector<std::uint64_t>& seeds, const env::EnvConfig& env_cfg = {},
                    bool keep_rollouts = true);

struct EvalRowInfo {
  std::string task;
  std::string arm;
  int k = 0;
  int c = 0;
  int B = 1;
  int chunk = 8;
  std::string config_hash;
};
inline constexpr const char* kEvalCsvHeader =
    "task,arm,k,c,B,chunk,seed,success_rate,ci_low,ci_high,config_hash";
/// One CSV row per seed (no header).
std::string eval_csv_rows(const EvalRowInfo& info, const EvalResult& result);
std::string eval_json(const EvalRowInfo& info, const EvalResult& result);

}  // namespace ptp
