#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ptp/analysis.hpp"
#include "ptp/env.hpp"
#include "ptp/inference.hpp"
#include "ptp/policy.hpp"
#include "ptp/training.hpp"

namespace ptp {

enum class Arm { full_ptp, half_ptp, no_ptp, encoder_ptp, decoder_ptp, no_history };
Arm parse_arm(const std::string& name);  // accepts full-ptp and full_ptp
std::string arm_name(Arm arm);           // full-ptp
const std::vector<Arm>& all_arms();

/// Everything a run depends on. Serialized verbatim into every run directory;
/// its hash names the directory and tags every output row.
struct ExperimentConfig {
  env::Task task = env::Task::masked_goal;
  Arm arm = Arm::full_ptp;
  /// Long-context policy shape. k, h, chunk, B, stride and widths are used as
  /// given; c and the encoder-stage flag are set by the arm.
  PolicyConfig policy;
  env::EnvConfig env;

  int stage1_epochs = 200;
  // The training defaults here are the experiment recipe, not the bare
  // TrainOptions defaults: the MLP denoiser is far from converged after 300
  // epochs at 1e-4.
  int stage3_epochs = 600;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  bool cosine_lr = true;
  double val_fraction = 0.1;

  std::size_t demos = 100;
  std::uint64_t demo_seed = 0;
  double noise_scale = 0.02;

  int eval_episodes = 100;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<int> eval_B{1};
  std::vector<int> eval_chunk{8};

  /// Window 1: expert episodes here are 11-17 actions long, so the 15-action
  /// window leaves no expert pairs at all.
  PredictorConfig predictor{.window = 1};

  void validate() const;
  std::string to_json() const;
  /// Missing keys keep their defaults; unknown keys are a ConfigError.
  static ExperimentConfig from_json(const std::string& text);
  /// First 16 hex digits of the SHA-256 of to_json().
  std::string hash() const;
};

/// Stage-1 (short context) and stage-3 (long context) policy configs of an arm.
///   full-ptp     stage 1 c=2, stage 3 c=k
///   half-ptp     stage 1 c=1, stage 3 c=k/2
///   no-ptp       c=0 in both
///   encoder-ptp  stage 1 c=2, stage 3 c=0
///   decoder-ptp  stage 1 c=0, stage 3 c=k
///   no-history   k=2 and c=0 in both
struct StageConfigs {
  PolicyConfig stage1;
  PolicyConfig stage3;
};
StageConfigs arm_configs(const ExperimentConfig& cfg);

/// Replicate `seed` trains on demos generated with demo_seed + seed, trains
/// with `seed` and evaluates with eval seed `seed`.
std::uint64_t replicate_demo_seed(const ExperimentConfig& cfg, std::uint64_t seed);
env::DemoDataset replicate_demos(const ExperimentConfig& cfg, std::uint64_t seed);

TrainOptions stage_options(const ExperimentConfig& cfg, int epochs, std::uint64_t seed);

struct ArmRun {
  DiffusionPolicy encoder;  // stage-1 result
  DiffusionPolicy policy;   // stage-3 result
  TrainReport stage1;
  TrainReport stage3;
  EmbeddingCache cache;
};

/// Stage 1, cache, stage 3 for one replicate. `encoder` skips stage 1 when
/// given (it must have been trained with this arm's stage-1 config).
ArmRun train_arm(const ExperimentConfig& cfg, const env::DemoDataset& demos, std::uint64_t seed,
                 const DiffusionPolicy* encoder = nullptr,
                 std::function<void(int, const DiffusionPolicy&)> on_stage3_epoch = {});

struct AblationCell {
  std::uint64_t seed = 0;
  double success_rate = 0.0;
  EvalResult eval;
};

/// Trains and evaluates the configured arm once per seed, with B = eval_B[0]
/// and chunk = eval_chunk[0].
std::vector<AblationCell> run_ablation(const ExperimentConfig& cfg);

double median(std::vector<double> v);

}  // namespace ptp
