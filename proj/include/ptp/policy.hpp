#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ptp/autodiff.hpp"
#include "ptp/env.hpp"
#include "ptp/mlp.hpp"
#include "ptp/param_store.hpp"
#include "ptp/rng.hpp"

namespace ptp {

enum class ScheduleKind { linear, cosine };
ScheduleKind parse_schedule(const std::string& name);
std::string schedule_name(ScheduleKind kind);

/// DDPM noise schedule. Index i corresponds to diffusion step u = i + 1.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  int steps() const { return static_cast<int>(betas.size()); }
};

NoiseSchedule make_noise_schedule(int steps, ScheduleKind kind, double beta_start = 1e-4,
                                  double beta_end = 0.02);

/// Future horizon used for a context length when none is given.
int default_horizon(int k);

struct PolicyConfig {
  int k = 16;            // context frames after subsampling
  int h = 16;            // future tokens
  int c = 16;            // past tokens, 0 <= c <= k
  int chunk = 8;         // future tokens executed per decision
  int B = 1;             // candidates per decision
  int subsample_K = 2;   // stride between context frames and between past tokens
  std::size_t embed_dim = 32;
  /// The last kPassthroughDims observation columns (agent position and reveal
  /// flag) are appended to the learned features unchanged, so the embedding
  /// is [mlp(frame) (embed_dim - 3 wide), proprio, reveal].
  bool proprio_passthrough = true;
  bool condition_on_past_actions = false;
  bool freeze_encoder = false;
  bool ptp_in_encoder_stage = false;
  double lambda_past = 1.0;

  int diffusion_steps = 100;
  ScheduleKind schedule = ScheduleKind::linear;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  std::size_t obs_dim = env::EnvConfig{}.obs_dim();
  std::size_t action_dim = env::Action::kDim;
  std::vector<std::size_t> encoder_hidden{256, 256, 256};
  std::vector<std::size_t> denoiser_hidden{256, 256, 256};
  std::size_t time_embed_dim = 32;
  Activation activation = Activation::gelu;

  static constexpr std::size_t kPassthroughDims = 3;

  int window() const { return c + h; }
  std::size_t learned_embed_dim() const {
    return proprio_passthrough ? embed_dim - kPassthroughDims : embed_dim;
  }
  /// Throws ConfigError on violated invariants.
  void validate() const;

  std::string to_json() const;
  static PolicyConfig from_json(const std::string& text);
};

/// Context length k with its default horizon, full past supervision and stride.
PolicyConfig make_policy_config(int k, int c, int subsample_K = 2);

/// Which trajectory indices a window reads. Shared by raw-frame and cached
/// training so both see the same windows.
struct WindowIndex {
  int t = 0;
  std::vector<int> context;        // k frame indices, clamped to >= 0
  std::vector<bool> context_pad;   // true where the requested index was < 0
  std::vector<int> targets;        // c past then h future action indices
  std::vector<bool> target_mask;   // false for padding
};

/// Context t-(k-1)K, ..., t-K, t. Past tokens t-(c-1)K, ..., t (indices <= 0
/// carry no executed action and are padded). Future tokens t+1 ... t+h;
/// indices past the end repeat the last action and are padded.
WindowIndex make_window_index(int t, int length, const PolicyConfig& cfg);

struct TrainingWindow {
  WindowIndex index;
  Tensor context;   // k x obs_dim
  Tensor targets;   // (c+h) x action_dim, raw action units
  std::vector<bool> mask;
};

TrainingWindow make_training_window(const env::Trajectory& traj, int t, const PolicyConfig& cfg);
/// The (c+h) x action_dim target block of a window; padded past tokens are zero.
Tensor window_targets(const env::Trajectory& traj, const WindowIndex& index, const PolicyConfig& cfg);

/// Raw action units <-> [-1, 1] model space.
void normalize_actions(std::span<double> flat, double max_displacement = 0.2);
void denormalize_actions(std::span<double> flat, double max_displacement = 0.2);

/// Target rows for a batch of windows: (n x (c+h)*action_dim) normalized
/// actions and matching per-element loss weights (lambda_past on past tokens,
/// 1 on future tokens, 0 on padding).
struct TargetBatch {
  Tensor x0;
  Tensor weights;
};
TargetBatch make_target_batch(const std::vector<const Tensor*>& targets,
                              const std::vector<const std::vector<bool>*>& masks,
                              const PolicyConfig& cfg);

/// Forward-process corruption of a target batch.
struct NoisedBatch {
  std::vector<int> steps;  // u in 1..T per row
  Tensor noise;
  Tensor noisy;
};
/// Per row: draw u, then the noise row, from `rng` in that order.
NoisedBatch make_noised_batch(const Tensor& x0, const NoiseSchedule& schedule, Rng& rng);
/// sqrt(abar) x0 + sqrt(1-abar) eps for a single alpha_bar.
Tensor corrupt(const Tensor& x0, const Tensor& noise, double alpha_bar);

/// Sinusoidal embedding of diffusion steps, one row per entry.
Tensor timestep_embedding(const std::vector<int>& steps, std::size_t dim);

class DiffusionPolicy {
 public:
  DiffusionPolicy() = default;
  DiffusionPolicy(PolicyConfig cfg, std::uint64_t seed);

  const PolicyConfig& config() const noexcept { return cfg_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  ParamStore& encoder() noexcept { return encoder_; }
  const ParamStore& encoder() const noexcept { return encoder_; }
  ParamStore& denoiser() noexcept { return denoiser_; }
  const ParamStore& denoiser() const noexcept { return denoiser_; }

  MlpSpec encoder_spec() const;
  MlpSpec denoiser_spec() const;
  std::size_t conditioning_dim() const;

  /// Replaces the encoder with a copy of `source`'s encoder.
  void adopt_encoder(const DiffusionPolicy& source);

 private:
  PolicyConfig cfg_;
  NoiseSchedule schedule_;
  ParamStore encoder_;
  ParamStore denoiser_;
};

/// Per-frame encoder applied to each row of `frames` (n x obs_dim).
Tensor encode_frames(const DiffusionPolicy& policy, const Tensor& frames);
/// Same as encode_frames; named for its use on a k-frame context.
Tensor encode_context(const DiffusionPolicy& policy, const Tensor& frames);

/// Conditioning rows for a batch: k context embeddings flattened, plus the
/// normalized actions at the context indices when conditioning on past actions.
struct ConditioningInput {
  Var embeddings;                    // n x (k*embed_dim)
  std::optional<Tensor> past_actions;  // n x (k*action_dim), normalized
};

/// Recorded denoiser forward: predicts noise for each row of `noisy`.
Var denoiser_forward(Tape& tape, DiffusionPolicy& policy, const Var& noisy,
                     const std::vector<int>& steps, const ConditioningInput& cond,
                     bool trainable = true);
/// Denoiser forward without a tape.
Tensor denoiser_predict(const DiffusionPolicy& policy, const Tensor& noisy,
                        const std::vector<int>& steps, const Tensor& embeddings,
                        const Tensor* past_actions);

/// Weighted noise-prediction MSE; throws NumericalError with diagnostics if not finite.
Var denoising_loss(const Var& predicted_noise, const NoisedBatch& batch, const Tensor& weights);

/// Recorded context embeddings for a batch of windows (n x k*embed_dim).
/// With `trainable_encoder` false the encoder weights are tape constants.
Var encode_windows_on_tape(Tape& tape, DiffusionPolicy& policy,
                           const std::vector<const TrainingWindow*>& windows,
                           bool trainable_encoder);

/// Normalized past actions at each window's context indices (pad -> 0).
Tensor context_actions(const std::vector<const env::Trajectory*>& trajs,
                       const std::vector<const WindowIndex*>& windows, const PolicyConfig& cfg);

/// Draws the forward-process corruption for `targets` from `rng`, runs the
/// denoiser and returns the weighted noise-prediction loss. Every training
/// path (raw frames, cached embeddings) goes through here.
Var ddpm_loss_from_conditioning(Tape& tape, DiffusionPolicy& policy, const TargetBatch& targets,
                                const ConditioningInput& cond, Rng& rng);

/// Full DDPM loss over a batch of raw-frame windows.
Var ddpm_loss(Tape& tape, DiffusionPolicy& policy,
              const std::vector<const TrainingWindow*>& windows,
              const std::vector<const env::Trajectory*>& trajs, Rng& rng,
              bool trainable_encoder = true);
/// Single-window convenience.
Var ddpm_loss(Tape& tape, DiffusionPolicy& policy, const TrainingWindow& window,
              const env::Trajectory& traj, Rng& rng);

/// Ancestral sampling of `rngs.size()` windows sharing one conditioning row.
/// Row i draws all its noise from rngs[i], so the result for a row does not
/// depend on how many rows are sampled together. Returns raw action units,
/// (n x (c+h)*action_dim), clipped to the action bounds.
Tensor sample_windows(const DiffusionPolicy& policy, const Tensor& embeddings,
                      const Tensor* past_actions, std::vector<Rng>& rngs,
                      double max_displacement = 0.2);
/// One window, (c+h) x action_dim.
Tensor sample_window(const DiffusionPolicy& policy, const Tensor& embeddings,
                     const Tensor* past_actions, Rng& rng, double max_displacement = 0.2);

inline constexpr int kPolicyFormatVersion = 1;
void save_policy(const std::string& path, const DiffusionPolicy& policy);
std::string policy_bytes(const DiffusionPolicy& policy);
DiffusionPolicy load_policy(const std::string& path);
DiffusionPolicy policy_from_checkpoint(const Checkpoint& cp);

/// Encoder-only checkpoint bytes (its SHA-256 is the cache fingerprint).
std::string encoder_bytes(const DiffusionPolicy& policy);

}  // namespace ptp
