#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ptp/binary_io.hpp"
#include "ptp/env.hpp"
#include "ptp/policy.hpp"

namespace ptp {

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();  // NaN: no validation split
  double seconds = 0.0;
  double throughput = 0.0;  // windows per second
};

struct TrainReport {
  std::string stage;
  std::vector<EpochRecord> epochs;
  std::size_t windows_per_epoch = 0;
  std::size_t skipped_windows = 0;  // windows with every target token padded
  int best_epoch = 0;

  /// One JSON object per epoch.
  std::string to_jsonl(bool include_timing = true) const;
};

struct TrainOptions {
  int epochs = 1;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  /// Cosine decay of the learning rate from `lr` to zero over the run,
  /// computed per optimizer step.
  bool cosine_lr = false;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  /// Fraction of demos held out for checkpoint selection (stage 1 only).
  double val_fraction = 0.1;
  /// When set, per-epoch training state is written here and an existing
  /// state is resumed from.
  std::string state_dir;
  /// Stops after this epoch as if interrupted (0 = run to completion).
  int stop_after_epoch = 0;
  /// Called after every epoch with the policy as trained so far.
  std::function<void(int epoch, const DiffusionPolicy&)> on_epoch;
};

/// A training window by trajectory id and decision time.
struct WindowRef {
  std::size_t traj = 0;
  int t = 0;
};

/// Every window of the given trajectories that has at least one unpadded
/// target token, in (trajectory, t) order. Counts the rest in `skipped`.
std::vector<WindowRef> enumerate_windows(const env::DemoDataset& data,
                                         const std::vector<std::size_t>& trajs,
                                         const PolicyConfig& cfg, std::size_t* skipped = nullptr);

/// Loss over raw observation frames; the encoder runs inside the step.
Var raw_batch_loss(Tape& tape, DiffusionPolicy& policy, const env::DemoDataset& data,
                   const std::vector<WindowRef>& batch, Rng& rng, bool trainable_encoder);

struct EmbeddingCache {
  io::Digest encoder_fingerprint{};
  std::string config_json;
  std::vector<Tensor> embeddings;  // per trajectory, frames x embed_dim

  std::size_t embed_dim() const { return embeddings.empty() ? 0 : embeddings.front().cols(); }
};

/// Identifies what the cache was computed from: encoder architecture and the dataset.
std::string cache_config_json(const DiffusionPolicy& encoder_policy, const env::DemoDataset& data);
io::Digest encoder_fingerprint(const DiffusionPolicy& policy);

EmbeddingCache cache_embeddings(const DiffusionPolicy& encoder_policy, const env::DemoDataset& data);
std::string cache_bytes(const EmbeddingCache& cache);
void save_cache(const std::string& path, const EmbeddingCache& cache);
EmbeddingCache load_cache(const std::string& path);
/// Throws StaleCacheError unless the cache was built from this encoder and dataset.
void check_cache(const EmbeddingCache& cache, const DiffusionPolicy& encoder_policy,
                 const env::DemoDataset& data);

/// Loss over cached embeddings. Equal to raw_batch_loss with a frozen encoder.
Var cached_batch_loss(Tape& tape, DiffusionPolicy& policy, const EmbeddingCache& cache,
                      const env::DemoDataset& data, const std::vector<WindowRef>& batch, Rng& rng);

struct TrainResult {
  DiffusionPolicy policy;
  TrainReport report;
};

/// Short-context encoder pretraining. Keeps the parameters of the epoch with
/// the lowest validation loss (training loss when no demos are held out).
TrainResult train_stage1_encoder(const env::DemoDataset& data, const PolicyConfig& cfg_short,
                                 const TrainOptions& opts);

/// Long-context denoiser training from cached embeddings. The encoder of
/// `encoder_source` is copied into the result and never updated.
TrainResult train_stage3_policy(const EmbeddingCache& cache, const env::DemoDataset& data,
                                const DiffusionPolicy& encoder_source, const PolicyConfig& cfg_long,
                                const TrainOptions& opts);

/// Long-context training that re-encodes every context frame each step.
/// With cfg_long.freeze_encoder the encoder (from `encoder_source` if given)
/// stays fixed.
TrainResult train_end_to_end(const env::DemoDataset& data, const PolicyConfig& cfg_long,
                             const TrainOptions& opts,
                             const DiffusionPolicy* encoder_source = nullptr);

struct BenchResult {
  int k = 0;
  int steps = 0;
  std::size_t batch_size = 0;
  double cached_windows_per_sec = 0.0;
  double end_to_end_windows_per_sec = 0.0;
  double cache_build_seconds = 0.0;
  double ratio() const { return cached_windows_per_sec / end_to_end_windows_per_sec; }
  std::string to_json() const;
};

/// Times `steps` optimizer steps of cached and end-to-end training at
/// identical k, batch and network sizes.
BenchResult bench_throughput(const env::DemoDataset& data, int k, int steps,
                             std::size_t batch_size, std::uint64_t seed);

}  // namespace ptp
