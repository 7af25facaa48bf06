#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ptp/experiment.hpp"

namespace ptp {

namespace fs = std::filesystem;

/// $PTP_RUNS_DIR when set, otherwise ./runs.
fs::path default_runs_root();

/// Where everything produced for a config lives. Demos and stage-1 encoders
/// are keyed by the hash of only the fields they depend on, so arms that
/// share them share the files.
struct RunLayout {
  fs::path root;
  ExperimentConfig cfg;

  RunLayout(fs::path root, ExperimentConfig cfg);

  /// root/<training hash>: everything that depends only on how the policy
  /// was trained.
  fs::path run_dir() const;
  fs::path seed_dir(std::uint64_t seed) const;   // run_dir/seed_<s>
  /// run_dir/out/<config hash>: evaluation, rollouts and analysis under the
  /// full config (eval and predictor settings included).
  fs::path output_dir() const;
  fs::path demos_dir(std::uint64_t seed) const;  // root/demos/<demo hash>/seed_<s>
  fs::path encoder_dir(std::uint64_t seed) const;  // root/encoders/<stage-1 hash>/seed_<s>
  fs::path encoder_path(std::uint64_t seed) const { return encoder_dir(seed) / "encoder.ckpt"; }
  fs::path cache_path(std::uint64_t seed) const { return seed_dir(seed) / "cache.ptpc"; }
  fs::path policy_path(std::uint64_t seed) const { return seed_dir(seed) / "policy.ckpt"; }
  /// run_dir/rollouts/B<b>_chunk<c>_ep<n>/seed_<s>.jsonl for the first B
  /// and chunk of the eval lists.
  fs::path rollouts_path(std::uint64_t seed) const;
};

/// Hash of the fields that determine trained artifacts (not evaluation,
/// predictor or the seed list).
std::string training_hash(const ExperimentConfig& cfg);
std::string demo_hash(const ExperimentConfig& cfg);
std::string stage1_hash(const ExperimentConfig& cfg);

/// SHA-256 of a file, or of the sorted (relative path, file hash) list of a
/// directory.
std::string content_hash(const fs::path& path);

struct Manifest {
  std::string command;  // replayable command line
  std::string config_hash;
  std::vector<std::pair<std::string, fs::path>> inputs;
  std::vector<std::pair<std::string, fs::path>> artifacts;
};
/// Writes manifest JSON with content hashes and a timestamp. Throws IoError
/// when a referenced path does not exist.
void write_manifest(const fs::path& path, const Manifest& m);

/// Writes the config to run_dir/config.json and output_dir/config.json.
void write_run_config(const RunLayout& layout);

// Pipeline steps. Each reuses an existing artifact when present and
// otherwise produces it (writing its files and manifest) or, when
// `produce` is false, throws UsageError naming the command to run first.

env::DemoDataset obtain_demos(const RunLayout& layout, std::uint64_t seed, bool produce,
                              const std::string& command = {});
DiffusionPolicy obtain_encoder(const RunLayout& layout, std::uint64_t seed,
                               const env::DemoDataset& demos, const std::string& command = {});
/// Throws StaleCacheError when an existing cache no longer matches.
EmbeddingCache obtain_cache(const RunLayout& layout, std::uint64_t seed, const DiffusionPolicy& encoder,
                            const env::DemoDataset& demos, bool rebuild, const std::string& command = {});
/// Stage 3 from the cache, or frozen-encoder end-to-end when `no_cache`.
DiffusionPolicy obtain_policy(const RunLayout& layout, std::uint64_t seed, const env::DemoDataset& demos,
                              const DiffusionPolicy& encoder, bool no_cache,
                              const std::string& command = {});

/// Loads a policy checkpoint and checks it against the layout's stage-3
/// config. Missing file -> UsageError, mismatch -> ConfigError.
DiffusionPolicy load_checked_policy(const fs::path& path, const ExperimentConfig& cfg);

/// Rollout JSON lines -> executed action sequences (the leading placeholder
/// action dropped). Throws ConfigError when there are no usable episodes.
std::vector<Tensor> read_rollout_actions(const std::string& jsonl);
std::string rollouts_jsonl(const std::vector<RolloutResult>& rollouts);

}  // namespace ptp
