#include "ptp/orchestrate.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ptp/binary_io.hpp"
#include "ptp/error.hpp"

namespace ptp {

namespace {

std::string seed_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

std::string short_hash(const nlohmann::json& j) { return io::sha256_hex(j.dump()).substr(0, 16); }

nlohmann::json demo_key(const ExperimentConfig& cfg) {
  const nlohmann::json full = nlohmann::json::parse(cfg.to_json());
  return {{"task", full["task"]},
          {"demos", full["demos"]},
          {"demo_seed", full["demo_seed"]},
          {"noise_scale", full["noise_scale"]},
          {"env", full["env"]}};
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void log(const std::string& msg) { std::cerr << "[ptp] " << msg << std::endl; }

// Reports go to disk twice: without timing (reproducible content) and with.
void write_report(const fs::path& dir, const std::string& name, const TrainReport& r,
                  const std::string& config_hash) {
  auto tagged = [&](const std::string& jsonl) {
    std::string out;
    std::istringstream in(jsonl);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      j["config_hash"] = config_hash;
      out += j.dump() + "\n";
    }
    return out;
  };
  io::write_file((dir / (name + ".jsonl")).string(), tagged(r.to_jsonl(false)));
  io::write_file((dir / (name + "_timing.jsonl")).string(), tagged(r.to_jsonl(true)));
}

}  // namespace

fs::path default_runs_root() {
  const char* env = std::getenv("PTP_RUNS_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

RunLayout::RunLayout(fs::path root_, ExperimentConfig cfg_) : root(std::move(root_)), cfg(std::move(cfg_)) {}

fs::path RunLayout::run_dir() const { return root / training_hash(cfg); }
fs::path RunLayout::output_dir() const { return run_dir() / "out" / cfg.hash(); }
fs::path RunLayout::seed_dir(std::uint64_t seed) const { return run_dir() / seed_name(seed); }
fs::path RunLayout::rollouts_path(std::uint64_t seed) const {
  const std::string setting = "B" + std::to_string(cfg.eval_B.front()) + "_chunk" +
                              std::to_string(cfg.eval_chunk.front()) + "_ep" + std::to_string(cfg.eval_episodes);
  return run_dir() / "rollouts" / setting / (seed_name(seed) + ".jsonl");
}
fs::path RunLayout::demos_dir(std::uint64_t seed) const {
  return root / "demos" / demo_hash(cfg) / seed_name(seed);
}
fs::path RunLayout::encoder_dir(std::uint64_t seed) const {
  return root / "encoders" / stage1_hash(cfg) / seed_name(seed);
}

std::string training_hash(const ExperimentConfig& cfg) {
  nlohmann::json j = nlohmann::json::parse(cfg.to_json());
  for (const char* f : {"eval_episodes", "seeds", "eval_B", "eval_chunk", "predictor"}) j.erase(f);
  return short_hash(j);
}

std::string demo_hash(const ExperimentConfig& cfg) { return short_hash(demo_key(cfg)); }

std::string stage1_hash(const ExperimentConfig& cfg) {
  const nlohmann::json full = nlohmann::json::parse(cfg.to_json());
  nlohmann::json key = demo_key(cfg);
  key["stage1"] = nlohmann::json::parse(arm_configs(cfg).stage1.to_json());
  for (const char* f : {"stage1_epochs", "batch_size", "lr", "cosine_lr", "val_fraction"}) key[f] = full[f];
  return short_hash(key);
}

std::string content_hash(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("cannot hash missing path " + path.string());
  if (!fs::is_directory(path)) return io::sha256_hex(io::read_file(path.string()));
  std::vector<std::string> lines;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (!e.is_regular_file()) continue;
    lines.push_back(fs::relative(e.path(), path).generic_string() + " " +
                    io::sha256_hex(io::read_file(e.path().string())));
  }
  std::sort(lines.begin(), lines.end());
  std::string all;
  for (const auto& l : lines) all += l + "\n";
  return io::sha256_hex(all);
}

void write_manifest(const fs::path& path, const Manifest& m) {
  auto entries = [](const std::vector<std::pair<std::string, fs::path>>& list) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [role, p] : list) {
      if (!fs::exists(p)) throw IoError("manifest references missing path " + p.string());
      arr.push_back({{"role", role}, {"path", p.string()}, {"sha256", content_hash(p)}});
    }
    return arr;
  };
  nlohmann::json j;
  j["command"] = m.command;
  j["config_hash"] = m.config_hash;
  j["inputs"] = entries(m.inputs);
  j["artifacts"] = entries(m.artifacts);
  j["written_at"] = utc_now();
  fs::create_directories(path.parent_path());
  io::write_file(path.string(), j.dump(2) + "\n");
}

void write_run_config(const RunLayout& layout) {
  nlohmann::json train = nlohmann::json::parse(layout.cfg.to_json());
  for (const char* f : {"eval_episodes", "seeds", "eval_B", "eval_chunk", "predictor"}) train.erase(f);
  fs::create_directories(layout.output_dir());
  io::write_file((layout.run_dir() / "config.json").string(), train.dump(2) + "\n");
  io::write_file((layout.output_dir() / "config.json").string(), layout.cfg.to_json() + "\n");
}

env::DemoDataset obtain_demos(const RunLayout& layout, std::uint64_t seed, bool produce,
                              const std::string& command) {
  const fs::path dir = layout.demos_dir(seed);
  if (fs::exists(dir / "meta.json")) return env::load_dataset(dir.string());
  if (!produce) {
    throw UsageError("no demos at " + dir.string() + "; run gen-demos with this config first");
  }
  log("generating " + std::to_string(layout.cfg.demos) + " demos, seed " + std::to_string(seed));
  const env::DemoDataset ds = replicate_demos(layout.cfg, seed);
  env::save_dataset(ds, dir.string());
  write_manifest(dir.parent_path() / ("manifest_" + seed_name(seed) + ".json"),
                 {command, layout.cfg.hash(), {}, {{"demos", dir}}});
  return ds;
}

DiffusionPolicy obtain_encoder(const RunLayout& layout, std::uint64_t seed, const env::DemoDataset& demos,
                               const std::string& command) {
  const fs::path dir = layout.encoder_dir(seed);
  const fs::path ckpt = layout.encoder_path(seed);
  if (fs::exists(ckpt)) return load_policy(ckpt.string());
  log("stage 1 (" + std::to_string(layout.cfg.stage1_epochs) + " epochs), seed " + std::to_string(seed));
  TrainOptions o = stage_options(layout.cfg, layout.cfg.stage1_epochs, seed);
  o.state_dir = (dir / "state").string();
  TrainResult r = train_stage1_encoder(demos, arm_configs(layout.cfg).stage1, o);
  save_policy(ckpt.string(), r.policy);
  write_report(dir, "stage1", r.report, stage1_hash(layout.cfg));
  write_manifest(dir / "manifest.json", {command,
                                         layout.cfg.hash(),
                                         {{"demos", layout.demos_dir(seed)}},
                                         {{"encoder", ckpt}, {"report", dir / "stage1.jsonl"}}});
  fs::remove_all(dir / "state");
  return std::move(r.policy);
}

EmbeddingCache obtain_cache(const RunLayout& layout, std::uint64_t seed, const DiffusionPolicy& encoder,
                            const env::DemoDataset& demos, bool rebuild, const std::string& command) {
  const fs::path path = layout.cache_path(seed);
  if (fs::exists(path) && !rebuild) {
    EmbeddingCache cache = load_cache(path.string());
    try {
      check_cache(cache, encoder, demos);
    } catch (const StaleCacheError& e) {
      throw StaleCacheError(std::string(e.what()) + "; rebuild it with the cache command");
    }
    return cache;
  }
  log("caching embeddings, seed " + std::to_string(seed));
  EmbeddingCache cache = cache_embeddings(encoder, demos);
  fs::create_directories(path.parent_path());
  save_cache(path.string(), cache);
  write_manifest(layout.seed_dir(seed) / "manifest_cache.json",
                 {command,
                  layout.cfg.hash(),
                  {{"demos", layout.demos_dir(seed)}, {"encoder", layout.encoder_path(seed)}},
                  {{"cache", path}}});
  return cache;
}

DiffusionPolicy obtain_policy(const RunLayout& layout, std::uint64_t seed, const env::DemoDataset& demos,
                              const DiffusionPolicy& encoder, bool no_cache, const std::string& command) {
  const fs::path dir = layout.seed_dir(seed);
  const fs::path ckpt = layout.policy_path(seed);
  if (fs::exists(ckpt)) return load_checked_policy(ckpt, layout.cfg);
  fs::create_directories(dir);
  TrainOptions o = stage_options(layout.cfg, layout.cfg.stage3_epochs, seed);
  o.state_dir = (dir / "state").string();
  const PolicyConfig cfg3 = arm_configs(layout.cfg).stage3;
  TrainResult r;
  std::vector<std::pair<std::string, fs::path>> inputs{{"demos", layout.demos_dir(seed)},
                                                       {"encoder", layout.encoder_path(seed)}};
  if (no_cache) {
    log("end-to-end training with a frozen encoder, seed " + std::to_string(seed));
    r = train_end_to_end(demos, cfg3, o, &encoder);
  } else {
    const EmbeddingCache cache = obtain_cache(layout, seed, encoder, demos, false, command);
    inputs.emplace_back("cache", layout.cache_path(seed));
    log("stage 3 (" + std::to_string(layout.cfg.stage3_epochs) + " epochs), seed " + std::to_string(seed));
    r = train_stage3_policy(cache, demos, encoder, cfg3, o);
  }
  save_policy(ckpt.string(), r.policy);
  const std::string name = no_cache ? "end_to_end" : "stage3";
  write_report(dir, name, r.report, training_hash(layout.cfg));
  write_manifest(dir / "manifest_train.json",
                 {command, layout.cfg.hash(), inputs, {{"policy", ckpt}, {"report", dir / (name + ".jsonl")}}});
  fs::remove_all(dir / "state");
  return std::move(r.policy);
}

DiffusionPolicy load_checked_policy(const fs::path& path, const ExperimentConfig& cfg) {
  if (!fs::exists(path)) throw UsageError("no policy checkpoint at " + path.string());
  DiffusionPolicy p = load_policy(path.string());
  const PolicyConfig want = arm_configs(cfg).stage3;
  const PolicyConfig& got = p.config();
  if (got.k != want.k || got.c != want.c || got.h != want.h || got.subsample_K != want.subsample_K ||
      got.embed_dim != want.embed_dim || got.obs_dim != want.obs_dim) {
    throw ConfigError("checkpoint " + path.string() + " was trained with a different policy config (k=" +
                      std::to_string(got.k) + ", c=" + std::to_string(got.c) + ", h=" +
                      std::to_string(got.h) + ")");
  }
  return p;
}

std::vector<Tensor> read_rollout_actions(const std::string& jsonl) {
  std::vector<Tensor> out;
  std::istringstream in(jsonl);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("rollout line is not valid JSON: ") + e.what());
    }
    const auto& acts = j.at("actions");
    if (acts.size() < 2) continue;
    Tensor t({acts.size() - 1, env::Action::kDim});
    for (std::size_t i = 1; i < acts.size(); ++i) {
      for (std::size_t d = 0; d < env::Action::kDim; ++d) t.at(i - 1, d) = acts[i][d].get<double>();
    }
    out.push_back(std::move(t));
  }
  if (out.empty()) throw ConfigError("no rollout episodes with executed actions");
  return out;
}

std::string rollouts_jsonl(const std::vector<RolloutResult>& rollouts) {
  std::string out;
  for (const auto& r : rollouts) out += r.to_json() + "\n";
  return out;
}

}  // namespace ptp
