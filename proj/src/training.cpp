#include "ptp/training.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ptp/error.hpp"

namespace ptp {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Fisher-Yates with plain modulo draws so the order only depends on the engine.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

std::vector<std::vector<WindowRef>> make_batches(const std::vector<WindowRef>& windows,
                                                 std::size_t batch_size) {
  std::vector<std::vector<WindowRef>> out;
  for (std::size_t i = 0; i < windows.size(); i += batch_size) {
    out.emplace_back(windows.begin() + static_cast<long>(i),
                     windows.begin() + static_cast<long>(std::min(i + batch_size, windows.size())));
  }
  return out;
}

nlohmann::json epoch_json(const std::string& stage, const EpochRecord& e, bool timing) {
  nlohmann::json j;
  j["stage"] = stage;
  j["epoch"] = e.epoch;
  j["train_loss"] = e.train_loss;
  j["val_loss"] = std::isnan(e.val_loss) ? nlohmann::json(nullptr) : nlohmann::json(e.val_loss);
  if (timing) {
    j["seconds"] = e.seconds;
    j["throughput"] = e.throughput;
  }
  return j;
}

using BatchLoss = std::function<Var(Tape&, DiffusionPolicy&, const std::vector<WindowRef>&, Rng&)>;

struct Loop {
  std::string stage;
  std::uint64_t salt = 0;
  bool train_encoder = false;
  bool select_best = false;
  std::vector<WindowRef> train;
  std::vector<WindowRef> val;
  BatchLoss loss;
};

void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  io::write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

std::string training_state_bytes(const ParamStore& store) {
  std::ostringstream os(std::ios::binary);
  save_training_state(os, store);
  return os.str();
}

ParamStore read_training_state(const std::filesystem::path& path) {
  std::istringstream is(io::read_file(path.string()), std::ios::binary);
  return load_training_state(is);
}

double evaluate_loss(DiffusionPolicy& policy, const Loop& loop, const TrainOptions& opts) {
  if (loop.val.empty()) return std::numeric_limits<double>::quiet_NaN();
  Rng rng(derive_seed(opts.seed, {loop.salt, 0x7a1}));
  double total = 0.0;
  Tape tape;
  for (const auto& batch : make_batches(loop.val, opts.batch_size)) {
    tape.reset();
    total += loop.loss(tape, policy, batch, rng).value().item() * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(loop.val.size());
}

TrainReport run_loop(DiffusionPolicy& policy, const Loop& loop, const TrainOptions& opts) {
  if (opts.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (opts.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (loop.train.empty()) throw ConfigError(loop.stage + ": no training windows");

  TrainReport report;
  report.stage = loop.stage;
  report.windows_per_epoch = loop.train.size();
  DiffusionPolicy best = policy;
  double best_score = std::numeric_limits<double>::infinity();
  int start_epoch = 1;

  namespace fs = std::filesystem;
  const fs::path dir = opts.state_dir;
  if (!opts.state_dir.empty()) {
    fs::create_directories(dir);
    if (fs::exists(dir / "progress.json")) {
      const auto prog = nlohmann::json::parse(io::read_file((dir / "progress.json").string()));
      if (prog.at("stage").get<std::string>() != loop.stage) {
        throw ConfigError("training state in " + opts.state_dir + " belongs to stage " +
                          prog.at("stage").get<std::string>());
      }
      start_epoch = prog.at("epoch").get<int>() + 1;
      report.best_epoch = prog.at("best_epoch").get<int>();
      best_score = prog.at("best_score").is_null() ? std::numeric_limits<double>::infinity()
                                                   : prog.at("best_score").get<double>();
      policy.denoiser() = read_training_state(dir / "denoiser.state");
      policy.encoder() = read_training_state(dir / "encoder.state");
      if (loop.select_best) best = load_policy((dir / "best.ckpt").string());
      std::istringstream lines(io::read_file((dir / "report.jsonl").string()));
      for (std::string line; std::getline(lines, line);) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        EpochRecord e;
        e.epoch = j.at("epoch").get<int>();
        e.train_loss = j.at("train_loss").get<double>();
        if (!j.at("val_loss").is_null()) e.val_loss = j.at("val_loss").get<double>();
        e.seconds = j.value("seconds", 0.0);
        e.throughput = j.value("throughput", 0.0);
        report.epochs.push_back(e);
      }
    }
  }

  std::vector<ParamStore*> stores{&policy.denoiser()};
  if (loop.train_encoder) stores.push_back(&policy.encoder());
  AdamConfig adam;
  adam.lr = opts.lr;
  Tape tape;

  for (int epoch = start_epoch; epoch <= opts.epochs; ++epoch) {
    const auto start = Clock::now();
    Rng rng(derive_seed(opts.seed, {loop.salt, static_cast<std::uint64_t>(epoch)}));
    std::vector<WindowRef> order = loop.train;
    shuffle_in_place(order, rng);
    double total = 0.0;
    const auto batches = make_batches(order, opts.batch_size);
    const double total_steps = static_cast<double>(opts.epochs) * static_cast<double>(batches.size());
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      if (opts.cosine_lr) {
        const double step = static_cast<double>(epoch - 1) * static_cast<double>(batches.size()) + b;
        adam.lr = opts.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / total_steps));
      }
      tape.reset();
      Var loss = loop.loss(tape, policy, batch, rng);
      tape.backward(loss);
      clip_grad_norm(stores, opts.clip_norm);
      for (ParamStore* s : stores) adam_step(*s, adam);
      total += loss.value().item() * static_cast<double>(batch.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(order.size());
    rec.seconds = seconds_since(start);
    rec.throughput = static_cast<double>(order.size()) / std::max(rec.seconds, 1e-9);
    rec.val_loss = evaluate_loss(policy, loop, opts);
    if (!std::isfinite(rec.train_loss) || (!loop.val.empty() && !std::isfinite(rec.val_loss))) {
      std::ostringstream os;
      os << loop.stage << ": non-finite loss at epoch " << epoch << " (train " << rec.train_loss
         << ", val " << rec.val_loss << ")";
      throw NumericalError(os.str());
    }
    report.epochs.push_back(rec);
    const double score = loop.val.empty() ? rec.train_loss : rec.val_loss;
    if (!loop.select_best || score < best_score) {
      best_score = score;
      report.best_epoch = epoch;
      if (loop.select_best) best = policy;
    }
    if (opts.on_epoch) opts.on_epoch(epoch, policy);

    if (!opts.state_dir.empty()) {
      write_atomic(dir / "denoiser.state", training_state_bytes(policy.denoiser()));
      write_atomic(dir / "encoder.state", training_state_bytes(policy.encoder()));
      if (loop.select_best) write_atomic(dir / "best.ckpt", policy_bytes(best));
      write_atomic(dir / "report.jsonl", report.to_jsonl());
      nlohmann::json prog;
      prog["stage"] = loop.stage;
      prog["epoch"] = epoch;
      prog["best_epoch"] = report.best_epoch;
      prog["best_score"] = best_score;
      write_atomic(dir / "progress.json", prog.dump());
    }
    if (opts.stop_after_epoch > 0 && epoch >= opts.stop_after_epoch && epoch < opts.epochs) {
      throw UsageError(loop.stage + ": stopped after epoch " + std::to_string(epoch));
    }
  }
  if (loop.select_best) policy = best;
  return report;
}

}  // namespace

std::string TrainReport::to_jsonl(bool include_timing) const {
  std::string out;
  for (const auto& e : epochs) out += epoch_json(stage, e, include_timing).dump() + "\n";
  return out;
}

std::vector<WindowRef> enumerate_windows(const env::DemoDataset& data,
                                         const std::vector<std::size_t>& trajs,
                                         const PolicyConfig& cfg, std::size_t* skipped) {
  std::vector<WindowRef> out;
  std::size_t skip = 0;
  for (std::size_t id : trajs) {
    const int len = static_cast<int>(data.trajectories.at(id).size());
    for (int t = 0; t < len; ++t) {
      const WindowIndex w = make_window_index(t, len, cfg);
      bool any = false;
      for (bool m : w.target_mask) any = any || m;
      if (any) {
        out.push_back({id, t});
      } else {
        ++skip;
      }
    }
  }
  if (skipped) *skipped = skip;
  return out;
}

Var raw_batch_loss(Tape& tape, DiffusionPolicy& policy, const env::DemoDataset& data,
                   const std::vector<WindowRef>& batch, Rng& rng, bool trainable_encoder) {
  std::vector<TrainingWindow> windows;
  windows.reserve(batch.size());
  std::vector<const TrainingWindow*> wp;
  std::vector<const env::Trajectory*> tp;
  for (const auto& ref : batch) {
    windows.push_back(make_training_window(data.trajectories.at(ref.traj), ref.t, policy.config()));
    tp.push_back(&data.trajectories[ref.traj]);
  }
  for (const auto& w : windows) wp.push_back(&w);
  return ddpm_loss(tape, policy, wp, tp, rng, trainable_encoder);
}

io::Digest encoder_fingerprint(const DiffusionPolicy& policy) {
  return io::sha256(encoder_bytes(policy));
}

std::string cache_config_json(const DiffusionPolicy& encoder_policy, const env::DemoDataset& data) {
  const auto& cfg = encoder_policy.config();
  nlohmann::json j;
  j["obs_dim"] = cfg.obs_dim;
  j["embed_dim"] = cfg.embed_dim;
  j["proprio_passthrough"] = cfg.proprio_passthrough;
  j["encoder_hidden"] = cfg.encoder_hidden;
  j["activation"] = activation_name(cfg.activation);
  j["dataset"] = env::dataset_fingerprint(data);
  j["trajectories"] = data.trajectories.size();
  return j.dump();
}

EmbeddingCache cache_embeddings(const DiffusionPolicy& encoder_policy, const env::DemoDataset& data) {
  EmbeddingCache cache;
  cache.encoder_fingerprint = encoder_fingerprint(encoder_policy);
  cache.config_json = cache_config_json(encoder_policy, data);
  for (const auto& traj : data.trajectories) {
    cache.embeddings.push_back(encode_frames(encoder_policy, traj.observation_matrix()));
  }
  return cache;
}

std::string cache_bytes(const EmbeddingCache& cache) {
  std::ostringstream os(std::ios::binary);
  io::write_bytes(os, "PTPC");
  io::write_u32(os, 1);
  io::write_bytes(os, std::string_view(reinterpret_cast<const char*>(cache.encoder_fingerprint.data()),
                                       cache.encoder_fingerprint.size()));
  io::write_u32(os, static_cast<std::uint32_t>(cache.config_json.size()));
  io::write_bytes(os, cache.config_json);
  std::vector<NamedTensor> records;
  for (std::size_t i = 0; i < cache.embeddings.size(); ++i) {
    std::ostringstream name;
    name << "traj_" << std::setw(5) << std::setfill('0') << i;
    records.push_back({name.str(), cache.embeddings[i]});
  }
  write_records(os, records);
  return os.str();
}

void save_cache(const std::string& path, const EmbeddingCache& cache) {
  io::write_file(path, cache_bytes(cache));
}

EmbeddingCache load_cache(const std::string& path) {
  std::istringstream is(io::read_file(path), std::ios::binary);
  io::expect_magic(is, "PTPC", "embedding cache");
  if (io::read_u32(is) != 1) throw IoError("unsupported embedding cache version");
  EmbeddingCache cache;
  const std::string fp = io::read_bytes(is, cache.encoder_fingerprint.size());
  std::copy(fp.begin(), fp.end(), cache.encoder_fingerprint.begin());
  cache.config_json = io::read_bytes(is, io::read_u32(is));
  for (auto& rec : read_records(is)) cache.embeddings.push_back(std::move(rec.value));
  return cache;
}

void check_cache(const EmbeddingCache& cache, const DiffusionPolicy& encoder_policy,
                 const env::DemoDataset& data) {
  if (cache.encoder_fingerprint != encoder_fingerprint(encoder_policy)) {
    throw StaleCacheError("embedding cache was built with a different encoder; re-run caching");
  }
  if (cache.config_json != cache_config_json(encoder_policy, data)) {
    throw StaleCacheError("embedding cache was built for a different dataset or encoder config; re-run caching");
  }
  for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
    if (cache.embeddings.at(i).rows() != data.trajectories[i].size()) {
      throw StaleCacheError("embedding cache frame count differs from trajectory " + std::to_string(i));
    }
  }
}

Var cached_batch_loss(Tape& tape, DiffusionPolicy& policy, const EmbeddingCache& cache,
                      const env::DemoDataset& data, const std::vector<WindowRef>& batch, Rng& rng) {
  const auto& cfg = policy.config();
  const auto k = static_cast<std::size_t>(cfg.k);
  if (cache.embed_dim() != cfg.embed_dim) throw ConfigError("cache embedding width differs from policy");
  Tensor emb({batch.size(), k * cfg.embed_dim});
  std::vector<Tensor> targets;
  std::vector<WindowIndex> idx;
  targets.reserve(batch.size());
  idx.reserve(batch.size());
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto& traj = data.trajectories.at(batch[r].traj);
    const Tensor& frames = cache.embeddings.at(batch[r].traj);
    idx.push_back(make_window_index(batch[r].t, static_cast<int>(traj.size()), cfg));
    for (std::size_t i = 0; i < k; ++i) {
      const auto src = frames.row_span(static_cast<std::size_t>(idx.back().context[i]));
      std::copy(src.begin(), src.end(), emb.ptr() + r * k * cfg.embed_dim + i * cfg.embed_dim);
    }
    targets.push_back(window_targets(traj, idx.back(), cfg));
  }
  std::vector<const Tensor*> tp;
  std::vector<const std::vector<bool>*> mp;
  std::vector<const WindowIndex*> ip;
  std::vector<const env::Trajectory*> trp;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    tp.push_back(&targets[r]);
    mp.push_back(&idx[r].target_mask);
    ip.push_back(&idx[r]);
    trp.push_back(&data.trajectories[batch[r].traj]);
  }
  const TargetBatch tb = make_target_batch(tp, mp, cfg);
  ConditioningInput cond{tape.constant(std::move(emb)), {}};
  if (cfg.condition_on_past_actions) cond.past_actions = context_actions(trp, ip, cfg);
  return ddpm_loss_from_conditioning(tape, policy, tb, cond, rng);
}

namespace {

std::vector<std::size_t> all_ids(const env::DemoDataset& data) {
  std::vector<std::size_t> ids(data.trajectories.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return ids;
}

}  // namespace

TrainResult train_stage1_encoder(const env::DemoDataset& data, const PolicyConfig& cfg_short,
                                 const TrainOptions& opts) {
  if (cfg_short.k > 2) throw ConfigError("stage 1 uses a short context (k <= 2)");
  if (cfg_short.c != 0 && !cfg_short.ptp_in_encoder_stage) {
    throw ConfigError("stage 1 predicts past tokens only with ptp_in_encoder_stage");
  }
  if (data.trajectories.empty()) throw ConfigError("stage 1: empty dataset");
  if (opts.val_fraction < 0.0 || opts.val_fraction >= 1.0) throw ConfigError("val_fraction must be in [0, 1)");

  std::vector<std::size_t> ids = all_ids(data);
  Rng split_rng(derive_seed(opts.seed, {0x5b11}));
  shuffle_in_place(ids, split_rng);
  const auto n = ids.size();
  std::size_t n_val = static_cast<std::size_t>(std::lround(opts.val_fraction * static_cast<double>(n)));
  n_val = std::min(n_val, n - 1);
  std::vector<std::size_t> val_ids(ids.begin(), ids.begin() + static_cast<long>(n_val));
  std::vector<std::size_t> train_ids(ids.begin() + static_cast<long>(n_val), ids.end());
  std::sort(val_ids.begin(), val_ids.end());
  std::sort(train_ids.begin(), train_ids.end());

  DiffusionPolicy policy(cfg_short, derive_seed(opts.seed, {0x1}));
  Loop loop;
  loop.stage = "stage1";
  loop.salt = 0x51;
  loop.train_encoder = true;
  loop.select_best = true;
  std::size_t skipped = 0;
  loop.train = enumerate_windows(data, train_ids, cfg_short, &skipped);
  loop.val = enumerate_windows(data, val_ids, cfg_short);
  loop.loss = [&](Tape& tape, DiffusionPolicy& p, const std::vector<WindowRef>& b, Rng& rng) {
    return raw_batch_loss(tape, p, data, b, rng, true);
  };
  TrainReport report = run_loop(policy, loop, opts);
  report.skipped_windows = skipped;
  return {std::move(policy), std::move(report)};
}

TrainResult train_stage3_policy(const EmbeddingCache& cache, const env::DemoDataset& data,
                                const DiffusionPolicy& encoder_source, const PolicyConfig& cfg_long,
                                const TrainOptions& opts) {
  check_cache(cache, encoder_source, data);
  DiffusionPolicy policy(cfg_long, derive_seed(opts.seed, {0x3}));
  policy.adopt_encoder(encoder_source);
  Loop loop;
  loop.stage = "stage3";
  loop.salt = 0x53;
  std::size_t skipped = 0;
  loop.train = enumerate_windows(data, all_ids(data), cfg_long, &skipped);
  loop.loss = [&](Tape& tape, DiffusionPolicy& p, const std::vector<WindowRef>& b, Rng& rng) {
    return cached_batch_loss(tape, p, cache, data, b, rng);
  };
  TrainReport report = run_loop(policy, loop, opts);
  report.skipped_windows = skipped;
  return {std::move(policy), std::move(report)};
}

TrainResult train_end_to_end(const env::DemoDataset& data, const PolicyConfig& cfg_long,
                             const TrainOptions& opts, const DiffusionPolicy* encoder_source) {
  DiffusionPolicy policy(cfg_long, derive_seed(opts.seed, {0x3}));
  if (encoder_source) policy.adopt_encoder(*encoder_source);
  const bool train_encoder = !cfg_long.freeze_encoder;
  Loop loop;
  loop.stage = "end_to_end";
  loop.salt = 0x53;  // same stream as stage 3 so the two are comparable step by step
  loop.train_encoder = train_encoder;
  std::size_t skipped = 0;
  loop.train = enumerate_windows(data, all_ids(data), cfg_long, &skipped);
  loop.loss = [&](Tape& tape, DiffusionPolicy& p, const std::vector<WindowRef>& b, Rng& rng) {
    return raw_batch_loss(tape, p, data, b, rng, train_encoder);
  };
  TrainReport report = run_loop(policy, loop, opts);
  report.skipped_windows = skipped;
  return {std::move(policy), std::move(report)};
}

std::string BenchResult::to_json() const {
  nlohmann::json j;
  j["k"] = k;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["cached_windows_per_sec"] = cached_windows_per_sec;
  j["end_to_end_windows_per_sec"] = end_to_end_windows_per_sec;
  j["ratio"] = ratio();
  j["cache_build_seconds"] = cache_build_seconds;
  return j.dump(2);
}

BenchResult bench_throughput(const env::DemoDataset& data, int k, int steps, std::size_t batch_size,
                             std::uint64_t seed) {
  if (steps < 1) throw ConfigError("bench needs at least one step");
  PolicyConfig cfg = make_policy_config(k, k);
  DiffusionPolicy cached(cfg, derive_seed(seed, {0xbe}));
  DiffusionPolicy e2e = cached;

  BenchResult r;
  r.k = k;
  r.steps = steps;
  r.batch_size = batch_size;
  auto start = Clock::now();
  const EmbeddingCache cache = cache_embeddings(cached, data);
  r.cache_build_seconds = seconds_since(start);

  std::vector<WindowRef> windows = enumerate_windows(data, all_ids(data), cfg);
  Rng order_rng(derive_seed(seed, {0xbf}));
  shuffle_in_place(windows, order_rng);
  auto batch_at = [&](int step) {
    std::vector<WindowRef> b;
    for (std::size_t i = 0; i < batch_size; ++i) {
      b.push_back(windows[(static_cast<std::size_t>(step) * batch_size + i) % windows.size()]);
    }
    return b;
  };
  AdamConfig adam;
  Tape tape;

  Rng rng(derive_seed(seed, {0xc0}));
  start = Clock::now();
  for (int s = 0; s < steps; ++s) {
    tape.reset();
    tape.backward(cached_batch_loss(tape, cached, cache, data, batch_at(s), rng));
    clip_grad_norm(cached.denoiser(), 1.0);
    adam_step(cached.denoiser(), adam);
  }
  r.cached_windows_per_sec = static_cast<double>(steps) * static_cast<double>(batch_size) / seconds_since(start);

  rng = Rng(derive_seed(seed, {0xc0}));
  start = Clock::now();
  for (int s = 0; s < steps; ++s) {
    tape.reset();
    tape.backward(raw_batch_loss(tape, e2e, data, batch_at(s), rng, true));
    clip_grad_norm({&e2e.denoiser(), &e2e.encoder()}, 1.0);
    adam_step(e2e.denoiser(), adam);
    adam_step(e2e.encoder(), adam);
  }
  r.end_to_end_windows_per_sec = static_cast<double>(steps) * static_cast<double>(batch_size) / seconds_since(start);
  return r;
}

}  // namespace ptp
