#include "ptp/experiment.hpp"

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "ptp/binary_io.hpp"
#include "ptp/error.hpp"

namespace ptp {

namespace {

const std::vector<std::pair<Arm, std::string>>& arm_names() {
  static const std::vector<std::pair<Arm, std::string>> names{
      {Arm::full_ptp, "full-ptp"},       {Arm::half_ptp, "half-ptp"},
      {Arm::no_ptp, "no-ptp"},           {Arm::encoder_ptp, "encoder-ptp"},
      {Arm::decoder_ptp, "decoder-ptp"}, {Arm::no_history, "no-history"}};
  return names;
}

nlohmann::json parse_object(const std::string& text, const char* what) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(what) + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  return j;
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError(std::string("unknown ") + what + " key '" + key + "'");
  }
}

nlohmann::json env_json(const env::EnvConfig& e) {
  return {{"grid", e.grid},
          {"t_max", e.t_max},
          {"reveal_steps", e.reveal_steps},
          {"max_displacement", e.max_displacement},
          {"expert_gain", e.expert_gain},
          {"dwell_steps", e.dwell_steps}};
}

env::EnvConfig env_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"grid", "t_max", "reveal_steps", "max_displacement", "expert_gain", "dwell_steps"},
                 "env");
  env::EnvConfig e;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("grid", e.grid);
  get("t_max", e.t_max);
  get("reveal_steps", e.reveal_steps);
  get("max_displacement", e.max_displacement);
  get("expert_gain", e.expert_gain);
  get("dwell_steps", e.dwell_steps);
  return e;
}

PredictorConfig predictor_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"window", "hidden", "activation", "epochs", "batch_size", "lr", "split"},
                 "predictor");
  PredictorConfig p = ExperimentConfig{}.predictor;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("window", p.window);
  get("hidden", p.hidden);
  if (j.contains("activation")) p.activation = parse_activation(j.at("activation").get<std::string>());
  get("epochs", p.epochs);
  get("batch_size", p.batch_size);
  get("lr", p.lr);
  get("split", p.split);
  return p;
}

}  // namespace

Arm parse_arm(const std::string& name) {
  std::string n = name;
  std::replace(n.begin(), n.end(), '_', '-');
  for (const auto& [arm, s] : arm_names()) {
    if (s == n) return arm;
  }
  throw ConfigError("unknown arm '" + name + "'");
}

std::string arm_name(Arm arm) {
  for (const auto& [a, s] : arm_names()) {
    if (a == arm) return s;
  }
  throw ConfigError("unknown arm id");
}

const std::vector<Arm>& all_arms() {
  static const std::vector<Arm> arms{Arm::full_ptp,    Arm::half_ptp,    Arm::no_ptp,
                                     Arm::encoder_ptp, Arm::decoder_ptp, Arm::no_history};
  return arms;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("experiment config: " + m); };
  arm_configs(*this);  // validates both stage configs
  if (stage1_epochs < 1 || stage3_epochs < 1) fail("epochs must be positive");
  if (batch_size < 1) fail("batch_size must be positive");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (demos < 1) fail("demos must be positive");
  if (noise_scale < 0.0) fail("noise_scale must be non-negative");
  if (eval_episodes < 1) fail("eval_episodes must be positive");
  if (seeds.empty()) fail("at least one seed is required");
  if (eval_B.empty() || eval_chunk.empty()) fail("eval_B and eval_chunk must be non-empty");
  for (int b : eval_B) {
    if (b < 1) fail("every B must be >= 1");
  }
  for (int ch : eval_chunk) {
    if (ch < 1 || ch > policy.h) fail("every chunk must satisfy 1 <= chunk <= h");
  }
  predictor.validate();
  env::Environment check(env);
  (void)check;
}

std::string ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["task"] = env::task_name(task);
  j["arm"] = arm_name(arm);
  j["policy"] = nlohmann::json::parse(policy.to_json());
  j["env"] = env_json(env);
  j["stage1_epochs"] = stage1_epochs;
  j["stage3_epochs"] = stage3_epochs;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["cosine_lr"] = cosine_lr;
  j["val_fraction"] = val_fraction;
  j["demos"] = demos;
  j["demo_seed"] = demo_seed;
  j["noise_scale"] = noise_scale;
  j["eval_episodes"] = eval_episodes;
  j["seeds"] = seeds;
  j["eval_B"] = eval_B;
  j["eval_chunk"] = eval_chunk;
  j["predictor"] = nlohmann::json::parse(predictor.to_json());
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  const nlohmann::json j = parse_object(text, "experiment config");
  reject_unknown(j,
                 {"task", "arm", "policy", "env", "stage1_epochs", "stage3_epochs", "batch_size", "lr",
                  "cosine_lr", "val_fraction", "demos", "demo_seed", "noise_scale", "eval_episodes",
                  "seeds", "eval_B", "eval_chunk", "predictor"},
                 "experiment config");
  ExperimentConfig c;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("task")) c.task = env::parse_task(j.at("task").get<std::string>());
    if (j.contains("arm")) c.arm = parse_arm(j.at("arm").get<std::string>());
    if (j.contains("policy")) {
      // partial policy objects are merged over the defaults
      nlohmann::json p = nlohmann::json::parse(c.policy.to_json());
      p.update(j.at("policy"));
      // c is chosen by the arm; keep the stored value consistent with k
      if (p.at("c").get<int>() > p.at("k").get<int>()) p["c"] = p.at("k");
      c.policy = PolicyConfig::from_json(p.dump());
    }
    if (j.contains("env")) c.env = env_from_json(j.at("env"));
    get("stage1_epochs", c.stage1_epochs);
    get("stage3_epochs", c.stage3_epochs);
    get("batch_size", c.batch_size);
    get("lr", c.lr);
    get("cosine_lr", c.cosine_lr);
    get("val_fraction", c.val_fraction);
    get("demos", c.demos);
    get("demo_seed", c.demo_seed);
    get("noise_scale", c.noise_scale);
    get("eval_episodes", c.eval_episodes);
    get("seeds", c.seeds);
    get("eval_B", c.eval_B);
    get("eval_chunk", c.eval_chunk);
    if (j.contains("predictor")) c.predictor = predictor_from_json(j.at("predictor"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config has a field of the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const { return io::sha256_hex(to_json()).substr(0, 16); }

StageConfigs arm_configs(const ExperimentConfig& cfg) {
  PolicyConfig s3 = cfg.policy;
  if (cfg.arm == Arm::no_history) {
    s3.k = 2;
    s3.h = std::min(s3.h, default_horizon(2));
    s3.chunk = std::min(s3.chunk, s3.h);
  }
  int c1 = 0;
  int c3 = 0;
  switch (cfg.arm) {
    case Arm::full_ptp: c1 = 2, c3 = s3.k; break;
    case Arm::half_ptp: c1 = 1, c3 = s3.k / 2; break;
    case Arm::no_ptp: break;
    case Arm::encoder_ptp: c1 = 2; break;
    case Arm::decoder_ptp: c3 = s3.k; break;
    case Arm::no_history: break;
  }
  s3.c = c3;
  s3.ptp_in_encoder_stage = false;
  s3.freeze_encoder = true;

  PolicyConfig s1 = s3;
  s1.k = 2;
  s1.h = default_horizon(2);
  s1.chunk = std::min(s1.chunk, s1.h);
  s1.c = c1;
  s1.ptp_in_encoder_stage = c1 > 0;
  s1.freeze_encoder = false;
  s1.validate();
  s3.validate();
  return {s1, s3};
}

std::uint64_t replicate_demo_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.demo_seed + seed;
}

env::DemoDataset replicate_demos(const ExperimentConfig& cfg, std::uint64_t seed) {
  return env::generate_demos(cfg.task, cfg.demos, replicate_demo_seed(cfg, seed), cfg.noise_scale, cfg.env);
}

TrainOptions stage_options(const ExperimentConfig& cfg, int epochs, std::uint64_t seed) {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = cfg.batch_size;
  o.lr = cfg.lr;
  o.cosine_lr = cfg.cosine_lr;
  o.val_fraction = cfg.val_fraction;
  o.seed = seed;
  return o;
}

ArmRun train_arm(const ExperimentConfig& cfg, const env::DemoDataset& demos, std::uint64_t seed,
                 const DiffusionPolicy* encoder,
                 std::function<void(int, const DiffusionPolicy&)> on_stage3_epoch) {
  const StageConfigs sc = arm_configs(cfg);
  ArmRun run;
  if (encoder) {
    run.encoder = *encoder;
  } else {
    TrainResult r1 = train_stage1_encoder(demos, sc.stage1, stage_options(cfg, cfg.stage1_epochs, seed));
    run.encoder = std::move(r1.policy);
    run.stage1 = std::move(r1.report);
  }
  run.cache = cache_embeddings(run.encoder, demos);
  TrainOptions o3 = stage_options(cfg, cfg.stage3_epochs, seed);
  o3.on_epoch = std::move(on_stage3_epoch);
  TrainResult r3 = train_stage3_policy(run.cache, demos, run.encoder, sc.stage3, o3);
  run.policy = std::move(r3.policy);
  run.stage3 = std::move(r3.report);
  return run;
}

std::vector<AblationCell> run_ablation(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<AblationCell> cells;
  for (std::uint64_t seed : cfg.seeds) {
    const env::DemoDataset demos = replicate_demos(cfg, seed);
    const ArmRun run = train_arm(cfg, demos, seed);
    RolloutOptions ro;
    ro.B = cfg.eval_B.front();
    ro.chunk = cfg.eval_chunk.front();
    AblationCell cell;
    cell.seed = seed;
    cell.eval = evaluate(policy_runner(run.policy, ro), cfg.task, cfg.eval_episodes, {seed}, cfg.env);
    cell.success_rate = cell.eval.pooled.success_rate;
    cells.push_back(std::move(cell));
  }
  return cells;
}

double median(std::vector<double> v) {
  if (v.empty()) throw UsageError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace ptp
