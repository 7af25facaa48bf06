#include "ptp/env.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ptp/binary_io.hpp"
#include "ptp/error.hpp"
#include "ptp/param_store.hpp"

namespace ptp::env {

namespace {

using Vec2 = std::array<double, 2>;

double dist(const Vec2& a, const Vec2& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

void splat(std::vector<double>& grid, std::size_t g, double x, double y, double mass) {
  const double gu = (x + 1.0) * 0.5 * static_cast<double>(g) - 0.5;
  const double gv = (y + 1.0) * 0.5 * static_cast<double>(g) - 0.5;
  const double fu = std::floor(gu), fv = std::floor(gv);
  const double wu = gu - fu, wv = gv - fv;
  const long iu = static_cast<long>(fu), iv = static_cast<long>(fv);
  const long n = static_cast<long>(g);
  for (int dv = 0; dv < 2; ++dv) {
    for (int du = 0; du < 2; ++du) {
      const long cu = iu + du, cv = iv + dv;
      if (cu < 0 || cv < 0 || cu >= n || cv >= n) continue;
      const double w = (du ? wu : 1.0 - wu) * (dv ? wv : 1.0 - wv);
      grid[static_cast<std::size_t>(cv * n + cu)] += mass * w;
    }
  }
}

constexpr Vec2 kCountGoal{0.0, 0.6};
constexpr Vec2 kStrategyGoal{0.0, 0.8};
constexpr double kCorridorX = 0.6;
constexpr double kCorridorHalfWidth = 0.15;
constexpr double kCorridorHalfHeight = 0.25;
constexpr double kStartJitter = 0.05;

std::array<Vec2, 3> strategy_waypoints(int strategy) {
  const double x = kCorridorX * strategy;
  return {{{x, -0.4}, {x, 0.4}, kStrategyGoal}};
}

}  // namespace

Task parse_task(const std::string& name) {
  if (name == "masked-goal" || name == "masked_goal") return Task::masked_goal;
  if (name == "count-toggle" || name == "count_toggle") return Task::count_toggle;
  if (name == "strategy-commit" || name == "strategy_commit") return Task::strategy_commit;
  throw ConfigError("unknown task: " + name);
}

std::string task_name(Task task) {
  switch (task) {
    case Task::masked_goal: return "masked-goal";
    case Task::count_toggle: return "count-toggle";
    case Task::strategy_commit: return "strategy-commit";
  }
  throw ConfigError("unknown task id");
}

Action Action::from_span(std::span<const double> v) {
  if (v.size() != kDim) throw ConfigError("action must have 3 components");
  return Action{{v[0], v[1]}, v[2]};
}

Action clip_action(const Action& a, const EnvConfig& cfg) {
  Action out;
  for (int i = 0; i < 2; ++i) {
    out.displacement[i] = std::clamp(a.displacement[i], -cfg.max_displacement, cfg.max_displacement);
  }
  out.trigger = std::clamp(a.trigger, 0.0, 1.0);
  return out;
}

std::vector<double> Observation::flatten() const {
  std::vector<double> out = grid;
  out.push_back(proprio[0]);
  out.push_back(proprio[1]);
  out.push_back(reveal);
  return out;
}

std::vector<double> EnvState::flatten() const {
  return {static_cast<double>(task),
          pos[0],
          pos[1],
          goal[0],
          goal[1],
          static_cast<double>(count),
          static_cast<double>(strategy),
          static_cast<double>(timestep),
          static_cast<double>(rng_state & 0xffffffffULL),
          static_cast<double>(rng_state >> 32),
          visited_center ? 1.0 : 0.0,
          static_cast<double>(center_steps),
          static_cast<double>(presses),
          last_trigger ? 1.0 : 0.0,
          static_cast<double>(waypoint),
          hit_designated ? 1.0 : 0.0,
          hit_other ? 1.0 : 0.0,
          done ? 1.0 : 0.0,
          success ? 1.0 : 0.0};
}

EnvState EnvState::unflatten(std::span<const double> v) {
  if (v.size() != kFlatSize) throw IoError("env state record has wrong width");
  EnvState s;
  s.task = static_cast<Task>(static_cast<int>(v[0]));
  s.pos = {v[1], v[2]};
  s.goal = {v[3], v[4]};
  s.count = static_cast<int>(v[5]);
  s.strategy = static_cast<int>(v[6]);
  s.timestep = static_cast<int>(v[7]);
  s.rng_state = static_cast<std::uint64_t>(v[8]) | (static_cast<std::uint64_t>(v[9]) << 32);
  s.visited_center = v[10] != 0.0;
  s.center_steps = static_cast<int>(v[11]);
  s.presses = static_cast<int>(v[12]);
  s.last_trigger = v[13] != 0.0;
  s.waypoint = static_cast<int>(v[14]);
  s.hit_designated = v[15] != 0.0;
  s.hit_other = v[16] != 0.0;
  s.done = v[17] != 0.0;
  s.success = v[18] != 0.0;
  return s;
}

Environment::Environment(EnvConfig cfg) : cfg_(cfg) {
  if (cfg_.grid < 2) throw ConfigError("grid must be at least 2");
  if (cfg_.t_max < 1) throw ConfigError("t_max must be positive");
  if (cfg_.reveal_steps < 1) throw ConfigError("reveal window must be at least one step");
}

std::pair<EnvState, Observation> Environment::reset(Task task, std::uint64_t seed) const {
  if (static_cast<int>(task) < 0 || static_cast<int>(task) > 2) {
    throw ConfigError("unknown task id " + std::to_string(static_cast<int>(task)));
  }
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(task)}));
  std::uniform_real_distribution<double> jitter(-kStartJitter, kStartJitter);
  EnvState s;
  s.task = task;
  s.pos = {kStart[0] + jitter(rng), kStart[1] + jitter(rng)};
  s.rng_state = rng();
  switch (task) {
    case Task::masked_goal: {
      const int slot = std::uniform_int_distribution<int>(0, 7)(rng);
      const double angle = slot * std::numbers::pi / 4.0;
      s.goal = {kGoalRadius * std::cos(angle), kGoalRadius * std::sin(angle)};
      break;
    }
    case Task::count_toggle:
      s.count = std::uniform_int_distribution<int>(2, 4)(rng);
      s.goal = kCountGoal;
      break;
    case Task::strategy_commit:
      s.strategy = std::uniform_int_distribution<int>(0, 1)(rng) ? 1 : -1;
      s.goal = kStrategyGoal;
      break;
  }
  return {s, observe(s)};
}

Observation Environment::observe(const EnvState& s) const {
  const std::size_t g = cfg_.grid;
  Observation o;
  o.grid.assign(g * g, 0.0);
  const bool reveal = s.timestep < cfg_.reveal_steps;
  splat(o.grid, g, s.pos[0], s.pos[1], 1.0);
  switch (s.task) {
    case Task::masked_goal:
      if (reveal) splat(o.grid, g, s.goal[0], s.goal[1], 0.5);
      break;
    case Task::count_toggle:
      splat(o.grid, g, kCountGoal[0], kCountGoal[1], 0.5);
      if (reveal) {
        for (int i = 0; i < s.count && static_cast<std::size_t>(i) < g; ++i) {
          o.grid[(g - 1) * g + static_cast<std::size_t>(i)] = 1.0;
        }
      }
      if (s.last_trigger) o.grid[(g - 1) * g + (g - 1)] = 1.0;
      break;
    case Task::strategy_commit:
      splat(o.grid, g, kStrategyGoal[0], kStrategyGoal[1], 0.5);
      if (reveal) splat(o.grid, g, kCorridorX * s.strategy, kStart[1], 1.0);
      break;
  }
  for (double& v : o.grid) v = std::clamp(v, 0.0, 1.0);
  o.proprio = s.pos;
  o.reveal = reveal ? 1.0 : 0.0;
  return o;
}

StepResult Environment::step(const EnvState& state, const Action& action) const {
  if (state.done) throw UsageError("step() on a finished episode");
  const Action a = clip_action(action, cfg_);
  EnvState s = state;
  for (int i = 0; i < 2; ++i) s.pos[i] = std::clamp(s.pos[i] + a.displacement[i], -1.0, 1.0);
  const bool pressed = a.trigger >= 0.5;
  s.timestep += 1;
  const bool in_center = dist(s.pos, kCenter) < kCenterRadius;
  if (in_center) {
    s.visited_center = true;
    s.center_steps += 1;
  }
  switch (s.task) {
    case Task::masked_goal:
      s.success = s.visited_center && dist(s.pos, s.goal) < kSuccessRadius;
      break;
    case Task::count_toggle:
      if (pressed && !s.last_trigger) s.presses += 1;
      s.success = s.presses == s.count && dist(s.pos, s.goal) < kSuccessRadius;
      break;
    case Task::strategy_commit: {
      const bool in_band = std::abs(s.pos[1]) < kCorridorHalfHeight;
      if (in_band && std::abs(s.pos[0] - kCorridorX * s.strategy) < kCorridorHalfWidth) {
        s.hit_designated = true;
      }
      if (in_band && std::abs(s.pos[0] + kCorridorX * s.strategy) < kCorridorHalfWidth) {
        s.hit_other = true;
      }
      const auto wps = strategy_waypoints(s.strategy);
      if (s.waypoint < 2 && dist(s.pos, wps[static_cast<std::size_t>(s.waypoint)]) < kSuccessRadius) {
        s.waypoint += 1;
      }
      s.success = s.hit_designated && !s.hit_other && dist(s.pos, s.goal) < kSuccessRadius;
      break;
    }
  }
  s.last_trigger = pressed;
  s.done = s.success || s.timestep >= cfg_.t_max;
  StepResult r;
  r.observation = observe(s);
  r.done = s.done;
  r.success = s.success;
  r.state = s;
  return r;
}

std::array<double, 2> Environment::expert_target(const EnvState& s) const {
  switch (s.task) {
    case Task::masked_goal:
      if (!s.visited_center || s.center_steps < cfg_.dwell_steps) return kCenter;
      return s.goal;
    case Task::count_toggle:
      if (!s.visited_center || s.presses < s.count) return kCenter;
      return s.goal;
    case Task::strategy_commit:
      return strategy_waypoints(s.strategy)[static_cast<std::size_t>(std::min(s.waypoint, 2))];
  }
  return s.pos;
}

Action Environment::expert_action(const EnvState& s, double noise_scale, Rng& rng) const {
  const Vec2 target = expert_target(s);
  const double dx = target[0] - s.pos[0], dy = target[1] - s.pos[1];
  Action a;
  a.displacement = {cfg_.expert_gain * dx, cfg_.expert_gain * dy};
  if (s.task == Task::count_toggle && s.visited_center && s.presses < s.count) {
    a.trigger = s.last_trigger ? 0.0 : 1.0;
  }
  if (noise_scale > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_scale);
    a.displacement[0] += noise(rng);
    a.displacement[1] += noise(rng);
    a.trigger += noise(rng);
  }
  return clip_action(a, cfg_);
}

Tensor Trajectory::observation_matrix() const {
  if (observations.empty()) throw UsageError("empty trajectory");
  const std::size_t d = observations[0].grid.size() + 3;
  Tensor m({observations.size(), d});
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const auto row = observations[i].flatten();
    std::copy(row.begin(), row.end(), m.ptr() + i * d);
  }
  return m;
}

Tensor Trajectory::executed_actions() const {
  if (actions.size() < 2) throw UsageError("trajectory has no executed actions");
  Tensor m({actions.size() - 1, Action::kDim});
  for (std::size_t i = 1; i < actions.size(); ++i) {
    const auto a = actions[i].to_array();
    std::copy(a.begin(), a.end(), m.ptr() + (i - 1) * Action::kDim);
  }
  return m;
}

void Trajectory::validate() const {
  if (observations.size() != actions.size() || observations.size() != states.size()) {
    throw ConfigError("trajectory sequences have unequal lengths");
  }
  for (std::size_t i = 1; i < states.size(); ++i) {
    if (states[i].timestep <= states[i - 1].timestep) {
      throw ConfigError("trajectory timesteps not strictly increasing");
    }
  }
}

Trajectory run_expert_episode(const Environment& env, Task task, std::uint64_t seed,
                              double noise_scale) {
  Rng rng(derive_seed(seed, {0xE0E0}));
  auto [state, obs] = env.reset(task, seed);
  Trajectory traj;
  traj.observations.push_back(obs);
  traj.actions.push_back(Action{});
  traj.states.push_back(state);
  while (!state.done) {
    const Action a = env.expert_action(state, noise_scale, rng);
    StepResult r = env.step(state, a);
    traj.observations.push_back(r.observation);
    traj.actions.push_back(a);
    traj.states.push_back(r.state);
    state = r.state;
  }
  traj.success = state.success;
  return traj;
}

DemoDataset generate_demos(Task task, std::size_t n, std::uint64_t seed, double noise_scale,
                           const EnvConfig& cfg) {
  if (n < 1) throw ConfigError("demo count must be at least 1");
  if (noise_scale < 0.0) throw ConfigError("noise_scale must be non-negative");
  const Environment env(cfg);
  DemoDataset ds;
  ds.meta.task = task;
  ds.meta.n = n;
  ds.meta.seed = seed;
  ds.meta.noise_scale = noise_scale;
  ds.meta.env = cfg;
  std::uint64_t attempt = 0;
  while (ds.trajectories.size() < n) {
    Trajectory traj = run_expert_episode(env, task, derive_seed(seed, {attempt}), noise_scale);
    ++attempt;
    if (traj.success) {
      ds.trajectories.push_back(std::move(traj));
    } else {
      ++ds.meta.failures;
    }
    if (attempt >= 10 && 2 * ds.meta.failures > attempt) {
      throw NumericalError("expert failure rate too high for " + task_name(task) + ": " +
                           std::to_string(ds.meta.failures) + " of " + std::to_string(attempt) +
                           " attempts failed (noise_scale " + std::to_string(noise_scale) + ")");
    }
  }
  ds.meta.attempts = attempt;
  return ds;
}

std::string meta_json(const DemoMeta& meta) {
  nlohmann::json j;
  j["format_version"] = DemoMeta::kFormatVersion;
  j["task"] = task_name(meta.task);
  j["n"] = meta.n;
  j["seed"] = meta.seed;
  j["noise_scale"] = meta.noise_scale;
  j["grid"] = meta.env.grid;
  j["t_max"] = meta.env.t_max;
  j["reveal_steps"] = meta.env.reveal_steps;
  j["max_displacement"] = meta.env.max_displacement;
  j["expert_gain"] = meta.env.expert_gain;
  j["dwell_steps"] = meta.env.dwell_steps;
  j["attempts"] = meta.attempts;
  j["failures"] = meta.failures;
  return j.dump(2) + "\n";
}

namespace {

std::string episode_file(const std::string& dir, std::size_t i) {
  std::ostringstream os;
  os << dir << "/episode_" << std::setw(5) << std::setfill('0') << i << ".bin";
  return os.str();
}

}  // namespace

void write_trajectory(std::ostream& os, const Trajectory& traj, const EnvConfig& cfg) {
  traj.validate();
  const std::size_t n = traj.size();
  Tensor obs({n, cfg.obs_dim()});
  Tensor acts({n, Action::kDim});
  Tensor states({n, EnvState::kFlatSize});
  for (std::size_t i = 0; i < n; ++i) {
    const auto o = traj.observations[i].flatten();
    if (o.size() != cfg.obs_dim()) throw ConfigError("observation width does not match config");
    std::copy(o.begin(), o.end(), obs.ptr() + i * cfg.obs_dim());
    const auto a = traj.actions[i].to_array();
    std::copy(a.begin(), a.end(), acts.ptr() + i * Action::kDim);
    const auto s = traj.states[i].flatten();
    std::copy(s.begin(), s.end(), states.ptr() + i * EnvState::kFlatSize);
  }
  io::write_bytes(os, "PTPL");
  io::write_u32(os, kCheckpointVersion);
  write_records(os, {{"observations", obs}, {"actions", acts}, {"states", states}});
  io::write_u32(os, 0);
  io::write_u8(os, traj.success ? 1 : 0);
}

Trajectory read_trajectory(std::istream& is, const EnvConfig& cfg) {
  io::expect_magic(is, "PTPL", "trajectory");
  if (io::read_u32(is) != kCheckpointVersion) throw IoError("unsupported trajectory version");
  auto records = read_records(is);
  io::read_bytes(is, io::read_u32(is));
  if (records.size() != 3) throw IoError("trajectory file must hold three records");
  const Tensor& obs = records[0].value;
  const Tensor& acts = records[1].value;
  const Tensor& states = records[2].value;
  if (obs.cols() != cfg.obs_dim()) throw IoError("trajectory observation width mismatch");
  const std::size_t g2 = cfg.grid * cfg.grid;
  Trajectory traj;
  for (std::size_t i = 0; i < obs.rows(); ++i) {
    Observation o;
    auto row = obs.row_span(i);
    o.grid.assign(row.begin(), row.begin() + static_cast<long>(g2));
    o.proprio = {row[g2], row[g2 + 1]};
    o.reveal = row[g2 + 2];
    traj.observations.push_back(std::move(o));
    traj.actions.push_back(Action::from_span(acts.row_span(i)));
    traj.states.push_back(EnvState::unflatten(states.row_span(i)));
  }
  traj.success = io::read_u8(is) != 0;
  traj.validate();
  return traj;
}

std::string dataset_fingerprint(const DemoDataset& ds) {
  std::ostringstream os(std::ios::binary);
  os << meta_json(ds.meta);
  for (const auto& traj : ds.trajectories) write_trajectory(os, traj, ds.meta.env);
  return io::sha256_hex(os.str());
}

void save_dataset(const DemoDataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  io::write_file(dir + "/meta.json", meta_json(ds.meta));
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    std::ostringstream os(std::ios::binary);
    write_trajectory(os, ds.trajectories[i], ds.meta.env);
    io::write_file(episode_file(dir, i), os.str());
  }
}

DemoDataset load_dataset(const std::string& dir) {
  if (!std::filesystem::exists(dir + "/meta.json")) {
    throw IoError("no demo dataset at " + dir + " (missing meta.json)");
  }
  const auto j = nlohmann::json::parse(io::read_file(dir + "/meta.json"));
  if (j.at("format_version").get<int>() != DemoMeta::kFormatVersion) {
    throw IoError("unsupported dataset format version");
  }
  DemoDataset ds;
  ds.meta.task = parse_task(j.at("task").get<std::string>());
  ds.meta.n = j.at("n").get<std::size_t>();
  ds.meta.seed = j.at("seed").get<std::uint64_t>();
  ds.meta.noise_scale = j.at("noise_scale").get<double>();
  ds.meta.env.grid = j.at("grid").get<std::size_t>();
  ds.meta.env.t_max = j.at("t_max").get<int>();
  ds.meta.env.reveal_steps = j.at("reveal_steps").get<int>();
  ds.meta.env.max_displacement = j.at("max_displacement").get<double>();
  ds.meta.env.expert_gain = j.at("expert_gain").get<double>();
  ds.meta.env.dwell_steps = j.at("dwell_steps").get<int>();
  ds.meta.attempts = j.at("attempts").get<std::size_t>();
  ds.meta.failures = j.at("failures").get<std::size_t>();
  for (std::size_t i = 0; i < ds.meta.n; ++i) {
    std::ifstream in(episode_file(dir, i), std::ios::binary);
    if (!in) throw IoError("missing episode file " + episode_file(dir, i));
    ds.trajectories.push_back(read_trajectory(in, ds.meta.env));
  }
  return ds;
}

}  // namespace ptp::env
