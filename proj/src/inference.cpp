#include "ptp/inference.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ptp/error.hpp"

namespace ptp {

HistoryBuffer::HistoryBuffer(int k, int subsample_K, std::size_t embed_dim)
    : capacity_(static_cast<std::size_t>((k - 1) * subsample_K + 1)) {
  if (k < 1 || subsample_K < 1 || embed_dim < 1) throw ConfigError("history buffer needs k, K, embed_dim >= 1");
  ring_.resize(capacity_);
}

void HistoryBuffer::reset(const env::Observation& first, std::vector<double> first_embedding) {
  first_ = Slot{first, std::move(first_embedding), env::Action{}};
  ring_.assign(capacity_, Slot{});
  ring_[0] = first_;
  steps_ = 0;
}

void HistoryBuffer::push(const env::Action& executed, const env::Observation& next,
                         std::vector<double> next_embedding) {
  ++steps_;
  ring_[static_cast<std::size_t>(steps_) % capacity_] = Slot{next, std::move(next_embedding), executed};
}

const HistoryBuffer::Slot& HistoryBuffer::slot(int index) const {
  if (index == 0) return first_;
  if (index < 0 || index > steps_ || static_cast<std::size_t>(steps_ - index) >= capacity_) {
    throw UsageError("history index " + std::to_string(index) + " is outside the buffer at step " +
                     std::to_string(steps_));
  }
  return ring_[static_cast<std::size_t>(index) % capacity_];
}

const env::Observation& HistoryBuffer::observation(int index) const { return slot(index).obs; }
const std::vector<double>& HistoryBuffer::embedding(int index) const { return slot(index).embedding; }
const env::Action& HistoryBuffer::action(int index) const { return slot(index).action; }

Tensor HistoryBuffer::context_embeddings(const PolicyConfig& cfg) const {
  const WindowIndex w = make_window_index(steps_, steps_ + 1, cfg);
  Tensor out({static_cast<std::size_t>(cfg.k), cfg.embed_dim});
  for (int i = 0; i < cfg.k; ++i) {
    const auto& e = embedding(w.context[static_cast<std::size_t>(i)]);
    if (e.size() != cfg.embed_dim) throw ConfigError("history embedding width differs from policy");
    std::copy(e.begin(), e.end(), out.ptr() + static_cast<std::size_t>(i) * cfg.embed_dim);
  }
  return out;
}

Tensor HistoryBuffer::context_actions(const PolicyConfig& cfg) const {
  const WindowIndex w = make_window_index(steps_, steps_ + 1, cfg);
  Tensor out({1, static_cast<std::size_t>(cfg.k) * cfg.action_dim});
  for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.k); ++i) {
    if (w.context_pad[i]) continue;
    const auto a = action(w.context[i]).to_array();
    auto dst = out.data().subspan(i * cfg.action_dim, cfg.action_dim);
    std::copy(a.begin(), a.end(), dst.begin());
    normalize_actions(dst);
  }
  return out;
}

double score_candidate(const Tensor& candidate_past, const Tensor& executed_past,
                       const std::vector<bool>& mask) {
  if (candidate_past.shape() != executed_past.shape() || candidate_past.rows() != mask.size()) {
    throw UsageError("candidate past segment is not aligned with the executed actions");
  }
  double score = 0.0;
  for (std::size_t j = 0; j < mask.size(); ++j) {
    if (!mask[j]) continue;
    for (std::size_t d = 0; d < candidate_past.cols(); ++d) {
      const double diff = candidate_past.at(j, d) - executed_past.at(j, d);
      score += diff * diff;
    }
  }
  return score;
}

Selection select_candidate(const std::vector<Tensor>& candidate_pasts, const Tensor& executed_past,
                           const std::vector<bool>& mask) {
  if (candidate_pasts.empty()) throw UsageError("select_candidate needs at least one candidate");
  Selection sel;
  for (const auto& c : candidate_pasts) sel.scores.push_back(score_candidate(c, executed_past, mask));
  for (std::size_t i = 1; i < sel.scores.size(); ++i) {
    if (sel.scores[i] < sel.scores[sel.index]) sel.index = i;
  }
  return sel;
}

std::string RolloutResult::to_json() const {
  nlohmann::json j;
  j["success"] = success;
  j["length"] = length;
  j["selected"] = selected;
  j["scores"] = scores;
  nlohmann::json actions = nlohmann::json::array();
  nlohmann::json positions = nlohmann::json::array();
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    const auto a = trajectory.actions[i].to_array();
    actions.push_back({a[0], a[1], a[2]});
    positions.push_back({trajectory.states[i].pos[0], trajectory.states[i].pos[1]});
  }
  j["actions"] = actions;
  j["positions"] = positions;
  return j.dump();
}

namespace {

void record_step(env::Trajectory& traj, const env::Action& a, const env::StepResult& r) {
  traj.observations.push_back(r.observation);
  traj.actions.push_back(a);
  traj.states.push_back(r.state);
}

std::vector<double> embed_one(const DiffusionPolicy& policy, const env::Observation& obs) {
  const auto flat = obs.flatten();
  const Tensor e = encode_frames(policy, Tensor({1, flat.size()}, flat));
  return {e.data().begin(), e.data().end()};
}

}  // namespace

RolloutResult rollout(const DiffusionPolicy& policy, const env::Environment& env, env::Task task,
                      const RolloutOptions& opts, std::uint64_t env_seed, std::uint64_t policy_seed) {
  const PolicyConfig& cfg = policy.config();
  if (cfg.obs_dim != env.config().obs_dim()) throw ConfigError("policy observation width does not match environment");
  if (cfg.action_dim != env::Action::kDim) throw ConfigError("policy action width does not match environment");
  if (opts.B < 1) throw ConfigError("B must be >= 1");
  if (opts.chunk < 1 || opts.chunk > cfg.h) throw ConfigError("chunk must be in [1, h]");

  RolloutResult res;
  auto [state, obs] = env.reset(task, env_seed);
  res.trajectory.observations.push_back(obs);
  res.trajectory.actions.push_back(env::Action{});
  res.trajectory.states.push_back(state);
  HistoryBuffer hist(cfg.k, cfg.subsample_K, cfg.embed_dim);
  hist.reset(obs, embed_one(policy, obs));
  const auto A = cfg.action_dim;
  const auto c = static_cast<std::size_t>(cfg.c);
  const double max_disp = env.config().max_displacement;

  for (std::uint64_t decision = 0; !state.done; ++decision) {
    const int t = hist.timestep();
    const WindowIndex w = make_window_index(t, t + 1, cfg);
    const Tensor emb = hist.context_embeddings(cfg);
    std::optional<Tensor> past_cond;
    if (cfg.condition_on_past_actions) past_cond = hist.context_actions(cfg);
    const int n = opts.verify ? opts.B : 1;
    std::vector<Rng> rngs;
    for (int b = 0; b < n; ++b) rngs.emplace_back(derive_seed(policy_seed, {decision, static_cast<std::uint64_t>(b)}));
    const Tensor cands = sample_windows(policy, emb, past_cond ? &*past_cond : nullptr, rngs, max_disp);
    if (!cands.all_finite()) throw NumericalError("policy produced non-finite actions at step " + std::to_string(t));

    Selection sel;
    if (opts.verify) {
      Tensor executed({std::max<std::size_t>(c, 1), A});
      std::vector<bool> mask(w.target_mask.begin(), w.target_mask.begin() + static_cast<long>(c));
      for (std::size_t j = 0; j < c; ++j) {
        if (!mask[j]) continue;
        const auto a = hist.action(w.targets[j]).to_array();
        std::copy(a.begin(), a.end(), executed.ptr() + j * A);
      }
      std::vector<Tensor> pasts;
      for (int b = 0; b < n; ++b) {
        Tensor p({std::max<std::size_t>(c, 1), A});
        std::copy(cands.ptr() + static_cast<std::size_t>(b) * cands.cols(),
                  cands.ptr() + static_cast<std::size_t>(b) * cands.cols() + c * A, p.ptr());
        pasts.push_back(std::move(p));
      }
      if (c == 0) mask = {false};
      sel = select_candidate(pasts, executed, mask);
    } else {
      sel.scores = {0.0};
    }
    res.selected.push_back(static_cast<int>(sel.index));
    res.scores.push_back(sel.scores);

    const double* chosen = cands.ptr() + sel.index * cands.cols();
    for (int m = 0; m < opts.chunk && !state.done; ++m) {
      const double* tok = chosen + (c + static_cast<std::size_t>(m)) * A;
      const env::Action a = env::clip_action(env::Action::from_span({tok, A}), env.config());
      env::StepResult r = env.step(state, a);
      record_step(res.trajectory, a, r);
      hist.push(a, r.observation, embed_one(policy, r.observation));
      state = r.state;
    }
  }
  res.success = state.success;
  res.length = state.timestep;
  res.trajectory.success = state.success;
  return res;
}

EpisodeRunner policy_runner(const DiffusionPolicy& policy, const RolloutOptions& opts) {
  return [&policy, opts](const env::Environment& env, env::Task task, std::uint64_t es, std::uint64_t ps) {
    return rollout(policy, env, task, opts, es, ps);
  };
}

EpisodeRunner expert_runner(double noise_scale) {
  return [noise_scale](const env::Environment& env, env::Task task, std::uint64_t es, std::uint64_t ps) {
    Rng rng(derive_seed(ps, {0}));
    RolloutResult res;
    auto [state, obs] = env.reset(task, es);
    res.trajectory.observations.push_back(obs);
    res.trajectory.actions.push_back(env::Action{});
    res.trajectory.states.push_back(state);
    while (!state.done) {
      const env::Action a = env.expert_action(state, noise_scale, rng);
      env::StepResult r = env.step(state, a);
      record_step(res.trajectory, a, r);
      state = r.state;
    }
    res.success = res.trajectory.success = state.success;
    res.length = state.timestep;
    return res;
  };
}

EpisodeRunner zero_runner() {
  return [](const env::Environment& env, env::Task task, std::uint64_t es, std::uint64_t) {
    RolloutResult res;
    auto [state, obs] = env.reset(task, es);
    res.trajectory.observations.push_back(obs);
    res.trajectory.actions.push_back(env::Action{});
    res.trajectory.states.push_back(state);
    while (!state.done) {
      env::StepResult r = env.step(state, env::Action{});
      record_step(res.trajectory, env::Action{}, r);
      state = r.state;
    }
    res.success = res.trajectory.success = state.success;
    res.length = state.timestep;
    return res;
  };
}

Interval wilson_interval(int successes, int trials, double z) {
  if (trials <= 0) return {0.0, 1.0};
  const double n = trials;
  const double p = successes / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double centre = (p + z2 / (2 * n)) / denom;
  const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom;
  // the bounds are exactly 0 and 1 at the extremes; the formula leaves ulps
  return {successes == 0 ? 0.0 : std::max(0.0, centre - half),
          successes == trials ? 1.0 : std::min(1.0, centre + half)};
}

std::uint64_t eval_env_seed(std::uint64_t seed, int episode) {
  return derive_seed(seed, {0xe7a1, static_cast<std::uint64_t>(episode)});
}

std::uint64_t eval_policy_seed(std::uint64_t seed, int episode) {
  return derive_seed(seed, {0x9011, static_cast<std::uint64_t>(episode)});
}

EvalResult evaluate(const EpisodeRunner& runner, env::Task task, int episodes,
                    const std::vector<std::uint64_t>& seeds, const env::EnvConfig& env_cfg,
                    bool keep_rollouts) {
  if (episodes < 1) throw ConfigError("episodes must be >= 1");
  if (seeds.empty()) throw ConfigError("evaluation needs at least one seed");
  const env::Environment env(env_cfg);
  EvalResult out;
  int total_success = 0;
  for (std::uint64_t seed : seeds) {
    SeedResult sr;
    sr.seed = seed;
    sr.episodes = episodes;
    for (int e = 0; e < episodes; ++e) {
      RolloutResult r = runner(env, task, eval_env_seed(seed, e), eval_policy_seed(seed, e));
      sr.successes += r.success ? 1 : 0;
      if (keep_rollouts) out.rollouts.push_back(std::move(r));
    }
    sr.success_rate = static_cast<double>(sr.successes) / episodes;
    sr.ci = wilson_interval(sr.successes, episodes);
    total_success += sr.successes;
    out.per_seed.push_back(sr);
  }
  const int n = episodes * static_cast<int>(seeds.size());
  out.pooled.episodes = n;
  out.pooled.successes = total_success;
  out.pooled.success_rate = static_cast<double>(total_success) / n;
  out.pooled.ci = wilson_interval(total_success, n);
  return out;
}

std::string eval_csv_rows(const EvalRowInfo& info, const EvalResult& result) {
  std::ostringstream os;
  os << std::setprecision(6);
  for (const auto& s : result.per_seed) {
    os << info.task << ',' << info.arm << ',' << info.k << ',' << info.c << ',' << info.B << ','
       << info.chunk << ',' << s.seed << ',' << s.success_rate << ',' << s.ci.low << ',' << s.ci.high
       << ',' << info.config_hash << '\n';
  }
  return os.str();
}

std::string eval_json(const EvalRowInfo& info, const EvalResult& result) {
  nlohmann::json j;
  j["task"] = info.task;
  j["arm"] = info.arm;
  j["k"] = info.k;
  j["c"] = info.c;
  j["B"] = info.B;
  j["chunk"] = info.chunk;
  j["config_hash"] = info.config_hash;
  auto seed_json = [](const SeedResult& s) {
    return nlohmann::json{{"seed", s.seed},           {"episodes", s.episodes},
                          {"successes", s.successes}, {"success_rate", s.success_rate},
                          {"ci_low", s.ci.low},       {"ci_high", s.ci.high}};
  };
  j["per_seed"] = nlohmann::json::array();
  for (const auto& s : result.per_seed) j["per_seed"].push_back(seed_json(s));
  j["pooled"] = seed_json(result.pooled);
  j["pooled"].erase("seed");
  return j.dump(2);
}

}  // namespace ptp
