// Command-line entry point: gen-demos, train, cache, rollout, eval, analyze,
// bench, sweep. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ptp/binary_io.hpp"
#include "ptp/error.hpp"
#include "ptp/orchestrate.hpp"

using namespace ptp;

namespace {

// Flags shared by every subcommand. Anything left unset keeps the value
// from --config, which in turn overrides the built-in defaults.
struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::string runs_dir;
  std::optional<std::string> task, arm;
  std::optional<int> k, K, epochs1, epochs3, episodes;
  std::optional<std::size_t> n, batch;
  std::optional<double> noise, lr;
  std::optional<bool> cosine_lr;
  std::optional<std::uint64_t> demo_seed;
  std::vector<std::uint64_t> seeds;
  std::vector<int> B, chunks;
  std::optional<int> window;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "JSON experiment config")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override any config key, e.g. policy.embed_dim=16");
    app->add_option("--runs-dir", runs_dir, "output root (default $PTP_RUNS_DIR or ./runs)");
    app->add_option("--task", task, "masked-goal | count-toggle | strategy-commit");
    app->add_option("--arm", arm, "full-ptp | half-ptp | no-ptp | encoder-ptp | decoder-ptp | no-history");
    app->add_option("--k", k, "context length");
    app->add_option("--K", K, "temporal subsampling stride");
    app->add_option("--n", n, "number of demos");
    app->add_option("--noise", noise, "expert noise scale");
    app->add_option("--demo-seed", demo_seed, "base demo seed");
    app->add_option("--seed", seeds, "replicate seeds (comma separated)")->delimiter(',');
    app->add_option("--epochs1", epochs1, "stage-1 epochs");
    app->add_option("--epochs3", epochs3, "stage-3 epochs");
    app->add_option("--batch", batch, "batch size");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--cosine-lr", cosine_lr, "cosine learning-rate decay (true/false)");
    app->add_option("--episodes", episodes, "evaluation episodes per seed");
    app->add_option("--B", B, "candidate counts (comma separated)")->delimiter(',');
    app->add_option("--chunk", chunks, "executed chunk sizes (comma separated)")->delimiter(',');
    app->add_option("--window", window, "predictor window W");
  }

  ExperimentConfig build() const {
    nlohmann::json j = nlohmann::json::parse(ExperimentConfig{}.to_json());
    if (!config_file.empty()) {
      try {
        j.merge_patch(nlohmann::json::parse(io::read_file(config_file)));
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(config_file + " is not valid JSON: " + e.what());
      }
    }
    nlohmann::json f = nlohmann::json::object();  // a null patch would replace everything
    if (task) f["task"] = *task;
    if (arm) f["arm"] = *arm;
    if (k) f["policy"]["k"] = *k;
    if (K) f["policy"]["subsample_K"] = *K;
    if (n) f["demos"] = *n;
    if (noise) f["noise_scale"] = *noise;
    if (demo_seed) f["demo_seed"] = *demo_seed;
    if (!seeds.empty()) f["seeds"] = seeds;
    if (epochs1) f["stage1_epochs"] = *epochs1;
    if (epochs3) f["stage3_epochs"] = *epochs3;
    if (batch) f["batch_size"] = *batch;
    if (lr) f["lr"] = *lr;
    if (cosine_lr) f["cosine_lr"] = *cosine_lr;
    if (episodes) f["eval_episodes"] = *episodes;
    if (!B.empty()) f["eval_B"] = B;
    if (!chunks.empty()) f["eval_chunk"] = chunks;
    if (window) f["predictor"]["window"] = *window;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
      nlohmann::json value;
      try {
        value = nlohmann::json::parse(s.substr(eq + 1));
      } catch (const nlohmann::json::exception&) {
        value = s.substr(eq + 1);  // bare strings
      }
      nlohmann::json* node = &f;
      std::string key = s.substr(0, eq);
      for (std::size_t dot; (dot = key.find('.')) != std::string::npos; key = key.substr(dot + 1)) {
        node = &(*node)[key.substr(0, dot)];
      }
      (*node)[key] = value;
    }
    j.merge_patch(f);
    return ExperimentConfig::from_json(j.dump());
  }

  fs::path root() const { return runs_dir.empty() ? default_runs_root() : fs::path(runs_dir); }
};

std::string g_command;

RunLayout make_layout(const ConfigFlags& flags) {
  RunLayout layout(flags.root(), flags.build());
  write_run_config(layout);
  return layout;
}

void say(const std::string& s) { std::cout << s << std::endl; }

ExperimentConfig with_arm(ExperimentConfig cfg, Arm arm) {
  cfg.arm = arm;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------- commands

int cmd_gen_demos(const ConfigFlags& flags) {
  const RunLayout layout = make_layout(flags);
  for (auto seed : layout.cfg.seeds) {
    const auto ds = obtain_demos(layout, seed, true, g_command);
    say(layout.demos_dir(seed).string() + " " + std::to_string(ds.trajectories.size()) + " episodes " +
        content_hash(layout.demos_dir(seed)));
  }
  return 0;
}

int cmd_train(const ConfigFlags& flags, bool no_cache) {
  const RunLayout layout = make_layout(flags);
  for (auto seed : layout.cfg.seeds) {
    const auto demos = obtain_demos(layout, seed, false);
    const auto encoder = obtain_encoder(layout, seed, demos, g_command);
    obtain_policy(layout, seed, demos, encoder, no_cache, g_command);
    say(layout.policy_path(seed).string() + " " + content_hash(layout.policy_path(seed)));
  }
  return 0;
}

int cmd_cache(const ConfigFlags& flags) {
  const RunLayout layout = make_layout(flags);
  for (auto seed : layout.cfg.seeds) {
    const auto demos = obtain_demos(layout, seed, false);
    if (!fs::exists(layout.encoder_path(seed))) {
      throw UsageError("no encoder at " + layout.encoder_path(seed).string() + "; run train first");
    }
    const auto encoder = load_policy(layout.encoder_path(seed).string());
    obtain_cache(layout, seed, encoder, demos, true, g_command);
    say(layout.cache_path(seed).string() + " " + content_hash(layout.cache_path(seed)));
  }
  return 0;
}

DiffusionPolicy policy_for(const RunLayout& layout, std::uint64_t seed, const std::string& override_path) {
  return load_checked_policy(override_path.empty() ? layout.policy_path(seed) : fs::path(override_path),
                             layout.cfg);
}

int cmd_rollout(const ConfigFlags& flags, const std::string& policy_path) {
  const RunLayout layout = make_layout(flags);
  const auto& cfg = layout.cfg;
  for (auto seed : cfg.seeds) {
    const auto policy = policy_for(layout, seed, policy_path);
    RolloutOptions ro;
    ro.B = cfg.eval_B.front();
    ro.chunk = cfg.eval_chunk.front();
    const auto res = evaluate(policy_runner(policy, ro), cfg.task, cfg.eval_episodes, {seed}, cfg.env);
    fs::create_directories(layout.rollouts_path(seed).parent_path());
    io::write_file(layout.rollouts_path(seed).string(), rollouts_jsonl(res.rollouts));
    write_manifest(layout.rollouts_path(seed).parent_path() / ("manifest_seed_" + std::to_string(seed) + ".json"),
                   {g_command, cfg.hash(), {{"policy", policy_path.empty() ? layout.policy_path(seed) : fs::path(policy_path)}},
                    {{"rollouts", layout.rollouts_path(seed)}}});
    say(layout.rollouts_path(seed).string() + " success " + std::to_string(res.pooled.success_rate));
  }
  return 0;
}

int cmd_eval(const ConfigFlags& flags, const std::string& policy_path) {
  const RunLayout layout = make_layout(flags);
  const auto& cfg = layout.cfg;
  const PolicyConfig s3 = arm_configs(cfg).stage3;
  std::string csv = std::string(kEvalCsvHeader) + "\n";
  nlohmann::json all = nlohmann::json::array();
  std::vector<std::pair<std::string, fs::path>> inputs;
  for (auto seed : cfg.seeds) {
    const fs::path p = policy_path.empty() ? layout.policy_path(seed) : fs::path(policy_path);
    const auto policy = load_checked_policy(p, cfg);
    inputs.emplace_back("policy", p);
    for (int B : cfg.eval_B) {
      for (int chunk : cfg.eval_chunk) {
        RolloutOptions ro;
        ro.B = B;
        ro.chunk = chunk;
        const auto res = evaluate(policy_runner(policy, ro), cfg.task, cfg.eval_episodes, {seed}, cfg.env, false);
        const EvalRowInfo info{env::task_name(cfg.task), arm_name(cfg.arm), s3.k, s3.c, B, chunk, cfg.hash()};
        csv += eval_csv_rows(info, res);
        all.push_back(nlohmann::json::parse(eval_json(info, res)));
        say("seed " + std::to_string(seed) + " B=" + std::to_string(B) + " chunk=" + std::to_string(chunk) +
            " success " + std::to_string(res.pooled.success_rate));
      }
    }
  }
  io::write_file((layout.output_dir() / "eval.csv").string(), csv);
  io::write_file((layout.output_dir() / "eval.json").string(), all.dump(2) + "\n");
  write_manifest(layout.output_dir() / "manifest_eval.json",
                 {g_command, cfg.hash(), inputs,
                  {{"csv", layout.output_dir() / "eval.csv"}, {"json", layout.output_dir() / "eval.json"}}});
  return 0;
}

double rollout_success_rate(const std::string& jsonl) {
  std::istringstream in(jsonl);
  int n = 0, s = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    ++n;
    s += nlohmann::json::parse(line).at("success").get<bool>() ? 1 : 0;
  }
  return n ? static_cast<double>(s) / n : 0.0;
}

// Ratio rows for the listed arms (each addressed through its own run
// directory) plus an expert-vs-expert sanity row, written to `out_dir`.
void analyze_arms(const RunLayout& base, const std::vector<Arm>& arms, const std::string& demos_override,
                  const fs::path& out_dir) {
  const auto& cfg = base.cfg;
  std::string per_seed = std::string("seed,") + kRatioCsvHeader + "\n";
  std::string summary = std::string(kRatioCsvHeader) + "\n";
  nlohmann::json reports = nlohmann::json::array();
  std::vector<std::pair<std::string, fs::path>> inputs;

  auto expert_actions = [&](std::uint64_t seed) {
    if (!demos_override.empty()) {
      if (!fs::exists(fs::path(demos_override) / "meta.json")) {
        throw UsageError("no demo dataset at " + demos_override);
      }
      inputs.emplace_back("demos", demos_override);
      return executed_action_sequences(env::load_dataset(demos_override).trajectories);
    }
    inputs.emplace_back("demos", base.demos_dir(seed));
    return executed_action_sequences(obtain_demos(base, seed, false).trajectories);
  };

  auto emit = [&](const std::string& arm, const std::string& hash, const std::vector<PredictabilityReport>& rs,
                  const std::vector<double>& succ) {
    std::vector<double> ratios, ee, ep;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      per_seed += std::to_string(cfg.seeds[i]) + "," +
                  ratio_csv_row(env::task_name(cfg.task), arm, rs[i], succ[i], hash);
      nlohmann::json r = nlohmann::json::parse(rs[i].to_json());
      r["arm"] = arm;
      r["seed"] = cfg.seeds[i];
      r["config_hash"] = hash;
      reports.push_back(r);
      ratios.push_back(rs[i].ratio);
      ee.push_back(rs[i].eps_expert);
      ep.push_back(rs[i].eps_policy);
    }
    PredictabilityReport med;
    med.ratio = median(ratios);
    med.ratio_infinite = std::isinf(med.ratio);
    med.eps_expert = median(ee);
    med.eps_policy = median(ep);
    summary += ratio_csv_row(env::task_name(cfg.task), arm, med, median(succ), hash);
    say(arm + " median ratio " + std::to_string(med.ratio));
  };

  for (Arm arm : arms) {
    const RunLayout layout(base.root, with_arm(cfg, arm));
    std::vector<PredictabilityReport> rs;
    std::vector<double> succ;
    for (auto seed : cfg.seeds) {
      const fs::path rp = layout.rollouts_path(seed);
      if (!fs::exists(rp)) {
        throw UsageError("no rollouts at " + rp.string() + "; run rollout with --arm " + arm_name(arm));
      }
      const std::string text = io::read_file(rp.string());
      inputs.emplace_back("rollouts", rp);
      rs.push_back(predictability_ratio(expert_actions(seed), read_rollout_actions(text), cfg.predictor, seed));
      succ.push_back(rollout_success_rate(text));
    }
    emit(arm_name(arm), layout.cfg.hash(), rs, succ);
  }

  // the expert run through the evaluation protocol, against its own demos
  std::vector<PredictabilityReport> rs;
  std::vector<double> succ;
  for (auto seed : cfg.seeds) {
    const auto res = evaluate(expert_runner(cfg.noise_scale), cfg.task, cfg.eval_episodes, {seed}, cfg.env);
    std::vector<env::Trajectory> trajs;
    for (const auto& r : res.rollouts) trajs.push_back(r.trajectory);
    rs.push_back(predictability_ratio(expert_actions(seed), executed_action_sequences(trajs), cfg.predictor, seed));
    succ.push_back(res.pooled.success_rate);
  }
  emit("expert", cfg.hash(), rs, succ);

  fs::create_directories(out_dir);
  io::write_file((out_dir / "ratio.csv").string(), summary);
  io::write_file((out_dir / "ratio_seeds.csv").string(), per_seed);
  io::write_file((out_dir / "ratio.json").string(), reports.dump(2) + "\n");
  std::sort(inputs.begin(), inputs.end());
  inputs.erase(std::unique(inputs.begin(), inputs.end()), inputs.end());
  write_manifest(out_dir / "manifest_analyze.json",
                 {g_command, cfg.hash(), inputs,
                  {{"ratio", out_dir / "ratio.csv"}, {"ratio_seeds", out_dir / "ratio_seeds.csv"},
                   {"reports", out_dir / "ratio.json"}}});
}

int cmd_analyze(const ConfigFlags& flags, const std::vector<std::string>& arm_names_, const std::string& demos) {
  const RunLayout layout = make_layout(flags);
  std::vector<Arm> arms;
  for (const auto& a : arm_names_) arms.push_back(parse_arm(a));
  if (arms.empty()) arms.push_back(layout.cfg.arm);
  analyze_arms(layout, arms, demos, layout.output_dir());
  return 0;
}

int cmd_bench(const ConfigFlags& flags, int steps) {
  const RunLayout layout = make_layout(flags);
  const auto& cfg = layout.cfg;
  const std::uint64_t seed = cfg.seeds.front();
  const auto demos = obtain_demos(layout, seed, false);
  const BenchResult r = bench_throughput(demos, cfg.policy.k, steps, cfg.batch_size, seed);
  nlohmann::json j = nlohmann::json::parse(r.to_json());
  j["config_hash"] = cfg.hash();
  const fs::path out = layout.output_dir() / ("bench_k" + std::to_string(cfg.policy.k) + ".json");
  io::write_file(out.string(), j.dump(2) + "\n");
  write_manifest(layout.output_dir() / "manifest_bench.json",
                 {g_command, cfg.hash(), {{"demos", layout.demos_dir(seed)}}, {{"bench", out}}});
  say(j.dump(2));
  return 0;
}

// Every (arm, k) cell: demos, training, evaluation over the B and chunk
// lists, rollouts for the analysis; then ratio rows across arms for each k.
int cmd_sweep(const ConfigFlags& flags, const std::vector<std::string>& arm_list, std::vector<int> ks) {
  const RunLayout base = make_layout(flags);
  std::vector<Arm> arms;
  for (const auto& a : arm_list) arms.push_back(parse_arm(a));
  if (arms.empty()) arms = {Arm::full_ptp, Arm::half_ptp, Arm::no_ptp, Arm::no_history};
  if (ks.empty()) ks = {base.cfg.policy.k};

  const fs::path out = base.root / "sweeps" / base.cfg.hash();
  fs::create_directories(out);
  std::string csv = std::string(kEvalCsvHeader) + "\n";
  std::vector<std::pair<std::string, fs::path>> inputs;
  for (int k : ks) {
    for (Arm arm : arms) {
      ExperimentConfig cfg = base.cfg;
      cfg.policy.k = k;
      cfg.policy.c = std::min(cfg.policy.c, k);
      cfg = with_arm(cfg, arm);
      const RunLayout layout(base.root, cfg);
      write_run_config(layout);
      const PolicyConfig s3 = arm_configs(cfg).stage3;
      for (auto seed : cfg.seeds) {
        const auto demos = obtain_demos(layout, seed, true, g_command);
        const auto encoder = obtain_encoder(layout, seed, demos, g_command);
        const auto policy = obtain_policy(layout, seed, demos, encoder, false, g_command);
        inputs.emplace_back("policy", layout.policy_path(seed));
        for (int B : cfg.eval_B) {
          for (int chunk : cfg.eval_chunk) {
            RolloutOptions ro;
            ro.B = B;
            ro.chunk = chunk;
            const bool first = B == cfg.eval_B.front() && chunk == cfg.eval_chunk.front();
            const auto res = evaluate(policy_runner(policy, ro), cfg.task, cfg.eval_episodes, {seed}, cfg.env, first);
            if (first) {
              fs::create_directories(layout.rollouts_path(seed).parent_path());
              io::write_file(layout.rollouts_path(seed).string(), rollouts_jsonl(res.rollouts));
            }
            csv += eval_csv_rows({env::task_name(cfg.task), arm_name(arm), s3.k, s3.c, B, chunk, cfg.hash()}, res);
            say(arm_name(arm) + " k=" + std::to_string(s3.k) + " seed " + std::to_string(seed) + " B=" +
                std::to_string(B) + " chunk=" + std::to_string(chunk) + " success " +
                std::to_string(res.pooled.success_rate));
          }
        }
      }
    }
    if (arms.size() > 1) {
      ExperimentConfig cfg = base.cfg;
      cfg.policy.k = k;
      cfg.policy.c = std::min(cfg.policy.c, k);
      analyze_arms(RunLayout(base.root, cfg), arms, {}, out / ("analysis_k" + std::to_string(k)));
    }
  }
  io::write_file((out / "success.csv").string(), csv);
  write_manifest(out / "manifest_sweep.json", {g_command, base.cfg.hash(), inputs, {{"success", out / "success.csv"}}});
  say((out / "success.csv").string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 0; i < argc; ++i) g_command += (i ? " " : "") + std::string(argv[i]);

  CLI::App app{"Past-token prediction diffusion policies on toy memory tasks"};
  app.require_subcommand(1);
  ConfigFlags flags;

  auto* gen = app.add_subcommand("gen-demos", "generate expert demonstrations");
  auto* train = app.add_subcommand("train", "stage 1, cache, stage 3 (or end-to-end with --no-cache)");
  auto* cache = app.add_subcommand("cache", "(re)build the embedding cache from the stage-1 encoder");
  auto* roll = app.add_subcommand("rollout", "record policy rollouts for analysis");
  auto* eval = app.add_subcommand("eval", "success rates over the B and chunk lists");
  auto* analyze = app.add_subcommand("analyze", "action-predictability ratios across arms");
  auto* bench = app.add_subcommand("bench", "cached vs end-to-end training throughput");
  auto* sweep = app.add_subcommand("sweep", "train and evaluate arms x context lengths");
  for (auto* sub : {gen, train, cache, roll, eval, analyze, bench, sweep}) flags.attach(sub);

  bool no_cache = false;
  train->add_flag("--no-cache", no_cache, "re-encode frames every step with a frozen encoder");
  std::string policy_path;
  roll->add_option("--policy", policy_path, "policy checkpoint (default: the run's own)");
  eval->add_option("--policy", policy_path, "policy checkpoint (default: the run's own)");
  std::vector<std::string> arms;
  analyze->add_option("--arms", arms, "arms to compare (comma separated)")->delimiter(',');
  sweep->add_option("--arms", arms, "arms to run (comma separated)")->delimiter(',');
  std::string demos_dir;
  analyze->add_option("--demos", demos_dir, "expert demo directory (default: the run's own)");
  int steps = 200;
  bench->add_option("--steps", steps, "optimizer steps per variant");
  std::vector<int> ks;
  sweep->add_option("--ks", ks, "context lengths (comma separated)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_demos(flags);
    if (*train) return cmd_train(flags, no_cache);
    if (*cache) return cmd_cache(flags);
    if (*roll) return cmd_rollout(flags, policy_path);
    if (*eval) return cmd_eval(flags, policy_path);
    if (*analyze) return cmd_analyze(flags, arms, demos_dir);
    if (*bench) return cmd_bench(flags, steps);
    if (*sweep) return cmd_sweep(flags, arms, ks);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
