// Acceptance run: one PASS/FAIL line per criterion. Exit status 0 only when
// every selected criterion passes.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <unistd.h>

#include <CLI11.hpp>

#include "ptp/binary_io.hpp"
#include "ptp/error.hpp"
#include "ptp/orchestrate.hpp"

using namespace ptp;

namespace {

// Tolerances and thresholds.
constexpr double kGradTol = 1e-4;
constexpr int kGradSeeds = 20;
constexpr double kCacheTol = 1e-10;
constexpr int kCacheBatches = 100;
constexpr double kThroughputFloor = 3.0;
constexpr double kThroughputTarget = 5.0;
constexpr double kFullPtpMin = 0.8;
constexpr double kNoPtpGap = 0.3;
constexpr double kNoHistoryMax = 0.3;
constexpr double kAblationBudgetSec = 2 * 3600.0;
constexpr double kFullRatioBand = 0.2;
constexpr double kMonotoneSlack = 0.05;
constexpr double kClosedLoopGap = 0.2;
constexpr double kPredictorRelTol = 0.1;
constexpr int kSelectionSets = 1000;
constexpr int kIndexDraws = 100000;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << v;
  return s.str();
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(prec);
  s << v;
  return s.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Trains (or reuses) and evaluates the cells the criteria need. Everything
// goes through the same pipeline steps as the CLI so artifacts land in the
// usual run layout under `root`.
class Study {
 public:
  Study(fs::path root, ExperimentConfig base) : root_(std::move(root)), base_(std::move(base)) {}

  const ExperimentConfig& base() const { return base_; }
  const fs::path& root() const { return root_; }

  ExperimentConfig cell(Arm arm, int k, int stage3_epochs = 0) const {
    ExperimentConfig c = base_;
    c.arm = arm;
    c.policy.k = k;
    c.policy.c = 0;
    if (k != base_.policy.k) c.policy.h = default_horizon(k);
    c.policy.chunk = std::min(c.policy.chunk, c.policy.h);
    if (stage3_epochs > 0) c.stage3_epochs = stage3_epochs;
    c.validate();
    return c;
  }

  const env::DemoDataset& demos(std::uint64_t seed) {
    auto it = demos_.find(seed);
    if (it == demos_.end()) {
      it = demos_.emplace(seed, obtain_demos(RunLayout(root_, base_), seed, true, "acceptance")).first;
    }
    return it->second;
  }

  DiffusionPolicy policy(const ExperimentConfig& c, std::uint64_t seed) {
    const RunLayout layout(root_, c);
    const env::DemoDataset& ds = demos(seed);
    const DiffusionPolicy enc = obtain_encoder(layout, seed, ds, "acceptance");
    return obtain_policy(layout, seed, ds, enc, false, "acceptance");
  }

  const EvalResult& eval(const ExperimentConfig& c, std::uint64_t seed, int B, int chunk) {
    const std::string key = training_hash(c) + "/" + std::to_string(seed) + "/" + std::to_string(B) + "/" +
                            std::to_string(chunk);
    auto it = evals_.find(key);
    if (it != evals_.end()) return it->second;
    const DiffusionPolicy p = policy(c, seed);
    RolloutOptions ro;
    ro.B = B;
    ro.chunk = std::min(chunk, p.config().h);
    EvalResult r = evaluate(policy_runner(p, ro), c.task, c.eval_episodes, {seed}, c.env);
    std::cerr << "[acceptance] " << arm_name(c.arm) << " k=" << c.policy.k << " e3=" << c.stage3_epochs
              << " seed " << seed << " B=" << B << " chunk=" << chunk << ": " << r.pooled.successes << "/"
              << r.pooled.episodes << std::endl;
    return evals_.emplace(key, std::move(r)).first->second;
  }

  // Pooled success over every seed of the base config.
  double pooled(const ExperimentConfig& c, int B, int chunk) {
    int s = 0, n = 0;
    for (auto seed : base_.seeds) {
      const auto& r = eval(c, seed, B, chunk).pooled;
      s += r.successes;
      n += r.episodes;
    }
    return static_cast<double>(s) / n;
  }

  double median_success(const ExperimentConfig& c, int B, int chunk) {
    std::vector<double> v;
    for (auto seed : base_.seeds) v.push_back(eval(c, seed, B, chunk).pooled.success_rate);
    return median(v);
  }

  PredictabilityReport ratio(const ExperimentConfig& c, std::uint64_t seed) {
    const auto expert = executed_action_sequences(demos(seed).trajectories);
    std::vector<env::Trajectory> trajs;
    for (const auto& r : eval(c, seed, 1, base_.policy.chunk).rollouts) trajs.push_back(r.trajectory);
    return predictability_ratio(expert, executed_action_sequences(trajs), base_.predictor, seed);
  }

 private:
  fs::path root_;
  ExperimentConfig base_;
  std::map<std::uint64_t, env::DemoDataset> demos_;
  std::map<std::string, EvalResult> evals_;
};

PolicyConfig tiny_policy(int k, int c, int seed) {
  PolicyConfig cfg = make_policy_config(k, c, 1 + seed % 2);
  cfg.h = 3;
  cfg.chunk = 2;
  cfg.embed_dim = 5;
  cfg.encoder_hidden = {5};
  cfg.denoiser_hidden = {6, 5};
  cfg.time_embed_dim = 4;
  cfg.diffusion_steps = 10;
  cfg.lambda_past = 0.5;
  cfg.validate();
  return cfg;
}

std::vector<std::size_t> every_traj(const env::DemoDataset& ds) {
  std::vector<std::size_t> ids(ds.trajectories.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return ids;
}

// 1. Autodiff against central differences: the full policy loss (encoder,
// past and future tokens) and the predictor regression loss.
Outcome grad_check_criterion() {
  const env::DemoDataset ds = env::generate_demos(env::Task::masked_goal, 3, 5, 0.02);
  double worst = 0.0;
  std::string where;
  for (int seed = 0; seed < kGradSeeds; ++seed) {
    const PolicyConfig cfg = tiny_policy(3, 1 + seed % 3, seed);
    DiffusionPolicy policy(cfg, static_cast<std::uint64_t>(seed));
    const auto windows = enumerate_windows(ds, every_traj(ds), cfg);
    Rng pick(derive_seed(31, {static_cast<std::uint64_t>(seed)}));
    std::vector<WindowRef> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(windows[pick() % windows.size()]);
    for (ParamStore* store : {&policy.encoder(), &policy.denoiser()}) {
      const auto r = grad_check(*store, [&](Tape& tape) {
        Rng rng(derive_seed(47, {static_cast<std::uint64_t>(seed)}));
        return raw_batch_loss(tape, policy, ds, batch, rng, true);
      }, kGradTol);
      if (r.max_relative_error >= worst) {
        worst = r.max_relative_error;
        where = r.worst_parameter;
      }
    }

    PredictorConfig pc;
    pc.window = 2;
    pc.hidden = {6, 6};
    // relu is not differentiable where a row kills every first-layer unit
    // (the next pre-activation is then exactly the zero bias)
    pc.activation = Activation::gelu;
    PredictorNet net(pc, 3, static_cast<std::uint64_t>(seed));
    std::mt19937_64 gen(static_cast<std::uint64_t>(seed) + 900);
    std::normal_distribution<double> nd;
    Tensor x({4, 6}), y({4, 3});
    for (double& v : x.data()) v = nd(gen);
    for (double& v : y.data()) v = nd(gen);
    const auto r = grad_check(net.params, [&](Tape& tape) {
      return mean(square(sub(mlp_forward(tape, net.params, net.spec, tape.constant(x)), tape.constant(y))));
    }, kGradTol);
    if (r.max_relative_error >= worst) {
      worst = r.max_relative_error;
      where = r.worst_parameter;
    }
  }
  return {worst < kGradTol, "max relative error " + sci(worst) + " (" + where + ") over " +
                                std::to_string(kGradSeeds) + " seeds, tolerance 1e-4"};
}

// 2. Cached-embedding loss against the frozen-encoder loss on identical
// noise streams, at the production policy size.
Outcome cache_criterion(const ExperimentConfig& base) {
  const env::DemoDataset ds = env::generate_demos(base.task, base.demos, 7, base.noise_scale, base.env);
  PolicyConfig cfg = base.policy;
  cfg.c = cfg.k;
  cfg.freeze_encoder = true;
  cfg.validate();
  DiffusionPolicy policy(cfg, 3);
  const EmbeddingCache cache = cache_embeddings(policy, ds);
  const auto windows = enumerate_windows(ds, every_traj(ds), cfg);
  double worst = 0.0;
  for (int b = 0; b < kCacheBatches; ++b) {
    Rng pick(derive_seed(101, {static_cast<std::uint64_t>(b)}));
    std::vector<WindowRef> batch;
    for (std::size_t i = 0; i < base.batch_size; ++i) batch.push_back(windows[pick() % windows.size()]);
    Rng r1(derive_seed(202, {static_cast<std::uint64_t>(b)}));
    Rng r2 = r1;
    Tape t1, t2;
    const double cached = cached_batch_loss(t1, policy, cache, ds, batch, r1).value().item();
    const double raw = raw_batch_loss(t2, policy, ds, batch, r2, false).value().item();
    worst = std::max(worst, std::abs(cached - raw));
  }
  return {worst <= kCacheTol, "max |cached - frozen| " + sci(worst) + " over " +
                                  std::to_string(kCacheBatches) + " batches of " +
                                  std::to_string(base.batch_size) + ", tolerance 1e-10"};
}

// 3. Optimizer steps per second, cached vs end-to-end, at k = 16.
Outcome throughput_criterion(const ExperimentConfig& base) {
  const env::DemoDataset ds = env::generate_demos(base.task, base.demos, 8, base.noise_scale, base.env);
  const BenchResult b = bench_throughput(ds, 16, 40, base.batch_size, 1);
  const double r = b.ratio();
  return {r >= kThroughputFloor, "ratio " + fmt(r, 2) + "x (floor 3x, target 5x " +
                                     (r >= kThroughputTarget ? "met" : "not met") + "), cached " +
                                     fmt(b.cached_windows_per_sec, 0) + " windows/s, end-to-end " +
                                     fmt(b.end_to_end_windows_per_sec, 0) + " windows/s"};
}

// 4. Directional ablation on MaskedGoal.
Outcome ablation_criterion(Study& st) {
  const auto t0 = Clock::now();
  const int k = st.base().policy.k;
  const int chunk = st.base().policy.chunk;
  const double full = st.pooled(st.cell(Arm::full_ptp, k), 1, chunk);
  const double none = st.pooled(st.cell(Arm::no_ptp, k), 1, chunk);
  const double nohist = st.pooled(st.cell(Arm::no_history, k), 1, chunk);
  const double secs = seconds_since(t0);
  const bool pass = full >= kFullPtpMin && none <= full - kNoPtpGap && nohist <= kNoHistoryMax &&
                    secs <= kAblationBudgetSec;
  return {pass, "full-ptp " + fmt(full) + " (>= 0.8), no-ptp " + fmt(none) + " (<= full - 0.3), no-history " +
                    fmt(nohist) + " (<= 0.3), pooled over " + std::to_string(st.base().seeds.size()) + "x" +
                    std::to_string(st.base().eval_episodes) + " episodes, " + fmt(secs / 60.0, 1) +
                    " min (<= 120)"};
}

// 5. Predictability ratio ordering across PTP strength.
Outcome ratio_criterion(Study& st) {
  const int k = st.base().policy.k;
  std::map<Arm, double> med;
  std::string detail;
  for (Arm arm : {Arm::no_ptp, Arm::half_ptp, Arm::full_ptp}) {
    std::vector<double> rs;
    for (auto seed : st.base().seeds) {
      const auto r = st.ratio(st.cell(arm, k), seed);
      rs.push_back(r.ratio_infinite ? std::numeric_limits<double>::infinity() : r.ratio);
    }
    med[arm] = median(rs);
    detail += arm_name(arm) + " " + fmt(med[arm]) + ", ";
  }
  const bool pass = med[Arm::no_ptp] < med[Arm::half_ptp] && med[Arm::half_ptp] < med[Arm::full_ptp] &&
                    std::abs(med[Arm::full_ptp] - 1.0) <= kFullRatioBand;
  return {pass, "median ratios " + detail + "need no < half < full and full within 0.2 of 1"};
}

// 6. Success does not drop as the context grows.
Outcome monotone_criterion(Study& st) {
  const int chunk = st.base().policy.chunk;
  std::vector<double> med;
  std::string detail;
  bool pass = true;
  for (int k : {2, 4, 8, 16}) {
    med.push_back(st.median_success(st.cell(Arm::full_ptp, k), 1, chunk));
    detail += "k=" + std::to_string(k) + " " + fmt(med.back()) + " ";
    if (med.size() > 1 && med.back() < med[med.size() - 2] - kMonotoneSlack) pass = false;
  }
  return {pass, "median success " + detail + "(each within 0.05 of non-decreasing)"};
}

// 7. Verification helps an under-trained policy.
Outcome verification_criterion(Study& st) {
  const int k = st.base().policy.k;
  const int chunk = st.base().policy.chunk;
  const ExperimentConfig half = st.cell(Arm::full_ptp, k, std::max(1, st.base().stage3_epochs / 2));
  const double b1 = st.pooled(half, 1, chunk);
  const double b5 = st.pooled(half, 5, chunk);
  return {b5 >= b1, "half-trained full-ptp (" + std::to_string(half.stage3_epochs) + " epochs) B=5 " + fmt(b5) +
                        " vs B=1 " + fmt(b1) + ", pooled"};
}

// 8. With closed-loop execution long context still matters.
Outcome closed_loop_criterion(Study& st) {
  const double long_ctx = st.pooled(st.cell(Arm::full_ptp, 16), 1, 1);
  const double short_ctx = st.pooled(st.cell(Arm::full_ptp, 2), 1, 1);
  return {long_ctx >= short_ctx + kClosedLoopGap,
          "chunk=1 full-ptp k=16 " + fmt(long_ctx) + " vs k=2 " + fmt(short_ctx) + " (need +0.2), pooled"};
}

// 9a. Selection against brute force.
bool selection_oracle(std::string& detail) {
  std::mt19937_64 gen(4242);
  std::uniform_int_distribution<int> count(1, 10), rows(1, 16);
  std::uniform_real_distribution<double> val(-1.0, 1.0);
  std::bernoulli_distribution coin(0.7), dup(0.3);
  int bad = 0;
  for (int trial = 0; trial < kSelectionSets; ++trial) {
    const int B = count(gen), c = rows(gen);
    const auto rc = static_cast<std::size_t>(c);
    Tensor exec({rc, 3});
    for (double& v : exec.data()) v = val(gen);
    std::vector<bool> mask(rc);
    for (std::size_t j = 0; j < rc; ++j) mask[j] = coin(gen);
    std::vector<Tensor> cands;
    for (int b = 0; b < B; ++b) {
      if (b > 0 && dup(gen)) {
        cands.push_back(cands[gen() % cands.size()]);
      } else {
        Tensor t({rc, 3});
        for (double& v : t.data()) v = val(gen);
        cands.push_back(t);
      }
    }
    std::size_t best = 0;
    double best_score = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < cands.size(); ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < rc; ++j) {
        for (std::size_t d = 0; mask[j] && d < 3; ++d) s += std::pow(cands[b].at(j, d) - exec.at(j, d), 2);
      }
      if (s < best_score) best_score = s, best = b;
    }
    if (select_candidate(cands, exec, mask).index != best) ++bad;
  }
  detail += "selection " + std::to_string(kSelectionSets - bad) + "/" + std::to_string(kSelectionSets) + "; ";
  return bad == 0;
}

// 9b. The predictor recovers the irreducible noise of known processes.
bool predictor_oracle(std::string& detail) {
  bool ok = true;
  for (const auto& [phi, sigma] : std::vector<std::pair<double, double>>{{0.0, 0.3}, {0.9, 0.1}}) {
    std::mt19937_64 gen(static_cast<std::uint64_t>(phi * 10 + 77));
    std::normal_distribution<double> eps(0.0, sigma), start(0.0, sigma / std::sqrt(1.0 - phi * phi));
    std::vector<Tensor> episodes;
    for (int e = 0; e < 100; ++e) {
      Tensor t({101, 2});
      for (std::size_t d = 0; d < 2; ++d) {
        double a = start(gen);
        for (std::size_t i = 0; i < 101; ++i) {
          t.at(i, d) = a;
          a = phi * a + eps(gen);
        }
      }
      episodes.push_back(std::move(t));
    }
    PredictorConfig pc;
    pc.window = 1;
    pc.epochs = 20;
    const double mse = fit_predictor(extract_pairs(episodes, 1), pc, 5).holdout_mse;
    const double want = sigma * sigma;
    const bool good = std::abs(mse - want) <= kPredictorRelTol * want;
    ok = ok && good;
    detail += (phi == 0.0 ? "white noise" : "AR(1)") + std::string(" mse ") + fmt(mse, 5) + " vs " +
              fmt(want, 5) + "; ";
  }
  return ok;
}

// 9c. Window indexing against the index arithmetic written out directly.
bool index_oracle(std::string& detail) {
  std::mt19937_64 rng(99);
  int bad = 0;
  for (int n = 0; n < kIndexDraws; ++n) {
    const int k = 1 + static_cast<int>(rng() % 16);
    const int c = static_cast<int>(rng() % (k + 1));
    const int h = 1 + static_cast<int>(rng() % 16);
    const int K = 1 + static_cast<int>(rng() % 4);
    const int len = 1 + static_cast<int>(rng() % 80);
    const int t = static_cast<int>(rng() % len);
    PolicyConfig cfg;
    cfg.k = k;
    cfg.c = c;
    cfg.h = h;
    cfg.chunk = 1;
    cfg.subsample_K = K;
    const WindowIndex w = make_window_index(t, len, cfg);
    std::vector<int> ctx, tgt;
    std::vector<bool> mask;
    for (int i = k - 1; i >= 0; --i) ctx.push_back(std::max(0, t - i * K));
    for (int i = c - 1; i >= 0; --i) {
      tgt.push_back(std::max(0, t - i * K));
      mask.push_back(t - i * K > 0);
    }
    for (int j = 1; j <= h; ++j) {
      tgt.push_back(std::min(len - 1, t + j));
      mask.push_back(t + j < len);
    }
    if (w.context != ctx || w.targets != tgt || w.target_mask != mask) ++bad;
  }
  detail += "indexing " + std::to_string(kIndexDraws - bad) + "/" + std::to_string(kIndexDraws);
  return bad == 0;
}

Outcome oracle_criterion() {
  std::string detail;
  const bool a = selection_oracle(detail);
  const bool b = predictor_oracle(detail);
  const bool c = index_oracle(detail);
  return {a && b && c, detail};
}

// Metric files of one full pipeline cell: demos, stage 1, cache, stage 3,
// evaluation and predictability analysis.
std::string cell_metrics(Study& st, std::uint64_t seed) {
  const ExperimentConfig c = st.cell(Arm::full_ptp, st.base().policy.k);
  const RunLayout layout(st.root(), c);
  const EvalResult& r = st.eval(c, seed, 1, c.policy.chunk);
  EvalRowInfo info{env::task_name(c.task), arm_name(c.arm), c.policy.k, c.policy.k, 1, c.policy.chunk, c.hash()};
  std::string out = eval_csv_rows(info, r);
  out += st.ratio(c, seed).to_json() + "\n";
  for (const char* f : {"stage3.jsonl"}) out += io::read_file((layout.seed_dir(seed) / f).string());
  out += io::read_file((layout.encoder_dir(seed) / "stage1.jsonl").string());
  out += content_hash(layout.demos_dir(seed)) + " " + content_hash(layout.encoder_path(seed)) + " " +
         content_hash(layout.cache_path(seed)) + " " + content_hash(layout.policy_path(seed)) + "\n";
  return out;
}

// 10. A fresh rerun of one cell reproduces every metric byte for byte.
Outcome rerun_criterion(Study& st, const fs::path& rerun_root) {
  const std::uint64_t seed = st.base().seeds.front();
  const std::string first = cell_metrics(st, seed);
  fs::remove_all(rerun_root);
  Study again(rerun_root, st.base());
  const std::string second = cell_metrics(again, seed);
  const std::string h1 = io::sha256_hex(first).substr(0, 16), h2 = io::sha256_hex(second).substr(0, 16);
  return {first == second, "full-ptp seed " + std::to_string(seed) + " retrained from scratch: " + h1 +
                               (first == second ? " == " : " != ") + h2};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string runs_dir;
  std::vector<int> only;
  bool keep = false;
  app.add_option("--runs-dir", runs_dir, "artifact root (default: a fresh temporary directory)");
  app.add_option("--only", only, "criteria to run (comma separated, default all)")->delimiter(',');
  app.add_flag("--keep", keep, "keep the artifact root afterwards");
  CLI11_PARSE(app, argc, argv);

  const bool fresh = runs_dir.empty();
  const fs::path root = fresh ? fs::temp_directory_path() / ("ptp_acceptance_" + std::to_string(::getpid()))
                              : fs::path(runs_dir);
  if (fresh) fs::remove_all(root);
  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                                              : std::set<int>(only.begin(), only.end());

  const ExperimentConfig base;
  Study study(root / "main", base);
  std::cout << "config " << base.hash() << ", artifacts in " << root.string() << std::endl;

  struct Entry {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Entry> criteria{
      {1, "gradient check", [] { return grad_check_criterion(); }},
      {2, "cache equivalence", [&] { return cache_criterion(base); }},
      {3, "cached training throughput", [&] { return throughput_criterion(base); }},
      {4, "PTP ablation (MaskedGoal)", [&] { return ablation_criterion(study); }},
      {5, "predictability ratio ordering", [&] { return ratio_criterion(study); }},
      {6, "context-length monotonicity", [&] { return monotone_criterion(study); }},
      {7, "verification on an under-trained policy", [&] { return verification_criterion(study); }},
      {8, "closed-loop context benefit", [&] { return closed_loop_criterion(study); }},
      {9, "oracle suites", [] { return oracle_criterion(); }},
      {10, "rerun reproducibility", [&] { return rerun_criterion(study, root / "rerun"); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.contains(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.name << ": " << o.detail
              << " [" << fmt(seconds_since(t0), 0) << " s]" << std::endl;
  }
  if (fresh && !keep) fs::remove_all(root);
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
