#include "ptp/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ptp/binary_io.hpp"
#include "ptp/error.hpp"

namespace ptp {

ScheduleKind parse_schedule(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown noise schedule: " + name);
}

std::string schedule_name(ScheduleKind kind) {
  return kind == ScheduleKind::linear ? "linear" : "cosine";
}

NoiseSchedule make_noise_schedule(int steps, ScheduleKind kind, double beta_start,
                                  double beta_end) {
  if (steps < 1) throw ConfigError("diffusion steps must be >= 1, got " + std::to_string(steps));
  NoiseSchedule s;
  s.kind = kind;
  const auto n = static_cast<std::size_t>(steps);
  s.betas.resize(n);
  if (kind == ScheduleKind::linear) {
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
      throw ConfigError("linear schedule needs 0 < beta_start <= beta_end < 1");
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double f = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
      s.betas[i] = beta_start + f * (beta_end - beta_start);
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double v = std::cos((t / steps + offset) / (1.0 + offset) * std::numbers::pi / 2);
      return v * v;
    };
    for (std::size_t i = 0; i < n; ++i) {
      s.betas[i] = std::clamp(1.0 - f(static_cast<double>(i + 1)) / f(static_cast<double>(i)),
                              1e-8, 0.999);
    }
  }
  s.alphas.resize(n);
  s.alpha_bars.resize(n);
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    s.alphas[i] = 1.0 - s.betas[i];
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

int default_horizon(int k) { return k <= 2 ? 14 : 16; }

void PolicyConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("policy config: " + msg); };
  if (k < 1) fail("k must be >= 1");
  if (h < 1) fail("h must be >= 1");
  if (c < 0 || c > k) fail("c must satisfy 0 <= c <= k (c=" + std::to_string(c) + ", k=" +
                           std::to_string(k) + ")");
  if (chunk < 1 || chunk > h) fail("chunk must satisfy 1 <= chunk <= h");
  if (B < 1) fail("B must be >= 1");
  if (subsample_K < 1) fail("subsample_K must be >= 1");
  if (embed_dim < 1) fail("embed_dim must be >= 1");
  if (proprio_passthrough && (embed_dim <= kPassthroughDims || obs_dim < kPassthroughDims)) {
    fail("proprio_passthrough needs embed_dim > 3");
  }
  if (lambda_past < 0.0) fail("lambda_past must be non-negative");
  if (diffusion_steps < 1) fail("diffusion_steps must be >= 1");
  if (obs_dim < 1 || action_dim < 1) fail("observation and action widths must be positive");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) fail("time_embed_dim must be even");
}

std::string PolicyConfig::to_json() const {
  nlohmann::json j;
  j["k"] = k;
  j["h"] = h;
  j["c"] = c;
  j["chunk"] = chunk;
  j["B"] = B;
  j["subsample_K"] = subsample_K;
  j["embed_dim"] = embed_dim;
  j["proprio_passthrough"] = proprio_passthrough;
  j["condition_on_past_actions"] = condition_on_past_actions;
  j["freeze_encoder"] = freeze_encoder;
  j["ptp_in_encoder_stage"] = ptp_in_encoder_stage;
  j["lambda_past"] = lambda_past;
  j["diffusion_steps"] = diffusion_steps;
  j["schedule"] = schedule_name(schedule);
  j["beta_start"] = beta_start;
  j["beta_end"] = beta_end;
  j["obs_dim"] = obs_dim;
  j["action_dim"] = action_dim;
  j["encoder_hidden"] = encoder_hidden;
  j["denoiser_hidden"] = denoiser_hidden;
  j["time_embed_dim"] = time_embed_dim;
  j["activation"] = activation_name(activation);
  return j.dump();
}

PolicyConfig PolicyConfig::from_json(const std::string& text) {
  PolicyConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("policy config is not valid JSON: ") + e.what());
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("k", c.k);
  get("h", c.h);
  get("c", c.c);
  get("chunk", c.chunk);
  get("B", c.B);
  get("subsample_K", c.subsample_K);
  get("embed_dim", c.embed_dim);
  get("proprio_passthrough", c.proprio_passthrough);
  get("condition_on_past_actions", c.condition_on_past_actions);
  get("freeze_encoder", c.freeze_encoder);
  get("ptp_in_encoder_stage", c.ptp_in_encoder_stage);
  get("lambda_past", c.lambda_past);
  get("diffusion_steps", c.diffusion_steps);
  if (j.contains("schedule")) c.schedule = parse_schedule(j.at("schedule").get<std::string>());
  get("beta_start", c.beta_start);
  get("beta_end", c.beta_end);
  get("obs_dim", c.obs_dim);
  get("action_dim", c.action_dim);
  get("encoder_hidden", c.encoder_hidden);
  get("denoiser_hidden", c.denoiser_hidden);
  get("time_embed_dim", c.time_embed_dim);
  if (j.contains("activation")) c.activation = parse_activation(j.at("activation").get<std::string>());
  c.validate();
  return c;
}

PolicyConfig make_policy_config(int k, int c, int subsample_K) {
  PolicyConfig cfg;
  cfg.k = k;
  cfg.h = default_horizon(k);
  cfg.c = c;
  cfg.subsample_K = subsample_K;
  cfg.validate();
  return cfg;
}

WindowIndex make_window_index(int t, int length, const PolicyConfig& cfg) {
  cfg.validate();
  if (t < 0 || t >= length) {
    throw UsageError("window position " + std::to_string(t) + " outside trajectory of length " +
                     std::to_string(length));
  }
  WindowIndex w;
  w.t = t;
  for (int i = 0; i < cfg.k; ++i) {
    const int idx = t - (cfg.k - 1 - i) * cfg.subsample_K;
    w.context.push_back(std::max(idx, 0));
    w.context_pad.push_back(idx < 0);
  }
  for (int j = 0; j < cfg.c; ++j) {
    const int idx = t - (cfg.c - 1 - j) * cfg.subsample_K;
    w.targets.push_back(std::max(idx, 0));
    w.target_mask.push_back(idx >= 1);
  }
  for (int j = 1; j <= cfg.h; ++j) {
    const int idx = t + j;
    w.targets.push_back(std::min(idx, length - 1));
    w.target_mask.push_back(idx < length);
  }
  return w;
}

TrainingWindow make_training_window(const env::Trajectory& traj, int t, const PolicyConfig& cfg) {
  TrainingWindow w;
  w.index = make_window_index(t, static_cast<int>(traj.size()), cfg);
  w.context = Tensor({static_cast<std::size_t>(cfg.k), cfg.obs_dim});
  for (int i = 0; i < cfg.k; ++i) {
    const auto o = traj.observations[static_cast<std::size_t>(w.index.context[i])].flatten();
    if (o.size() != cfg.obs_dim) throw ConfigError("observation width does not match policy config");
    std::copy(o.begin(), o.end(), w.context.ptr() + static_cast<std::size_t>(i) * cfg.obs_dim);
  }
  w.targets = window_targets(traj, w.index, cfg);
  w.mask = w.index.target_mask;
  return w;
}

Tensor window_targets(const env::Trajectory& traj, const WindowIndex& index, const PolicyConfig& cfg) {
  const std::size_t W = static_cast<std::size_t>(cfg.window());
  Tensor targets({W, cfg.action_dim});
  for (std::size_t j = 0; j < W; ++j) {
    const bool past_pad = static_cast<int>(j) < cfg.c && !index.target_mask[j];
    if (past_pad) continue;
    const auto a = traj.actions[static_cast<std::size_t>(index.targets[j])].to_array();
    std::copy(a.begin(), a.end(), targets.ptr() + j * cfg.action_dim);
  }
  return targets;
}

void normalize_actions(std::span<double> flat, double max_displacement) {
  for (std::size_t i = 0; i < flat.size(); ++i) {
    flat[i] = i % 3 == 2 ? 2.0 * flat[i] - 1.0 : flat[i] / max_displacement;
  }
}

void denormalize_actions(std::span<double> flat, double max_displacement) {
  for (std::size_t i = 0; i < flat.size(); ++i) {
    flat[i] = i % 3 == 2 ? 0.5 * (flat[i] + 1.0) : flat[i] * max_displacement;
  }
}

TargetBatch make_target_batch(const std::vector<const Tensor*>& targets,
                              const std::vector<const std::vector<bool>*>& masks,
                              const PolicyConfig& cfg) {
  if (targets.empty() || targets.size() != masks.size()) {
    throw UsageError("target batch needs matching, non-empty targets and masks");
  }
  const std::size_t W = static_cast<std::size_t>(cfg.window());
  const std::size_t width = W * cfg.action_dim;
  TargetBatch b{Tensor({targets.size(), width}), Tensor({targets.size(), width})};
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r]->size() != width || masks[r]->size() != W) {
      throw ConfigError("window does not match policy config (expected " + std::to_string(W) +
                        " tokens)");
    }
    auto row = b.x0.row_span(r);
    std::copy(targets[r]->data().begin(), targets[r]->data().end(), row.begin());
    normalize_actions(row);
    auto wrow = b.weights.row_span(r);
    for (std::size_t j = 0; j < W; ++j) {
      const double w = !(*masks[r])[j] ? 0.0 : (static_cast<int>(j) < cfg.c ? cfg.lambda_past : 1.0);
      for (std::size_t a = 0; a < cfg.action_dim; ++a) wrow[j * cfg.action_dim + a] = w;
    }
  }
  return b;
}

NoisedBatch make_noised_batch(const Tensor& x0, const NoiseSchedule& schedule, Rng& rng) {
  NoisedBatch nb;
  nb.noise = Tensor(x0.shape());
  nb.noisy = Tensor(x0.shape());
  for (std::size_t r = 0; r < x0.rows(); ++r) {
    const int u = std::uniform_int_distribution<int>(1, schedule.steps())(rng);
    nb.steps.push_back(u);
    auto eps = nb.noise.row_span(r);
    fill_normal(rng, eps);
    const double ab = schedule.alpha_bars[static_cast<std::size_t>(u - 1)];
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    auto x = x0.row_span(r);
    auto out = nb.noisy.row_span(r);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + s * eps[i];
  }
  return nb;
}

Tensor corrupt(const Tensor& x0, const Tensor& noise, double alpha_bar) {
  if (x0.shape() != noise.shape()) throw ConfigError("corrupt: shape mismatch");
  Tensor out(x0.shape());
  const double a = std::sqrt(alpha_bar), s = std::sqrt(1.0 - alpha_bar);
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + s * noise[i];
  return out;
}

Tensor timestep_embedding(const std::vector<int>& steps, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor out({steps.size(), dim});
  for (std::size_t r = 0; r < steps.size(); ++r) {
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
      out.at(r, j) = std::sin(steps[r] * freq);
      out.at(r, half + j) = std::cos(steps[r] * freq);
    }
  }
  return out;
}

DiffusionPolicy::DiffusionPolicy(PolicyConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  schedule_ = make_noise_schedule(cfg_.diffusion_steps, cfg_.schedule, cfg_.beta_start, cfg_.beta_end);
  Rng enc_rng(derive_seed(seed, {1}));
  Rng den_rng(derive_seed(seed, {2}));
  init_mlp(encoder_, encoder_spec(), enc_rng);
  init_mlp(denoiser_, denoiser_spec(), den_rng);
}

MlpSpec DiffusionPolicy::encoder_spec() const {
  MlpSpec s{"encoder", {cfg_.obs_dim}, cfg_.activation, false};
  for (auto w : cfg_.encoder_hidden) s.widths.push_back(w);
  s.widths.push_back(cfg_.learned_embed_dim());
  return s;
}

std::size_t DiffusionPolicy::conditioning_dim() const {
  const auto k = static_cast<std::size_t>(cfg_.k);
  return cfg_.time_embed_dim + k * cfg_.embed_dim +
         (cfg_.condition_on_past_actions ? k * cfg_.action_dim : 0);
}

MlpSpec DiffusionPolicy::denoiser_spec() const {
  const std::size_t out = static_cast<std::size_t>(cfg_.window()) * cfg_.action_dim;
  MlpSpec s{"denoiser", {out + conditioning_dim()}, cfg_.activation, false};
  for (auto w : cfg_.denoiser_hidden) s.widths.push_back(w);
  s.widths.push_back(out);
  return s;
}

void DiffusionPolicy::adopt_encoder(const DiffusionPolicy& source) {
  if (source.cfg_.obs_dim != cfg_.obs_dim || source.cfg_.embed_dim != cfg_.embed_dim ||
      source.cfg_.proprio_passthrough != cfg_.proprio_passthrough ||
      source.cfg_.encoder_hidden != cfg_.encoder_hidden ||
      source.cfg_.activation != cfg_.activation) {
    throw ConfigError("encoder architecture does not match policy config");
  }
  encoder_ = source.encoder_.subset("encoder/");
}

namespace {
Tensor passthrough_columns(const Tensor& frames) {
  const std::size_t n = PolicyConfig::kPassthroughDims;
  Tensor out({frames.rows(), n});
  for (std::size_t r = 0; r < frames.rows(); ++r) {
    const auto row = frames.row_span(r);
    std::copy(row.end() - static_cast<long>(n), row.end(), out.ptr() + r * n);
  }
  return out;
}
}  // namespace

Tensor encode_frames(const DiffusionPolicy& policy, const Tensor& frames) {
  if (frames.cols() != policy.config().obs_dim) {
    throw ConfigError("frame width " + std::to_string(frames.cols()) + " does not match obs_dim " +
                      std::to_string(policy.config().obs_dim));
  }
  Tensor learned = mlp_forward(policy.encoder(), policy.encoder_spec(), frames);
  if (!policy.config().proprio_passthrough) return learned;
  const Tensor raw = passthrough_columns(frames);
  const std::size_t w = learned.cols(), n = raw.cols();
  Tensor out({frames.rows(), w + n});
  for (std::size_t r = 0; r < frames.rows(); ++r) {
    std::copy(learned.ptr() + r * w, learned.ptr() + (r + 1) * w, out.ptr() + r * (w + n));
    std::copy(raw.ptr() + r * n, raw.ptr() + (r + 1) * n, out.ptr() + r * (w + n) + w);
  }
  return out;
}

Tensor encode_context(const DiffusionPolicy& policy, const Tensor& frames) {
  return encode_frames(policy, frames);
}

namespace {

Tensor denoiser_input(const DiffusionPolicy& policy, const Tensor& noisy, const std::vector<int>& steps,
                      const Tensor& embeddings, const Tensor* past_actions) {
  const auto& cfg = policy.config();
  const Tensor temb = timestep_embedding(steps, cfg.time_embed_dim);
  const std::size_t n = noisy.rows();
  const std::size_t width = policy.denoiser_spec().input_width();
  Tensor in({n, width});
  for (std::size_t r = 0; r < n; ++r) {
    double* dst = in.ptr() + r * width;
    dst = std::copy(noisy.row_span(r).begin(), noisy.row_span(r).end(), dst);
    dst = std::copy(temb.row_span(r).begin(), temb.row_span(r).end(), dst);
    dst = std::copy(embeddings.row_span(r).begin(), embeddings.row_span(r).end(), dst);
    if (past_actions) std::copy(past_actions->row_span(r).begin(), past_actions->row_span(r).end(), dst);
  }
  return in;
}

void check_conditioning(const DiffusionPolicy& policy, std::size_t rows, std::size_t emb_cols,
                        const Tensor* past_actions) {
  const auto& cfg = policy.config();
  const auto k = static_cast<std::size_t>(cfg.k);
  if (emb_cols != k * cfg.embed_dim) {
    throw ConfigError("context embeddings have width " + std::to_string(emb_cols) + ", expected " +
                      std::to_string(k * cfg.embed_dim));
  }
  if (cfg.condition_on_past_actions) {
    if (!past_actions || past_actions->rows() != rows || past_actions->cols() != k * cfg.action_dim) {
      throw ConfigError("policy conditions on past actions but none (or wrong shape) were given");
    }
  } else if (past_actions) {
    throw ConfigError("past actions given to a policy that does not condition on them");
  }
}

}  // namespace

Var denoiser_forward(Tape& tape, DiffusionPolicy& policy, const Var& noisy,
                     const std::vector<int>& steps, const ConditioningInput& cond, bool trainable) {
  const auto& cfg = policy.config();
  const Tensor* past = cond.past_actions ? &*cond.past_actions : nullptr;
  check_conditioning(policy, noisy.value().rows(), cond.embeddings.value().cols(), past);
  std::vector<Var> parts{noisy, tape.constant(timestep_embedding(steps, cfg.time_embed_dim)),
                         cond.embeddings};
  if (past) parts.push_back(tape.constant(*past));
  return mlp_forward(tape, policy.denoiser(), policy.denoiser_spec(), concat_cols(parts), trainable);
}

Tensor denoiser_predict(const DiffusionPolicy& policy, const Tensor& noisy,
                        const std::vector<int>& steps, const Tensor& embeddings,
                        const Tensor* past_actions) {
  check_conditioning(policy, noisy.rows(), embeddings.cols(), past_actions);
  return mlp_forward(policy.denoiser(), policy.denoiser_spec(),
                     denoiser_input(policy, noisy, steps, embeddings, past_actions));
}

Var denoising_loss(const Var& predicted_noise, const NoisedBatch& batch, const Tensor& weights) {
  Var loss = weighted_mse(predicted_noise, batch.noise, weights);
  if (!std::isfinite(loss.value().item())) {
    double norm = 0.0;
    for (double v : batch.noisy.data()) norm += v * v;
    std::ostringstream os;
    os << "non-finite diffusion loss (steps:";
    for (std::size_t i = 0; i < std::min<std::size_t>(batch.steps.size(), 8); ++i) os << ' ' << batch.steps[i];
    os << (batch.steps.size() > 8 ? " ..." : "") << "; noisy input norm " << std::sqrt(norm) << ")";
    throw NumericalError(os.str());
  }
  return loss;
}

Var ddpm_loss_from_conditioning(Tape& tape, DiffusionPolicy& policy, const TargetBatch& targets,
                                const ConditioningInput& cond, Rng& rng) {
  const NoisedBatch nb = make_noised_batch(targets.x0, policy.schedule(), rng);
  Var pred = denoiser_forward(tape, policy, tape.constant(nb.noisy), nb.steps, cond, true);
  return denoising_loss(pred, nb, targets.weights);
}

Var encode_windows_on_tape(Tape& tape, DiffusionPolicy& policy,
                           const std::vector<const TrainingWindow*>& windows,
                           bool trainable_encoder) {
  const auto& cfg = policy.config();
  const auto k = static_cast<std::size_t>(cfg.k);
  Tensor frames({windows.size() * k, cfg.obs_dim});
  for (std::size_t r = 0; r < windows.size(); ++r) {
    if (windows[r]->context.shape() != Shape{k, cfg.obs_dim}) {
      throw ConfigError("window context does not match policy config");
    }
    std::copy(windows[r]->context.data().begin(), windows[r]->context.data().end(),
              frames.ptr() + r * k * cfg.obs_dim);
  }
  Var emb = mlp_forward(tape, policy.encoder(), policy.encoder_spec(), tape.constant(frames),
                        trainable_encoder);
  if (cfg.proprio_passthrough) emb = concat_cols({emb, tape.constant(passthrough_columns(frames))});
  return reshape(emb, {windows.size(), k * cfg.embed_dim});
}

Tensor context_actions(const std::vector<const env::Trajectory*>& trajs,
                       const std::vector<const WindowIndex*>& windows, const PolicyConfig& cfg) {
  const auto k = static_cast<std::size_t>(cfg.k);
  Tensor out({windows.size(), k * cfg.action_dim});
  for (std::size_t r = 0; r < windows.size(); ++r) {
    auto row = out.row_span(r);
    for (std::size_t i = 0; i < k; ++i) {
      if (windows[r]->context_pad[i]) continue;  // padded slots stay 0 after normalization
      const auto a = trajs[r]->actions[static_cast<std::size_t>(windows[r]->context[i])].to_array();
      std::span<double> dst = row.subspan(i * cfg.action_dim, cfg.action_dim);
      std::copy(a.begin(), a.end(), dst.begin());
      normalize_actions(dst);
    }
  }
  return out;
}

Var ddpm_loss(Tape& tape, DiffusionPolicy& policy, const std::vector<const TrainingWindow*>& windows,
              const std::vector<const env::Trajectory*>& trajs, Rng& rng, bool trainable_encoder) {
  std::vector<const Tensor*> targets;
  std::vector<const std::vector<bool>*> masks;
  std::vector<const WindowIndex*> idx;
  for (const auto* w : windows) {
    targets.push_back(&w->targets);
    masks.push_back(&w->mask);
    idx.push_back(&w->index);
  }
  const TargetBatch tb = make_target_batch(targets, masks, policy.config());
  ConditioningInput cond{encode_windows_on_tape(tape, policy, windows, trainable_encoder), {}};
  if (policy.config().condition_on_past_actions) cond.past_actions = context_actions(trajs, idx, policy.config());
  return ddpm_loss_from_conditioning(tape, policy, tb, cond, rng);
}

Var ddpm_loss(Tape& tape, DiffusionPolicy& policy, const TrainingWindow& window,
              const env::Trajectory& traj, Rng& rng) {
  return ddpm_loss(tape, policy, {&window}, {&traj}, rng, true);
}

Tensor sample_windows(const DiffusionPolicy& policy, const Tensor& embeddings,
                      const Tensor* past_actions, std::vector<Rng>& rngs, double max_displacement) {
  const auto& cfg = policy.config();
  const auto& sch = policy.schedule();
  const std::size_t n = rngs.size();
  if (n == 0) throw UsageError("sample_windows needs at least one rng stream");
  const auto k = static_cast<std::size_t>(cfg.k);
  const Tensor emb_row = embeddings.reshaped({1, embeddings.size()});
  if (emb_row.cols() != k * cfg.embed_dim) {
    throw ConfigError("context embeddings must be (k, embed_dim) = (" + std::to_string(k) + ", " +
                      std::to_string(cfg.embed_dim) + ")");
  }
  Tensor emb({n, emb_row.cols()});
  for (std::size_t r = 0; r < n; ++r) std::copy(emb_row.data().begin(), emb_row.data().end(), emb.ptr() + r * emb_row.cols());
  std::optional<Tensor> past;
  if (past_actions) {
    past = Tensor({n, past_actions->size()});
    for (std::size_t r = 0; r < n; ++r) {
      std::copy(past_actions->data().begin(), past_actions->data().end(), past->ptr() + r * past_actions->size());
    }
  }
  const std::size_t width = static_cast<std::size_t>(cfg.window()) * cfg.action_dim;
  Tensor x({n, width});
  for (std::size_t r = 0; r < n; ++r) fill_normal(rngs[r], x.row_span(r));
  std::vector<int> steps(n);
  for (int i = sch.steps() - 1; i >= 0; --i) {
    std::fill(steps.begin(), steps.end(), i + 1);
    const Tensor eps = denoiser_predict(policy, x, steps, emb, past ? &*past : nullptr);
    const auto ui = static_cast<std::size_t>(i);
    const double ab = sch.alpha_bars[ui];
    const double ab_prev = i > 0 ? sch.alpha_bars[ui - 1] : 1.0;
    const double beta = sch.betas[ui];
    const double c0 = beta * std::sqrt(ab_prev) / (1.0 - ab);
    const double ct = (1.0 - ab_prev) * std::sqrt(sch.alphas[ui]) / (1.0 - ab);
    const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    for (std::size_t r = 0; r < n; ++r) {
      auto row = x.row_span(r);
      auto e = eps.row_span(r);
      for (std::size_t j = 0; j < width; ++j) {
        const double x0 = std::clamp((row[j] - std::sqrt(1.0 - ab) * e[j]) / std::sqrt(ab), -1.0, 1.0);
        row[j] = c0 * x0 + ct * row[j];
      }
      if (i > 0) {
        std::normal_distribution<double> z(0.0, 1.0);
        for (double& v : row) v += sigma * z(rngs[r]);
      }
    }
    if (!x.all_finite()) {
      throw NumericalError("non-finite value while sampling at diffusion step " + std::to_string(i + 1));
    }
  }
  for (double& v : x.storage()) v = std::clamp(v, -1.0, 1.0);
  for (std::size_t r = 0; r < n; ++r) denormalize_actions(x.row_span(r), max_displacement);
  return x;
}

Tensor sample_window(const DiffusionPolicy& policy, const Tensor& embeddings,
                     const Tensor* past_actions, Rng& rng, double max_displacement) {
  std::vector<Rng> rngs{rng};
  Tensor out = sample_windows(policy, embeddings, past_actions, rngs, max_displacement);
  rng = rngs[0];
  return out.reshaped({static_cast<std::size_t>(policy.config().window()), policy.config().action_dim});
}

namespace {

ParamStore merged_params(const DiffusionPolicy& policy) {
  ParamStore all;
  for (const auto& n : policy.encoder().names()) all.add(n, policy.encoder().value(n));
  for (const auto& n : policy.denoiser().names()) all.add(n, policy.denoiser().value(n));
  return all;
}

std::string policy_metadata(const DiffusionPolicy& policy) {
  nlohmann::json j;
  j["format_version"] = kPolicyFormatVersion;
  j["config"] = nlohmann::json::parse(policy.config().to_json());
  return j.dump();
}

}  // namespace

std::string policy_bytes(const DiffusionPolicy& policy) {
  return checkpoint_bytes(merged_params(policy), policy_metadata(policy));
}

void save_policy(const std::string& path, const DiffusionPolicy& policy) {
  io::write_file(path, policy_bytes(policy));
}

DiffusionPolicy policy_from_checkpoint(const Checkpoint& cp) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(cp.metadata);
  } catch (const nlohmann::json::exception&) {
    throw IoError("policy checkpoint has no readable config block");
  }
  if (meta.value("format_version", -1) != kPolicyFormatVersion) {
    throw IoError("unsupported policy checkpoint version");
  }
  DiffusionPolicy policy(PolicyConfig::from_json(meta.at("config").dump()), 0);
  for (const auto& n : cp.params.names()) {
    ParamStore& store = n.rfind("encoder/", 0) == 0 ? policy.encoder() : policy.denoiser();
    if (!store.contains(n) || store.value(n).shape() != cp.params.value(n).shape()) {
      throw ConfigError("checkpoint parameter " + n + " does not match its config");
    }
    store.value(n) = cp.params.value(n);
  }
  if (cp.params.names().size() != policy.encoder().names().size() + policy.denoiser().names().size()) {
    throw ConfigError("checkpoint is missing parameters for its config");
  }
  return policy;
}

DiffusionPolicy load_policy(const std::string& path) {
  return policy_from_checkpoint(load_checkpoint(path));
}

std::string encoder_bytes(const DiffusionPolicy& policy) {
  nlohmann::json j;
  j["obs_dim"] = policy.config().obs_dim;
  j["embed_dim"] = policy.config().embed_dim;
  j["proprio_passthrough"] = policy.config().proprio_passthrough;
  j["encoder_hidden"] = policy.config().encoder_hidden;
  j["activation"] = activation_name(policy.config().activation);
  return checkpoint_bytes(policy.encoder(), j.dump());
}

}  // namespace ptp
