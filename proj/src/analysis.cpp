#include "ptp/analysis.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ptp/error.hpp"
#include "ptp/mlp.hpp"
#include "ptp/param_store.hpp"
#include "ptp/rng.hpp"

namespace ptp {

void PredictorConfig::validate() const {
  if (window < 1) throw ConfigError("predictor window must be >= 1");
  if (!(split > 0.0 && split < 1.0)) throw ConfigError("predictor split must be in (0, 1)");
  if (epochs < 1) throw ConfigError("predictor epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("predictor batch size must be >= 1");
}

std::string PredictorConfig::to_json() const {
  nlohmann::json j;
  j["window"] = window;
  j["hidden"] = hidden;
  j["activation"] = activation_name(activation);
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["split"] = split;
  return j.dump();
}

PairSet extract_pairs(const std::vector<Tensor>& episodes, int window) {
  if (window < 1) throw ConfigError("pair window must be >= 1");
  if (episodes.empty()) throw ConfigError("no episodes to extract pairs from");
  const std::size_t A = episodes.front().cols();
  const auto W = static_cast<std::size_t>(window);
  std::size_t n = 0, skipped = 0;
  for (const auto& ep : episodes) {
    if (ep.cols() != A) throw ConfigError("episodes have different action widths");
    if (ep.rows() > W) {
      n += ep.rows() - W;
    } else {
      ++skipped;
    }
  }
  if (n == 0) {
    throw ConfigError("no (past actions -> action) pairs: every episode is shorter than " +
                      std::to_string(W + 1) + " actions");
  }
  PairSet ps;
  ps.inputs = Tensor({n, W * A});
  ps.targets = Tensor({n, A});
  ps.skipped_episodes = skipped;
  std::size_t r = 0;
  for (const auto& ep : episodes) {
    for (std::size_t t = W; t < ep.rows(); ++t, ++r) {
      std::copy(ep.ptr() + (t - W) * A, ep.ptr() + t * A, ps.inputs.ptr() + r * W * A);
      std::copy(ep.ptr() + t * A, ep.ptr() + (t + 1) * A, ps.targets.ptr() + r * A);
    }
  }
  return ps;
}

std::vector<Tensor> executed_action_sequences(const std::vector<env::Trajectory>& trajs) {
  std::vector<Tensor> out;
  for (const auto& t : trajs) {
    if (t.steps() > 0) out.push_back(t.executed_actions());
  }
  return out;
}

PredictorNet::PredictorNet(const PredictorConfig& cfg, std::size_t action_dim, std::uint64_t seed) {
  spec.prefix = "predictor";
  spec.activation = cfg.activation;
  spec.widths.push_back(static_cast<std::size_t>(cfg.window) * action_dim);
  for (auto h : cfg.hidden) spec.widths.push_back(h);
  spec.widths.push_back(action_dim);
  Rng rng(derive_seed(seed, {0x9ed}));
  init_mlp(params, spec, rng);
}

namespace {

struct Standardizer {
  std::vector<double> mean, scale;

  static Standardizer fit(const Tensor& x, const std::vector<std::size_t>& rows) {
    Standardizer s;
    const std::size_t d = x.cols();
    s.mean.assign(d, 0.0);
    s.scale.assign(d, 0.0);
    for (auto r : rows) for (std::size_t j = 0; j < d; ++j) s.mean[j] += x.at(r, j);
    for (auto& m : s.mean) m /= static_cast<double>(rows.size());
    for (auto r : rows) {
      for (std::size_t j = 0; j < d; ++j) {
        const double v = x.at(r, j) - s.mean[j];
        s.scale[j] += v * v;
      }
    }
    for (auto& v : s.scale) {
      v = std::sqrt(v / static_cast<double>(rows.size()));
      if (v < 1e-12) v = 1.0;
    }
    return s;
  }

  Tensor apply(const Tensor& x, const std::vector<std::size_t>& rows) const {
    Tensor out({rows.size(), x.cols()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) = (x.at(rows[i], j) - mean[j]) / scale[j];
    }
    return out;
  }
};

double raw_mse(const PredictorNet& net, const Tensor& x_std, const Tensor& y_raw,
               const std::vector<std::size_t>& rows, const Standardizer& ys) {
  const Tensor pred = mlp_forward(net.params, net.spec, x_std);
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < y_raw.cols(); ++j) {
      const double p = pred.at(i, j) * ys.scale[j] + ys.mean[j];
      const double d = p - y_raw.at(rows[i], j);
      total += d * d;
    }
  }
  return total / static_cast<double>(rows.size() * y_raw.cols());
}

}  // namespace

PredictorFit fit_predictor(const PairSet& pairs, const PredictorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t n = pairs.size();
  const std::size_t A = pairs.targets.cols();
  if (pairs.inputs.cols() != static_cast<std::size_t>(cfg.window) * A) {
    throw ConfigError("pair window does not match predictor config");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {0x5e1}));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  const auto n_train = static_cast<std::size_t>(std::floor(cfg.split * static_cast<double>(n)));
  if (n_train < 1 || n_train >= n) {
    throw ConfigError("predictor split leaves no training or no holdout pairs (" + std::to_string(n) + " pairs)");
  }
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<long>(n_train));
  std::vector<std::size_t> hold(order.begin() + static_cast<long>(n_train), order.end());

  const Standardizer xs = Standardizer::fit(pairs.inputs, train);
  const Standardizer ys = Standardizer::fit(pairs.targets, train);
  const Tensor x_train = xs.apply(pairs.inputs, train);
  const Tensor y_train = ys.apply(pairs.targets, train);
  const Tensor x_hold = xs.apply(pairs.inputs, hold);

  PredictorNet net(cfg, A, seed);
  AdamConfig adam;
  adam.lr = cfg.lr;
  const Tensor ones({cfg.batch_size, A}, 1.0);
  Tape tape;
  std::vector<std::size_t> idx(n_train);
  std::iota(idx.begin(), idx.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n_train; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    for (std::size_t b = 0; b < n_train; b += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, n_train - b);
      Tensor xb({m, x_train.cols()}), yb({m, A});
      for (std::size_t i = 0; i < m; ++i) {
        std::copy(x_train.row_span(idx[b + i]).begin(), x_train.row_span(idx[b + i]).end(), xb.row_span(i).begin());
        std::copy(y_train.row_span(idx[b + i]).begin(), y_train.row_span(idx[b + i]).end(), yb.row_span(i).begin());
      }
      tape.reset();
      Var pred = mlp_forward(tape, net.params, net.spec, tape.constant(std::move(xb)));
      Var loss = weighted_mse(pred, yb, Tensor({m, A}, 1.0));
      if (!std::isfinite(loss.value().item())) {
        throw NumericalError("predictor loss is not finite at epoch " + std::to_string(epoch + 1));
      }
      tape.backward(loss);
      adam_step(net.params, adam);
    }
  }
  PredictorFit fit;
  fit.train_pairs = n_train;
  fit.holdout_pairs = hold.size();
  fit.holdout_mse = raw_mse(net, x_hold, pairs.targets, hold, ys);
  fit.train_mse = raw_mse(net, x_train, pairs.targets, train, ys);
  if (!std::isfinite(fit.holdout_mse)) throw NumericalError("predictor holdout MSE is not finite");
  return fit;
}

PredictabilityReport predictability_ratio(const std::vector<Tensor>& expert_episodes,
                                          const std::vector<Tensor>& policy_episodes,
                                          const PredictorConfig& cfg, std::uint64_t seed) {
  if (expert_episodes.empty() || policy_episodes.empty()) {
    throw ConfigError("predictability ratio needs expert and policy episodes");
  }
  const PairSet ep = extract_pairs(expert_episodes, cfg.window);
  const PairSet pp = extract_pairs(policy_episodes, cfg.window);
  PredictabilityReport r;
  r.config = cfg;
  r.eps_expert = fit_predictor(ep, cfg, seed).holdout_mse;
  r.eps_policy = fit_predictor(pp, cfg, seed).holdout_mse;
  r.expert_pairs = ep.size();
  r.policy_pairs = pp.size();
  r.expert_skipped = ep.skipped_episodes;
  r.policy_skipped = pp.skipped_episodes;
  if (r.eps_policy == 0.0) {
    r.ratio_infinite = true;
    r.ratio = std::numeric_limits<double>::infinity();
  } else {
    r.ratio = r.eps_expert / r.eps_policy;
  }
  return r;
}

std::string PredictabilityReport::to_json() const {
  nlohmann::json j;
  j["eps_expert"] = eps_expert;
  j["eps_policy"] = eps_policy;
  j["ratio"] = ratio_infinite ? nlohmann::json("inf") : nlohmann::json(ratio);
  j["ratio_infinite"] = ratio_infinite;
  j["expert_pairs"] = expert_pairs;
  j["policy_pairs"] = policy_pairs;
  j["expert_skipped_episodes"] = expert_skipped;
  j["policy_skipped_episodes"] = policy_skipped;
  j["config"] = nlohmann::json::parse(config.to_json());
  return j.dump(2);
}

std::string ratio_csv_row(const std::string& task, const std::string& arm,
                          const PredictabilityReport& report, double success_rate,
                          const std::string& config_hash) {
  std::ostringstream os;
  os.precision(6);
  os << task << ',' << arm << ',';
  if (report.ratio_infinite) {
    os << "inf";
  } else {
    os << report.ratio;
  }
  os << ',' << report.eps_expert << ',' << report.eps_policy << ',' << success_rate << ','
     << config_hash << '\n';
  return os.str();
}

}  // namespace ptp
