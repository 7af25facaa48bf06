#include "ptp/mlp.hpp"

#include <cmath>

#include "ptp/error.hpp"

namespace ptp {

std::string MlpSpec::weight_name(std::size_t layer) const {
  return prefix + "/w" + std::to_string(layer);
}
std::string MlpSpec::bias_name(std::size_t layer) const {
  return prefix + "/b" + std::to_string(layer);
}

void init_mlp(ParamStore& store, const MlpSpec& spec, std::mt19937_64& rng) {
  if (spec.widths.size() < 2) throw ConfigError(spec.prefix + ": MLP needs at least two widths");
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    if (in == 0 || out == 0) throw ConfigError(spec.prefix + ": zero layer width");
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w({in, out});
    for (double& v : w.data()) v = dist(rng);
    store.add(spec.weight_name(l), std::move(w));
    store.add(spec.bias_name(l), Tensor({out}));
  }
}

namespace {

void check_layer(const ParamStore& store, const MlpSpec& spec, std::size_t layer,
                 std::size_t in_width) {
  const Tensor& w = store.value(spec.weight_name(layer));
  if (w.rank() != 2 || w.shape()[0] != in_width || w.shape()[1] != spec.widths[layer + 1]) {
    throw ConfigError(spec.prefix + ": shape mismatch at layer " + std::to_string(layer) +
                      " (input width " + std::to_string(in_width) + ", weight " +
                      shape_string(w.shape()) + ")");
  }
  if (store.value(spec.bias_name(layer)).size() != spec.widths[layer + 1]) {
    throw ConfigError(spec.prefix + ": bias shape mismatch at layer " + std::to_string(layer));
  }
}

}  // namespace

Var mlp_forward(Tape& tape, ParamStore& store, const MlpSpec& spec, const Var& input,
                bool trainable) {
  Var h = input;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    check_layer(store, spec, l, h.value().cols());
    Var w = trainable ? tape.parameter(store, spec.weight_name(l))
                      : tape.frozen(store, spec.weight_name(l));
    Var b = trainable ? tape.parameter(store, spec.bias_name(l))
                      : tape.frozen(store, spec.bias_name(l));
    h = linear(h, w, b);
    if (l + 1 < spec.num_layers() || spec.activate_output) h = activate(h, spec.activation);
  }
  return h;
}

Tensor mlp_forward(const ParamStore& store, const MlpSpec& spec, const Tensor& input) {
  Tensor h = input;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    check_layer(store, spec, l, h.cols());
    const Tensor& w = store.value(spec.weight_name(l));
    const Tensor& b = store.value(spec.bias_name(l));
    const std::size_t m = h.rows(), n = h.cols(), p = w.cols();
    Tensor out({m, p});
    kernels::matmul(h.ptr(), w.ptr(), out.ptr(), m, n, p, b.ptr(), false);
    if (l + 1 < spec.num_layers() || spec.activate_output) activate_inplace(out, spec.activation);
    h = std::move(out);
  }
  return h;
}

GradCheckResult grad_check(ParamStore& store, const std::function<Var(Tape&)>& loss_fn,
                           double tolerance, double epsilon) {
  if (!(tolerance > 0.0)) throw ConfigError("grad_check tolerance must be positive");
  std::vector<Tensor> analytic;
  const auto names = store.names();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    tape.backward(loss);
    for (const auto& name : names) analytic.push_back(store.grad(name));
  }
  auto eval = [&]() {
    Tape tape;
    return loss_fn(tape).value().item();
  };
  GradCheckResult res;
  for (std::size_t p = 0; p < names.size(); ++p) {
    Tensor& value = store.value(names[p]);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + epsilon;
      const double up = eval();
      value[i] = orig - epsilon;
      const double down = eval();
      value[i] = orig;
      const double fd = (up - down) / (2.0 * epsilon);
      const double err = std::abs(analytic[p][i] - fd) / std::max(1.0, std::abs(fd));
      if (err > res.max_relative_error || res.worst_parameter.empty()) {
        if (err >= res.max_relative_error) {
          res.max_relative_error = err;
          res.worst_parameter = names[p];
          res.worst_index = i;
        }
      }
    }
  }
  res.passed = res.max_relative_error < tolerance;
  return res;
}

}  // namespace ptp
