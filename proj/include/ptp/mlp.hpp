#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ptp/autodiff.hpp"
#include "ptp/param_store.hpp"

namespace ptp {

/// Fully connected stack. `widths` lists input width, hidden widths and output
/// width; layer i maps widths[i] -> widths[i+1] with parameters
/// "<prefix>/w<i>" (widths[i] x widths[i+1]) and "<prefix>/b<i>".
/// Hidden layers are activated; the output layer only when `activate_output`.
struct MlpSpec {
  std::string prefix;
  std::vector<std::size_t> widths;
  Activation activation = Activation::gelu;
  bool activate_output = false;

  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }
  std::size_t num_layers() const { return widths.size() - 1; }
  std::string weight_name(std::size_t layer) const;
  std::string bias_name(std::size_t layer) const;
};

/// Glorot-uniform weights, zero biases.
void init_mlp(ParamStore& store, const MlpSpec& spec, std::mt19937_64& rng);

/// Recorded forward pass. With `trainable` false the weights enter the tape as
/// constants and receive no gradient.
Var mlp_forward(Tape& tape, ParamStore& store, const MlpSpec& spec, const Var& input,
                bool trainable = true);

/// Forward pass without a tape. Bit-identical to the recorded pass.
Tensor mlp_forward(const ParamStore& store, const MlpSpec& spec, const Tensor& input);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  bool passed = false;
};

/// Compares tape gradients of a scalar loss with central finite differences
/// over every parameter element: |autodiff - fd| / max(1, |fd|).
/// `loss_fn` must build the loss on the given tape from `store` and be
/// deterministic.
GradCheckResult grad_check(ParamStore& store, const std::function<Var(Tape&)>& loss_fn,
                           double tolerance, double epsilon = 1e-5);

}  // namespace ptp
