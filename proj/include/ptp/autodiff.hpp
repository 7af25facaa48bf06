#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ptp/param_store.hpp"
#include "ptp/tensor.hpp"

namespace ptp {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Record a forward pass, call backward() once, then
/// reset() before the next step.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a named parameter; backward() accumulates into store.grad(name).
  Var parameter(ParamStore& store, const std::string& name);
  /// Parameter value used as a constant (no gradient flows to the store).
  Var frozen(const ParamStore& store, const std::string& name);

  /// Records an op result. `backward` is dropped when no input requires grad.
  Var record(Tensor value, bool requires_grad, Backward backward);

  /// Populates gradients of every ParamStore bound to this tape. Parameters
  /// not reached by `loss` receive zero. Throws UsageError on a second call.
  void backward(const Var& loss);
  void reset();

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, allocated on first use.
  Tensor& grad(std::size_t id);
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    ParamStore* store = nullptr;
    std::string param_name;
  };
  std::vector<Node> nodes_;
  std::vector<ParamStore*> stores_;
  bool backward_done_ = false;
};

enum class Activation { relu, gelu, tanh };
Activation parse_activation(const std::string& name);
std::string activation_name(Activation a);

// Ops. Shapes follow the matrix view (rows x last extent) unless noted.
Var matmul(const Var& a, const Var& b);
/// x(B x n) * w(n x p) + bias(p).
Var linear(const Var& x, const Var& w, const Var& bias);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var square(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var activate(const Var& a, Activation act);
/// Column-wise concatenation of inputs with equal row counts.
Var concat_cols(const std::vector<Var>& parts);
Var reshape(const Var& a, Shape shape);
/// Mean over rows of sum_j w_ij (pred_ij - target_ij)^2 / sum_j w_ij. Rows
/// with zero total weight are excluded from the mean.
Var weighted_mse(const Var& pred, const Tensor& target, const Tensor& weights);

/// Elementwise activation without recording (inference path).
void activate_inplace(Tensor& t, Activation act);

}  // namespace ptp
