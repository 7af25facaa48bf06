#include "ptp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ptp/error.hpp"

namespace ptp {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) { return record(std::move(value), false, {}); }

Var Tape::parameter(ParamStore& store, const std::string& name) {
  Node n;
  n.value = store.value(name);
  n.requires_grad = true;
  n.store = &store;
  n.param_name = name;
  nodes_.push_back(std::move(n));
  if (std::find(stores_.begin(), stores_.end(), &store) == stores_.end()) {
    stores_.push_back(&store);
  }
  return {this, nodes_.size() - 1};
}

Var Tape::frozen(const ParamStore& store, const std::string& name) {
  return constant(store.value(name));
}

Var Tape::record(Tensor value, bool requires_grad, Backward backward) {
  if (backward_done_) throw UsageError("recording on a tape after backward(); call reset()");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (backward_done_) throw UsageError("backward() called twice without reset()");
  if (loss.tape() != this) throw UsageError("loss belongs to a different tape");
  if (loss.value().size() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " +
                     shape_string(loss.value().shape()));
  }
  backward_done_ = true;
  for (ParamStore* s : stores_) s->zero_grad();
  if (nodes_[loss.id()].requires_grad) {
    grad(loss.id()).fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) {
        n.backward(*this, n.grad);
      } else if (n.store) {
        double* dst = n.store->grad(n.param_name).ptr();
        const double* src = n.grad.ptr();
        for (std::size_t k = 0; k < n.grad.size(); ++k) dst[k] += src[k];
      }
    }
  }
  for (ParamStore* s : stores_) s->mark_grads_ready();
}

void Tape::reset() {
  nodes_.clear();
  stores_.clear();
  backward_done_ = false;
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation: " + name);
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

namespace {

void require_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw UsageError("operands recorded on different tapes");
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

void accumulate(Tensor& dst, const Tensor& src) {
  double* d = dst.ptr();
  const double* s = src.ptr();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename F>
Var unary(const Var& a, Tensor out, F&& grad_fn) {
  Tape& t = *a.tape();
  const std::size_t ia = a.id();
  return t.record(std::move(out), a.requires_grad(),
                  [ia, grad_fn](Tape& tape, const Tensor& g) { grad_fn(tape, ia, g); });
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), n = av.cols(), p = bv.cols();
  if (bv.rows() != n) {
    throw ConfigError("matmul: inner extents differ " + shape_string(av.shape()) + " x " +
                      shape_string(bv.shape()));
  }
  Tensor out({m, p});
  kernels::matmul(av.ptr(), bv.ptr(), out.ptr(), m, n, p, nullptr, false);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(
      std::move(out), a.requires_grad() || b.requires_grad(),
      [ia, ib, m, n, p](Tape& t, const Tensor& g) {
        if (t.requires_grad(ia)) {
          Tensor bt({p, n});
          kernels::transpose(t.value(ib).ptr(), bt.ptr(), n, p);
          kernels::matmul(g.ptr(), bt.ptr(), t.grad(ia).ptr(), m, p, n, nullptr, true);
        }
        if (t.requires_grad(ib)) {
          Tensor at({n, m});
          kernels::transpose(t.value(ia).ptr(), at.ptr(), m, n);
          kernels::matmul(at.ptr(), g.ptr(), t.grad(ib).ptr(), n, m, p, nullptr, true);
        }
      });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  require_same_tape(x, w);
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const std::size_t m = xv.rows(), n = xv.cols(), p = wv.cols();
  if (wv.rows() != n) {
    throw ConfigError("linear: input width " + std::to_string(n) + " does not match weight " +
                      shape_string(wv.shape()));
  }
  if (bias.value().size() != p) throw ConfigError("linear: bias width mismatch");
  Tensor out({m, p});
  kernels::matmul(xv.ptr(), wv.ptr(), out.ptr(), m, n, p, bias.value().ptr(), false);
  const std::size_t ix = x.id(), iw = w.id(), ib = bias.id();
  const bool rg = x.requires_grad() || w.requires_grad() || bias.requires_grad();
  return x.tape()->record(std::move(out), rg, [ix, iw, ib, m, n, p](Tape& t, const Tensor& g) {
    if (t.requires_grad(ix)) {
      Tensor wt({p, n});
      kernels::transpose(t.value(iw).ptr(), wt.ptr(), n, p);
      kernels::matmul(g.ptr(), wt.ptr(), t.grad(ix).ptr(), m, p, n, nullptr, true);
    }
    if (t.requires_grad(iw)) {
      Tensor xt({n, m});
      kernels::transpose(t.value(ix).ptr(), xt.ptr(), m, n);
      kernels::matmul(xt.ptr(), g.ptr(), t.grad(iw).ptr(), n, m, p, nullptr, true);
    }
    if (t.requires_grad(ib)) {
      double* db = t.grad(ib).ptr();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < p; ++j) db[j] += g.ptr()[i * p + j];
      }
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  accumulate(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), a.requires_grad() || b.requires_grad(),
                          [ia, ib](Tape& t, const Tensor& g) {
                            if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
                            if (t.requires_grad(ib)) accumulate(t.grad(ib), g);
                          });
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), a.requires_grad() || b.requires_grad(),
                          [ia, ib](Tape& t, const Tensor& g) {
                            if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
                            if (t.requires_grad(ib)) {
                              Tensor& gb = t.grad(ib);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                            }
                          });
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), a.requires_grad() || b.requires_grad(),
                          [ia, ib](Tape& t, const Tensor& g) {
                            const Tensor& av = t.value(ia);
                            const Tensor& bv = t.value(ib);
                            if (t.requires_grad(ia)) {
                              Tensor& ga = t.grad(ia);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                            }
                            if (t.requires_grad(ib)) {
                              Tensor& gb = t.grad(ib);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                            }
                          });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return unary(a, std::move(out), [s](Tape& t, std::size_t ia, const Tensor& g) {
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var square(const Var& a) { return mul(a, a); }

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return unary(a, Tensor::scalar(s), [](Tape& t, std::size_t ia, const Tensor& g) {
    Tensor& ga = t.grad(ia);
    for (double& v : ga.data()) v += g[0];
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

void activate_inplace(Tensor& t, Activation act) {
  switch (act) {
    case Activation::relu:
      for (double& v : t.data()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::gelu:
      for (double& v : t.data()) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
      break;
    case Activation::tanh:
      for (double& v : t.data()) v = std::tanh(v);
      break;
  }
}

Var activate(const Var& a, Activation act) {
  Tensor out = a.value();
  activate_inplace(out, act);
  return unary(a, std::move(out), [act](Tape& t, std::size_t ia, const Tensor& g) {
    const Tensor& x = t.value(ia);
    Tensor& ga = t.grad(ia);
    switch (act) {
      case Activation::relu:
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
        break;
      case Activation::gelu:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
          ga[i] += g[i] * (cdf + x[i] * pdf);
        }
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double y = std::tanh(x[i]);
          ga[i] += g[i] * (1.0 - y * y);
        }
        break;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  bool rg = false;
  std::vector<std::size_t> ids, widths;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    if (p.value().rows() != rows) throw ConfigError("concat_cols: row counts differ");
    total += p.value().cols();
    rg = rg || p.requires_grad();
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.value().ptr() + r * w, w, out.ptr() + r * total + off);
    }
    off += w;
  }
  return parts[0].tape()->record(
      std::move(out), rg, [ids, widths, rows, total](Tape& t, const Tensor& g) {
        std::size_t o = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const std::size_t w = widths[k];
          if (t.requires_grad(ids[k])) {
            Tensor& gk = t.grad(ids[k]);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < w; ++c) gk[r * w + c] += g[r * total + o + c];
            }
          }
          o += w;
        }
      });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return unary(a, std::move(out),
               [](Tape& t, std::size_t ia, const Tensor& g) { accumulate(t.grad(ia), g); });
}

Var weighted_mse(const Var& pred, const Tensor& target, const Tensor& weights) {
  const Tensor& pv = pred.value();
  if (target.size() != pv.size() || weights.size() != pv.size()) {
    throw ConfigError("weighted_mse: pred " + shape_string(pv.shape()) + ", target " +
                      shape_string(target.shape()) + ", weights " +
                      shape_string(weights.shape()));
  }
  const std::size_t rows = pv.rows(), cols = pv.cols();
  std::vector<double> row_scale(rows, 0.0);
  std::size_t valid = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double wsum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) wsum += weights[r * cols + c];
    if (wsum > 0.0) {
      row_scale[r] = 1.0 / wsum;
      ++valid;
    }
  }
  if (valid == 0) throw ConfigError("weighted_mse: every row has zero weight");
  const double inv_valid = 1.0 / static_cast<double>(valid);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_scale[r] == 0.0) continue;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const double d = pv[i] - target[i];
      acc += weights[i] * d * d;
    }
    total += acc * row_scale[r];
  }
  total *= inv_valid;
  return unary(pred, Tensor::scalar(total),
               [target, weights, row_scale, inv_valid, cols](Tape& t, std::size_t ia,
                                                             const Tensor& g) {
                 const Tensor& p = t.value(ia);
                 Tensor& gp = t.grad(ia);
                 for (std::size_t i = 0; i < p.size(); ++i) {
                   const double s = row_scale[i / cols];
                   if (s == 0.0) continue;
                   gp[i] += g[0] * 2.0 * weights[i] * (p[i] - target[i]) * s * inv_valid;
                 }
               });
}

}  // namespace ptp
