#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "ptp/autodiff.hpp"
#include "ptp/error.hpp"
#include "ptp/mlp.hpp"
#include "ptp/param_store.hpp"

using namespace ptp;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(-scale, scale);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

// Straight triple-loop forward pass used as an oracle for mlp_forward.
std::vector<double> naive_forward(const ParamStore& store, const MlpSpec& spec,
                                  std::vector<double> x) {
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const Tensor& w = store.value(spec.weight_name(l));
    const Tensor& b = store.value(spec.bias_name(l));
    std::vector<double> y(spec.widths[l + 1]);
    for (std::size_t j = 0; j < y.size(); ++j) {
      double acc = b[j];
      for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * w.at(i, j);
      const bool act = l + 1 < spec.num_layers() || spec.activate_output;
      if (act) {
        switch (spec.activation) {
          case Activation::relu: acc = acc > 0 ? acc : 0; break;
          case Activation::tanh: acc = std::tanh(acc); break;
          case Activation::gelu: acc = 0.5 * acc * (1.0 + std::erf(acc / std::sqrt(2.0))); break;
        }
      }
      y[j] = acc;
    }
    x = std::move(y);
  }
  return x;
}

}  // namespace

TEST(MlpForward, IdentityWeightsReluPassesInputThrough) {
  ParamStore store;
  MlpSpec spec{"m", {2, 2}, Activation::relu, true};
  store.add("m/w0", Tensor::matrix({{1, 0}, {0, 1}}));
  store.add("m/b0", Tensor({2}));
  const Tensor out = mlp_forward(store, spec, Tensor::row({1.0, 2.0}));
  EXPECT_EQ(out[0], 1.0);
  EXPECT_EQ(out[1], 2.0);
}

TEST(MlpForward, SingleScalarLayer) {
  ParamStore store;
  store.add("m/w0", Tensor::matrix({{2}}));
  store.add("m/b0", Tensor::row({1}));
  EXPECT_EQ(mlp_forward(store, MlpSpec{"m", {1, 1}, Activation::relu, false}, Tensor::row({3}))[0],
            7.0);
  EXPECT_EQ(mlp_forward(store, MlpSpec{"m", {1, 1}, Activation::relu, true}, Tensor::row({3}))[0],
            7.0);
}

TEST(MlpForward, MatchesNaiveImplementation) {
  for (auto act : {Activation::relu, Activation::gelu, Activation::tanh}) {
    std::mt19937_64 rng(11);
    ParamStore store;
    MlpSpec spec{"net", {7, 13, 5}, act, false};
    init_mlp(store, spec, rng);
    for (const auto& name : store.names()) {
      if (name.find("/b") != std::string::npos) store.value(name) = random_tensor(store.value(name).shape(), rng);
    }
    const Tensor x = random_tensor({9, 7}, rng);
    const Tensor y = mlp_forward(store, spec, x);
    for (std::size_t r = 0; r < 9; ++r) {
      auto row = x.row_span(r);
      const auto ref = naive_forward(store, spec, {row.begin(), row.end()});
      for (std::size_t j = 0; j < ref.size(); ++j) EXPECT_NEAR(y.at(r, j), ref[j], 1e-12);
    }
  }
}

TEST(MlpForward, DeterministicAndTapeMatchesInference) {
  std::mt19937_64 rng(3);
  ParamStore store;
  MlpSpec spec{"net", {6, 40, 40, 3}, Activation::gelu, false};
  init_mlp(store, spec, rng);
  const Tensor x = random_tensor({5, 6}, rng);
  EXPECT_EQ(mlp_forward(store, spec, x), mlp_forward(store, spec, x));
  Tape tape;
  Var y = mlp_forward(tape, store, spec, tape.constant(x));
  EXPECT_EQ(y.value(), mlp_forward(store, spec, x));
}

TEST(MlpForward, ShapeMismatchNamesLayer) {
  ParamStore store;
  store.add("m/w0", Tensor({3, 4}));
  store.add("m/b0", Tensor({4}));
  store.add("m/w1", Tensor({5, 2}));
  store.add("m/b1", Tensor({2}));
  MlpSpec spec{"m", {3, 4, 2}};
  try {
    mlp_forward(store, spec, Tensor({1, 3}));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(mlp_forward(store, spec, Tensor({1, 2})), ConfigError);
}

TEST(Backward, SquareAtThree) {
  ParamStore store;
  store.add("x", Tensor::scalar(3.0));
  Tape tape;
  tape.backward(sum(square(tape.parameter(store, "x"))));
  EXPECT_DOUBLE_EQ(store.grad("x").item(), 6.0);
}

TEST(Backward, LinearMapGradientIsInputPerRow) {
  ParamStore store;
  store.add("w", Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
  Tape tape;
  const Tensor x = Tensor::matrix({{0.5}, {-1.0}, {2.0}});
  tape.backward(sum(matmul(tape.parameter(store, "w"), tape.constant(x))));
  const Tensor& g = store.grad("w");
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(g.at(r, c), x[c]);
  }
}

TEST(Backward, UnusedParameterGetsZeroAndSecondCallThrows) {
  ParamStore store;
  store.add("a", Tensor::scalar(2.0));
  store.add("b", Tensor::scalar(5.0));
  store.set_grad("b", Tensor::scalar(9.0));
  Tape tape;
  Var loss = mul(tape.parameter(store, "a"), tape.parameter(store, "a"));
  tape.parameter(store, "b");
  tape.backward(sum(loss));
  EXPECT_EQ(store.grad("b").item(), 0.0);
  EXPECT_THROW(tape.backward(sum(loss)), UsageError);
  tape.reset();
  Var again = sum(square(tape.parameter(store, "a")));
  EXPECT_NO_THROW(tape.backward(again));
}

TEST(Backward, NonScalarLossRejected) {
  ParamStore store;
  store.add("a", Tensor::row({1, 2}));
  Tape tape;
  EXPECT_THROW(tape.backward(tape.parameter(store, "a")), UsageError);
}

// Finite-difference agreement for every op over random inputs and seeds.
TEST(GradCheck, EveryOpOverRandomSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    ParamStore store;
    store.add("a", random_tensor({3, 4}, rng));
    store.add("b", random_tensor({3, 4}, rng));
    store.add("w", random_tensor({4, 2}, rng));
    store.add("bias", random_tensor({2}, rng));
    const Tensor target = random_tensor({3, 2}, rng);
    Tensor weights({3, 2});
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (double& v : weights.storage()) v = u(rng);
    for (std::size_t c = 0; c < 2; ++c) weights.at(1, c) = 0.0;  // a fully masked row

    auto loss = [&](Tape& t) {
      Var a = t.parameter(store, "a");
      Var b = t.parameter(store, "b");
      Var w = t.parameter(store, "w");
      Var bias = t.parameter(store, "bias");
      Var h = add(mul(a, b), scale(sub(a, square(b)), 0.7));
      Var g = activate(h, Activation::gelu);
      Var r = activate(reshape(h, {4, 3}), Activation::tanh);
      Var cat = concat_cols({g, reshape(r, {3, 4})});
      Var wide = matmul(cat, reshape(concat_cols({w, w}), {8, 2}));
      Var lin = linear(g, w, bias);
      Var mse = weighted_mse(add(lin, wide), target, weights);
      return add(add(mse, mean(activate(a, Activation::relu))), scale(sum(r), 0.01));
    };
    const auto res = grad_check(store, loss, 1e-4);
    EXPECT_TRUE(res.passed) << "seed " << seed << " worst " << res.worst_parameter << "["
                            << res.worst_index << "] err " << res.max_relative_error;
  }
}

TEST(GradCheck, QuadraticScalar) {
  ParamStore store;
  store.add("x", Tensor::scalar(1.3));
  const auto res = grad_check(store, [&](Tape& t) {
    Var x = t.parameter(store, "x");
    return sum(add(scale(square(x), 2.0), x));
  }, 1e-7);
  EXPECT_LT(res.max_relative_error, 1e-7);
}

TEST(GradCheck, ThreeLayerGeluMlp) {
  std::mt19937_64 rng(5);
  ParamStore store;
  MlpSpec spec{"mlp", {4, 16, 16, 16, 2}, Activation::gelu, false};
  init_mlp(store, spec, rng);
  const Tensor x = random_tensor({6, 4}, rng);
  const auto res = grad_check(store, [&](Tape& t) {
    return mean(square(mlp_forward(t, store, spec, t.constant(x))));
  }, 1e-4);
  EXPECT_LT(res.max_relative_error, 1e-4);
}

TEST(Adam, ZeroGradientIsIdentity) {
  ParamStore store;
  store.add("p", Tensor::row({1.0, -2.0, 3.5}));
  store.set_grad("p", Tensor({1, 3}));
  const Tensor before = store.value("p");
  adam_step(store, 0.1);
  EXPECT_EQ(store.value("p"), before);
  EXPECT_EQ(store.step(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore store;
  store.add("p", Tensor::scalar(1.0));
  store.set_grad("p", Tensor::scalar(1.0));
  adam_step(store, 0.1);
  EXPECT_NEAR(store.value("p").item(), 0.9, 1e-6);
}

TEST(Adam, TwoStepsMatchScalarTrace) {
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParamStore store;
  store.add("p", Tensor::scalar(0.3));
  double p = 0.3, m = 0, v = 0;
  const double grads[2] = {0.7, -1.9};
  for (int t = 1; t <= 2; ++t) {
    store.set_grad("p", Tensor::scalar(grads[t - 1]));
    adam_step(store, lr, b1, b2, eps);
    m = b1 * m + (1 - b1) * grads[t - 1];
    v = b2 * v + (1 - b2) * grads[t - 1] * grads[t - 1];
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    p -= lr * mh / (std::sqrt(vh) + eps);
  }
  EXPECT_NEAR(store.value("p").item(), p, 1e-10);
}

TEST(Adam, MissingGradientsRejected) {
  ParamStore store;
  store.add("p", Tensor::scalar(1.0));
  EXPECT_THROW(adam_step(store, 0.1), UsageError);
  store.set_grad("p", Tensor::scalar(1.0));
  adam_step(store, 0.1);
  EXPECT_THROW(adam_step(store, 0.1), UsageError);
}

TEST(ClipGradNorm, ScalesToMaximum) {
  ParamStore store;
  store.add("a", Tensor::row({0, 0}));
  store.set_grad("a", Tensor::row({3.0, 4.0}));
  EXPECT_DOUBLE_EQ(clip_grad_norm(store, 1.0), 5.0);
  EXPECT_NEAR(store.grad("a")[0], 0.6, 1e-15);
  EXPECT_NEAR(store.grad("a")[1], 0.8, 1e-15);
}

TEST(Checkpoint, BitExactRoundTrip) {
  std::mt19937_64 rng(9);
  ParamStore store;
  init_mlp(store, MlpSpec{"enc", {5, 7, 3}}, rng);
  store.value("enc/b1")[2] = -0.0;
  store.value("enc/b1")[1] = 1e-310;
  std::stringstream ss;
  save_checkpoint(ss, store, R"({"k":2})");
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "PTPL");
  const Checkpoint cp = load_checkpoint(ss);
  EXPECT_EQ(cp.metadata, R"({"k":2})");
  EXPECT_EQ(cp.params.names(), store.names());
  for (const auto& n : store.names()) {
    const Tensor& a = store.value(n);
    const Tensor& b = cp.params.value(n);
    ASSERT_EQ(a.shape(), b.shape());
    EXPECT_EQ(std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)), 0) << n;
  }
  EXPECT_EQ(checkpoint_bytes(cp.params, cp.metadata), bytes);
}

TEST(Checkpoint, CorruptMagicRejected) {
  std::stringstream ss("XXXX\x01\x00\x00\x00");
  EXPECT_THROW(load_checkpoint(ss), IoError);
}

TEST(Checkpoint, TrainingStateRestoresMoments) {
  ParamStore store;
  store.add("p", Tensor::row({1.0, 2.0}));
  store.set_grad("p", Tensor::row({0.5, -0.5}));
  adam_step(store, 0.01);
  std::stringstream ss;
  save_training_state(ss, store);
  ParamStore back = load_training_state(ss);
  EXPECT_EQ(back.step(), 1u);
  EXPECT_EQ(back.value("p"), store.value("p"));
  EXPECT_EQ(back.first_moment("p"), store.first_moment("p"));
  EXPECT_EQ(back.second_moment("p"), store.second_moment("p"));
}

TEST(Kernels, BatchRowsAreIndependentOfBatchSize) {
  std::mt19937_64 rng(1);
  const std::size_t n = 37, p = 45;
  const Tensor x = random_tensor({13, n}, rng);
  const Tensor w = random_tensor({n, p}, rng);
  const Tensor b = random_tensor({p}, rng);
  Tensor full({13, p});
  kernels::matmul(x.ptr(), w.ptr(), full.ptr(), 13, n, p, b.ptr(), false);
  for (std::size_t r = 0; r < 13; ++r) {
    Tensor one({1, p});
    kernels::matmul(x.ptr() + r * n, w.ptr(), one.ptr(), 1, n, p, b.ptr(), false);
    EXPECT_EQ(std::memcmp(one.ptr(), full.ptr() + r * p, p * sizeof(double)), 0) << r;
  }
}
