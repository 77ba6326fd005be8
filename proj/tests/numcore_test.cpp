#include <cmath>
#include <filesystem>
#include <numbers>

#include <gtest/gtest.h>

#include "beamllm/checkpoint.hpp"
#include "beamllm/error.hpp"
#include "beamllm/gradcheck.hpp"
#include "beamllm/optim.hpp"
#include "beamllm/random.hpp"
#include "beamllm/tape.hpp"

using namespace beamllm;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

constexpr double kOpTol = 1e-6;

}  // namespace

TEST(Matmul, IdentityAndDot) {
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, m), m);
  const Tensor r = matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(r.item(), 11.0);
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTranspose) {
  Rng rng(3);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 2}, rng);
  Tape tape;
  Var va = tape.leaf(a);
  Var vb = tape.constant(b);
  tape.backward(sum(matmul(va, vb)));
  const Tensor expected = matmul(Tensor({3, 2}, 1.0), transpose(b));
  const Tensor got = tape.grad(va);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);

  auto r = check_input_gradients({a, b}, [](Tape&, std::span<const Var> in) { return matmul(in[0], in[1]); });
  EXPECT_LE(r.max_rel_error, kOpTol);
}

TEST(Softmax, Examples) {
  const Tensor u = softmax(Tensor::vector({0, 0, 0}), 0);
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const Tensor big = softmax(Tensor::vector({1000, 1000}), 0);
  EXPECT_DOUBLE_EQ(big[0], 0.5);
  EXPECT_DOUBLE_EQ(big[1], 0.5);
  const Tensor logs = softmax(Tensor::vector({std::log(1.0), std::log(2.0), std::log(3.0)}), 0);
  EXPECT_NEAR(logs[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(logs[1], 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(logs[2], 3.0 / 6.0, 1e-15);
}

TEST(Softmax, RowsSumToOneOnRandomInputs) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({3, 5, 4}, rng, -100.0, 100.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const Tensor y = softmax(x, axis);
      const Shape& s = x.shape();
      const std::size_t inner = axis == 2 ? 1 : (axis == 1 ? s[2] : s[1] * s[2]);
      const std::size_t outer = x.size() / (s[axis] * inner);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          double total = 0.0;
          for (std::size_t j = 0; j < s[axis]; ++j) total += y[o * s[axis] * inner + j * inner + i];
          EXPECT_NEAR(total, 1.0, 1e-9);
        }
      }
    }
  }
}

TEST(Softmax, InvalidAxis) { EXPECT_THROW(softmax(Tensor({2, 2}), 2), Error); }

TEST(LayerNorm, Examples) {
  const Tensor one = Tensor::vector({1, 1});
  const Tensor zero = Tensor::vector({0, 0});
  const Tensor c = layer_norm(Tensor::vector({4, 4}), one, zero, 1e-5);
  EXPECT_DOUBLE_EQ(c[0], 0.0);
  EXPECT_DOUBLE_EQ(c[1], 0.0);
  const Tensor r = layer_norm(Tensor::vector({1, 3}), one, zero, 1e-14);
  EXPECT_NEAR(r[0], -1.0, 1e-12);
  EXPECT_NEAR(r[1], 1.0, 1e-12);
  const Tensor b = layer_norm(Tensor::vector({1, 3}), zero, Tensor::vector({0.25, -2}), 1e-5);
  EXPECT_DOUBLE_EQ(b[0], 0.25);
  EXPECT_DOUBLE_EQ(b[1], -2.0);
}

TEST(Activations, Examples) {
  const Tensor r = relu(Tensor::vector({-1, 0, 2}));
  EXPECT_EQ(r, Tensor::vector({0, 0, 2}));
  EXPECT_DOUBLE_EQ(gelu(0.0), 0.0);
  // 0.5 * 3 * (1 + tanh(sqrt(2/pi) * (3 + 0.044715 * 27)))
  EXPECT_NEAR(gelu(3.0), 2.99636, 1e-5);
  EXPECT_NEAR(gelu(-3.0), -3.0 + gelu(3.0), 1e-12);
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(Tensor({32}, 0.7), 5), std::log(32.0), 1e-12);
  EXPECT_NEAR(std::log(32.0), 3.4657, 1e-4);
  EXPECT_NEAR(cross_entropy(Tensor::vector({1, 0}), 0), std::log(1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(cross_entropy(Tensor::vector({1, 0}), 0), 0.3133, 1e-4);
  EXPECT_NEAR(cross_entropy(Tensor::vector({800, 0, 0}), 0), 0.0, 1e-300);
  try {
    cross_entropy(Tensor::vector({1, 2}), 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::index);
  }
}

TEST(CrossEntropy, NonNegativeAndZeroOnlyAtCertainty) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor z = random_tensor({8}, rng, -20, 20);
    EXPECT_GT(cross_entropy(z, rng.index(8)), 0.0);
  }
}

TEST(Backward, SquareAtThree) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0));
  tape.backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(tape.grad(x).item(), 6.0);
}

TEST(Backward, NonScalarIsContractError) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1, 2}));
  try {
    tape.backward(scale(x, 2.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
}

TEST(Backward, FrozenParameterNeverReceivesGrad) {
  ParameterSet params;
  Parameter& w = params.add("w", Tensor::vector({1, 2}), true);
  Parameter& frozen = params.add("frozen", Tensor::vector({3, 4}), false);
  Tape tape;
  tape.backward(sum(mul(tape.param(w), tape.param(frozen))));
  EXPECT_TRUE(w.has_grad);
  EXPECT_FALSE(frozen.has_grad);
  EXPECT_EQ(w.grad, Tensor::vector({3, 4}));
}

TEST(Backward, NonFiniteRejected) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1e300}));
  EXPECT_THROW(mul(x, x), Error);
}

// Finite-difference agreement for every recorded operator.
class OperatorGradient : public ::testing::Test {
 protected:
  Rng rng{2024};
  void expect_ok(std::vector<Tensor> inputs, const std::function<Var(Tape&, std::span<const Var>)>& op) {
    const auto r = check_input_gradients(std::move(inputs), op);
    EXPECT_LE(r.max_rel_error, kOpTol) << "worst " << r.worst;
    EXPECT_GT(r.n_checked, 0u);
  }
};

TEST_F(OperatorGradient, Elementwise) {
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({3, 4}, rng);
  expect_ok({a, b}, [](Tape&, std::span<const Var> in) { return add(in[0], in[1]); });
  expect_ok({a, b}, [](Tape&, std::span<const Var> in) { return sub(in[0], in[1]); });
  expect_ok({a, b}, [](Tape&, std::span<const Var> in) { return mul(in[0], in[1]); });
  expect_ok({a}, [](Tape&, std::span<const Var> in) { return scale(in[0], -2.5); });
  expect_ok({a}, [](Tape&, std::span<const Var> in) { return gelu(in[0]); });
  expect_ok({a}, [](Tape&, std::span<const Var> in) { return tanh(in[0]); });
  expect_ok({a}, [](Tape&, std::span<const Var> in) { return sigmoid(in[0]); });
  // keep relu inputs away from the kink
  Tensor r = a;
  for (auto& v : r.data()) v += v >= 0 ? 0.1 : -0.1;
  expect_ok({r}, [](Tape&, std::span<const Var> in) { return relu(in[0]); });
}

TEST_F(OperatorGradient, Structural) {
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({2, 4}, rng);
  const Tensor c = random_tensor({3, 2}, rng);
  expect_ok({a}, [](Tape&, std::span<const Var> in) { return transpose(in[0]); });
  expect_ok({a, random_tensor({4}, rng)}, [](Tape&, std::span<const Var> in) { return add_row(in[0], in[1]); });
  expect_ok({a, random_tensor({4, 5}, rng), random_tensor({5}, rng)},
            [](Tape&, std::span<const Var> in) { return linear(in[0], in[1], in[2]); });
  expect_ok({a}, [](Tape&, std::span<const Var> in) { return reshape(in[0], {2, 6}); });
  expect_ok({a, b}, [](Tape&, std::span<const Var> in) { return concat_rows(in); });
  expect_ok({a, c}, [](Tape&, std::span<const Var> in) { return concat_cols(in); });
  expect_ok({a}, [](Tape&, std::span<const Var> in) { return slice_rows(in[0], 1, 2); });
  expect_ok({a}, [](Tape&, std::span<const Var> in) { return slice_cols(in[0], 1, 2); });
  expect_ok({random_tensor({6, 5}, rng)}, [](Tape&, std::span<const Var> in) { return block_transpose(in[0], 3); });
  expect_ok({a}, [](Tape&, std::span<const Var> in) { return sum(in[0]); });
}

TEST_F(OperatorGradient, Normalization) {
  const Tensor x = random_tensor({2, 3, 4}, rng, -3, 3);
  expect_ok({x}, [](Tape&, std::span<const Var> in) { return softmax(in[0], 0); });
  expect_ok({x}, [](Tape&, std::span<const Var> in) { return softmax(in[0], 1); });
  expect_ok({x}, [](Tape&, std::span<const Var> in) { return softmax(in[0], 2); });
  expect_ok({random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
            [](Tape&, std::span<const Var> in) { return layer_norm(in[0], in[1], in[2], 1e-5); });
  const std::vector<std::size_t> targets{2, 0, 4};
  expect_ok({random_tensor({3, 5}, rng, -4, 4)},
            [&](Tape&, std::span<const Var> in) { return cross_entropy(in[0], targets); });
}

TEST_F(OperatorGradient, Attention) {
  expect_ok({random_tensor({5, 8}, rng), random_tensor({7, 8}, rng), random_tensor({7, 6}, rng)},
            [](Tape&, std::span<const Var> in) { return multi_head_attention(in[0], in[1], in[2], 2); });

  const Tensor ctx_k1 = random_tensor({3, 8}, rng);
  const Tensor ctx_v1 = random_tensor({3, 8}, rng);
  const Tensor ctx_k2 = random_tensor({2, 8}, rng);
  const Tensor ctx_v2 = random_tensor({2, 8}, rng);
  expect_ok({random_tensor({6, 24}, rng)}, [&](Tape&, std::span<const Var> in) {
    std::vector<AttentionContext> ctx(2);
    ctx[0] = {{&ctx_k1}, {&ctx_v1}};
    ctx[1] = {{&ctx_k1, &ctx_k2}, {&ctx_v1, &ctx_v2}};
    return causal_self_attention(in[0], 2, 3, std::move(ctx));
  });
  expect_ok({random_tensor({4, 12}, rng)},
            [](Tape&, std::span<const Var> in) { return causal_self_attention(in[0], 1, 4, {}); });
}

TEST(Attention, CausalRowsIgnoreLaterRows) {
  Rng rng(9);
  Tensor x = random_tensor({4, 12}, rng);
  Tape t1(false);
  const Tensor before = causal_self_attention(t1.constant(x), 2, 4, {}).value();
  for (std::size_t c = 0; c < 12; ++c) x(3, c) += 1.0;
  Tape t2(false);
  const Tensor after = causal_self_attention(t2.constant(x), 2, 4, {}).value();
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(before(r, c), after(r, c));
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterSet params;
  Parameter& p = params.add("p", Tensor::vector({0.5, -1.0, 2.0}), true);
  p.accumulate_grad(Tensor::vector({1, 1, 1}));
  Adam adam({.lr = 0.01});
  adam.step(params);
  EXPECT_NEAR(p.value[0], 0.5 - 0.01, 1e-9);
  EXPECT_NEAR(p.value[1], -1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p.value[2], 2.0 - 0.01, 1e-9);
  EXPECT_FALSE(p.has_grad);
  EXPECT_EQ(adam.step_count(), 1u);
}

TEST(Adam, ZeroGradientLeavesValues) {
  ParameterSet params;
  Parameter& p = params.add("p", Tensor::vector({0.5, -1.0}), true);
  p.accumulate_grad(Tensor::vector({0, 0}));
  Adam adam;
  adam.step(params);
  EXPECT_EQ(p.value, Tensor::vector({0.5, -1.0}));
}

TEST(Adam, DescendsConvexQuadratic) {
  ParameterSet params;
  Parameter& x = params.add("x", Tensor::scalar(1.0), true);
  Adam adam({.lr = 0.1});
  double prev = 1.0;
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    Var v = tape.param(x);
    tape.backward(sum(mul(v, v)));
    adam.step(params);
    const double loss = x.value.item() * x.value.item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
}

TEST(Adam, FrozenBitIdenticalAndMissingGradRejected) {
  ParameterSet params;
  Parameter& w = params.add("w", Tensor::vector({1.0, 2.0}), true);
  Parameter& f = params.add("f", Tensor::vector({0.123456789, -7.5}), false);
  const Tensor frozen_before = f.value;
  Adam adam;
  for (int i = 0; i < 25; ++i) {
    Tape tape;
    tape.backward(sum(mul(tape.param(w), tape.param(f))));
    adam.step(params, 4.0);
  }
  EXPECT_EQ(f.value, frozen_before);
  try {
    adam.step(params);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
}

TEST(LrSchedule, ClosedForm) {
  const LrSchedule s;
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.01);
  EXPECT_NEAR(lr_at(s, 1), 0.009, 1e-15);
  EXPECT_NEAR(lr_at(s, 4), 0.009, 1e-15);
  EXPECT_NEAR(lr_at(s, 41), 0.01 * std::pow(0.9, 8), 1e-15);
  EXPECT_NEAR(lr_at(s, 200), 0.004304672100000001, 1e-15);
  for (int e = 1; e < 250; ++e) EXPECT_LE(lr_at(s, e), lr_at(s, e - 1));
  EXPECT_THROW(lr_at(s, -1), Error);
  LrSchedule bad;
  bad.milestones = {5, 5};
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Checkpoint, RoundTripAndValidation) {
  ParameterSet a;
  Rng rng(1);
  a.add("layer.w", random_tensor({3, 2}, rng), true);
  a.add("layer.frozen", random_tensor({4}, rng), false);
  const nlohmann::json meta = {{"kind", "test"}, {"n", 3}};
  const std::string bytes = encode_checkpoint(a, meta);
  ASSERT_EQ(bytes.rfind("BRCKPT1\n", 0), 0u);

  const Checkpoint ck = decode_checkpoint(bytes);
  EXPECT_EQ(ck.meta, meta);
  ASSERT_EQ(ck.entries.size(), 2u);
  EXPECT_EQ(ck.entries[1].offset, 48u);
  EXPECT_FALSE(ck.entries[1].trainable);

  ParameterSet b;
  b.add("layer.w", Tensor({3, 2}), true);
  b.add("layer.frozen", Tensor({4}), false);
  load_parameters(ck, b);
  EXPECT_EQ(b.get("layer.w").value, a.get("layer.w").value);
  EXPECT_EQ(b.get("layer.frozen").value, a.get("layer.frozen").value);

  ParameterSet wrong;
  wrong.add("layer.w", Tensor({2, 3}), true);
  wrong.add("layer.frozen", Tensor({4}), false);
  EXPECT_THROW(load_parameters(ck, wrong), Error);
  EXPECT_THROW(decode_checkpoint("BRCKPT0\n{}\n"), Error);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), Error);
}
