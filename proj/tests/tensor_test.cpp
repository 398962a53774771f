#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "tssl/ops.hpp"

namespace tssl {
namespace {

using testing::grad_check;
using testing::random_tensor;
using testing::weighted_sum;
using T64 = Tensor<double>;

TEST(Matmul, IdentityAndHandProduct) {
  auto eye = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  auto c = matmul(eye, b);
  EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{1, 2, 3, 4}));
  auto r = matmul(Tensor<float>::from({1, 2}, {1, 2}), Tensor<float>::from({2, 1}, {3, 4}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_FLOAT_EQ(r.item(), 11.0f);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3] and [2,3]"), std::string::npos);
  }
}

TEST(Matmul, FiniteDifferences) {
  Rng rng(11);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto r = grad_check([&] { return weighted_sum(matmul(a, b), 1); }, {a, b});
  EXPECT_LT(r.max_rel_error, 1e-7);
  EXPECT_EQ(r.checked, 32u);
}

TEST(Softmax, SymmetryAndStability) {
  auto s = softmax(Tensor<double>::from({3}, {0, 0, 0}));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto big = softmax(Tensor<double>::from({3}, {1000, 0, 0}));
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  EXPECT_NEAR(big[1], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(big[2]));
}

TEST(Softmax, RowsSumToOneOnRandomInputs) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = Tensor<float>::from({4, 7}, [&] {
      std::vector<float> v(28);
      for (auto& e : v) e = static_cast<float>(rng.uniform(-50, 50));
      return v;
    }());
    auto s = softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double acc = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        const float p = s[r * 7 + c];
        EXPECT_GE(p, 0.0f);
        EXPECT_LE(p, 1.0f);
        acc += p;
      }
      EXPECT_NEAR(acc, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, FiniteDifferencesAnyAxis) {
  Rng rng(5);
  auto x = random_tensor({2, 3, 4}, rng, 2.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto r = grad_check([&] { return weighted_sum(softmax(x, axis), 7 + axis); }, {x});
    EXPECT_LT(r.max_rel_error, 1e-7) << "axis " << axis;
  }
}

TEST(Gelu, ZeroAtOrigin) {
  EXPECT_EQ(gelu(Tensor<double>::scalar(0.0)).item(), 0.0);
  // Reference value of the tanh form at x=1.
  EXPECT_NEAR(gelu(Tensor<double>::scalar(1.0)).item(), 0.8411919906, 1e-9);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  auto x = Tensor<double>::full({2, 5}, 3.25);
  auto y = layer_norm(x, Tensor<double>::full({5}, 1.0), Tensor<double>::zeros({5}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor<double>::zeros({2, 3, 2}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareAtThree) {
  auto x = Tensor<double>::scalar(3.0, true);
  backward(mul(x, x));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, AccumulatesAcrossUsesAndCalls) {
  auto x = Tensor<double>::scalar(2.0, true);
  backward(add(mul(x, x), x));  // 2x + 1
  EXPECT_EQ(x.grad()[0], 5.0);
  backward(scale(x, 3.0));
  EXPECT_EQ(x.grad()[0], 8.0);
}

TEST(Backward, RejectsNonScalarAndRepeatedSweep) {
  auto x = Tensor<double>::zeros({3}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
  auto loss = sum(scale(x, 2.0));
  backward(loss);
  EXPECT_THROW(backward(loss), ContractError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Tensor<double>::scalar(1.0, true);
  NoGradGuard g;
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

// Each operator against central finite differences, 10 seeds, f64.
class OperatorGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OperatorGradients, AllOperatorsMatchFiniteDifferences) {
  const std::uint64_t seed = GetParam();
  Rng rng(seed);
  const double tol = 1e-6;
  auto check = [&](const char* name, const std::function<T64()>& f, std::vector<T64> leaves) {
    auto r = grad_check(f, leaves);
    EXPECT_LT(r.max_rel_error, tol) << name << " seed " << seed;
  };
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto bias = random_tensor({5}, rng);
  auto x3 = random_tensor({2, 3, 4}, rng);
  auto gain = random_tensor({4}, rng);
  auto lnb = random_tensor({4}, rng);
  auto pos = random_tensor({3, 4}, rng, 2.0);
  auto table = random_tensor({6, 4}, rng);

  check("matmul", [&] { return weighted_sum(matmul(a, w), seed); }, {a, w});
  check("linear", [&] { return weighted_sum(linear(x3, w, bias), seed); }, {x3, w, bias});
  check("add", [&] { return weighted_sum(add(a, b), seed); }, {a, b});
  check("sub", [&] { return weighted_sum(sub(a, b), seed); }, {a, b});
  check("mul", [&] { return weighted_sum(mul(a, b), seed); }, {a, b});
  check("scale", [&] { return weighted_sum(scale(a, -1.7), seed); }, {a});
  check("add_trailing", [&] { return weighted_sum(add_trailing(x3, gain), seed); }, {x3, gain});
  check("add_trailing2", [&] { return weighted_sum(add_trailing(x3, a), seed); }, {x3, a});
  check("gelu", [&] { return weighted_sum(gelu(scale(a, 3.0)), seed); }, {a});
  check("exp", [&] { return weighted_sum(exp(a), seed); }, {a});
  check("log", [&] { return weighted_sum(log(exp(a)), seed); }, {a});
  check("sigmoid", [&] { return weighted_sum(sigmoid(scale(a, 4.0)), seed); }, {a});
  check("logaddexp", [&] { return weighted_sum(logaddexp(a, b), seed); }, {a, b});
  check("sum", [&] { return scale(sum(a), 0.3); }, {a});
  check("mean", [&] { return mean(mul(a, a)); }, {a});
  check("mean_axis", [&] { return weighted_sum(mean_axis(x3, 1), seed); }, {x3});
  check("reshape", [&] { return weighted_sum(reshape(x3, {6, 4}), seed); }, {x3});
  check("concat", [&] { return weighted_sum(concat<double>({a, b}, 1), seed); }, {a, b});
  check("slice", [&] { return weighted_sum(slice(x3, 2, 1, 3), seed); }, {x3});
  check("transpose", [&] { return weighted_sum(transpose(x3), seed); }, {x3});
  check("repeat_leading", [&] { return weighted_sum(repeat_leading(a, 3), seed); }, {a});
  check("embedding_lookup", [&] { return weighted_sum(embedding_lookup(table, {0, 2, 2, 5}), seed); }, {table});
  check("index_select", [&] { return weighted_sum(index_select(x3, {1, 0, 1}), seed); }, {x3});
  check("gather_elements", [&] { return weighted_sum(gather_elements(a, {0, 2, 2}, {3, 1, 1}), seed); }, {a});
  check("softmax", [&] { return weighted_sum(softmax(scale(a, 2.0)), seed); }, {a});
  check("layer_norm", [&] { return weighted_sum(layer_norm(x3, gain, lnb), seed); }, {x3, gain, lnb});
  check("l2_normalize", [&] { return weighted_sum(l2_normalize(a), seed); }, {a});
  std::vector<unsigned char> mask{1, 0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 1};
  check("masked_logsumexp", [&] { return weighted_sum(masked_logsumexp(scale(a, 3.0), mask), seed); }, {a});
  auto q = random_tensor({6, 4}, rng), k = random_tensor({6, 4}, rng), v = random_tensor({6, 4}, rng);
  check("attention", [&] { return weighted_sum(attention(q, k, v, 3, 2), seed); }, {q, k, v});
  check("bce_with_logits", [&] { return bce_with_logits(scale(a, 3.0), std::vector<double>{1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 0}); }, {a});
  check("cross_entropy", [&] { return cross_entropy(scale(a, 2.0), {0, 3, 2}); }, {a});
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, OperatorGradients, ::testing::Range<std::uint64_t>(1, 11));

TEST(Determinism, F32ForwardBitIdentical) {
  auto run = [] {
    Rng rng(42);
    std::vector<float> av(64 * 48), bv(48 * 32);
    for (auto& v : av) v = static_cast<float>(rng.normal());
    for (auto& v : bv) v = static_cast<float>(rng.normal());
    auto a = Tensor<float>::from({64, 48}, av);
    auto b = Tensor<float>::from({48, 32}, bv);
    auto y = softmax(gelu(matmul(a, b)));
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Shapes, ErrorsOnMismatch) {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({3, 2});
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(add_trailing(a, Tensor<float>::zeros({2})), DimensionError);
  EXPECT_THROW(concat<float>({a, b}, 0), DimensionError);
  EXPECT_THROW(slice(a, 1, 2, 2), DimensionError);
  EXPECT_THROW(cross_entropy(a, {0, 5}), ContractError);
}

}  // namespace
}  // namespace tssl
