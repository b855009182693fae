#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "corrfield/checkpoint.hpp"
#include "corrfield/gradcheck.hpp"
#include "corrfield/nn.hpp"
#include "corrfield/ops.hpp"
#include "test_util.hpp"

namespace corrfield {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

TEST(Elementwise, AddVectors) {
  Tensor a(Shape{2}, {1, 2});
  Tensor b(Shape{2}, {3, 4});
  auto c = elementwise(ElementwiseOp::add, a, b);
  EXPECT_EQ(c.shape(), Shape{2});
  EXPECT_EQ(c[0], 4);
  EXPECT_EQ(c[1], 6);
}

TEST(Elementwise, SinOfZeros) {
  auto z = Tensor::zeros(Shape{3, 2});
  auto s = elementwise(ElementwiseOp::sin, z);
  for (double v : s.values()) EXPECT_EQ(v, 0.0);
}

TEST(Elementwise, SquareGradient) {
  auto x = Tensor::scalar(3.0, true);
  auto y = mul(x, x);
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Elementwise, ScaleKind) {
  Tensor a(Shape{2}, {1.5, -2});
  auto s = elementwise(ElementwiseOp::scale, a, Tensor::scalar(2.0));
  EXPECT_EQ(s[0], 3.0);
  EXPECT_EQ(s[1], -4.0);
}

TEST(Elementwise, TrailingBroadcast) {
  Tensor a(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b(Shape{3}, {10, 20, 30}, true);
  auto c = add(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_EQ(c[4], 25);
  sum(c).backward();
  for (double g : b.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Elementwise, ShapeMismatchReportsBothShapes) {
  Tensor a = Tensor::zeros(Shape{2, 3});
  Tensor b = Tensor::zeros(Shape{4});
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
}

TEST(Elementwise, MissingOperandRejected) {
  EXPECT_THROW(elementwise(ElementwiseOp::mul, Tensor::zeros(Shape{2})), ShapeError);
}

TEST(TensorInvariants, ValueCountMatchesShape) {
  EXPECT_THROW(Tensor(Shape{2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::zeros(Shape{0, 2}), ShapeError);
}

// --- conv2d ---------------------------------------------------------------

Tensor brute_conv(const Tensor& in, const Tensor& k, std::size_t stride) {
  const auto h = static_cast<long>(in.dim(0)), w = static_cast<long>(in.dim(1));
  const auto cin = in.dim(2), ks = k.dim(0), cout = k.dim(3);
  const long pad = static_cast<long>(ks / 2);
  const long oh = (h + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  const long ow = (w + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  std::vector<double> out(static_cast<std::size_t>(oh * ow) * cout, 0.0);
  for (long y = 0; y < oh; ++y)
    for (long x = 0; x < ow; ++x)
      for (std::size_t co = 0; co < cout; ++co) {
        double acc = 0;
        for (std::size_t ky = 0; ky < ks; ++ky)
          for (std::size_t kx = 0; kx < ks; ++kx) {
            const long iy = y * static_cast<long>(stride) + static_cast<long>(ky) - pad;
            const long ix = x * static_cast<long>(stride) + static_cast<long>(kx) - pad;
            if (iy < 0 || ix < 0 || iy >= h || ix >= w) continue;
            for (std::size_t ci = 0; ci < cin; ++ci)
              acc += in[(static_cast<std::size_t>(iy * w + ix)) * cin + ci] *
                     k[((ky * ks + kx) * cin + ci) * cout + co];
          }
        out[static_cast<std::size_t>(y * ow + x) * cout + co] = acc;
      }
  return Tensor(Shape{static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), cout}, out);
}

TEST(Conv2d, IdentityOneByOne) {
  SplitMix64 rng(1);
  auto x = random_tensor(Shape{4, 5, 3}, rng);
  std::vector<double> eye(9, 0.0);
  for (int i = 0; i < 3; ++i) eye[static_cast<std::size_t>(i * 3 + i)] = 1.0;
  auto y = conv2d(x, Tensor(Shape{1, 1, 3, 3}, eye));
  EXPECT_EQ(max_abs_diff(y.values(), x.values()), 0.0);
}

TEST(Conv2d, ZeroKernel) {
  SplitMix64 rng(2);
  auto x = random_tensor(Shape{4, 4, 2}, rng);
  auto y = conv2d(x, Tensor::zeros(Shape{3, 3, 2, 5}));
  EXPECT_EQ(y.shape(), (Shape{4, 4, 5}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesSlidingWindowLoop) {
  SplitMix64 rng(3);
  auto x = random_tensor(Shape{4, 4, 2}, rng);
  auto k = random_tensor(Shape{3, 3, 2, 3}, rng);
  auto y = conv2d(x, k);
  EXPECT_LT(max_abs_diff(y.values(), brute_conv(x, k, 1).values()), 1e-12);
  auto y2 = conv2d(x, k, std::optional<Tensor>{}, 2);
  EXPECT_EQ(y2.shape(), (Shape{2, 2, 3}));
  EXPECT_LT(max_abs_diff(y2.values(), brute_conv(x, k, 2).values()), 1e-12);
}

TEST(Conv2d, ChannelMismatchRejected) {
  EXPECT_THROW(conv2d(Tensor::zeros(Shape{4, 4, 2}), Tensor::zeros(Shape{3, 3, 3, 1})),
               ShapeError);
}

// --- softmax --------------------------------------------------------------

TEST(Softmax, UniformInput) {
  auto p = softmax(Tensor::full(Shape{5}, 0.7), 0);
  for (double v : p.values()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Softmax, LargeGapSaturates) {
  auto p = softmax(Tensor(Shape{2}, {0.0, 800.0}), 0);
  EXPECT_NEAR(p[0], 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(p[1], 1.0);
}

TEST(Softmax, MatchesDirectFormula) {
  SplitMix64 rng(5);
  auto x = random_tensor(Shape{5}, rng, -3, 3);
  auto p = softmax(x, 0);
  double z = 0;
  for (double v : x.values()) z += std::exp(v);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(p[i], std::exp(x[i]) / z, 1e-12);
}

TEST(Softmax, SumsToOneAlongAnyAxis) {
  SplitMix64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape{static_cast<std::size_t>(rng.uniform_int(1, 6)),
                static_cast<std::size_t>(rng.uniform_int(1, 6)),
                static_cast<std::size_t>(rng.uniform_int(1, 4))};
    auto x = random_tensor(shape, rng, -50, 50);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto p = softmax(x, axis);
      auto s = sum(p, axis);
      for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-12);
      for (double v : p.values()) EXPECT_GE(v, 0.0);
    }
  }
}

// --- backward -------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  SplitMix64 rng(7);
  auto x = random_tensor(Shape{3, 4}, rng, -1, 1, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SinGivesCos) {
  SplitMix64 rng(8);
  auto x = random_tensor(Shape{6}, rng, -3, 3, true);
  sum(sin(x)).backward();
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], std::cos(x[i]));
}

TEST(Backward, NonScalarRejected) {
  auto x = Tensor::zeros(Shape{2}, true);
  EXPECT_THROW(scale(x, 2.0).backward(), ShapeError);
}

TEST(Backward, RepeatedCallRejected) {
  auto x = Tensor::scalar(1.0, true);
  auto y = mul(x, x);
  y.backward();
  EXPECT_THROW(y.backward(), std::logic_error);
}

TEST(Backward, EveryReachableLeafGetsGrad) {
  auto a = Tensor::scalar(1.0, true);
  auto b = Tensor::scalar(2.0, true);
  auto unused_path = scale(b, 0.0);
  auto loss = add(mul(a, a), unused_path);
  loss.backward();
  EXPECT_TRUE(a.has_grad());
  ASSERT_TRUE(b.has_grad());
  EXPECT_EQ(b.grad()[0], 0.0);
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
  SplitMix64 rng(9);
  auto x = random_tensor(Shape{3, 3, 2}, rng, -1, 1);
  auto k = random_tensor(Shape{3, 3, 2, 2}, rng);
  std::function<Tensor(const Tensor&)> f = [&](const Tensor& in) {
    auto y = relu(conv2d(sin(in), k));
    return sum(mul(softmax(y, 2), exp(scale(y, 0.3))));
  };
  EXPECT_LT(check_gradients(f, x, 1e-4), 1e-4);
}

// --- check_gradients --------------------------------------------------------

TEST(GradCheck, SumOfSquares) {
  SplitMix64 rng(10);
  std::function<Tensor(const Tensor&)> f = [](const Tensor& x) { return sum(mul(x, x)); };
  EXPECT_LT(check_gradients(f, random_tensor(Shape{4, 3}, rng), 1e-4), 1e-8);
}

TEST(GradCheck, ConstantProgramIsExactlyZero) {
  std::function<Tensor(const Tensor&)> f = [](const Tensor&) { return Tensor::scalar(4.0); };
  EXPECT_EQ(check_gradients(f, Tensor::zeros(Shape{3}), 1e-4), 0.0);
}

TEST(GradCheck, NonFiniteReportsCoordinate) {
  Tensor x(Shape{3}, {1.0, 0.0, 2.0});
  std::function<Tensor(const Tensor&)> f = [](const Tensor& v) {
    return sum(log(mul(v, v)));
  };
  try {
    check_gradients(f, x, 1e-4);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
  // finite at the base point, but the backward step crosses into log(<0)
  std::function<Tensor(const Tensor&)> g = [](const Tensor& v) { return sum(log(v)); };
  Tensor y(Shape{3}, {1.0, 5e-5, 2.0});
  try {
    check_gradients(g, y, 1e-4);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
  }
}

TEST(GradCheck, RejectsNonPositiveStep) {
  std::function<Tensor(const Tensor&)> f = [](const Tensor& x) { return sum(x); };
  EXPECT_THROW(check_gradients(f, Tensor::zeros(Shape{1}), 0.0), std::invalid_argument);
}

// Every registered op against central differences on random shapes up to
// 6 x 6 x 4.
TEST(GradCheck, EveryOpOnRandomShapes) {
  SplitMix64 rng(11);
  using Program = std::function<Tensor(const Tensor&)>;
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t h = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const std::size_t w = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const std::size_t c = static_cast<std::size_t>(rng.uniform_int(1, 4));
    const Shape shape{h, w, c};
    auto x = random_tensor(shape, rng, -1.5, 1.5);
    auto other = random_tensor(shape, rng, 0.5, 1.5);
    auto row = random_tensor(Shape{c}, rng);
    auto weight = random_tensor(shape, rng);  // breaks symmetry of plain sums
    auto k3 = random_tensor(Shape{3, 3, c, 2}, rng);
    auto k1 = random_tensor(Shape{1, 1, c, 3}, rng);
    auto bias = random_tensor(Shape{2}, rng);
    auto mat = random_tensor(Shape{c, 3}, rng);
    auto wsum = [&](const Tensor& y) { return sum(mul(y, weight)); };
    std::vector<std::pair<const char*, Program>> programs = {
        {"add", [&](const Tensor& v) { return wsum(add(v, row)); }},
        {"sub", [&](const Tensor& v) { return wsum(sub(row, v)); }},
        {"mul", [&](const Tensor& v) { return wsum(mul(v, v)); }},
        {"div", [&](const Tensor& v) { return wsum(div(v, other)); }},
        {"sin", [&](const Tensor& v) { return wsum(sin(v)); }},
        {"cos", [&](const Tensor& v) { return wsum(cos(v)); }},
        {"exp", [&](const Tensor& v) { return wsum(exp(v)); }},
        {"log", [&](const Tensor& v) { return wsum(log(add(mul(v, v), other))); }},
        {"relu", [&](const Tensor& v) { return wsum(mul(relu(v), v)); }},
        {"sigmoid", [&](const Tensor& v) { return wsum(sigmoid(v)); }},
        {"log_sigmoid", [&](const Tensor& v) { return wsum(log_sigmoid(scale(v, 4.0))); }},
        {"scale", [&](const Tensor& v) { return wsum(scale(v, -2.5)); }},
        {"mean", [&](const Tensor& v) { return mean(mul(v, v)); }},
        {"sum_axis", [&](const Tensor& v) { return sum(mul(sum(v, 1), sum(v, 1))); }},
        {"reshape", [&](const Tensor& v) { return wsum(reshape(mul(reshape(v, {h * w * c}), reshape(v, {h * w * c})), shape)); }},
        {"permute", [&](const Tensor& v) { return sum(mul(permute(v, {2, 0, 1}), permute(weight, {2, 0, 1}))); }},
        {"slice", [&](const Tensor& v) { return sum(mul(slice(v, 1, 0, w), slice(weight, 1, 0, w))); }},
        {"gather", [&](const Tensor& v) { return sum(sin(gather(v, 0, {h - 1, 0, h - 1}))); }},
        {"concat", [&](const Tensor& v) { return sum(sin(concat<double>({v, scale(v, 2.0)}, 2))); }},
        {"conv3", [&](const Tensor& v) { return sum(sin(conv2d(v, k3, bias))); }},
        {"conv3s2", [&](const Tensor& v) { return sum(sin(conv2d(v, k3, bias, 2))); }},
        {"conv1", [&](const Tensor& v) { return sum(sin(conv2d(v, k1))); }},
        {"avg_pool", [&](const Tensor& v) { return sum(sin(avg_pool2d(v, 1))); }},
        {"softmax", [&](const Tensor& v) { return wsum(softmax(v, 1)); }},
        {"log_softmax", [&](const Tensor& v) { return wsum(log_softmax(v, 2)); }},
        {"matmul", [&](const Tensor& v) { return sum(sin(matmul(reshape(v, {h * w, c}), mat))); }},
        {"bmm", [&](const Tensor& v) { return sum(sin(bmm(v, permute(v, {0, 2, 1})))); }},
    };
    for (const auto& [name, f] : programs) {
      EXPECT_LT(check_gradients(f, x, 1e-4), 1e-4) << name << " on " << to_string(shape);
    }
  }
}

TEST(GradCheck, KernelAndBiasGradients) {
  SplitMix64 rng(12);
  auto x = random_tensor(Shape{5, 4, 3}, rng);
  auto k = random_tensor(Shape{3, 3, 3, 2}, rng);
  auto b = random_tensor(Shape{2}, rng);
  auto pooled = [&] { return sum(sin(avg_pool2d(conv2d(x, k, b, 1), 1))); };
  auto report = check_gradients<double>(pooled, {k, b}, 1e-4);
  EXPECT_LT(report.max_relative_error, 1e-4);
  EXPECT_EQ(report.coordinates, k.size() + b.size());
}

TEST(Determinism, ForwardIsBitIdentical) {
  auto run = [] {
    SplitMix64 rng(13);
    auto x = random_tensor(Shape{6, 6, 4}, rng);
    auto k = random_tensor(Shape{3, 3, 4, 4}, rng);
    return softmax(conv2d(x, k), 2);
  };
  auto a = run();
  auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

// --- optimizer ------------------------------------------------------------

TEST(Sgd, MomentumAndWeightDecayUpdate) {
  auto w = Tensor(Shape{1}, {1.0}, true);
  Sgd<double> opt({{"w", w}}, SgdOptions{0.1, 0.9, 1e-4});
  sum(scale(w, 2.0)).backward();
  opt.step();
  // v = 2 + 1e-4; w = 1 - 0.1 v
  EXPECT_DOUBLE_EQ(w[0], 1.0 - 0.1 * (2.0 + 1e-4));
  opt.zero_grad();
  sum(scale(w, 2.0)).backward();
  const double w1 = 1.0 - 0.1 * (2.0 + 1e-4);
  const double v2 = 0.9 * (2.0 + 1e-4) + 2.0 + 1e-4 * w1;
  opt.step();
  EXPECT_DOUBLE_EQ(w[0], w1 - 0.1 * v2);
}

TEST(Init, UniformWithinFanInBound) {
  auto conv = Conv2dWeights<double>::uniform(3, 4, 5, SplitMix64(1));
  const double bound = 1.0 / std::sqrt(36.0);
  for (double v : conv.kernel.values()) EXPECT_LE(std::abs(v), bound);
  auto again = Conv2dWeights<double>::uniform(3, 4, 5, SplitMix64(1));
  EXPECT_EQ(max_abs_diff(conv.kernel.values(), again.kernel.values()), 0.0);
}

// --- checkpoint -----------------------------------------------------------

TEST(Checkpoint, HeaderLayout) {
  const std::string bytes = checkpoint::encode({{"ab", Shape{2}, {1.0, -2.0}}});
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 4 + 2 + 4 + 8 + 16);
  EXPECT_EQ(bytes.substr(0, 4), "CFLD");
  EXPECT_EQ(bytes[4], 1);                       // version, little-endian
  EXPECT_EQ(bytes[8], 1);                       // one array
  EXPECT_EQ(bytes[12], 2);                      // name length
  EXPECT_EQ(bytes.substr(16, 2), "ab");
  EXPECT_EQ(bytes[18], 1);                      // rank
  EXPECT_EQ(bytes[22], 2);                      // extent u64
  EXPECT_EQ(static_cast<unsigned char>(bytes[37]), 0x3F);  // 1.0 high byte
}

TEST(Checkpoint, RoundTripPreservesBits) {
  SplitMix64 rng(14);
  std::vector<NamedArray> arrays;
  for (int i = 0; i < 4; ++i) {
    Shape shape{static_cast<std::size_t>(rng.uniform_int(1, 4)),
                static_cast<std::size_t>(rng.uniform_int(1, 4))};
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(-1e3, 1e3);
    arrays.push_back({"layer" + std::to_string(i) + ".kernel", shape, v});
  }
  arrays.push_back({"meta/scalar", Shape{}, {0.1}});
  const auto back = checkpoint::decode(checkpoint::encode(arrays));
  ASSERT_EQ(back.size(), arrays.size());
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    EXPECT_EQ(back[i].name, arrays[i].name);
    EXPECT_EQ(back[i].shape, arrays[i].shape);
    EXPECT_EQ(back[i].values, arrays[i].values);
  }
}

TEST(Checkpoint, CorruptInputRejectedWithOffset) {
  std::string bytes = checkpoint::encode({{"x", Shape{3}, {1, 2, 3}}});
  EXPECT_THROW(checkpoint::decode("CFLX" + bytes.substr(4)), DataError);
  try {
    checkpoint::decode(bytes.substr(0, bytes.size() - 3));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
}

}  // namespace
}  // namespace corrfield
