#include <gtest/gtest.h>

#include "aggregation_oracle.hpp"
#include "corrfield/gradcheck.hpp"
#include "corrfield/scm.hpp"
#include "test_util.hpp"

namespace corrfield {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

std::vector<AxialParams> random_field_params(SplitMix64& rng, std::size_t count,
                                             std::size_t terms) {
  std::vector<AxialParams> out;
  for (std::size_t i = 0; i < count; ++i) {
    AxialParams p;
    for (auto* axis : {&p.hor, &p.ver}) {
      axis->a0 = rng.uniform(-1, 1);
      for (std::size_t n = 0; n < terms; ++n) {
        axis->amplitudes.push_back(rng.uniform(-1.5, 1.5));
        axis->phases.push_back(rng.uniform(-3, 3));
      }
    }
    out.push_back(p);
  }
  return out;
}

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

TEST(PredictParams, ZeroWeightsGiveZeroField) {
  auto w = ScmWeights<double>::zeros(3, 2);
  auto field = predict_params(Tensor::zeros(Shape{4, 4, 3}), w);
  for (double v : field.hor.values()) EXPECT_EQ(v, 0.0);
  for (double v : field.ver.values()) EXPECT_EQ(v, 0.0);
}

TEST(PredictParams, IdenticalNeighbourhoodsGiveIdenticalParams) {
  auto w = ScmWeights<double>::init(2, 3, SplitMix64(1));
  auto field = predict_params(Tensor::full(Shape{5, 5, 2}, 0.3), w);
  const auto a = field.at(1, 1);
  const auto b = field.at(3, 2);
  EXPECT_EQ(a.hor.packed(), b.hor.packed());
  EXPECT_EQ(a.ver.packed(), b.ver.packed());
}

TEST(PredictParams, UnpacksRawHeadChannels) {
  SplitMix64 rng(2);
  const std::size_t h = 3, w = 4, c = 2, terms = 2;
  auto weights = ScmWeights<double>::init(c, terms, SplitMix64(3));
  for (auto* b : {&*weights.pre_conv.bias, &*weights.hor_head.bias, &*weights.ver_head.bias})
    for (auto& v : b->mutable_values()) v = rng.uniform(-1, 1);
  auto x = random_tensor(Shape{h, w, c}, rng);
  auto field = predict_params(x, weights);

  // pre-conv by hand, then the two 1x1 heads.
  const auto& k = weights.pre_conv.kernel;
  std::vector<double> pre(h * w * c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (std::size_t co = 0; co < c; ++co) {
        double acc = (*weights.pre_conv.bias)[co];
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long iy = static_cast<long>(y) + dy, ix = static_cast<long>(xx) + dx;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
            for (std::size_t ci = 0; ci < c; ++ci)
              acc += x[(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c + ci] *
                     k[((static_cast<std::size_t>(dy + 1) * 3 + static_cast<std::size_t>(dx + 1)) * c + ci) * c + co];
          }
        pre[(y * w + xx) * c + co] = acc;
      }
  const std::size_t packed = 2 * terms + 1;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx) {
      const auto got = field.at(y, xx);
      std::vector<double> raw_h(packed), raw_v(packed);
      for (std::size_t o = 0; o < packed; ++o) {
        raw_h[o] = (*weights.hor_head.bias)[o];
        raw_v[o] = (*weights.ver_head.bias)[o];
        for (std::size_t ci = 0; ci < c; ++ci) {
          raw_h[o] += pre[(y * w + xx) * c + ci] * weights.hor_head.kernel[ci * packed + o];
          raw_v[o] += pre[(y * w + xx) * c + ci] * weights.ver_head.kernel[ci * packed + o];
        }
      }
      EXPECT_NEAR(got.hor.a0, raw_h[0], 1e-12);
      EXPECT_NEAR(got.ver.a0, raw_v[0], 1e-12);
      for (std::size_t n = 0; n < terms; ++n) {
        EXPECT_NEAR(got.hor.amplitudes[n], raw_h[1 + n], 1e-12);
        EXPECT_NEAR(got.hor.phases[n], raw_h[1 + terms + n], 1e-12);
        EXPECT_NEAR(got.ver.amplitudes[n], raw_v[1 + n], 1e-12);
        EXPECT_NEAR(got.ver.phases[n], raw_v[1 + terms + n], 1e-12);
      }
    }
}

TEST(PredictParams, ChannelMismatchRejected) {
  auto w = ScmWeights<double>::zeros(3, 1);
  EXPECT_THROW(predict_params(Tensor::zeros(Shape{2, 2, 4}), w), ShapeError);
}

// --- aggregate_global -------------------------------------------------------

TEST(AggregateGlobal, ConstantCorrelationGivesMean) {
  SplitMix64 rng(4);
  const std::size_t h = 3, w = 4, c = 2;
  auto x = random_tensor(Shape{h, w, c}, rng);
  std::vector<AxialParams> params(h * w, {CorrParams1D::constant(0.7, 2), CorrParams1D::constant(-1.2, 2)});
  auto out = aggregate_global(x, CorrParamField<double>::from_params(h, w, params));
  for (std::size_t k = 0; k < c; ++k) {
    double m = 0;
    for (std::size_t u = 0; u < h * w; ++u) m += x[u * c + k];
    m /= static_cast<double>(h * w);
    for (std::size_t u = 0; u < h * w; ++u) EXPECT_NEAR(out[u * c + k], m, 1e-12);
  }
}

TEST(AggregateGlobal, SingletonIsIdentity) {
  Tensor x(Shape{1, 1, 3}, {0.5, -1, 2});
  SplitMix64 rng(5);
  auto field = CorrParamField<double>::from_params(1, 1, random_field_params(rng, 1, 2));
  EXPECT_LT(max_abs_diff(aggregate_global(x, field).values(), x.values()), 1e-15);
}

TEST(AggregateGlobal, MatchesDoubleLoop) {
  SplitMix64 rng(6);
  const std::size_t h = 3, w = 3, c = 2;
  auto x = random_tensor(Shape{h, w, c}, rng);
  auto params = random_field_params(rng, h * w, 3);
  auto out = aggregate_global(x, CorrParamField<double>::from_params(h, w, params));
  EXPECT_LT(max_abs_diff(out.values(), testing::global_oracle(to_vec(x), params, h, w, c)), 1e-9);
}

// --- aggregate_axial --------------------------------------------------------

TEST(AggregateAxial, SingletonDoubles) {
  Tensor x(Shape{1, 1, 2}, {0.25, -3});
  SplitMix64 rng(7);
  auto field = CorrParamField<double>::from_params(1, 1, random_field_params(rng, 1, 1));
  auto out = aggregate_axial(x, field);
  EXPECT_DOUBLE_EQ(out[0], 0.5);
  EXPECT_DOUBLE_EQ(out[1], -6);
}

TEST(AggregateAxial, ConstantCorrelationGivesRowPlusColumnMean) {
  SplitMix64 rng(8);
  const std::size_t h = 4, w = 5, c = 3;
  auto x = random_tensor(Shape{h, w, c}, rng);
  std::vector<AxialParams> params(h * w, {CorrParams1D::constant(2.0, 1), CorrParams1D::constant(0.1, 1)});
  auto out = aggregate_axial(x, CorrParamField<double>::from_params(h, w, params));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (std::size_t k = 0; k < c; ++k) {
        double row = 0, col = 0;
        for (std::size_t v = 0; v < w; ++v) row += x[(y * w + v) * c + k];
        for (std::size_t v = 0; v < h; ++v) col += x[(v * w + xx) * c + k];
        EXPECT_NEAR(out[(y * w + xx) * c + k], row / w + col / h, 1e-12);
      }
}

TEST(AggregateAxial, MatchesBruteForceLoops) {
  SplitMix64 rng(9);
  const std::size_t h = 4, w = 5, c = 3;
  auto x = random_tensor(Shape{h, w, c}, rng);
  auto params = random_field_params(rng, h * w, 3);
  auto out = aggregate_axial(x, CorrParamField<double>::from_params(h, w, params));
  EXPECT_LT(max_abs_diff(out.values(), testing::axial_oracle(to_vec(x), params, h, w, c)), 1e-9);
}

TEST(Aggregate, FieldSizeMismatchRejected) {
  SplitMix64 rng(10);
  auto field = CorrParamField<double>::from_params(2, 2, random_field_params(rng, 4, 1));
  EXPECT_THROW(aggregate_axial(Tensor::zeros(Shape{3, 2, 1}), field), ShapeError);
  EXPECT_THROW(aggregate_global(Tensor::zeros(Shape{2, 3, 1}), field), ShapeError);
}

// Each softmax term is a convex combination of the features it reads.
TEST(AggregateAxial, TermsAreConvexCombinations) {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const auto w = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const std::size_t c = 2;
    auto x = random_tensor(Shape{h, w, c}, rng, -5, 5);
    auto params = random_field_params(rng, h * w, 2);
    // Row term alone: vertical functions made constant so the column term is
    // the exact column mean, which is subtracted.
    auto row_only = params;
    for (auto& p : row_only) p.ver = CorrParams1D::constant(0.0, 2);
    auto out = aggregate_axial(x, CorrParamField<double>::from_params(h, w, row_only));
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (std::size_t k = 0; k < c; ++k) {
          double col = 0, lo = 1e300, hi = -1e300;
          for (std::size_t v = 0; v < h; ++v) col += x[(v * w + xx) * c + k];
          for (std::size_t v = 0; v < w; ++v) {
            lo = std::min(lo, x[(y * w + v) * c + k]);
            hi = std::max(hi, x[(y * w + v) * c + k]);
          }
          const double row_term = out[(y * w + xx) * c + k] - col / static_cast<double>(h);
          EXPECT_GE(row_term, lo - 1e-12);
          EXPECT_LE(row_term, hi + 1e-12);
        }
    auto global = aggregate_global(x, CorrParamField<double>::from_params(h, w, params));
    for (std::size_t k = 0; k < c; ++k) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t u = 0; u < h * w; ++u) {
        lo = std::min(lo, x[u * c + k]);
        hi = std::max(hi, x[u * c + k]);
      }
      for (std::size_t u = 0; u < h * w; ++u) {
        EXPECT_GE(global[u * c + k], lo - 1e-12);
        EXPECT_LE(global[u * c + k], hi + 1e-12);
      }
    }
  }
}

// On a one-pixel-wide map with horizontal functions fixed to 1, global
// aggregation equals the axial column term, i.e. axial minus the singleton
// row self-term. The transposed case holds on one-pixel-high maps.
TEST(Aggregate, GlobalReducesToAxialOnDegenerateMaps) {
  SplitMix64 rng(12);
  {
    const std::size_t h = 6, w = 1, c = 3;
    auto x = random_tensor(Shape{h, w, c}, rng);
    auto params = random_field_params(rng, h * w, 2);
    for (auto& p : params) p.hor = CorrParams1D::constant(1.0, 2);
    auto field = CorrParamField<double>::from_params(h, w, params);
    auto g = aggregate_global(x, field);
    auto a = sub(aggregate_axial(x, field), x);
    EXPECT_LT(max_abs_diff(g.values(), a.values()), 1e-12);
  }
  {
    const std::size_t h = 1, w = 7, c = 2;
    auto x = random_tensor(Shape{h, w, c}, rng);
    auto params = random_field_params(rng, h * w, 2);
    for (auto& p : params) p.ver = CorrParams1D::constant(1.0, 2);
    auto field = CorrParamField<double>::from_params(h, w, params);
    auto g = aggregate_global(x, field);
    auto a = sub(aggregate_axial(x, field), x);
    EXPECT_LT(max_abs_diff(g.values(), a.values()), 1e-12);
  }
}

// Axial work grows as HW(H+W)C, global as (HW)^2 C.
TEST(Aggregate, OperationCountScaling) {
  SplitMix64 rng(13);
  auto count = [&](std::size_t side, AggregationMode mode) {
    const std::size_t c = 4;
    auto x = random_tensor(Shape{side, side, c}, rng);
    auto field = CorrParamField<double>::from_params(side, side,
                                                     random_field_params(rng, side * side, 2));
    stats::multiply_adds() = 0;
    aggregate(x, field, mode);
    return static_cast<double>(stats::multiply_adds());
  };
  const double axial_ratio = count(16, AggregationMode::axial) / count(8, AggregationMode::axial);
  const double global_ratio = count(16, AggregationMode::global) / count(8, AggregationMode::global);
  EXPECT_NEAR(axial_ratio / 8.0, 1.0, 0.2);
  EXPECT_NEAR(global_ratio / 16.0, 1.0, 0.2);
}

// --- scm_forward ------------------------------------------------------------

TEST(ScmForward, ZeroFeaturesStayZero) {
  auto w = ScmWeights<double>::zeros(3, 2);
  for (auto mode : {AggregationMode::axial, AggregationMode::global}) {
    auto out = scm_forward(Tensor::zeros(Shape{4, 3, 3}), w, mode);
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(ScmForward, ShapeContract) {
  SplitMix64 rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    Shape shape{static_cast<std::size_t>(rng.uniform_int(1, 7)),
                static_cast<std::size_t>(rng.uniform_int(1, 7)),
                static_cast<std::size_t>(rng.uniform_int(1, 4))};
    auto w = ScmWeights<double>::init(shape[2], 2, rng.fork(static_cast<std::uint64_t>(trial)));
    auto x = random_tensor(shape, rng);
    EXPECT_EQ(scm_forward(x, w).shape(), shape);
    EXPECT_EQ(scm_forward(x, w, AggregationMode::global).shape(), shape);
  }
}

TEST(ScmForward, GradientWrtWeights) {
  SplitMix64 rng(15);
  const std::size_t c = 3;
  auto w = ScmWeights<double>::init(c, 2, SplitMix64(16));
  for (auto* b : {&*w.pre_conv.bias, &*w.hor_head.bias, &*w.ver_head.bias})
    for (auto& v : b->mutable_values()) v = rng.uniform(-0.5, 0.5);
  auto x = random_tensor(Shape{4, 3, c}, rng);
  auto probe = random_tensor(Shape{4, 3, c}, rng);
  std::vector<Tensor> params{w.pre_conv.kernel, *w.pre_conv.bias, w.hor_head.kernel,
                             *w.hor_head.bias, w.ver_head.kernel, *w.ver_head.bias};
  for (auto mode : {AggregationMode::axial, AggregationMode::global}) {
    auto f = [&] { return sum(mul(scm_forward(x, w, mode), probe)); };
    EXPECT_LT(check_gradients<double>(f, params, 1e-4).max_relative_error, 1e-4)
        << to_string(mode);
  }
  std::function<Tensor(const Tensor&)> wrt_input = [&](const Tensor& in) {
    return sum(mul(scm_forward(in, w), probe));
  };
  EXPECT_LT(check_gradients(wrt_input, x, 1e-4), 1e-4);
}

// Permuting channels of the input and consistently of every kernel permutes
// the output channels the same way.
TEST(ScmForward, ChannelPermutationEquivariance) {
  SplitMix64 rng(17);
  const std::size_t c = 4;
  auto w = ScmWeights<double>::init(c, 2, SplitMix64(18));
  for (auto& v : w.pre_conv.bias->mutable_values()) v = rng.uniform(-0.5, 0.5);
  auto x = random_tensor(Shape{3, 5, c}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};

  ScmWeights<double> wp = w;
  wp.pre_conv.kernel = gather(gather(w.pre_conv.kernel, 2, perm), 3, perm).detach();
  wp.pre_conv.bias = gather(*w.pre_conv.bias, 0, perm).detach();
  wp.hor_head.kernel = gather(w.hor_head.kernel, 2, perm).detach();
  wp.ver_head.kernel = gather(w.ver_head.kernel, 2, perm).detach();
  auto xp = gather(x, 2, perm);
  for (auto mode : {AggregationMode::axial, AggregationMode::global}) {
    auto expected = gather(scm_forward(x, w, mode), 2, perm);
    auto got = scm_forward(xp, wp, mode);
    EXPECT_LT(max_abs_diff(got.values(), expected.values()), 1e-12);
  }
}

}  // namespace
}  // namespace corrfield
