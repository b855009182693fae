#include <gtest/gtest.h>

#include "corrfield/gradcheck.hpp"
#include "corrfield/icm.hpp"
#include "test_util.hpp"

namespace corrfield {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

CorrParams1D random_axis(SplitMix64& rng, std::size_t terms) {
  CorrParams1D p{rng.uniform(-1, 1), {}, {}};
  for (std::size_t n = 0; n < terms; ++n) {
    p.amplitudes.push_back(rng.uniform(-1.5, 1.5));
    p.phases.push_back(rng.uniform(-3, 3));
  }
  return p;
}

TEST(ReferenceGrid, SinglePointAtCenter) {
  const auto g = make_reference_grid(16, 16, 1);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g.points[0].x, 8.0);
  EXPECT_EQ(g.points[0].y, 8.0);
}

TEST(ReferenceGrid, FullScaleSideSixteen) {
  const auto g = make_reference_grid(16, 16, 16);
  ASSERT_EQ(g.size(), 256u);
  for (const auto& p : g.points) {
    EXPECT_EQ(p.x - std::floor(p.x), 0.5);
    EXPECT_EQ(p.y - std::floor(p.y), 0.5);
  }
}

TEST(ReferenceGrid, UniformPartition) {
  const auto g = make_reference_grid(4, 4, 2);
  ASSERT_EQ(g.size(), 4u);
  const std::vector<std::pair<double, double>> expected{{1, 1}, {3, 1}, {1, 3}, {3, 3}};
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(g.points[k].x, expected[k].first);
    EXPECT_EQ(g.points[k].y, expected[k].second);
  }
}

TEST(ReferenceGrid, InvalidSidesRejected) {
  EXPECT_THROW(make_reference_grid(8, 8, 0), std::invalid_argument);
  EXPECT_THROW(make_reference_grid(2, 8, 5), std::invalid_argument);
  EXPECT_NO_THROW(make_reference_grid(2, 2, 4));
}

TEST(ReferenceGrid, PointsInsideBounds) {
  for (std::size_t s = 1; s <= 10; ++s) {
    const auto g = make_reference_grid(5, 7, s);
    for (const auto& p : g.points) {
      EXPECT_GT(p.x, 0.0);
      EXPECT_LT(p.x, 7.0);
      EXPECT_GT(p.y, 0.0);
      EXPECT_LT(p.y, 5.0);
    }
  }
}

TEST(ReferenceCorrelations, ConstantOnes) {
  std::vector<AxialParams> params(3 * 4, {CorrParams1D::constant(1.0, 2), CorrParams1D::constant(1.0, 2)});
  auto c = reference_correlations(CorrParamField<double>::from_params(3, 4, params),
                                  make_reference_grid(3, 4, 3));
  EXPECT_EQ(c.shape(), (Shape{3, 4, 9}));
  for (double v : c.values()) EXPECT_EQ(v, 1.0);
}

TEST(ReferenceCorrelations, IdenticalParamsGiveIdenticalVectors) {
  SplitMix64 rng(1);
  const AxialParams shared{random_axis(rng, 2), random_axis(rng, 2)};
  std::vector<AxialParams> params;
  for (int i = 0; i < 9; ++i) params.push_back({random_axis(rng, 2), random_axis(rng, 2)});
  params[1] = shared;
  params[7] = shared;
  auto c = reference_correlations(CorrParamField<double>::from_params(3, 3, params),
                                  make_reference_grid(3, 3, 2));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(c[1 * 4 + k], c[7 * 4 + k]);
}

TEST(ReferenceCorrelations, MatchesPointwiseEvaluation) {
  SplitMix64 rng(2);
  std::vector<AxialParams> params;
  for (int i = 0; i < 4; ++i) params.push_back({random_axis(rng, 3), random_axis(rng, 3)});
  const auto refs = make_reference_grid(2, 2, 2);
  auto c = reference_correlations(CorrParamField<double>::from_params(2, 2, params), refs);
  for (std::size_t u = 0; u < 4; ++u)
    for (std::size_t k = 0; k < 4; ++k)
      EXPECT_NEAR(c[u * 4 + k], eval_corr_2d(params[u], refs.points[k].x, refs.points[k].y, 2, 2),
                  1e-12);
}

TEST(ReferenceCorrelations, GridSizeMismatchRejected) {
  std::vector<AxialParams> params(4, {CorrParams1D::constant(1.0), CorrParams1D::constant(1.0)});
  EXPECT_THROW(reference_correlations(CorrParamField<double>::from_params(2, 2, params),
                                      make_reference_grid(3, 2, 2)),
               ShapeError);
}

// Hand-built parameters whose horizontal phases differ yield distinct
// correlation vectors.
TEST(ReferenceCorrelations, DifferentPhasesAreDistinguishable) {
  const std::size_t h = 4, w = 4;
  std::vector<AxialParams> params;
  for (std::size_t u = 0; u < h * w; ++u) {
    const double phase = 0.37 * static_cast<double>(u);
    params.push_back({CorrParams1D{0.0, {1.0}, {phase}}, CorrParams1D::constant(1.0, 1)});
  }
  auto c = reference_correlations(CorrParamField<double>::from_params(h, w, params),
                                  make_reference_grid(h, w, 2));
  for (std::size_t a = 0; a < h * w; ++a)
    for (std::size_t b = a + 1; b < h * w; ++b) {
      double dist = 0;
      for (std::size_t k = 0; k < 4; ++k) dist += std::pow(c[a * 4 + k] - c[b * 4 + k], 2);
      EXPECT_GT(dist, 0.0) << a << " vs " << b;
    }
}

// --- icm_forward ------------------------------------------------------------

TEST(IcmForward, ZeroCorrProjectionLeavesFeatureProjection) {
  SplitMix64 rng(3);
  const std::size_t c = 3;
  auto w = IcmWeights<double>::init(c, 2, 2, SplitMix64(4));
  w.corr_proj = Conv2dWeights<double>::zeros(1, 4, c, false);
  auto x = random_tensor(Shape{4, 4, c}, rng);
  auto out = icm_forward(x, w, make_reference_grid(4, 4, 2));
  EXPECT_LT(max_abs_diff(out.values(), w.feat_proj(x).values()), 1e-15);
}

TEST(IcmForward, IsolatedPositionalTerm) {
  SplitMix64 rng(5);
  const std::size_t c = 4, side = 2;
  auto w = IcmWeights<double>::init(c, 2, side, SplitMix64(6));
  w.feat_proj = Conv2dWeights<double>::zeros(1, c, c, false);
  std::vector<double> eye(c * c, 0.0);
  for (std::size_t i = 0; i < c; ++i) eye[i * c + i] = 1.0;
  w.corr_proj.kernel = Tensor(Shape{1, 1, c, c}, eye, true);
  auto x = random_tensor(Shape{3, 5, c}, rng);
  const auto refs = make_reference_grid(3, 5, side);
  auto out = icm_forward(x, w, refs);
  auto raw = reference_correlations(w.params.predict(x), refs);
  EXPECT_LT(max_abs_diff(out.values(), raw.values()), 1e-15);
}

TEST(IcmForward, LinearInCorrelations) {
  SplitMix64 rng(7);
  const std::size_t c = 3;
  auto w = IcmWeights<double>::init(c, 2, 3, SplitMix64(8));
  auto x = random_tensor(Shape{4, 4, c}, rng);
  auto corr = random_tensor(Shape{4, 4, 9}, rng, -3, 3);
  auto base = w.feat_proj(x);
  auto once = sub(icm_combine(x, corr, w), base);
  auto twice = sub(icm_combine(x, scale(corr, 2.0), w), base);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(twice[i], 2.0 * once[i], 1e-12);
}

TEST(IcmForward, Deterministic) {
  SplitMix64 rng(9);
  auto w = IcmWeights<double>::init(4, 3, 2, SplitMix64(10));
  auto x = random_tensor(Shape{6, 6, 4}, rng);
  const auto refs = make_reference_grid(6, 6, 2);
  auto a = icm_forward(x, w, refs);
  auto b = icm_forward(x, w, refs);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(IcmForward, OutputChannelsIndependentOfSide) {
  SplitMix64 rng(11);
  const std::size_t c = 5;
  auto x = random_tensor(Shape{6, 6, c}, rng);
  for (std::size_t side : {1u, 2u, 3u, 6u}) {
    auto w = IcmWeights<double>::init(c, 2, side, SplitMix64(side));
    EXPECT_EQ(icm_forward(x, w, make_reference_grid(6, 6, side)).shape(), (Shape{6, 6, c}));
  }
}

TEST(IcmForward, GridWeightMismatchRejected) {
  auto w = IcmWeights<double>::init(2, 1, 2, SplitMix64(12));
  EXPECT_THROW(icm_forward(Tensor::zeros(Shape{4, 4, 2}), w, make_reference_grid(4, 4, 3)),
               ShapeError);
}

TEST(IcmForward, GradientWrtAllWeights) {
  SplitMix64 rng(13);
  const std::size_t c = 3, side = 2;
  auto w = IcmWeights<double>::init(c, 2, side, SplitMix64(14));
  for (auto* b : {&*w.params.pre_conv.bias, &*w.params.hor_head.bias, &*w.params.ver_head.bias})
    for (auto& v : b->mutable_values()) v = rng.uniform(-0.5, 0.5);
  auto x = random_tensor(Shape{4, 4, c}, rng);
  auto probe = random_tensor(Shape{4, 4, c}, rng);
  const auto refs = make_reference_grid(4, 4, side);
  ParameterList<double> named = collect_parameters<double>(w);
  std::vector<Tensor> params;
  for (auto& [name, t] : named) params.push_back(t);
  EXPECT_EQ(params.size(), 8u);
  auto f = [&] { return sum(mul(icm_forward(x, w, refs), probe)); };
  EXPECT_LT(check_gradients<double>(f, params, 1e-4).max_relative_error, 1e-4);
}

}  // namespace
}  // namespace corrfield
