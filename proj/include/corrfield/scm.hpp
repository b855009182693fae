#pragma once

// Semantic correlation module.
//
// A 3x3 convolution followed by two 1x1 heads predicts per-location axial
// correlation parameters. Features are then re-aggregated with softmax
// weights over the predicted correlations, either over all locations
// (global) or along each location's row and column (axial), and the result
// is added back to the input.

#include <string>

#include "corrfield/corrfn.hpp"
#include "corrfield/nn.hpp"
#include "corrfield/ops.hpp"

namespace corrfield {

enum class AggregationMode { global, axial };

inline std::string to_string(AggregationMode mode) {
  return mode == AggregationMode::global ? "global" : "axial";
}

inline AggregationMode parse_aggregation_mode(const std::string& s) {
  if (s == "global") return AggregationMode::global;
  if (s == "axial") return AggregationMode::axial;
  throw UsageError("aggregation mode must be 'global' or 'axial', got '" + s + "'");
}

// Shared by the semantic and instance modules: a 3x3 pre-convolution and
// two 1x1 heads emitting 2N+1 channels each.
template <std::floating_point T>
struct CorrParamHead {
  Conv2dWeights<T> pre_conv;
  Conv2dWeights<T> hor_head;
  Conv2dWeights<T> ver_head;

  static CorrParamHead init(std::size_t channels, std::size_t terms, SplitMix64 rng) {
    return {Conv2dWeights<T>::uniform(3, channels, channels, rng.fork(1)),
            Conv2dWeights<T>::uniform(1, channels, 2 * terms + 1, rng.fork(2)),
            Conv2dWeights<T>::uniform(1, channels, 2 * terms + 1, rng.fork(3))};
  }

  static CorrParamHead zeros(std::size_t channels, std::size_t terms) {
    return {Conv2dWeights<T>::zeros(3, channels, channels),
            Conv2dWeights<T>::zeros(1, channels, 2 * terms + 1),
            Conv2dWeights<T>::zeros(1, channels, 2 * terms + 1)};
  }

  std::size_t terms() const { return (hor_head.out_channels() - 1) / 2; }

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& fn) {
    pre_conv.visit(prefix + ".pre_conv", fn);
    hor_head.visit(prefix + ".hor_head", fn);
    ver_head.visit(prefix + ".ver_head", fn);
  }

  // Channel layout of each head output is [a0, A_1..A_N, psi_1..psi_N].
  CorrParamField<T> predict(const BasicTensor<T>& features) const {
    if (features.rank() != 3 || features.dim(2) != pre_conv.in_channels()) {
      throw ShapeError("correlation head expects H x W x " +
                       std::to_string(pre_conv.in_channels()) + " features, got " +
                       to_string(features.shape()));
    }
    if (hor_head.out_channels() != ver_head.out_channels() ||
        hor_head.out_channels() % 2 == 0) {
      throw ShapeError("correlation heads must both emit 2N+1 channels");
    }
    auto shared = pre_conv(features);
    return CorrParamField<T>(hor_head(shared), ver_head(shared));
  }
};

template <std::floating_point T>
using ScmWeights = CorrParamHead<T>;

template <std::floating_point T>
CorrParamField<T> predict_params(const BasicTensor<T>& features, const ScmWeights<T>& w) {
  return w.predict(features);
}

namespace detail {

template <std::floating_point T>
void check_field_matches(const BasicTensor<T>& features, const CorrParamField<T>& field) {
  if (features.rank() != 3 || features.dim(0) != field.height() ||
      features.dim(1) != field.width()) {
    throw ShapeError("features " + to_string(features.shape()) +
                     " do not match correlation field " + to_string(field.hor.shape()));
  }
}

}  // namespace detail

// f_u = sum_v softmax_v(cor2d(u, v)) f_v over all H*W locations v.
template <std::floating_point T>
BasicTensor<T> aggregate_global(const BasicTensor<T>& features,
                                const CorrParamField<T>& field) {
  detail::check_field_matches(features, field);
  const std::size_t h = features.dim(0), w = features.dim(1), c = features.dim(2);
  const std::size_t hw = h * w;
  auto hor = axial_correlations(field.hor, integer_coords(w), w);  // H x W x W
  auto ver = axial_correlations(field.ver, integer_coords(h), h);  // H x W x H
  // cor2d[u][vy][vx] = ver[u][vy] * hor[u][vx]
  auto cor = mul(reshape(ver, Shape{hw, h, 1}), reshape(hor, Shape{hw, 1, w}));
  auto weights = softmax(reshape(cor, Shape{hw, hw}), 1);
  auto out = matmul(weights, reshape(features, Shape{hw, c}));
  return reshape(out, Shape{h, w, c});
}

// Row term: softmax over v_x of G(v_x; theta_hor(u)) weighting the features
// of u's row. Column term: softmax over v_y of G(v_y; theta_ver(u))
// weighting u's column. The two softmaxes normalize independently.
template <std::floating_point T>
BasicTensor<T> aggregate_axial(const BasicTensor<T>& features,
                               const CorrParamField<T>& field) {
  detail::check_field_matches(features, field);
  const std::size_t h = features.dim(0), w = features.dim(1);
  auto row_weights = softmax(axial_correlations(field.hor, integer_coords(w), w), 2);
  auto row_term = bmm(row_weights, features);  // per row y: [W x W] x [W x C]

  auto col_weights = softmax(axial_correlations(field.ver, integer_coords(h), h), 2);
  auto col_term = permute(bmm(permute(col_weights, {1, 0, 2}),  // x, y, v_y
                              permute(features, {1, 0, 2})),    // x, v_y, c
                          {1, 0, 2});
  return add(row_term, col_term);
}

template <std::floating_point T>
BasicTensor<T> aggregate(const BasicTensor<T>& features, const CorrParamField<T>& field,
                         AggregationMode mode) {
  return mode == AggregationMode::global ? aggregate_global(features, field)
                                         : aggregate_axial(features, field);
}

// features + aggregate(features, predicted field).
template <std::floating_point T>
BasicTensor<T> scm_forward(const BasicTensor<T>& features, const ScmWeights<T>& w,
                           AggregationMode mode = AggregationMode::axial) {
  return add(features, aggregate(features, predict_params(features, w), mode));
}

}  // namespace corrfield
