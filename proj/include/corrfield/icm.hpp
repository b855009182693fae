#pragma once

// Instance correlation module.
//
// Every location's correlations with S x S fixed reference points form an
// S^2-vector c_u. A 1x1 projection maps it to the feature width and it is
// added to linearly projected features: f_u' = W_f f_u + P c_u.

#include <string>
#include <vector>

#include "corrfield/corrfn.hpp"
#include "corrfield/nn.hpp"
#include "corrfield/scm.hpp"

namespace corrfield {

struct ReferencePoint {
  double x = 0.0;
  double y = 0.0;
};

// Cell centers of a uniform S x S partition of an H x W extent, row-major.
struct ReferenceGrid {
  std::size_t side = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<ReferencePoint> points;

  std::size_t size() const { return points.size(); }

  // Distinct coordinates along each axis; points[i * S + j] sits at
  // (xs[j], ys[i]).
  std::vector<double> xs() const {
    std::vector<double> out(side);
    for (std::size_t j = 0; j < side; ++j) out[j] = points[j].x;
    return out;
  }
  std::vector<double> ys() const {
    std::vector<double> out(side);
    for (std::size_t i = 0; i < side; ++i) out[i] = points[i * side].y;
    return out;
  }
};

inline ReferenceGrid make_reference_grid(std::size_t height, std::size_t width,
                                         std::size_t side) {
  if (side == 0) throw std::invalid_argument("reference grid side must be >= 1");
  if (height == 0 || width == 0) {
    throw std::invalid_argument("reference grid needs a non-empty map");
  }
  if (side > 2 * std::min(height, width)) {
    throw std::invalid_argument("reference grid side " + std::to_string(side) +
                                " too large for a " + std::to_string(height) + "x" +
                                std::to_string(width) + " map");
  }
  ReferenceGrid grid{side, height, width, {}};
  const double sx = static_cast<double>(width) / static_cast<double>(side);
  const double sy = static_cast<double>(height) / static_cast<double>(side);
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j)
      grid.points.push_back({(static_cast<double>(j) + 0.5) * sx,
                             (static_cast<double>(i) + 0.5) * sy});
  return grid;
}

// H x W x S^2 tensor; channel i*S+j is cor2d(u, points[i*S+j]).
template <std::floating_point T>
BasicTensor<T> reference_correlations(const CorrParamField<T>& field,
                                      const ReferenceGrid& refs) {
  if (refs.height != field.height() || refs.width != field.width()) {
    throw ShapeError("reference grid built for " + std::to_string(refs.height) + "x" +
                     std::to_string(refs.width) + " but field is " +
                     to_string(field.hor.shape()));
  }
  const std::size_t h = field.height(), w = field.width(), s = refs.side;
  auto hor = axial_correlations(field.hor, refs.xs(), w);  // H x W x S (by j)
  auto ver = axial_correlations(field.ver, refs.ys(), h);  // H x W x S (by i)
  auto prod = mul(reshape(ver, Shape{h, w, s, 1}), reshape(hor, Shape{h, w, 1, s}));
  return reshape(prod, Shape{h, w, s * s});
}

template <std::floating_point T>
struct IcmWeights {
  CorrParamHead<T> params;      // independent of the semantic module's head
  Conv2dWeights<T> feat_proj;   // 1x1, C -> C, no bias
  Conv2dWeights<T> corr_proj;   // 1x1, S^2 -> C, no bias

  static IcmWeights init(std::size_t channels, std::size_t terms, std::size_t side,
                         SplitMix64 rng) {
    return {CorrParamHead<T>::init(channels, terms, rng.fork(11)),
            Conv2dWeights<T>::uniform(1, channels, channels, rng.fork(12), false),
            Conv2dWeights<T>::uniform(1, side * side, channels, rng.fork(13), false)};
  }

  static IcmWeights zeros(std::size_t channels, std::size_t terms, std::size_t side) {
    return {CorrParamHead<T>::zeros(channels, terms),
            Conv2dWeights<T>::zeros(1, channels, channels, false),
            Conv2dWeights<T>::zeros(1, side * side, channels, false)};
  }

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& fn) {
    params.visit(prefix + ".params", fn);
    feat_proj.visit(prefix + ".feat_proj", fn);
    corr_proj.visit(prefix + ".corr_proj", fn);
  }
};

// W_f f_u + corr_proj(c_u) for precomputed correlations c.
template <std::floating_point T>
BasicTensor<T> icm_combine(const BasicTensor<T>& features, const BasicTensor<T>& correlations,
                           const IcmWeights<T>& w) {
  if (correlations.rank() != 3 || correlations.dim(2) != w.corr_proj.in_channels()) {
    throw ShapeError("reference correlations " + to_string(correlations.shape()) +
                     " do not match corr_proj input width " +
                     std::to_string(w.corr_proj.in_channels()));
  }
  return add(w.feat_proj(features), w.corr_proj(correlations));
}

template <std::floating_point T>
BasicTensor<T> icm_forward(const BasicTensor<T>& features, const IcmWeights<T>& w,
                           const ReferenceGrid& refs) {
  if (refs.size() != w.corr_proj.in_channels()) {
    throw ShapeError("reference grid has " + std::to_string(refs.size()) +
                     " points but corr_proj expects " +
                     std::to_string(w.corr_proj.in_channels()));
  }
  auto field = w.params.predict(features);
  return icm_combine(features, reference_correlations(field, refs), w);
}

}  // namespace corrfield
