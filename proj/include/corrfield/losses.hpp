#pragma once

// Training targets and the three loss terms:
//   L = L_mask + L_cate + lambda * L_sem
// with dice loss on positive cells' masks, sigmoid focal loss on the
// category grid and soft-target cross-entropy on the semantic logits.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "corrfield/model.hpp"
#include "corrfield/ops.hpp"
#include "corrfield/synth.hpp"

namespace corrfield {

struct FocalOptions {
  double alpha = 0.25;
  double gamma = 2.0;
};

namespace loss_detail {

// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace loss_detail

// Sum over elements of the binary focal loss, divided by `normalizer`.
// targets are 0/1 with the same element count as logits.
template <std::floating_point T>
BasicTensor<T> focal_loss(const BasicTensor<T>& logits, const std::vector<double>& targets,
                          double normalizer, FocalOptions opt = {}) {
  if (targets.size() != logits.size()) {
    throw ShapeError("focal_loss: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.size()) + " logits");
  }
  if (!(normalizer > 0.0)) throw std::invalid_argument("focal_loss normalizer must be > 0");
  const auto x = logits.values();
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = static_cast<double>(x[i]);
    const double p = 1.0 / (1.0 + std::exp(-xi));
    if (targets[i] > 0.5) {
      // log p = -softplus(-x)
      total += opt.alpha * std::pow(1.0 - p, opt.gamma) * loss_detail::softplus(-xi);
    } else {
      total += (1.0 - opt.alpha) * std::pow(p, opt.gamma) * loss_detail::softplus(xi);
    }
  }
  return BasicTensor<T>::make_result(
      Shape{}, {static_cast<T>(total / normalizer)}, {logits.node()},
      [targets, opt, normalizer](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        const double g = static_cast<double>(self.grad[0]) / normalizer;
        for (std::size_t i = 0; i < in.value.size(); ++i) {
          const double xi = static_cast<double>(in.value[i]);
          const double p = 1.0 / (1.0 + std::exp(-xi));
          double d;
          if (targets[i] > 0.5) {
            // d/dx [-a (1-p)^g log p] = a (1-p)^g (g p log p - (1-p))
            d = opt.alpha * std::pow(1.0 - p, opt.gamma) *
                (opt.gamma * p * -loss_detail::softplus(-xi) - (1.0 - p));
          } else {
            // d/dx [-(1-a) p^g log(1-p)] = (1-a) p^g (p - g (1-p) log(1-p))
            d = (1.0 - opt.alpha) * std::pow(p, opt.gamma) *
                (p + opt.gamma * (1.0 - p) * loss_detail::softplus(xi));
          }
          in.grad[i] += static_cast<T>(g * d);
        }
      });
}

// 1 - (2 sum(p g) + 1) / (sum(p^2) + sum(g^2) + 1) with p = sigmoid(logits).
template <std::floating_point T>
BasicTensor<T> dice_loss(const BasicTensor<T>& logits, const std::vector<double>& target) {
  if (target.size() != logits.size()) {
    throw ShapeError("dice_loss: target size " + std::to_string(target.size()) +
                     " does not match logits " + to_string(logits.shape()));
  }
  std::vector<T> tv(target.begin(), target.end());
  const BasicTensor<T> g(logits.shape(), tv);
  double gg = 0.0;
  for (double t : target) gg += t * t;
  auto p = sigmoid(logits);
  auto num = add_scalar(scale(sum(mul(p, g)), T(2)), T(1));
  auto den = add_scalar(sum(mul(p, p)), static_cast<T>(gg + 1.0));
  return add_scalar(neg(div(num, den)), T(1));
}

// -(1/n) sum_u sum_k t_uk log softmax(logits_u)_k over n rows of K logits.
template <std::floating_point T>
BasicTensor<T> soft_cross_entropy(const BasicTensor<T>& logits, const std::vector<double>& targets) {
  if (logits.rank() != 2 || targets.size() != logits.size()) {
    throw ShapeError("soft_cross_entropy expects n x K logits with n*K targets, got " +
                     to_string(logits.shape()));
  }
  std::vector<T> tv(targets.begin(), targets.end());
  const BasicTensor<T> t(logits.shape(), tv);
  return scale(sum(mul(log_softmax(logits, 1), t)), static_cast<T>(-1.0 / static_cast<double>(logits.dim(0))));
}

// Per-scene targets at feature resolution.
struct SceneTargets {
  std::size_t height = 0, width = 0;  // feature map extents
  std::vector<double> semantic;       // (h*w) x K block fractions, void excluded
  std::vector<double> category;       // G^2 x K_thing one-hot on positive cells
  std::vector<std::size_t> positive_cells;
  std::vector<std::vector<double>> masks;  // per positive cell, h*w block fractions
};

// Each GT instance is assigned to the grid cell containing its centroid. If
// two instances land in one cell the larger one keeps it.
inline SceneTargets build_targets(const SyntheticScene& scene, const ModelConfig& cfg) {
  if (scene.height % 4 != 0 || scene.width % 4 != 0) {
    throw ShapeError("scene extents must be divisible by 4");
  }
  if (scene.thing_classes != cfg.thing_classes || scene.stuff_classes != cfg.stuff_classes) {
    throw UsageError("scene category counts do not match the model configuration");
  }
  SceneTargets t;
  const std::size_t h = scene.height / 4, w = scene.width / 4, k = cfg.num_classes();
  const std::size_t G = cfg.grid;
  t.height = h;
  t.width = w;
  t.semantic.assign(h * w * k, 0.0);
  for (std::size_t y = 0; y < scene.height; ++y)
    for (std::size_t x = 0; x < scene.width; ++x) {
      const int c = scene.semantic[y * scene.width + x];
      if (c == kVoid) continue;
      t.semantic[((y / 4) * w + x / 4) * k + static_cast<std::size_t>(c)] += 1.0 / 16.0;
    }

  t.category.assign(G * G * cfg.thing_classes, 0.0);
  std::vector<std::optional<std::size_t>> owner(G * G);
  std::vector<std::size_t> area(scene.instances.size(), 0);
  for (std::size_t i = 0; i < scene.instances.size(); ++i) {
    const auto& inst = scene.instances[i];
    double sx = 0, sy = 0;
    for (std::size_t y = 0; y < scene.height; ++y)
      for (std::size_t x = 0; x < scene.width; ++x)
        if (inst.mask[y * scene.width + x]) {
          sx += static_cast<double>(x) + 0.5;
          sy += static_cast<double>(y) + 0.5;
          ++area[i];
        }
    if (area[i] == 0) continue;
    const auto a = static_cast<double>(area[i]);
    const auto cx = std::min(G - 1, static_cast<std::size_t>(sx / a * static_cast<double>(G) / static_cast<double>(scene.width)));
    const auto cy = std::min(G - 1, static_cast<std::size_t>(sy / a * static_cast<double>(G) / static_cast<double>(scene.height)));
    auto& slot = owner[cy * G + cx];
    if (!slot || area[*slot] < area[i]) slot = i;
  }
  for (std::size_t cell = 0; cell < G * G; ++cell) {
    if (!owner[cell]) continue;
    const auto& inst = scene.instances[*owner[cell]];
    t.positive_cells.push_back(cell);
    t.category[cell * cfg.thing_classes + static_cast<std::size_t>(inst.category)] = 1.0;
    std::vector<double> m(h * w, 0.0);
    for (std::size_t y = 0; y < scene.height; ++y)
      for (std::size_t x = 0; x < scene.width; ++x)
        if (inst.mask[y * scene.width + x]) m[(y / 4) * w + x / 4] += 1.0 / 16.0;
    t.masks.push_back(std::move(m));
  }
  return t;
}

template <std::floating_point T>
struct LossTerms {
  BasicTensor<T> total;
  double mask = 0.0, cate = 0.0, sem = 0.0;
};

template <std::floating_point T>
LossTerms<T> total_loss(const ModelOutput<T>& out, const SceneTargets& t, double lambda,
                        FocalOptions focal = {}) {
  const std::size_t hw = t.height * t.width;
  if (out.mask_logits.dim(0) != hw) throw ShapeError("mask logits do not match targets");
  const std::size_t k = out.sem_logits.dim(2);
  LossTerms<T> r;
  const double npos = static_cast<double>(t.positive_cells.size());
  auto cate = focal_loss(out.cate_logits, t.category, std::max(1.0, npos), focal);
  r.cate = static_cast<double>(cate.item());
  BasicTensor<T> total = cate;
  if (!t.positive_cells.empty()) {
    auto cols = gather(out.mask_logits, 1, t.positive_cells);  // hw x P
    BasicTensor<T> acc;
    for (std::size_t i = 0; i < t.positive_cells.size(); ++i) {
      auto d = dice_loss(reshape(slice(cols, 1, i, i + 1), Shape{hw}), t.masks[i]);
      acc = i == 0 ? d : add(acc, d);
    }
    auto mask = scale(acc, static_cast<T>(1.0 / npos));
    r.mask = static_cast<double>(mask.item());
    total = add(total, mask);
  }
  auto sem = soft_cross_entropy(reshape(out.sem_logits, Shape{hw, k}), t.semantic);
  r.sem = static_cast<double>(sem.item());
  // With lambda == 0 the term stays out of the graph entirely.
  if (lambda > 0.0) total = add(total, scale(sem, static_cast<T>(lambda)));
  r.total = total;
  return r;
}

// Image H x W x 3 tensor from a scene.
inline Tensor scene_image(const SyntheticScene& s) {
  return Tensor(Shape{s.height, s.width, 3}, s.image);
}

}  // namespace corrfield
