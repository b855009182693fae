#pragma once

// Toy one-stage panoptic network on a single feature level.
//
//   image H x W x 3
//     -> backbone: conv3x3/2, conv3x3/2, `backbone_depth` x conv3x3, ReLU after each
//     -> top-down context: up to two further conv3x3/2 levels, upsampled
//        (nearest) and summed back, FPN-style
//     -> features f at H/4 x W/4 x C
//   semantic branch: [SCM] -> 4 x (conv3x3 + ReLU) -> conv1x1 -> K logits
//   instance branch: [ICM or a positional comparator] -> g
//     mask features:  conv3x3 + ReLU -> conv1x1 -> D channels
//     per-cell heads: avg-pool g to G x G -> conv3x3 + ReLU ->
//                     conv1x1 -> D+1 (dynamic kernel + bias), conv1x1 -> K_thing
//   mask logits of cell c = mask_features . kernel_c + bias_c

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "corrfield/checkpoint.hpp"
#include "corrfield/error.hpp"
#include "corrfield/icm.hpp"
#include "corrfield/nn.hpp"
#include "corrfield/ops.hpp"
#include "corrfield/scm.hpp"

namespace corrfield {

// What the instance branch adds to the features before its heads.
enum class PositionalMode {
  correlation,  // ICM: correlations to reference points
  coords,       // CoordConv-style normalized x, y channels
  sinusoid,     // fixed sinusoidal embedding with S^2 channels
};

inline std::string to_string(PositionalMode m) {
  switch (m) {
    case PositionalMode::correlation: return "correlation";
    case PositionalMode::coords: return "coords";
    case PositionalMode::sinusoid: return "sinusoid";
  }
  return "?";
}

inline PositionalMode parse_positional_mode(const std::string& s) {
  if (s == "correlation") return PositionalMode::correlation;
  if (s == "coords") return PositionalMode::coords;
  if (s == "sinusoid") return PositionalMode::sinusoid;
  throw UsageError("unknown positional mode '" + s + "' (expected correlation|coords|sinusoid)");
}

struct ModelConfig {
  std::size_t channels = 16;
  std::size_t terms = 3;     // Fourier level N
  std::size_t ref_side = 4;  // S, reference grid is S x S
  std::size_t grid = 4;      // G, instance cells are G x G
  std::size_t mask_dim = 16;
  std::size_t backbone_depth = 2;
  std::size_t thing_classes = 3;
  std::size_t stuff_classes = 3;
  double lambda = 0.5;
  double score_threshold = 0.1;
  double post_nms_threshold = 0.3;
  double stuff_min_area = 4096.0 / (640.0 * 640.0);
  double nms_sigma = 2.0;
  double mask_threshold = 0.5;
  bool use_scm = true;
  bool use_icm = true;
  AggregationMode scm_mode = AggregationMode::axial;
  PositionalMode positional = PositionalMode::correlation;

  std::size_t num_classes() const { return thing_classes + stuff_classes; }

  void validate() const {
    if (ref_side < 1) throw UsageError("reference grid side S must be >= 1");
    if (grid < 1) throw UsageError("instance grid side G must be >= 1");
    if (channels < 1 || mask_dim < 1) throw UsageError("channel counts must be >= 1");
    if (thing_classes < 1 || stuff_classes < 1) {
      throw UsageError("need at least one thing and one stuff class");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw UsageError("lambda must be >= 0");
    for (double t : {score_threshold, post_nms_threshold, stuff_min_area, mask_threshold}) {
      if (!(t >= 0.0 && t <= 1.0)) throw UsageError("thresholds must lie in [0,1]");
    }
    if (!(nms_sigma > 0.0)) throw UsageError("nms sigma must be > 0");
  }
};

template <std::floating_point T>
struct ModelOutput {
  BasicTensor<T> features;     // h x w x C
  BasicTensor<T> sem_logits;   // h x w x K
  BasicTensor<T> mask_logits;  // (h*w) x G^2
  BasicTensor<T> cate_logits;  // G^2 x K_thing
};

// Fixed position channels for the comparator variants, h x w x P.
template <std::floating_point T = double>
BasicTensor<T> coord_channels(std::size_t h, std::size_t w) {
  std::vector<T> v(h * w * 2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      v[(y * w + x) * 2] = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(w) - 1.0;
      v[(y * w + x) * 2 + 1] = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(h) - 1.0;
    }
  return BasicTensor<T>(Shape{h, w, 2}, std::move(v));
}

// Channel i encodes x when i is even, y when odd; within an axis, pairs of
// channels are sin/cos at frequencies 10000^(-2k/d) over positions scaled
// to [0, 2*pi).
template <std::floating_point T = double>
BasicTensor<T> sinusoid_channels(std::size_t h, std::size_t w, std::size_t count) {
  const std::size_t per_axis = (count + 1) / 2;
  std::vector<T> v(h * w * count);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t i = 0; i < count; ++i) {
        const bool is_x = i % 2 == 0;
        const std::size_t k = i / 2;
        const double pos = 2.0 * std::numbers::pi *
                           (static_cast<double>(is_x ? x : y) + 0.5) /
                           static_cast<double>(is_x ? w : h);
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k / 2) /
                                                  static_cast<double>(per_axis));
        v[(y * w + x) * count + i] = k % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
      }
  return BasicTensor<T>(Shape{h, w, count}, std::move(v));
}

template <std::floating_point T>
struct PanopticModel {
  ModelConfig config;
  std::vector<Conv2dWeights<T>> backbone;
  std::vector<Conv2dWeights<T>> context;  // coarser pyramid levels
  std::optional<ScmWeights<T>> scm;
  std::vector<Conv2dWeights<T>> sem_tower;
  Conv2dWeights<T> sem_out;
  std::optional<IcmWeights<T>> icm;
  // Comparator projections, present when use_icm with a non-correlation mode.
  std::optional<Conv2dWeights<T>> pos_feat_proj;
  std::optional<Conv2dWeights<T>> pos_proj;
  Conv2dWeights<T> mask_conv;
  Conv2dWeights<T> mask_out;
  Conv2dWeights<T> cell_conv;
  Conv2dWeights<T> kernel_out;
  Conv2dWeights<T> cate_out;

  static PanopticModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const SplitMix64 root(seed);
    const std::size_t c = cfg.channels;
    PanopticModel m;
    m.config = cfg;
    std::uint64_t salt = 0;
    auto next = [&] { return root.fork(++salt); };
    m.backbone.push_back(Conv2dWeights<T>::uniform(3, 3, c, next()));
    m.backbone.push_back(Conv2dWeights<T>::uniform(3, c, c, next()));
    for (std::size_t i = 0; i < cfg.backbone_depth; ++i) {
      m.backbone.push_back(Conv2dWeights<T>::uniform(3, c, c, next()));
    }
    for (int i = 0; i < 2; ++i) m.context.push_back(Conv2dWeights<T>::uniform(3, c, c, next()));
    for (int i = 0; i < 4; ++i) m.sem_tower.push_back(Conv2dWeights<T>::uniform(3, c, c, next()));
    m.sem_out = Conv2dWeights<T>::uniform(1, c, cfg.num_classes(), next());
    m.mask_conv = Conv2dWeights<T>::uniform(3, c, c, next());
    m.mask_out = Conv2dWeights<T>::uniform(1, c, cfg.mask_dim, next());
    m.cell_conv = Conv2dWeights<T>::uniform(3, c, c, next());
    m.kernel_out = Conv2dWeights<T>::uniform(1, c, cfg.mask_dim + 1, next());
    m.cate_out = Conv2dWeights<T>::uniform(1, c, cfg.thing_classes, next());
    // Prior probability 0.01 for every class so early focal loss is small.
    for (auto& b : m.cate_out.bias->mutable_values()) b = static_cast<T>(-std::log(0.99 / 0.01));
    // Optional modules draw from their own streams so toggling one leaves
    // the others' initial weights unchanged.
    if (cfg.use_scm) m.scm = ScmWeights<T>::init(c, cfg.terms, root.fork(1001));
    if (cfg.use_icm) {
      const std::size_t refs = cfg.ref_side * cfg.ref_side;
      if (cfg.positional == PositionalMode::correlation) {
        m.icm = IcmWeights<T>::init(c, cfg.terms, cfg.ref_side, root.fork(1002));
      } else {
        const std::size_t p = cfg.positional == PositionalMode::coords ? 2 : refs;
        m.pos_feat_proj = Conv2dWeights<T>::uniform(1, c, c, root.fork(1003), false);
        m.pos_proj = Conv2dWeights<T>::uniform(1, p, c, root.fork(1004), false);
      }
    }
    return m;
  }

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& fn) {
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      backbone[i].visit(prefix + ".backbone." + std::to_string(i), fn);
    }
    for (std::size_t i = 0; i < context.size(); ++i) {
      context[i].visit(prefix + ".context." + std::to_string(i), fn);
    }
    if (scm) scm->visit(prefix + ".scm", fn);
    for (std::size_t i = 0; i < sem_tower.size(); ++i) {
      sem_tower[i].visit(prefix + ".sem_tower." + std::to_string(i), fn);
    }
    sem_out.visit(prefix + ".sem_out", fn);
    if (icm) icm->visit(prefix + ".icm", fn);
    if (pos_feat_proj) pos_feat_proj->visit(prefix + ".pos.feat_proj", fn);
    if (pos_proj) pos_proj->visit(prefix + ".pos.proj", fn);
    mask_conv.visit(prefix + ".mask_conv", fn);
    mask_out.visit(prefix + ".mask_out", fn);
    cell_conv.visit(prefix + ".cell_conv", fn);
    kernel_out.visit(prefix + ".kernel_out", fn);
    cate_out.visit(prefix + ".cate_out", fn);
  }

  ParameterList<T> parameters() { return collect_parameters<T>(*this); }

  // Parameter names of the semantic branch (SCM included).
  static bool is_semantic_parameter(const std::string& name) {
    return name.starts_with("scm.") || name.starts_with("sem_tower.") || name.starts_with("sem_out.");
  }
  // Parameters only the mask loss reaches.
  static bool is_mask_parameter(const std::string& name) {
    return name.starts_with("mask_conv.") || name.starts_with("mask_out.") ||
           name.starts_with("kernel_out.");
  }

  BasicTensor<T> backbone_forward(const BasicTensor<T>& image) const {
    if (image.rank() != 3 || image.dim(2) != 3) {
      throw ShapeError("backbone expects H x W x 3, got " + to_string(image.shape()));
    }
    if (image.dim(0) % 4 != 0 || image.dim(1) % 4 != 0) {
      throw ShapeError("image extents must be divisible by 4, got " + to_string(image.shape()));
    }
    auto x = relu(backbone[0](image, 2));
    x = relu(backbone[1](x, 2));
    for (std::size_t i = 2; i < backbone.size(); ++i) x = relu(backbone[i](x));
    // Coarser levels exist while the map halves evenly.
    std::vector<BasicTensor<T>> levels{x};
    for (const auto& conv : context) {
      const auto& top = levels.back();
      if (top.dim(0) % 2 != 0 || top.dim(1) % 2 != 0) break;
      levels.push_back(relu(conv(top, 2)));
    }
    for (std::size_t i = levels.size() - 1; i > 0; --i) {
      levels[i - 1] = add(levels[i - 1], upsample_nearest(levels[i], 2));
    }
    return levels[0];
  }

  BasicTensor<T> semantic_head(const BasicTensor<T>& features) const {
    auto x = scm ? scm_forward(features, *scm, config.scm_mode) : features;
    for (const auto& conv : sem_tower) x = relu(conv(x));
    return sem_out(x);
  }

  BasicTensor<T> instance_features(const BasicTensor<T>& f) const {
    const std::size_t h = f.dim(0), w = f.dim(1);
    if (icm) return icm_forward(f, *icm, make_reference_grid(h, w, config.ref_side));
    if (pos_proj) {
      const auto enc = config.positional == PositionalMode::coords
                           ? coord_channels<T>(h, w)
                           : sinusoid_channels<T>(h, w, config.ref_side * config.ref_side);
      return add((*pos_feat_proj)(f), (*pos_proj)(enc));
    }
    return f;
  }

  // Backbone features of an image with pixels in [0,1], centered to [-1,1]
  // first.
  BasicTensor<T> features(const BasicTensor<T>& image) const {
    return backbone_forward(add_scalar(scale(image, T(2)), T(-1)));
  }

  ModelOutput<T> forward(const BasicTensor<T>& image) const {
    auto f = features(image);
    const std::size_t h = f.dim(0), w = f.dim(1), g = config.grid;
    if (h % g != 0 || w % g != 0) {
      throw ShapeError("feature map " + std::to_string(h) + "x" + std::to_string(w) +
                       " is not divisible into a " + std::to_string(g) + "x" +
                       std::to_string(g) + " grid");
    }
    if (h != w) throw ShapeError("instance grid needs a square feature map");
    auto sem = semantic_head(f);
    auto inst = instance_features(f);

    auto mask_feat = mask_out(relu(mask_conv(inst)));  // h x w x D
    auto cell = relu(cell_conv(avg_pool2d(inst, h / g)));
    const std::size_t d = config.mask_dim;
    auto kern = reshape(kernel_out(cell), Shape{g * g, d + 1});
    auto weights = permute(slice(kern, 1, 0, d), {1, 0});       // D x G^2
    auto bias = reshape(slice(kern, 1, d, d + 1), Shape{1, g * g});
    auto masks = add(matmul(reshape(mask_feat, Shape{h * w, d}), weights), bias);
    auto cate = reshape(cate_out(cell), Shape{g * g, config.thing_classes});
    return {f, sem, masks, cate};
  }

  // --- checkpoints -----------------------------------------------------------

  std::vector<NamedArray> to_arrays() {
    std::vector<NamedArray> out;
    auto meta = [&](const std::string& key, double v) {
      out.push_back({"meta." + key, Shape{1}, {v}});
    };
    meta("terms", static_cast<double>(config.terms));
    meta("ref_side", static_cast<double>(config.ref_side));
    meta("channels", static_cast<double>(config.channels));
    meta("grid", static_cast<double>(config.grid));
    meta("mask_dim", static_cast<double>(config.mask_dim));
    meta("backbone_depth", static_cast<double>(config.backbone_depth));
    meta("thing_classes", static_cast<double>(config.thing_classes));
    meta("stuff_classes", static_cast<double>(config.stuff_classes));
    meta("use_scm", config.use_scm ? 1.0 : 0.0);
    meta("use_icm", config.use_icm ? 1.0 : 0.0);
    meta("scm_mode", static_cast<double>(config.scm_mode));
    meta("positional", static_cast<double>(config.positional));
    for (auto& [name, t] : parameters()) {
      out.push_back({name, t.shape(), std::vector<double>(t.values().begin(), t.values().end())});
    }
    return out;
  }

  // Rebuilds a model from checkpoint arrays. The architecture in `cfg` must
  // agree with the stored metadata; thresholds and lambda come from `cfg`.
  static PanopticModel from_arrays(const std::vector<NamedArray>& arrays, const ModelConfig& cfg) {
    auto find = [&](const std::string& name) -> const NamedArray* {
      for (const auto& a : arrays)
        if (a.name == name) return &a;
      return nullptr;
    };
    auto expect = [&](const std::string& key, double want, const char* flag) {
      const auto* a = find("meta." + key);
      if (!a || a->values.size() != 1) throw DataError("checkpoint lacks meta." + key);
      if (a->values[0] != want) {
        throw UsageError("checkpoint has " + key + "=" + std::to_string(static_cast<long long>(a->values[0])) +
                         " but the configuration asks for " + std::to_string(static_cast<long long>(want)) +
                         " (" + flag + ")");
      }
    };
    expect("terms", static_cast<double>(cfg.terms), "--n-fourier");
    expect("ref_side", static_cast<double>(cfg.ref_side), "--s-ref");
    expect("channels", static_cast<double>(cfg.channels), "channels");
    expect("grid", static_cast<double>(cfg.grid), "grid");
    expect("mask_dim", static_cast<double>(cfg.mask_dim), "mask_dim");
    expect("backbone_depth", static_cast<double>(cfg.backbone_depth), "backbone_depth");
    expect("thing_classes", static_cast<double>(cfg.thing_classes), "thing_classes");
    expect("stuff_classes", static_cast<double>(cfg.stuff_classes), "stuff_classes");
    expect("use_scm", cfg.use_scm ? 1.0 : 0.0, "--use-scm");
    expect("use_icm", cfg.use_icm ? 1.0 : 0.0, "--use-icm");
    expect("scm_mode", static_cast<double>(cfg.scm_mode), "--scm-mode");
    expect("positional", static_cast<double>(cfg.positional), "positional");

    auto m = init(cfg, 0);
    std::size_t used = 0;
    for (auto& [name, t] : m.parameters()) {
      const auto* a = find(name);
      if (!a) throw DataError("checkpoint lacks parameter " + name);
      if (a->shape != t.shape()) {
        throw DataError("checkpoint parameter " + name + " has shape " + to_string(a->shape) +
                        ", model expects " + to_string(t.shape()));
      }
      auto dst = t.mutable_values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a->values[i]);
      ++used;
    }
    std::size_t meta_count = 0;
    for (const auto& a : arrays) meta_count += a.name.starts_with("meta.") ? 1 : 0;
    if (used + meta_count != arrays.size()) {
      throw DataError("checkpoint holds parameters this model does not have");
    }
    return m;
  }
};

using Model = PanopticModel<double>;

}  // namespace corrfield
