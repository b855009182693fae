#pragma once

// Post-processing and evaluation: instance decoding, Matrix-NMS, score-order
// fusion with the semantic map, and panoptic quality.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "corrfield/model.hpp"
#include "corrfield/synth.hpp"

namespace corrfield {

struct InstancePrediction {
  std::size_t height = 0, width = 0;
  std::vector<std::vector<double>> masks;  // H x W soft masks in [0,1]
  std::vector<int> categories;
  std::vector<double> scores;
  std::vector<std::size_t> cells;  // grid cell that emitted each mask

  std::size_t size() const { return masks.size(); }

  void push(std::vector<double> mask, int category, double score, std::size_t cell) {
    masks.push_back(std::move(mask));
    categories.push_back(category);
    scores.push_back(score);
    cells.push_back(cell);
  }
};

struct PanopticSegmentation {
  std::size_t height = 0, width = 0;
  std::vector<int> category;  // kVoid for unlabeled
  std::vector<int> instance;  // 0 for stuff and void
};

// Bilinear resize of an h x w x c map, half-pixel centers, edge clamped.
inline std::vector<double> resize_bilinear(const std::vector<double>& src, std::size_t h, std::size_t w,
                                           std::size_t c, std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(out_h * out_w * c);
  auto axis = [](std::size_t o, std::size_t in_n, std::size_t out_n) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const auto i1 = std::min(i0 + 1, in_n - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, fy] = axis(y, h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [x0, x1, fx] = axis(x, w, out_w);
      for (std::size_t k = 0; k < c; ++k) {
        const double a = src[(y0 * w + x0) * c + k], b = src[(y0 * w + x1) * c + k];
        const double d = src[(y1 * w + x0) * c + k], e = src[(y1 * w + x1) * c + k];
        out[(y * out_w + x) * c + k] = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * d + fx * e);
      }
    }
  }
  return out;
}

// Turns raw head outputs into scored soft masks at image resolution. Every
// (cell, class) pair whose probability exceeds the pre-NMS threshold yields a
// candidate; masks whose binarized area is zero are dropped. Candidates come
// back sorted by score, ties broken by lower cell index then class.
template <std::floating_point T>
InstancePrediction decode_instances(const ModelOutput<T>& out, const ModelConfig& cfg,
                                    std::size_t image_h, std::size_t image_w) {
  const std::size_t cells = out.cate_logits.dim(0), kt = out.cate_logits.dim(1);
  const std::size_t h = out.sem_logits.dim(0), w = out.sem_logits.dim(1);
  const auto cate = out.cate_logits.values();
  const auto logits = out.mask_logits.values();
  struct Cand {
    double score;
    std::size_t cell, cls;
  };
  std::vector<Cand> cands;
  for (std::size_t c = 0; c < cells; ++c)
    for (std::size_t k = 0; k < kt; ++k) {
      const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(cate[c * kt + k])));
      if (p > cfg.score_threshold) cands.push_back({p, c, k});
    }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Cand& a, const Cand& b) { return a.score > b.score; });
  InstancePrediction pred;
  pred.height = image_h;
  pred.width = image_w;
  for (const auto& cand : cands) {
    std::vector<double> small(h * w);
    for (std::size_t u = 0; u < h * w; ++u) {
      small[u] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[u * cells + cand.cell])));
    }
    auto mask = resize_bilinear(small, h, w, 1, image_h, image_w);
    if (std::none_of(mask.begin(), mask.end(), [&](double v) { return v > cfg.mask_threshold; })) continue;
    pred.push(std::move(mask), static_cast<int>(cand.cls), cand.score, cand.cell);
  }
  return pred;
}

// IoU matrix of masks binarized at `threshold`.
inline std::vector<double> binary_iou_matrix(const InstancePrediction& pred, double threshold) {
  const std::size_t n = pred.size();
  std::vector<std::vector<std::uint8_t>> bin(n);
  std::vector<std::size_t> area(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    bin[i].resize(pred.masks[i].size());
    for (std::size_t p = 0; p < bin[i].size(); ++p) {
      bin[i][p] = pred.masks[i][p] > threshold;
      area[i] += bin[i][p];
    }
  }
  std::vector<double> iou(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      std::size_t inter = 0;
      for (std::size_t p = 0; p < bin[i].size(); ++p) inter += bin[i][p] & bin[j][p];
      const std::size_t uni = area[i] + area[j] - inter;
      const double v = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
      iou[i * n + j] = iou[j * n + i] = v;
    }
  return iou;
}

// Matrix-NMS with gaussian decay. Masks are first ordered by score (stable).
// For mask j, with same-class IoUs only:
//   comp_i  = max_{k<i} iou(k, i)
//   decay_j = min_{i<j} exp(-sigma * (iou(i, j)^2 - comp_i^2))
// and the returned score is score_j * min(1, decay_j).
inline InstancePrediction matrix_nms(const InstancePrediction& in, double sigma, double mask_threshold = 0.5) {
  const std::size_t n = in.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return in.scores[a] > in.scores[b]; });
  InstancePrediction sorted;
  sorted.height = in.height;
  sorted.width = in.width;
  for (auto i : order) sorted.push(in.masks[i], in.categories[i], in.scores[i], in.cells[i]);

  const auto raw = binary_iou_matrix(sorted, mask_threshold);
  std::vector<double> iou(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (sorted.categories[i] == sorted.categories[j]) iou[i * n + j] = raw[i * n + j];
  std::vector<double> comp(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < i; ++k) comp[i] = std::max(comp[i], iou[k * n + i]);
  for (std::size_t j = 1; j < n; ++j) {
    double decay = 1.0;
    for (std::size_t i = 0; i < j; ++i) {
      const double v = iou[i * n + j];
      decay = std::min(decay, std::exp(-sigma * (v * v - comp[i] * comp[i])));
    }
    sorted.scores[j] *= decay;
  }
  return sorted;
}

inline InstancePrediction filter_by_score(const InstancePrediction& in, double threshold) {
  InstancePrediction out;
  out.height = in.height;
  out.width = in.width;
  for (std::size_t i = 0; i < in.size(); ++i)
    if (in.scores[i] >= threshold) out.push(in.masks[i], in.categories[i], in.scores[i], in.cells[i]);
  return out;
}

// Per-pixel argmax over K channels of an H x W x K map.
inline std::vector<int> argmax_map(const std::vector<double>& logits, std::size_t n, std::size_t k) {
  std::vector<int> out(n);
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (logits[p * k + c] > logits[p * k + best]) best = c;
    out[p] = static_cast<int>(best);
  }
  return out;
}

// Paints instances in descending score order; each claims the unclaimed
// pixels of its binarized mask and is dropped if it claims none. Remaining
// pixels take the semantic label when it is a stuff class and become void
// otherwise. Stuff classes covering less than `stuff_min_area` of the image
// are voided.
inline PanopticSegmentation fuse_panoptic(const InstancePrediction& inst, const std::vector<int>& semantic,
                                          const ModelConfig& cfg) {
  const std::size_t n = inst.height * inst.width;
  if (semantic.size() != n) throw ShapeError("semantic map does not match instance masks");
  PanopticSegmentation out{inst.height, inst.width, std::vector<int>(n, kVoid), std::vector<int>(n, 0)};
  std::vector<std::size_t> order(inst.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return inst.scores[a] > inst.scores[b]; });
  int next_id = 1;
  for (auto i : order) {
    bool any = false;
    for (std::size_t p = 0; p < n; ++p)
      if (inst.masks[i][p] > cfg.mask_threshold && out.instance[p] == 0) {
        out.instance[p] = next_id;
        out.category[p] = inst.categories[i];
        any = true;
      }
    if (any) ++next_id;
  }
  const int kt = static_cast<int>(cfg.thing_classes);
  std::vector<std::size_t> stuff_area(cfg.num_classes(), 0);
  for (std::size_t p = 0; p < n; ++p) {
    if (out.instance[p] != 0) continue;
    const int s = semantic[p];
    if (s >= kt && s < static_cast<int>(cfg.num_classes())) {
      out.category[p] = s;
      ++stuff_area[static_cast<std::size_t>(s)];
    }
  }
  const double min_area = cfg.stuff_min_area * static_cast<double>(n);
  for (std::size_t p = 0; p < n; ++p) {
    const int c = out.category[p];
    if (out.instance[p] == 0 && c != kVoid && static_cast<double>(stuff_area[static_cast<std::size_t>(c)]) < min_area) {
      out.category[p] = kVoid;
    }
  }
  return out;
}

inline PanopticSegmentation scene_panoptic(const SyntheticScene& s) {
  PanopticSegmentation out{s.height, s.width, s.semantic, std::vector<int>(s.height * s.width, 0)};
  for (std::size_t k = 0; k < s.instances.size(); ++k)
    for (std::size_t p = 0; p < out.instance.size(); ++p)
      if (s.instances[k].mask[p]) out.instance[p] = static_cast<int>(k) + 1;
  return out;
}

// --- panoptic quality -----------------------------------------------------------

struct ClassPQ {
  std::size_t tp = 0, fp = 0, fn = 0;
  double iou_sum = 0.0;

  bool defined() const { return tp + fp + fn > 0; }
  double sq() const { return tp == 0 ? 0.0 : iou_sum / static_cast<double>(tp); }
  double rq() const {
    const double d = static_cast<double>(tp) + 0.5 * static_cast<double>(fp) + 0.5 * static_cast<double>(fn);
    return d == 0.0 ? 0.0 : static_cast<double>(tp) / d;
  }
  double pq() const { return sq() * rq(); }
};

struct PQResult {
  double pq = 0, sq = 0, rq = 0;
  double pq_things = 0, pq_stuff = 0;
  std::vector<ClassPQ> per_class;
};

struct SegmentKey {
  int category;
  int instance;
  auto operator<=>(const SegmentKey&) const = default;
};

struct SegmentMatch {
  SegmentKey gt, pred;
  double iou;
};

// Per-image segment matching. Segments are (category, instance) pairs over
// non-void pixels. IoU excludes predicted pixels that fall on GT void.
// Unmatched predictions lying mostly (> 50%) on GT void are not counted as
// false positives.
struct ImageMatching {
  std::vector<SegmentMatch> matches;  // ascending by GT key
  std::vector<SegmentKey> unmatched_gt;
  std::vector<SegmentKey> false_positives;
};

inline ImageMatching match_segments(const PanopticSegmentation& pred, const PanopticSegmentation& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("panoptic maps differ in size: " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" +
                     std::to_string(gt.width));
  }
  const std::size_t n = gt.category.size();
  std::map<SegmentKey, std::size_t> gt_area, pred_area, pred_void;
  std::map<std::pair<SegmentKey, SegmentKey>, std::size_t> inter;
  for (std::size_t p = 0; p < n; ++p) {
    const bool gv = gt.category[p] == kVoid, pv = pred.category[p] == kVoid;
    const SegmentKey g{gt.category[p], gt.instance[p]}, q{pred.category[p], pred.instance[p]};
    if (!gv) ++gt_area[g];
    if (!pv) {
      ++pred_area[q];
      if (gv) ++pred_void[q];
    }
    if (!gv && !pv && g.category == q.category) ++inter[{g, q}];
  }
  std::vector<SegmentMatch> cands;
  for (const auto& [pair, i] : inter) {
    const auto& [g, q] = pair;
    const std::size_t uni = gt_area[g] + pred_area[q] - i - pred_void[q];
    const double iou = static_cast<double>(i) / static_cast<double>(uni);
    if (iou > 0.5) cands.push_back({g, q, iou});
  }
  // Descending IoU. A segment can have at most one partner above 0.5, so the
  // greedy pass never meets a conflict; it is checked anyway.
  std::stable_sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) { return a.iou > b.iou; });
  ImageMatching r;
  std::map<SegmentKey, bool> gt_used, pred_used;
  for (const auto& m : cands) {
    if (gt_used[m.gt] || pred_used[m.pred]) {
      throw std::logic_error("segment matched twice at IoU > 0.5");
    }
    gt_used[m.gt] = pred_used[m.pred] = true;
    r.matches.push_back(m);
  }
  std::sort(r.matches.begin(), r.matches.end(), [](const auto& a, const auto& b) { return a.gt < b.gt; });
  for (const auto& [g, a] : gt_area)
    if (!gt_used[g]) r.unmatched_gt.push_back(g);
  for (const auto& [q, a] : pred_area) {
    if (pred_used[q]) continue;
    if (static_cast<double>(pred_void[q]) > 0.5 * static_cast<double>(a)) continue;
    r.false_positives.push_back(q);
  }
  return r;
}

class PQAccumulator {
 public:
  PQAccumulator(std::size_t thing_classes, std::size_t stuff_classes)
      : thing_classes_(thing_classes), classes_(thing_classes + stuff_classes) {}

  void add(const PanopticSegmentation& pred, const PanopticSegmentation& gt) {
    const auto m = match_segments(pred, gt);
    for (const auto& x : m.matches) {
      auto& c = at(x.gt.category);
      ++c.tp;
      c.iou_sum += x.iou;
    }
    for (const auto& g : m.unmatched_gt) ++at(g.category).fn;
    for (const auto& q : m.false_positives) ++at(q.category).fp;
  }

  // Class averages over classes with at least one GT or predicted segment.
  PQResult result() const {
    PQResult r;
    r.per_class = stats_;
    std::size_t all = 0, th = 0, st = 0;
    for (std::size_t k = 0; k < classes_; ++k) {
      const auto& c = stats_[k];
      if (!c.defined()) continue;
      r.pq += c.pq();
      r.sq += c.sq();
      r.rq += c.rq();
      ++all;
      if (k < thing_classes_) {
        r.pq_things += c.pq();
        ++th;
      } else {
        r.pq_stuff += c.pq();
        ++st;
      }
    }
    if (all) {
      r.pq /= static_cast<double>(all);
      r.sq /= static_cast<double>(all);
      r.rq /= static_cast<double>(all);
    }
    if (th) r.pq_things /= static_cast<double>(th);
    if (st) r.pq_stuff /= static_cast<double>(st);
    return r;
  }

 private:
  ClassPQ& at(int category) {
    if (category < 0 || static_cast<std::size_t>(category) >= classes_) {
      throw DataError("category " + std::to_string(category) + " outside the vocabulary");
    }
    return stats_[static_cast<std::size_t>(category)];
  }

  std::size_t thing_classes_, classes_;
  std::vector<ClassPQ> stats_ = std::vector<ClassPQ>(classes_);
};

inline PQResult compute_pq(const PanopticSegmentation& pred, const PanopticSegmentation& gt,
                           std::size_t thing_classes, std::size_t stuff_classes) {
  PQAccumulator acc(thing_classes, stuff_classes);
  acc.add(pred, gt);
  return acc.result();
}

// Full inference for one image: forward, decode, NMS, score filter, fusion.
template <std::floating_point T>
PanopticSegmentation predict_panoptic(const PanopticModel<T>& model, const BasicTensor<T>& image) {
  const auto& cfg = model.config;
  const auto out = model.forward(image);
  const std::size_t H = image.dim(0), W = image.dim(1);
  auto inst = decode_instances(out, cfg, H, W);
  inst = filter_by_score(matrix_nms(inst, cfg.nms_sigma, cfg.mask_threshold), cfg.post_nms_threshold);
  const std::size_t h = out.sem_logits.dim(0), w = out.sem_logits.dim(1), k = out.sem_logits.dim(2);
  std::vector<double> sem_small(out.sem_logits.values().begin(), out.sem_logits.values().end());
  const auto sem = argmax_map(resize_bilinear(sem_small, h, w, k, H, W), H * W, k);
  return fuse_panoptic(inst, sem, cfg);
}

}  // namespace corrfield
