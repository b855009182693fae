#pragma once

// Training loop, dataset evaluation and the variant ablation.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "corrfield/losses.hpp"
#include "corrfield/panoptic.hpp"

namespace corrfield {

struct TrainOptions {
  std::size_t epochs = 40;
  std::size_t batch = 4;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // global gradient norm cap, 0 disables
  bool hflip = true;       // random horizontal flips
  // Learning rate is divided by 10 after each listed fraction of the epochs.
  std::vector<double> lr_drops{0.75, 0.9};
  std::uint64_t seed = 0;  // model init and shuffling
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0, mask = 0, cate = 0, sem = 0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  bool diverged = false;
  std::string failure;
};

// Fisher-Yates shuffle driven by a counter-based stream.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, SplitMix64 rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

inline SyntheticScene flip_horizontal(const SyntheticScene& s) {
  SyntheticScene out = s;
  const std::size_t h = s.height, w = s.width;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t src = y * w + (w - 1 - x), dst = y * w + x;
      out.semantic[dst] = s.semantic[src];
      for (std::size_t k = 0; k < 3; ++k) out.image[dst * 3 + k] = s.image[src * 3 + k];
      for (std::size_t i = 0; i < s.instances.size(); ++i) out.instances[i].mask[dst] = s.instances[i].mask[src];
    }
  return out;
}

inline double learning_rate_at(const TrainOptions& opt, std::size_t epoch) {
  double lr = opt.learning_rate;
  for (double f : opt.lr_drops)
    if (static_cast<double>(epoch - 1) >= f * static_cast<double>(opt.epochs)) lr /= 10.0;
  return lr;
}

// Minibatch SGD over `scenes`. Per-sample gradients are accumulated and
// averaged before each step. `on_epoch` runs after every completed epoch and
// may stop training by returning false. A non-finite loss or gradient ends
// training with `diverged` set; the model then holds the weights of the
// last finite step.
template <std::floating_point T>
TrainResult train_model(PanopticModel<T>& model, const std::vector<SyntheticScene>& scenes,
                        const TrainOptions& opt,
                        const std::function<bool(const EpochStats&)>& on_epoch = {}) {
  if (opt.batch == 0) throw UsageError("batch size must be >= 1");
  if (!(opt.learning_rate > 0.0) || !std::isfinite(opt.learning_rate)) {
    throw UsageError("learning rate must be a positive finite number");
  }
  TrainResult result;
  if (scenes.empty()) return result;
  // Index 2i is scene i as stored, 2i+1 its mirror image.
  std::vector<SceneTargets> targets;
  std::vector<BasicTensor<T>> images;
  for (const auto& s : scenes) {
    for (const auto& v : {s, flip_horizontal(s)}) {
      targets.push_back(build_targets(v, model.config));
      images.emplace_back(Shape{v.height, v.width, 3}, std::vector<T>(v.image.begin(), v.image.end()));
    }
  }
  Sgd<T> sgd(model.parameters(), {opt.learning_rate, opt.momentum, opt.weight_decay});
  const SplitMix64 shuffle_root = SplitMix64(opt.seed).fork(0x5EED);

  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto order = shuffled_indices(scenes.size(), shuffle_root.fork(epoch));
    SplitMix64 flips = shuffle_root.fork(epoch).fork(1);
    sgd.options().learning_rate = learning_rate_at(opt, epoch);
    EpochStats stats;
    stats.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      const std::size_t end = std::min(order.size(), start + opt.batch);
      sgd.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const auto i = 2 * order[b] + ((opt.hflip && flips.uniform() < 0.5) ? 1 : 0);
        const auto out = model.forward(images[i]);
        auto terms = total_loss(out, targets[i], model.config.lambda);
        const double v = static_cast<double>(terms.total.item());
        if (!std::isfinite(v)) {
          result.diverged = true;
          result.failure = "non-finite loss at epoch " + std::to_string(epoch) + ", scene " +
                           std::to_string(scenes[i / 2].seed);
          return result;
        }
        stats.loss += v;
        stats.mask += terms.mask;
        stats.cate += terms.cate;
        stats.sem += terms.sem;
        terms.total = scale(terms.total, static_cast<T>(1.0 / static_cast<double>(end - start)));
        terms.total.backward();
      }
      const double norm = sgd.grad_norm();
      if (!std::isfinite(norm)) {
        result.diverged = true;
        result.failure = "non-finite gradient at epoch " + std::to_string(epoch);
        return result;
      }
      if (opt.clip_norm > 0.0) sgd.clip_grad_norm(opt.clip_norm);
      sgd.step();
    }
    const double n = static_cast<double>(scenes.size());
    stats.loss /= n;
    stats.mask /= n;
    stats.cate /= n;
    stats.sem /= n;
    result.epochs.push_back(stats);
    if (on_epoch && !on_epoch(stats)) break;
  }
  return result;
}

struct EvalResult {
  PQResult pq;
  std::size_t twin_scenes = 0;
  std::size_t twins_detected = 0;  // scenes where both twins matched

  double twin_rate() const {
    return twin_scenes == 0 ? 0.0 : static_cast<double>(twins_detected) / static_cast<double>(twin_scenes);
  }
};

// True when both twins of a scene are matched in `pred` at IoU > 0.5.
inline bool twins_detected(const PanopticSegmentation& pred, const SyntheticScene& scene) {
  if (!scene.twins) return false;
  const auto m = match_segments(pred, scene_panoptic(scene));
  auto matched = [&](std::size_t k) {
    const SegmentKey key{scene.instances[k].category, static_cast<int>(k) + 1};
    return std::any_of(m.matches.begin(), m.matches.end(), [&](const auto& x) { return x.gt == key; });
  };
  return matched(scene.twins->first) && matched(scene.twins->second);
}

template <std::floating_point T>
EvalResult evaluate_model(const PanopticModel<T>& model, const std::vector<SyntheticScene>& scenes) {
  EvalResult r;
  PQAccumulator acc(model.config.thing_classes, model.config.stuff_classes);
  for (const auto& s : scenes) {
    const BasicTensor<T> image(Shape{s.height, s.width, 3}, std::vector<T>(s.image.begin(), s.image.end()));
    const auto pred = predict_panoptic(model, image);
    acc.add(pred, scene_panoptic(s));
    if (s.twins) {
      ++r.twin_scenes;
      if (twins_detected(pred, s)) ++r.twins_detected;
    }
  }
  r.pq = acc.result();
  return r;
}

// --- ablation ----------------------------------------------------------------------

struct Variant {
  std::string name;
  bool use_scm = false;
  bool use_icm = false;
  PositionalMode positional = PositionalMode::correlation;
};

inline std::vector<Variant> ablation_variants() {
  return {
      {"baseline", false, false, PositionalMode::correlation},
      {"scm", true, false, PositionalMode::correlation},
      {"icm", false, true, PositionalMode::correlation},
      {"scm+icm", true, true, PositionalMode::correlation},
      {"icm->coords", false, true, PositionalMode::coords},
      {"icm->sinusoid", false, true, PositionalMode::sinusoid},
  };
}

struct AblationOptions {
  SceneConfig scenes;  // seed field ignored
  std::uint64_t first_seed = 1000;
  std::size_t count = 200;
  std::size_t train_count = 160;  // the rest is held out
  ModelConfig model;              // toggles overridden per variant
  TrainOptions train;
};

inline AblationOptions twin_suite_defaults() {
  AblationOptions o;
  o.scenes.twin_mode = true;
  o.scenes.min_things = 2;
  o.scenes.max_things = 3;
  return o;
}

struct AblationRow {
  Variant variant;
  bool failed = false;
  std::string failure;
  EvalResult eval;
  double train_seconds = 0.0;
  std::vector<EpochStats> epochs;
};

using AblationProgress = std::function<void(const std::string&)>;

inline std::vector<AblationRow> run_ablation(const AblationOptions& opt, const AblationProgress& progress = {}) {
  if (opt.train_count > opt.count) throw UsageError("train_count exceeds count");
  std::vector<SyntheticScene> train, held_out;
  for (std::size_t k = 0; k < opt.count; ++k) {
    auto cfg = opt.scenes;
    cfg.seed = opt.first_seed + k;
    (k < opt.train_count ? train : held_out).push_back(generate_scene(cfg));
  }
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants()) {
    AblationRow row;
    row.variant = v;
    auto mc = opt.model;
    mc.use_scm = v.use_scm;
    mc.use_icm = v.use_icm;
    mc.positional = v.positional;
    auto model = Model::init(mc, opt.train.seed);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto tr = train_model(model, train, opt.train);
      row.epochs = tr.epochs;
      if (tr.diverged) {
        row.failed = true;
        row.failure = tr.failure;
      }
    } catch (const NumericalError& e) {
      row.failed = true;
      row.failure = e.what();
    }
    row.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!row.failed) row.eval = evaluate_model(model, held_out);
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-14s pq=%.4f twins=%zu/%zu %.1fs%s", v.name.c_str(), row.eval.pq.pq,
                    row.eval.twins_detected, row.eval.twin_scenes, row.train_seconds,
                    row.failed ? " FAILED" : "");
      progress(buf);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string fixed4(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline constexpr const char* kReportHeader = "variant,pq,sq,rq,pq_th,pq_st,train_seconds";

inline std::string report_row(const std::string& name, const PQResult& r, double seconds, bool failed = false) {
  const double nan = std::nan("");
  auto m = [&](double v) { return fixed4(failed ? nan : v); };
  return name + "," + m(r.pq) + "," + m(r.sq) + "," + m(r.rq) + "," + m(r.pq_things) + "," + m(r.pq_stuff) + "," +
         fixed4(seconds);
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = std::string(kReportHeader) + "\n";
  for (const auto& r : rows) out += report_row(r.variant.name, r.eval.pq, r.train_seconds, r.failed) + "\n";
  return out;
}

inline std::string twins_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,twin_scenes,both_detected,rate\n";
  for (const auto& r : rows) {
    out += r.variant.name + "," + std::to_string(r.eval.twin_scenes) + "," + std::to_string(r.eval.twins_detected) +
           "," + fixed4(r.failed ? std::nan("") : r.eval.twin_rate()) + "\n";
  }
  return out;
}

}  // namespace corrfield
