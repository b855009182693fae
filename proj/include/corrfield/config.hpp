#pragma once

// Run configuration shared by every CLI command. Values come from built-in
// defaults, then an optional key=value file, then command-line flags; later
// sources win. The merged result is written back out as resolved.cfg, which
// can be fed to --config to repeat a run exactly.

#include <functional>
#include <string>
#include <vector>

#include "corrfield/kvfile.hpp"
#include "corrfield/model.hpp"
#include "corrfield/synth.hpp"
#include "corrfield/train.hpp"

namespace corrfield {

struct RunConfig {
  ModelConfig model;
  SceneConfig scene;
  TrainOptions train;
  std::uint64_t seed = 0;   // dataset first seed; also drives init and shuffling
  std::uint64_t count = 0;  // scenes to generate / use
  std::uint64_t train_count = 0;  // ablation: leading scenes used for training
  std::string data;
  std::string out;
  std::string checkpoint;

  // Built-in defaults for the ablation: the 200-scene twin suite with the
  // first 160 scenes for training.
  static RunConfig ablation_defaults() {
    RunConfig c;
    const auto suite = twin_suite_defaults();
    c.scene = suite.scenes;
    c.seed = suite.first_seed;
    c.count = suite.count;
    c.train_count = suite.train_count;
    return c;
  }
};

namespace config_detail {

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + kv::from_f64(v[i]);
  return out;
}

#define CF_U64(name, member)                                                                       \
  Field {                                                                                          \
    name, [](RunConfig& c, const std::string& v) { c.member = static_cast<decltype(c.member)>(kv::to_u64(name, v)); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                                \
  }
#define CF_F64(name, member)                                                               \
  Field {                                                                                  \
    name, [](RunConfig& c, const std::string& v) { c.member = kv::to_f64(name, v); },      \
        [](const RunConfig& c) { return kv::from_f64(c.member); }                          \
  }
#define CF_BOOL(name, member)                                                              \
  Field {                                                                                  \
    name, [](RunConfig& c, const std::string& v) { c.member = kv::to_bool(name, v); },     \
        [](const RunConfig& c) { return kv::from_bool(c.member); }                         \
  }
#define CF_STR(name, member)                                                  \
  Field {                                                                     \
    name, [](RunConfig& c, const std::string& v) { c.member = v; },           \
        [](const RunConfig& c) { return c.member; }                           \
  }

// Keys in resolved.cfg order.
inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      CF_STR("data", data),
      CF_STR("out", out),
      CF_STR("checkpoint", checkpoint),
      CF_U64("seed", seed),
      CF_U64("count", count),
      CF_U64("train_count", train_count),
      // scenes
      CF_U64("height", scene.height),
      CF_U64("width", scene.width),
      CF_U64("min_things", scene.min_things),
      CF_U64("max_things", scene.max_things),
      CF_BOOL("disks", scene.disks),
      CF_BOOL("rectangles", scene.rectangles),
      CF_F64("color_jitter", scene.color_jitter),
      CF_F64("texture", scene.texture),
      CF_U64("stuff_bands", scene.stuff_bands),
      CF_BOOL("twin_mode", scene.twin_mode),
      CF_F64("twin_separation", scene.twin_separation),
      // categories are shared by scenes and the model
      Field{"thing_classes",
            [](RunConfig& c, const std::string& v) {
              c.scene.thing_classes = c.model.thing_classes = kv::to_u64("thing_classes", v);
            },
            [](const RunConfig& c) { return std::to_string(c.model.thing_classes); }},
      Field{"stuff_classes",
            [](RunConfig& c, const std::string& v) {
              c.scene.stuff_classes = c.model.stuff_classes = kv::to_u64("stuff_classes", v);
            },
            [](const RunConfig& c) { return std::to_string(c.model.stuff_classes); }},
      // model
      CF_U64("channels", model.channels),
      CF_U64("n_fourier", model.terms),
      CF_U64("s_ref", model.ref_side),
      CF_U64("grid", model.grid),
      CF_U64("mask_dim", model.mask_dim),
      CF_U64("backbone_depth", model.backbone_depth),
      CF_BOOL("use_scm", model.use_scm),
      CF_BOOL("use_icm", model.use_icm),
      Field{"scm_mode",
            [](RunConfig& c, const std::string& v) { c.model.scm_mode = parse_aggregation_mode(v); },
            [](const RunConfig& c) { return to_string(c.model.scm_mode); }},
      Field{"positional",
            [](RunConfig& c, const std::string& v) { c.model.positional = parse_positional_mode(v); },
            [](const RunConfig& c) { return to_string(c.model.positional); }},
      CF_F64("lambda", model.lambda),
      CF_F64("score_threshold", model.score_threshold),
      CF_F64("post_nms_threshold", model.post_nms_threshold),
      CF_F64("stuff_min_area", model.stuff_min_area),
      CF_F64("nms_sigma", model.nms_sigma),
      CF_F64("mask_threshold", model.mask_threshold),
      // training
      CF_U64("epochs", train.epochs),
      CF_U64("batch", train.batch),
      CF_F64("lr", train.learning_rate),
      Field{"lr_drops",
            [](RunConfig& c, const std::string& v) {
              c.train.lr_drops.clear();
              for (const auto& part : kv::split(v, ',')) c.train.lr_drops.push_back(kv::to_f64("lr_drops", part));
            },
            [](const RunConfig& c) { return join_doubles(c.train.lr_drops); }},
      CF_F64("momentum", train.momentum),
      CF_F64("weight_decay", train.weight_decay),
      CF_F64("clip_norm", train.clip_norm),
      CF_BOOL("hflip", train.hflip),
  };
  return table;
}

#undef CF_U64
#undef CF_F64
#undef CF_BOOL
#undef CF_STR

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : config_detail::fields()) out.emplace_back(f.key);
  return out;
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields()) {
    if (key == f.key) {
      f.set(c, value);
      return;
    }
  }
  throw UsageError("unknown configuration key '" + key + "'");
}

inline void apply_config(RunConfig& c, const KeyValueFile& file) {
  for (const auto& [k, v] : file.entries()) set_config_value(c, k, v);
}

// Reads a config file. Syntax problems are data errors; unknown keys and
// bad values are usage errors.
inline void apply_config_file(RunConfig& c, const std::string& path) {
  apply_config(c, KeyValueFile::load(path));
}

inline KeyValueFile resolved_config(const RunConfig& c) {
  KeyValueFile out;
  for (const auto& f : config_detail::fields()) out.set(f.key, f.get(c));
  return out;
}

}  // namespace corrfield
