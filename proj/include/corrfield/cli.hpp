#pragma once

// The `corrfield` command line: gen, train, eval, viz, ablate.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "corrfield/checkpoint.hpp"
#include "corrfield/config.hpp"
#include "corrfield/corrfn.hpp"
#include "corrfield/pnm.hpp"
#include "corrfield/train.hpp"

namespace corrfield {

inline AblationOptions ablation_options(const RunConfig& c) {
  AblationOptions o;
  o.scenes = c.scene;
  o.first_seed = c.seed;
  o.count = c.count;
  o.train_count = c.train_count;
  o.model = c.model;
  o.train = c.train;
  o.train.seed = c.seed;
  return o;
}

// Linear map of values onto 0..255. A constant map becomes all 128.
struct NormalizedMap {
  std::vector<std::uint8_t> bytes;
  double min = 0, max = 0;
};

inline NormalizedMap normalize_to_bytes(const std::vector<double>& v) {
  NormalizedMap out;
  out.min = *std::min_element(v.begin(), v.end());
  out.max = *std::max_element(v.begin(), v.end());
  out.bytes.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.bytes[i] = out.max == out.min
                       ? 128
                       : static_cast<std::uint8_t>(std::lround((v[i] - out.min) / (out.max - out.min) * 255.0));
  }
  return out;
}

namespace cli {

namespace fs = std::filesystem;

namespace detail {

inline bool non_empty_dir(const fs::path& p) {
  std::error_code ec;
  return fs::is_directory(p, ec) && !fs::is_empty(p, ec);
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot write " + p.string());
  f << text;
  if (!f) throw DataError("failed writing " + p.string());
}

// Output directory policy: an existing non-empty directory needs --force.
inline void prepare_out(const std::string& out, bool force) {
  if (out.empty()) throw UsageError("--out is required");
  if (non_empty_dir(out) && !force) {
    throw UsageError("output directory " + out + " is not empty (use --force to overwrite)");
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw DataError("cannot create " + out + ": " + ec.message());
}

inline std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string train_log_csv(const std::vector<EpochStats>& epochs) {
  std::string out = "epoch,loss,mask,cate,sem\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + csv_number(e.loss) + "," + csv_number(e.mask) + "," +
           csv_number(e.cate) + "," + csv_number(e.sem) + "\n";
  }
  return out;
}

// Writes via a temporary file so a crash never leaves a torn checkpoint.
inline void save_checkpoint_atomic(const fs::path& path, Model& model) {
  const fs::path tmp = path.string() + ".tmp";
  checkpoint::save(tmp.string(), model.to_arrays());
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move checkpoint into place: " + ec.message());
}

inline double meta_value(const std::vector<NamedArray>& arrays, const std::string& key) {
  for (const auto& a : arrays)
    if (a.name == "meta." + key && a.values.size() == 1) return a.values[0];
  throw DataError("checkpoint lacks meta." + key);
}

// Architecture keys the user did not set explicitly are taken from the
// checkpoint; explicit ones must agree with it.
inline Model load_model(const RunConfig& cfg, const std::set<std::string>& explicit_keys) {
  if (cfg.checkpoint.empty()) throw UsageError("--checkpoint is required");
  const auto arrays = checkpoint::load(cfg.checkpoint);
  ModelConfig mc = cfg.model;
  auto adopt = [&](const char* key, const char* meta, std::size_t& field) {
    if (!explicit_keys.count(key)) field = static_cast<std::size_t>(meta_value(arrays, meta));
  };
  adopt("n_fourier", "terms", mc.terms);
  adopt("s_ref", "ref_side", mc.ref_side);
  adopt("channels", "channels", mc.channels);
  adopt("grid", "grid", mc.grid);
  adopt("mask_dim", "mask_dim", mc.mask_dim);
  adopt("backbone_depth", "backbone_depth", mc.backbone_depth);
  adopt("thing_classes", "thing_classes", mc.thing_classes);
  adopt("stuff_classes", "stuff_classes", mc.stuff_classes);
  if (!explicit_keys.count("use_scm")) mc.use_scm = meta_value(arrays, "use_scm") != 0.0;
  if (!explicit_keys.count("use_icm")) mc.use_icm = meta_value(arrays, "use_icm") != 0.0;
  if (!explicit_keys.count("scm_mode")) {
    mc.scm_mode = static_cast<AggregationMode>(static_cast<int>(meta_value(arrays, "scm_mode")));
  }
  if (!explicit_keys.count("positional")) {
    mc.positional = static_cast<PositionalMode>(static_cast<int>(meta_value(arrays, "positional")));
  }
  return Model::from_arrays(arrays, mc);
}

inline std::vector<SyntheticScene> load_scenes(const RunConfig& cfg) {
  if (cfg.data.empty()) throw UsageError("--data is required");
  auto scenes = load_dataset(cfg.data);
  if (cfg.count > 0 && cfg.count < scenes.size()) scenes.resize(cfg.count);
  return scenes;
}

}  // namespace detail

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline int cmd_gen(RunConfig& cfg, const std::set<std::string>& keys, bool force, Streams io) {
  for (const char* k : {"count", "seed", "out"}) {
    if (!keys.count(k)) throw UsageError(std::string("gen needs --") + k);
  }
  cfg.scene.validate();
  if (force) {
    for (const char* name : {"scenes", "dataset.meta", "resolved.cfg"}) fs::remove_all(fs::path(cfg.out) / name);
  }
  detail::prepare_out(cfg.out, force);
  write_dataset(cfg.out, cfg.scene, cfg.seed, cfg.count);
  resolved_config(cfg).save((fs::path(cfg.out) / "resolved.cfg").string());
  io.out << "wrote " << cfg.count << " scene(s) to " << cfg.out << "\n";
  return 0;
}

inline int cmd_train(RunConfig& cfg, bool force, Streams io) {
  cfg.model.validate();
  const auto scenes = detail::load_scenes(cfg);
  if (scenes.empty()) throw DataError("dataset " + cfg.data + " holds no scenes");
  detail::prepare_out(cfg.out, force);
  const fs::path out = cfg.out;
  resolved_config(cfg).save((out / "resolved.cfg").string());

  auto model = Model::init(cfg.model, cfg.seed);
  auto opt = cfg.train;
  opt.seed = cfg.seed;
  const auto ckpt = out / "checkpoint.cfld";
  detail::save_checkpoint_atomic(ckpt, model);  // epoch 0
  std::vector<EpochStats> log;
  detail::write_text(out / "train_log.csv", detail::train_log_csv(log));
  const auto result = train_model(model, scenes, opt, [&](const EpochStats& e) {
    log.push_back(e);
    detail::save_checkpoint_atomic(ckpt, model);
    detail::write_text(out / "train_log.csv", detail::train_log_csv(log));
    io.err << "epoch " << e.epoch << " loss " << detail::csv_number(e.loss) << "\n";
    return true;
  });
  if (result.diverged) {
    throw NumericalError(result.failure + "; last good checkpoint kept at " + ckpt.string());
  }
  io.out << "checkpoint " << ckpt.string() << "\n";
  return 0;
}

inline int cmd_eval(RunConfig& cfg, const std::set<std::string>& keys, bool oracle, bool force, Streams io) {
  const auto scenes = detail::load_scenes(cfg);
  PQResult pq;
  std::string name;
  if (oracle) {
    name = "oracle";
    PQAccumulator acc(cfg.model.thing_classes, cfg.model.stuff_classes);
    for (const auto& s : scenes) acc.add(scene_panoptic(s), scene_panoptic(s));
    pq = acc.result();
  } else {
    const auto model = detail::load_model(cfg, keys);
    cfg.model = model.config;
    name = "model";
    pq = evaluate_model(model, scenes).pq;
  }
  const std::string csv = std::string(kReportHeader) + "\n" + report_row(name, pq, 0.0) + "\n";
  if (!cfg.out.empty()) {
    detail::prepare_out(cfg.out, force);
    detail::write_text(fs::path(cfg.out) / "eval.csv", csv);
    resolved_config(cfg).save((fs::path(cfg.out) / "resolved.cfg").string());
  }
  io.out << csv;
  return 0;
}

inline std::pair<std::size_t, std::size_t> parse_point(const std::string& s) {
  const auto parts = kv::split(s, ',');
  if (parts.size() != 2) throw UsageError("--point expects x,y, got '" + s + "'");
  return {kv::to_u64("point", parts[0]), kv::to_u64("point", parts[1])};
}

inline int cmd_viz(RunConfig& cfg, const std::set<std::string>& keys, const std::string& point,
                   const std::string& branch, std::optional<std::uint64_t> scene_seed, bool force, Streams io) {
  if (point.empty()) throw UsageError("viz needs --point x,y");
  if (branch != "scm" && branch != "icm") throw UsageError("--branch must be scm or icm, got '" + branch + "'");
  const auto [px, py] = parse_point(point);
  const auto model = detail::load_model(cfg, keys);
  cfg.model = model.config;
  if (cfg.data.empty()) throw UsageError("--data is required");
  const auto seeds = dataset_seeds(cfg.data);
  if (seeds.empty()) throw DataError("dataset " + cfg.data + " holds no scenes");
  const auto seed = scene_seed.value_or(seeds.front());
  const auto scene = load_scene(fs::path(cfg.data) / "scenes" / std::to_string(seed));

  const auto features = model.features(scene_image(scene));
  const std::size_t h = features.dim(0), w = features.dim(1);
  if (px >= w || py >= h) {
    throw UsageError("point (" + std::to_string(px) + "," + std::to_string(py) + ") lies outside the " +
                     std::to_string(w) + "x" + std::to_string(h) + " feature map");
  }
  std::optional<CorrParamField<double>> field;
  if (branch == "scm") {
    if (!model.scm) throw UsageError("checkpoint has no SCM branch");
    field = model.scm->predict(features);
  } else {
    if (!model.icm) throw UsageError("checkpoint has no ICM correlation branch");
    field = model.icm->params.predict(features);
  }
  const auto theta = field->at(py, px);
  const auto map = correlation_map(theta, h, w);
  const auto norm = normalize_to_bytes(map.values);

  detail::prepare_out(cfg.out, force);
  const fs::path out = cfg.out;
  pnm::save((out / "corr_map.pgm").string(), Raster8{h, w, 1, norm.bytes});
  KeyValueFile side;
  side.set("branch", branch);
  side.set("scene", std::to_string(seed));
  side.set("point_x", std::to_string(px));
  side.set("point_y", std::to_string(py));
  side.set("height", std::to_string(h));
  side.set("width", std::to_string(w));
  side.set("min", kv::from_f64(norm.min));
  side.set("max", kv::from_f64(norm.max));
  side.save((out / "corr_map.meta").string());
  std::string csv = "axis,index,value\n";
  for (std::size_t x = 0; x < w; ++x) {
    csv += "hor," + std::to_string(x) + "," + kv::from_f64(eval_corr_1d(theta.hor, static_cast<double>(x), w)) + "\n";
  }
  for (std::size_t y = 0; y < h; ++y) {
    csv += "ver," + std::to_string(y) + "," + kv::from_f64(eval_corr_1d(theta.ver, static_cast<double>(y), h)) + "\n";
  }
  detail::write_text(out / "profiles.csv", csv);
  resolved_config(cfg).save((out / "resolved.cfg").string());
  io.out << "wrote " << (out / "corr_map.pgm").string() << "\n";
  return 0;
}

inline int cmd_ablate(RunConfig& cfg, bool force, Streams io) {
  cfg.model.validate();
  detail::prepare_out(cfg.out, force);
  const fs::path out = cfg.out;
  resolved_config(cfg).save((out / "resolved.cfg").string());
  const auto rows = run_ablation(ablation_options(cfg), [&](const std::string& line) { io.err << line << "\n"; });
  const auto table = ablation_csv(rows);
  detail::write_text(out / "ablation.csv", table);
  detail::write_text(out / "twins.csv", twins_csv(rows));
  io.out << table;
  return 0;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Correlation-function panoptic segmentation toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");

  struct Common {
    std::string config;
    std::map<std::string, std::string> flags;  // config key -> raw value
    std::vector<std::string> sets;
    bool force = false;
  };
  Common common;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "key=value configuration file");
    auto opt = [&](const char* flag, const char* key, const char* help) {
      sub->add_option_function<std::string>(
          flag, [&common, key](const std::string& v) { common.flags[key] = v; }, help);
    };
    opt("--out", "out", "Output directory");
    opt("--seed", "seed", "Seed (U64)");
    opt("--epochs", "epochs", "Training epochs (U32)");
    opt("--lr", "lr", "Learning rate (F64)");
    opt("--lambda", "lambda", "Semantic loss weight (F64)");
    opt("--n-fourier", "n_fourier", "Fourier level N (U32)");
    opt("--s-ref", "s_ref", "Reference grid side S (U32)");
    opt("--use-scm", "use_scm", "Enable SCM (BOOL)");
    opt("--use-icm", "use_icm", "Enable ICM (BOOL)");
    opt("--scm-mode", "scm_mode", "SCM aggregation {global|axial}");
    opt("--data", "data", "Dataset directory");
    opt("--checkpoint", "checkpoint", "Checkpoint file");
    opt("--count", "count", "Number of scenes (U64)");
    sub->add_option("--set", common.sets, "Any configuration key as key=value (repeatable)");
    sub->add_flag("--force", common.force, "Overwrite a non-empty output directory");
  };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  auto* train = app.add_subcommand("train", "Train a model on a dataset");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (PQ report)");
  auto* viz = app.add_subcommand("viz", "Dump a correlation map for one location");
  auto* ablate = app.add_subcommand("ablate", "Train and compare the six module variants");
  for (auto* sub : {gen, train, eval, viz, ablate}) add_common(sub);
  bool oracle = false;
  eval->add_flag("--oracle", oracle, "Score ground truth against itself");
  std::string point, branch = "scm";
  std::optional<std::uint64_t> scene_seed;
  viz->add_option("--point", point, "Feature-map location x,y");
  viz->add_option("--branch", branch, "scm or icm")->capture_default_str();
  viz->add_option("--scene", scene_seed, "Scene seed to visualize (default: first)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    RunConfig cfg = ablate->parsed() ? RunConfig::ablation_defaults() : RunConfig{};
    std::set<std::string> keys;
    if (!common.config.empty()) {
      const auto file = KeyValueFile::load(common.config);
      apply_config(cfg, file);
      for (const auto& [k, v] : file.entries()) keys.insert(k);
    }
    for (const auto& s : common.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      common.flags[KeyValueFile::trim(s.substr(0, eq))] = KeyValueFile::trim(s.substr(eq + 1));
    }
    for (const auto& [k, v] : common.flags) {
      set_config_value(cfg, k, v);
      keys.insert(k);
    }
    const Streams io{out, err};
    if (gen->parsed()) return cmd_gen(cfg, keys, common.force, io);
    if (train->parsed()) return cmd_train(cfg, common.force, io);
    if (eval->parsed()) return cmd_eval(cfg, keys, oracle, common.force, io);
    if (viz->parsed()) return cmd_viz(cfg, keys, point, branch, scene_seed, common.force, io);
    return cmd_ablate(cfg, common.force, io);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {  // UsageError, ShapeError
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace cli
}  // namespace corrfield
