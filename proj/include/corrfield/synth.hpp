#pragma once

// Synthetic panoptic scenes: horizontal stuff bands with flat-colored disks
// and rectangles on top. Twin mode adds two appearance-identical instances
// that can only be told apart by where they are.
//
// Every random draw comes from SplitMix64 streams forked from the scene seed:
//   fork(1)  band boundaries and band colors
//   fork(2)  thing placement, classes, sizes and colors
//   fork(3)  per-pixel stuff texture

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "corrfield/error.hpp"
#include "corrfield/kvfile.hpp"
#include "corrfield/pnm.hpp"
#include "corrfield/rng.hpp"

namespace corrfield {

inline constexpr int kVoid = -1;
inline constexpr std::uint8_t kVoidByte = 255;

enum class ShapeKind { disk, rectangle };

struct SceneConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_things = 1;
  std::size_t max_things = 3;
  bool disks = true;
  bool rectangles = true;
  double color_jitter = 0.06;
  double texture = 0.03;  // per-pixel noise amplitude on stuff
  std::size_t stuff_bands = 3;
  std::size_t thing_classes = 3;
  std::size_t stuff_classes = 3;
  bool twin_mode = false;
  double twin_separation = 0.375;  // minimum twin centroid distance / width
  std::uint64_t seed = 0;

  std::size_t num_classes() const { return thing_classes + stuff_classes; }

  void validate() const {
    if (height < 16 || width < 16) throw UsageError("scene extents must be >= 16");
    if (min_things > max_things) throw UsageError("min_things exceeds max_things");
    if (!disks && !rectangles) throw UsageError("at least one shape kind must be enabled");
    if (stuff_bands == 0 || stuff_classes == 0) {
      throw UsageError("scenes need at least one stuff band and class");
    }
    if (thing_classes == 0 && (max_things > 0 || twin_mode)) {
      throw UsageError("things requested but no thing classes");
    }
    if (thing_classes + stuff_classes > 255) throw UsageError("at most 255 categories");
    if (!(color_jitter >= 0.0) || !(texture >= 0.0)) {
      throw UsageError("color jitter and texture must be >= 0");
    }
  }
};

struct SceneInstance {
  std::vector<std::uint8_t> mask;  // H x W, 0 or 1
  int category = 0;
};

struct SyntheticScene {
  std::size_t height = 0;
  std::size_t width = 0;
  std::uint64_t seed = 0;
  std::size_t thing_classes = 0;
  std::size_t stuff_classes = 0;
  std::vector<double> image;  // H x W x 3 in [0,1]
  std::vector<int> semantic;  // H x W, kVoid for unlabeled
  std::vector<SceneInstance> instances;
  std::size_t things_requested = 0;
  std::optional<std::pair<std::size_t, std::size_t>> twins;

  bool is_thing(int category) const {
    return category >= 0 && static_cast<std::size_t>(category) < thing_classes;
  }
};

namespace synth_detail {

using Rgb = std::array<double, 3>;

inline Rgb thing_color(std::size_t cls) {
  static constexpr Rgb palette[] = {
      {0.86, 0.22, 0.18}, {0.20, 0.72, 0.28}, {0.22, 0.32, 0.90},
      {0.92, 0.80, 0.15}, {0.75, 0.25, 0.80}, {0.15, 0.80, 0.80}};
  const auto& c = palette[cls % 6];
  const double shade = 1.0 - 0.15 * static_cast<double>(cls / 6 % 4);
  return {c[0] * shade, c[1] * shade, c[2] * shade};
}

inline Rgb stuff_color(std::size_t cls) {
  static constexpr Rgb palette[] = {
      {0.62, 0.74, 0.86}, {0.58, 0.50, 0.42}, {0.34, 0.44, 0.30},
      {0.46, 0.46, 0.50}, {0.72, 0.66, 0.54}, {0.30, 0.30, 0.38}};
  const auto& c = palette[cls % 6];
  const double shade = 1.0 - 0.15 * static_cast<double>(cls / 6 % 4);
  return {c[0] * shade, c[1] * shade, c[2] * shade};
}

struct Placement {
  ShapeKind kind;
  long cx, cy;  // integer pixel center
  long rx, ry;  // disk: rx == ry == radius; rectangle: half extents
  std::size_t cls;
  Rgb color;

  bool covers(long x, long y) const {
    const long dx = x - cx, dy = y - cy;
    if (kind == ShapeKind::disk) return dx * dx + dy * dy <= rx * rx;
    return std::abs(dx) <= rx && std::abs(dy) <= ry;
  }
  // Axis-aligned bound, inclusive.
  long x0() const { return cx - rx; }
  long x1() const { return cx + rx; }
  long y0() const { return cy - ry; }
  long y1() const { return cy + ry; }
};

// Conservative separation test on bounding boxes padded by `gap` pixels.
inline bool boxes_clear(const Placement& a, const Placement& b, long gap) {
  return a.x1() + gap < b.x0() || b.x1() + gap < a.x0() || a.y1() + gap < b.y0() ||
         b.y1() + gap < a.y0();
}

inline Placement draw_shape(const SceneConfig& cfg, SplitMix64& rng) {
  Placement p{};
  const bool disk = cfg.disks && (!cfg.rectangles || rng.uniform() < 0.5);
  p.kind = disk ? ShapeKind::disk : ShapeKind::rectangle;
  const long scale = static_cast<long>(std::min(cfg.height, cfg.width));
  const long lo = std::max(2L, scale / 12), hi = std::max(lo, scale / 7);
  p.rx = rng.uniform_int(lo, hi);
  p.ry = disk ? p.rx : rng.uniform_int(lo, hi);
  p.cls = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(cfg.thing_classes) - 1));
  const Rgb base = thing_color(p.cls);
  for (std::size_t c = 0; c < 3; ++c) {
    p.color[c] = std::clamp(base[c] + rng.uniform(-cfg.color_jitter, cfg.color_jitter), 0.0, 1.0);
  }
  return p;
}

inline void draw_position(const SceneConfig& cfg, SplitMix64& rng, Placement& p) {
  const long w = static_cast<long>(cfg.width), h = static_cast<long>(cfg.height);
  p.cx = rng.uniform_int(p.rx + 1, w - 2 - p.rx);
  p.cy = rng.uniform_int(p.ry + 1, h - 2 - p.ry);
}

}  // namespace synth_detail

inline SyntheticScene generate_scene(const SceneConfig& cfg) {
  using namespace synth_detail;
  cfg.validate();
  const std::size_t h = cfg.height, w = cfg.width;
  SyntheticScene s;
  s.height = h;
  s.width = w;
  s.seed = cfg.seed;
  s.thing_classes = cfg.thing_classes;
  s.stuff_classes = cfg.stuff_classes;
  s.image.assign(h * w * 3, 0.0);
  s.semantic.assign(h * w, kVoid);

  const SplitMix64 root(cfg.seed);

  // Stuff: bands stacked top to bottom, band b always carrying stuff class
  // b mod K_stuff so the vertical order is fixed across scenes.
  SplitMix64 band_rng = root.fork(1);
  std::vector<std::size_t> cuts{0};
  const double step = static_cast<double>(h) / static_cast<double>(cfg.stuff_bands);
  for (std::size_t b = 1; b < cfg.stuff_bands; ++b) {
    const double jitter = band_rng.uniform(-step / 4.0, step / 4.0);
    const auto cut = static_cast<std::size_t>(std::lround(step * static_cast<double>(b) + jitter));
    cuts.push_back(std::clamp(cut, cuts.back() + 1, h - 1));
  }
  cuts.push_back(h);
  std::vector<Rgb> band_colors;
  for (std::size_t b = 0; b < cfg.stuff_bands; ++b) {
    const Rgb base = stuff_color(b % cfg.stuff_classes);
    Rgb c{};
    for (std::size_t k = 0; k < 3; ++k) {
      c[k] = base[k] + band_rng.uniform(-cfg.color_jitter, cfg.color_jitter);
    }
    band_colors.push_back(c);
  }
  SplitMix64 tex = root.fork(3);
  for (std::size_t b = 0; b < cfg.stuff_bands; ++b) {
    const int cls = static_cast<int>(cfg.thing_classes + b % cfg.stuff_classes);
    for (std::size_t y = cuts[b]; y < cuts[b + 1]; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        s.semantic[y * w + x] = cls;
        for (std::size_t k = 0; k < 3; ++k) {
          s.image[(y * w + x) * 3 + k] =
              std::clamp(band_colors[b][k] + tex.uniform(-cfg.texture, cfg.texture), 0.0, 1.0);
        }
      }
  }

  // Things.
  SplitMix64 rng = root.fork(2);
  std::size_t requested = static_cast<std::size_t>(
      rng.uniform_int(static_cast<long>(cfg.min_things), static_cast<long>(cfg.max_things)));
  if (cfg.twin_mode) requested = std::max<std::size_t>(requested, 2);
  s.things_requested = requested;
  constexpr int kRetries = 64;
  constexpr long kGap = 2;
  std::vector<Placement> placed;
  auto fits = [&](const Placement& p) {
    return std::all_of(placed.begin(), placed.end(),
                       [&](const Placement& q) { return boxes_clear(p, q, kGap); });
  };

  std::size_t remaining = requested;
  if (cfg.twin_mode) {
    const double min_dist = cfg.twin_separation * static_cast<double>(w);
    for (int attempt = 0; attempt < kRetries; ++attempt) {
      Placement a = draw_shape(cfg, rng);
      draw_position(cfg, rng, a);
      Placement b = a;
      bool ok = false;
      for (int inner = 0; inner < kRetries && !ok; ++inner) {
        draw_position(cfg, rng, b);
        const double d = std::hypot(static_cast<double>(a.cx - b.cx), static_cast<double>(a.cy - b.cy));
        ok = d >= min_dist && boxes_clear(a, b, kGap);
      }
      if (ok) {
        placed.push_back(a);
        placed.push_back(b);
        s.twins = std::make_pair(std::size_t{0}, std::size_t{1});
        break;
      }
    }
    remaining -= 2;
  }
  for (std::size_t t = 0; t < remaining; ++t) {
    for (int attempt = 0; attempt < kRetries; ++attempt) {
      Placement p = draw_shape(cfg, rng);
      draw_position(cfg, rng, p);
      if (fits(p)) {
        placed.push_back(p);
        break;
      }
    }
  }

  for (const auto& p : placed) {
    SceneInstance inst;
    inst.category = static_cast<int>(p.cls);
    inst.mask.assign(h * w, 0);
    for (long y = std::max(0L, p.y0()); y <= std::min(static_cast<long>(h) - 1, p.y1()); ++y)
      for (long x = std::max(0L, p.x0()); x <= std::min(static_cast<long>(w) - 1, p.x1()); ++x) {
        if (!p.covers(x, y)) continue;
        const std::size_t i = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
        inst.mask[i] = 1;
        s.semantic[i] = inst.category;
        for (std::size_t k = 0; k < 3; ++k) s.image[i * 3 + k] = p.color[k];
      }
    s.instances.push_back(std::move(inst));
  }
  return s;
}

// --- disk layout -------------------------------------------------------------
//
//   <dir>/image.ppm     P6, channel value round(255 * v)
//   <dir>/semantic.pgm  P5, category id, 255 for void
//   <dir>/inst_<k>.pgm  P5, 255 inside the instance, 0 elsewhere
//   <dir>/scene.meta    key=value manifest

inline KeyValueFile scene_manifest(const SyntheticScene& s) {
  KeyValueFile m;
  m.set("format", "corrfield-scene-1");
  m.set("seed", std::to_string(s.seed));
  m.set("height", std::to_string(s.height));
  m.set("width", std::to_string(s.width));
  m.set("thing_classes", std::to_string(s.thing_classes));
  m.set("stuff_classes", std::to_string(s.stuff_classes));
  m.set("things_requested", std::to_string(s.things_requested));
  m.set("things_placed", std::to_string(s.instances.size()));
  std::string cats;
  for (std::size_t k = 0; k < s.instances.size(); ++k) {
    if (k) cats += ",";
    cats += std::to_string(s.instances[k].category);
  }
  m.set("categories", cats);
  m.set("twins", s.twins ? std::to_string(s.twins->first) + "," + std::to_string(s.twins->second)
                         : "none");
  return m;
}

inline void save_scene(const std::filesystem::path& dir, const SyntheticScene& s) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  const std::size_t n = s.height * s.width;

  Raster8 img{s.height, s.width, 3, std::vector<std::uint8_t>(n * 3)};
  for (std::size_t i = 0; i < n * 3; ++i) {
    img.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image[i], 0.0, 1.0) * 255.0));
  }
  pnm::save((dir / "image.ppm").string(), img);

  Raster8 sem{s.height, s.width, 1, std::vector<std::uint8_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    sem.data[i] = s.semantic[i] == kVoid ? kVoidByte : static_cast<std::uint8_t>(s.semantic[i]);
  }
  pnm::save((dir / "semantic.pgm").string(), sem);

  for (std::size_t k = 0; k < s.instances.size(); ++k) {
    Raster8 m{s.height, s.width, 1, std::vector<std::uint8_t>(n)};
    for (std::size_t i = 0; i < n; ++i) m.data[i] = s.instances[k].mask[i] ? 255 : 0;
    pnm::save((dir / ("inst_" + std::to_string(k) + ".pgm")).string(), m);
  }
  scene_manifest(s).save((dir / "scene.meta").string());
}

inline SyntheticScene load_scene(const std::filesystem::path& dir) {
  const auto meta_path = (dir / "scene.meta").string();
  const auto meta = KeyValueFile::load(meta_path);
  auto num = [&](const char* key) {
    try {
      return kv::to_u64(key, meta.require(key));
    } catch (const UsageError& e) {
      throw DataError(meta_path + ": " + e.what());
    }
  };
  if (meta.require("format") != "corrfield-scene-1") {
    throw DataError(meta_path + ": unknown format '" + meta.require("format") + "'");
  }
  SyntheticScene s;
  s.seed = num("seed");
  s.height = num("height");
  s.width = num("width");
  s.thing_classes = num("thing_classes");
  s.stuff_classes = num("stuff_classes");
  s.things_requested = num("things_requested");
  const std::size_t placed = num("things_placed");
  const auto cats = kv::split(meta.require("categories"), ',');
  if (cats.size() != placed) {
    throw DataError(meta_path + ": categories lists " + std::to_string(cats.size()) +
                    " entries but things_placed is " + std::to_string(placed));
  }
  const auto& twins = meta.require("twins");
  if (twins != "none") {
    const auto parts = kv::split(twins, ',');
    if (parts.size() != 2) throw DataError(meta_path + ": malformed twins '" + twins + "'");
    try {
      s.twins = std::make_pair(kv::to_u64("twins", parts[0]), kv::to_u64("twins", parts[1]));
    } catch (const UsageError& e) {
      throw DataError(meta_path + ": " + e.what());
    }
    if (s.twins->first >= placed || s.twins->second >= placed) {
      throw DataError(meta_path + ": twin index out of range");
    }
  }

  const std::size_t n = s.height * s.width;
  auto check_dims = [&](const Raster8& r, std::size_t channels, const std::string& path) {
    if (r.height != s.height || r.width != s.width || r.channels != channels) {
      throw DataError(path + ": dimensions disagree with scene.meta");
    }
  };
  const auto img_path = (dir / "image.ppm").string();
  const auto img = pnm::load(img_path);
  check_dims(img, 3, img_path);
  s.image.resize(n * 3);
  for (std::size_t i = 0; i < n * 3; ++i) s.image[i] = img.data[i] / 255.0;

  const auto sem_path = (dir / "semantic.pgm").string();
  const auto sem = pnm::load(sem_path);
  check_dims(sem, 1, sem_path);
  s.semantic.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = sem.data[i];
    if (v == kVoidByte) {
      s.semantic[i] = kVoid;
    } else if (v >= s.thing_classes + s.stuff_classes) {
      throw DataError(sem_path + ": category " + std::to_string(v) + " out of range");
    } else {
      s.semantic[i] = v;
    }
  }

  for (std::size_t k = 0; k < placed; ++k) {
    const auto path = (dir / ("inst_" + std::to_string(k) + ".pgm")).string();
    const auto m = pnm::load(path);
    check_dims(m, 1, path);
    SceneInstance inst;
    try {
      inst.category = static_cast<int>(kv::to_u64("categories", cats[k]));
    } catch (const UsageError& e) {
      throw DataError(meta_path + ": " + e.what());
    }
    if (!s.is_thing(inst.category)) {
      throw DataError(meta_path + ": instance " + std::to_string(k) + " has non-thing category");
    }
    inst.mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) inst.mask[i] = m.data[i] > 127 ? 1 : 0;
    s.instances.push_back(std::move(inst));
  }
  return s;
}

// --- datasets ------------------------------------------------------------------
//
//   <root>/dataset.meta       first_seed, count and the scene config
//   <root>/scenes/<seed>/...  one directory per scene

inline KeyValueFile scene_config_entries(const SceneConfig& c) {
  KeyValueFile m;
  m.set("height", std::to_string(c.height));
  m.set("width", std::to_string(c.width));
  m.set("min_things", std::to_string(c.min_things));
  m.set("max_things", std::to_string(c.max_things));
  m.set("disks", kv::from_bool(c.disks));
  m.set("rectangles", kv::from_bool(c.rectangles));
  m.set("color_jitter", kv::from_f64(c.color_jitter));
  m.set("texture", kv::from_f64(c.texture));
  m.set("stuff_bands", std::to_string(c.stuff_bands));
  m.set("thing_classes", std::to_string(c.thing_classes));
  m.set("stuff_classes", std::to_string(c.stuff_classes));
  m.set("twin_mode", kv::from_bool(c.twin_mode));
  m.set("twin_separation", kv::from_f64(c.twin_separation));
  return m;
}

inline std::vector<std::uint64_t> dataset_seeds(const std::filesystem::path& root) {
  const auto meta_path = (root / "dataset.meta").string();
  const auto meta = KeyValueFile::load(meta_path);
  try {
    const auto first = kv::to_u64("first_seed", meta.require("first_seed"));
    const auto count = kv::to_u64("count", meta.require("count"));
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t k = 0; k < count; ++k) seeds.push_back(first + k);
    return seeds;
  } catch (const UsageError& e) {
    throw DataError(meta_path + ": " + e.what());
  }
}

inline std::vector<SyntheticScene> load_dataset(const std::filesystem::path& root) {
  std::vector<SyntheticScene> out;
  for (auto seed : dataset_seeds(root)) {
    out.push_back(load_scene(root / "scenes" / std::to_string(seed)));
  }
  return out;
}

inline void write_dataset(const std::filesystem::path& root, SceneConfig cfg, std::uint64_t first_seed,
                          std::uint64_t count) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw DataError("cannot create " + root.string() + ": " + ec.message());
  KeyValueFile meta;
  meta.set("format", "corrfield-dataset-1");
  meta.set("first_seed", std::to_string(first_seed));
  meta.set("count", std::to_string(count));
  const auto entries = scene_config_entries(cfg);
  for (const auto& [k, v] : entries.entries()) meta.set(k, v);
  for (std::uint64_t k = 0; k < count; ++k) {
    cfg.seed = first_seed + k;
    save_scene(root / "scenes" / std::to_string(cfg.seed), generate_scene(cfg));
  }
  meta.save((root / "dataset.meta").string());
}

}  // namespace corrfield
