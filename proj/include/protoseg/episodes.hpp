#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/pgm.hpp"
#include "protoseg/rng.hpp"
#include "protoseg/tensor.hpp"

namespace protoseg {

// Weak scribble annotations mark pixels outside any stroke with this sentinel;
// dense masks never contain it.
inline constexpr std::uint8_t kUnknownLabel = 255;

// Integer label grid paired with an image. 0 is background, 1..C are
// episode-local foreground slots.
struct LabelMask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> labels;

  LabelMask() = default;
  LabelMask(std::size_t height, std::size_t width, std::uint8_t fill = 0)
      : h(height), w(width), labels(height * width, fill) {}

  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * w + x]; }
  void set(std::size_t y, std::size_t x, std::uint8_t v) { labels[y * w + x] = v; }
  std::size_t size() const { return labels.size(); }

  std::size_t count(std::uint8_t label) const {
    std::size_t n = 0;
    for (std::uint8_t l : labels) n += (l == label) ? 1 : 0;
    return n;
  }

  bool operator==(const LabelMask& o) const = default;
};

struct SamplePair {
  Tensor image;    // [1,H,W], values on the 1/255 grid
  LabelMask mask;  // H x W
};

// One C-way K-shot task. Slot c (1-based) carries global class classes[c-1];
// labels inside all masks are episode-local.
struct Episode {
  std::vector<int> classes;                       // size C
  std::vector<std::vector<SamplePair>> support;   // [C][K]
  std::vector<SamplePair> query;                  // n_query

  std::size_t ways() const { return classes.size(); }
  std::size_t shots() const { return support.empty() ? 0 : support[0].size(); }
};

struct ClassSplit {
  std::vector<int> seen;
  std::vector<int> unseen;
};

struct ShapeDatasetConfig {
  int num_classes = 12;
  int image_size = 32;
  double noise_std = 0.1;
  double fg_intensity_min = 0.45;
  double fg_intensity_max = 0.95;
  double bg_intensity_min = 0.05;
  double bg_intensity_max = 0.55;
  double min_shape_fraction = 0.05;

  void validate() const {
    if (num_classes < 1 || num_classes > 200) {
      throw std::invalid_argument("dataset: num_classes must be in [1,200], got " +
                                  std::to_string(num_classes));
    }
    if (image_size < 8) throw std::invalid_argument("dataset: image_size must be >= 8");
    if (noise_std < 0.0) throw std::invalid_argument("dataset: noise_std must be >= 0");
    auto range_ok = [](double lo, double hi) { return 0.0 <= lo && lo <= hi && hi <= 1.0; };
    if (!range_ok(fg_intensity_min, fg_intensity_max) ||
        !range_ok(bg_intensity_min, bg_intensity_max)) {
      throw std::invalid_argument("dataset: intensity ranges must satisfy 0 <= lo <= hi <= 1");
    }
    if (!(min_shape_fraction > 0.0 && min_shape_fraction <= 0.5)) {
      throw std::invalid_argument("dataset: min_shape_fraction must be in (0, 0.5]");
    }
  }
};

namespace shapes {

// The 12 shape families backing the synthetic classes. Class ids map onto
// families modulo 12.
enum class Family : int {
  kDisk = 0,
  kSquare,
  kTriangle,
  kRing,
  kCross,
  kStar,
  kHBar,
  kVBar,
  kLShape,
  kTShape,
  kDiamond,
  kCheckerPatch,
};

inline constexpr int kFamilyCount = 12;

struct Geometry {
  Family family;
  double cx, cy;     // center, pixel units
  double radius;     // characteristic half-extent, pixel units
  double angle;      // radians
};

inline bool point_in_polygon(double x, double y, const std::vector<double>& vx,
                             const std::vector<double>& vy) {
  bool inside = false;
  const std::size_t n = vx.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    if ((vy[i] > y) != (vy[j] > y) &&
        x < (vx[j] - vx[i]) * (y - vy[i]) / (vy[j] - vy[i]) + vx[i]) {
      inside = !inside;
    }
  }
  return inside;
}

// Unit-space membership test; (ux, uy) is the pixel position in the shape's
// rotated, radius-normalized frame.
inline bool family_contains(Family f, double ux, double uy) {
  const double r2 = ux * ux + uy * uy;
  switch (f) {
    case Family::kDisk:
      return r2 <= 1.0;
    case Family::kSquare:
      return std::fabs(ux) <= 1.0 && std::fabs(uy) <= 1.0;
    case Family::kTriangle: {
      static const std::vector<double> tx = {0.0, 0.99, -0.99};
      static const std::vector<double> ty = {-1.15, 0.85, 0.85};
      return point_in_polygon(ux, uy, tx, ty);
    }
    case Family::kRing:
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case Family::kCross:
      return (std::fabs(ux) <= 0.34 && std::fabs(uy) <= 1.0) ||
             (std::fabs(uy) <= 0.34 && std::fabs(ux) <= 1.0);
    case Family::kStar: {
      static const std::vector<std::pair<double, double>> verts = [] {
        std::vector<std::pair<double, double>> v;
        for (int i = 0; i < 10; ++i) {
          const double rad = (i % 2 == 0) ? 1.15 : 0.48;
          const double a = -1.5707963267948966 + i * 0.62831853071795862;
          v.emplace_back(rad * std::cos(a), rad * std::sin(a));
        }
        return v;
      }();
      static const std::vector<double> sx = [] {
        std::vector<double> x;
        for (auto& p : verts) x.push_back(p.first);
        return x;
      }();
      static const std::vector<double> sy = [] {
        std::vector<double> y;
        for (auto& p : verts) y.push_back(p.second);
        return y;
      }();
      return point_in_polygon(ux, uy, sx, sy);
    }
    case Family::kHBar:
      return std::fabs(ux) <= 1.25 && std::fabs(uy) <= 0.3;
    case Family::kVBar:
      return std::fabs(ux) <= 0.3 && std::fabs(uy) <= 1.25;
    case Family::kLShape:
      return std::fabs(ux) <= 1.0 && std::fabs(uy) <= 1.0 && !(ux > -0.15 && uy < 0.15);
    case Family::kTShape:
      return (std::fabs(ux) <= 1.0 && uy >= -1.0 && uy <= -0.35) ||
             (std::fabs(ux) <= 0.33 && uy > -0.35 && uy <= 1.0);
    case Family::kDiamond:
      return std::fabs(ux) + std::fabs(uy) <= 1.25;
    case Family::kCheckerPatch:
      return std::fabs(ux) <= 1.0 && std::fabs(uy) <= 1.0;
  }
  return false;
}

// Approximate area of each family in units of radius^2, used to aim sampled
// radii at a target coverage before the exact pixel-count check.
inline double family_area_coefficient(Family f) {
  switch (f) {
    case Family::kDisk: return 3.14159;
    case Family::kSquare: return 4.0;
    case Family::kTriangle: return 1.98;
    case Family::kRing: return 2.19;
    case Family::kCross: return 2.26;
    case Family::kStar: return 1.55;
    case Family::kHBar: return 1.5;
    case Family::kVBar: return 1.5;
    case Family::kLShape: return 2.67;
    case Family::kTShape: return 2.19;
    case Family::kDiamond: return 3.125;
    case Family::kCheckerPatch: return 4.0;
  }
  return 3.0;
}

// Small orientation jitter keeps families distinguishable (square vs diamond,
// horizontal vs vertical bar).
inline double family_angle(Family f, Rng& rng) {
  const double deg = 0.017453292519943295;
  switch (f) {
    case Family::kDisk:
    case Family::kRing:
    case Family::kCheckerPatch:
      return 0.0;
    case Family::kStar:
      return rng.uniform(-36.0 * deg, 36.0 * deg);
    case Family::kHBar:
    case Family::kVBar:
      return rng.uniform(-5.0 * deg, 5.0 * deg);
    case Family::kTriangle:
      return rng.uniform(-15.0 * deg, 15.0 * deg);
    default:
      return rng.uniform(-10.0 * deg, 10.0 * deg);
  }
}

}  // namespace shapes

// Renders one instance of the class's shape family at random position, scale
// and orientation. The mask marks exactly the rendered shape pixels and covers
// between min_shape_fraction and half of the image; geometry is resampled a
// bounded number of times until that holds. Image intensities are quantized to
// the 1/255 grid so a PGM round trip is lossless.
inline SamplePair render_instance(int class_id, std::uint64_t rng_seed,
                                  const ShapeDatasetConfig& cfg) {
  cfg.validate();
  if (class_id < 0 || class_id >= cfg.num_classes) {
    throw std::invalid_argument("render_instance: class_id " + std::to_string(class_id) +
                                " out of range [0," + std::to_string(cfg.num_classes) + ")");
  }
  const auto family = static_cast<shapes::Family>(class_id % shapes::kFamilyCount);
  const auto s = static_cast<std::size_t>(cfg.image_size);
  const double sd = static_cast<double>(cfg.image_size);

  Rng rng(derive_seed(rng_seed, 0x5ca1ab1eull + static_cast<std::uint64_t>(class_id)));
  const double fg = rng.uniform(cfg.fg_intensity_min, cfg.fg_intensity_max);
  const double bg = rng.uniform(cfg.bg_intensity_min, cfg.bg_intensity_max);

  LabelMask mask(s, s);
  const double coeff = shapes::family_area_coefficient(family);
  const std::size_t total = s * s;
  const auto min_area = static_cast<std::size_t>(std::ceil(cfg.min_shape_fraction * total));
  const std::size_t max_area = total / 2;

  shapes::Geometry geom{};
  bool placed = false;
  for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
    const double frac = rng.uniform(std::max(cfg.min_shape_fraction * 1.3, 0.07), 0.32);
    geom.family = family;
    geom.radius = std::sqrt(frac * sd * sd / coeff);
    geom.cx = rng.uniform(0.32 * sd, 0.68 * sd);
    geom.cy = rng.uniform(0.32 * sd, 0.68 * sd);
    geom.angle = shapes::family_angle(family, rng);

    const double ca = std::cos(geom.angle), sa = std::sin(geom.angle);
    std::fill(mask.labels.begin(), mask.labels.end(), 0);
    std::size_t area = 0;
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double dx = (static_cast<double>(x) + 0.5) - geom.cx;
        const double dy = (static_cast<double>(y) + 0.5) - geom.cy;
        const double ux = (dx * ca + dy * sa) / geom.radius;
        const double uy = (-dx * sa + dy * ca) / geom.radius;
        if (shapes::family_contains(family, ux, uy)) {
          mask.set(y, x, 1);
          ++area;
        }
      }
    }
    placed = area >= min_area && area <= max_area;
  }
  if (!placed) {
    throw std::runtime_error("render_instance: could not place class " + std::to_string(class_id) +
                             " within the area constraint after 64 attempts");
  }

  // checker patches alternate between the foreground intensity and a mix
  // leaning toward it, keeping every cell on the foreground side
  const double fg_alt = 0.7 * fg + 0.3 * bg;
  const double cell = std::max(2.0, geom.radius / 2.0);

  std::vector<double> image(total);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      double v = bg;
      if (mask.at(y, x)) {
        v = fg;
        if (family == shapes::Family::kCheckerPatch) {
          const auto ix = static_cast<long>(std::floor((static_cast<double>(x) - geom.cx) / cell));
          const auto iy = static_cast<long>(std::floor((static_cast<double>(y) - geom.cy) / cell));
          if (((ix + iy) % 2 + 2) % 2 == 1) v = fg_alt;
        }
      }
      image[y * s + x] = v;
    }
  }
  for (double& v : image) {
    if (cfg.noise_std > 0.0) v += rng.normal(0.0, cfg.noise_std);
    v = std::clamp(v, 0.0, 1.0);
    v = std::round(v * 255.0) / 255.0;
  }
  return SamplePair{Tensor({1, s, s}, std::move(image)), std::move(mask)};
}

// Deterministic disjoint partition of class ids into seen/unseen.
inline ClassSplit make_split(int num_classes, double unseen_fraction, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("make_split: need at least 2 classes");
  if (!(unseen_fraction > 0.0 && unseen_fraction < 1.0)) {
    throw std::invalid_argument("make_split: unseen_fraction must be in (0,1), got " +
                                std::to_string(unseen_fraction));
  }
  auto n_unseen = static_cast<int>(std::lround(unseen_fraction * num_classes));
  n_unseen = std::clamp(n_unseen, 1, num_classes - 1);
  std::vector<int> ids(static_cast<std::size_t>(num_classes));
  for (int i = 0; i < num_classes; ++i) ids[static_cast<std::size_t>(i)] = i;
  Rng rng(derive_seed(seed, 0x5b111));
  rng.shuffle(ids);
  ClassSplit split;
  split.unseen.assign(ids.begin(), ids.begin() + n_unseen);
  split.seen.assign(ids.begin() + n_unseen, ids.end());
  std::sort(split.seen.begin(), split.seen.end());
  std::sort(split.unseen.begin(), split.unseen.end());
  return split;
}

// Samples a C-way K-shot episode from the given class pool. Every support
// image holds one instance of its slot's class; every query image holds one
// instance of a uniformly chosen episode class. Labels are episode-local.
inline Episode sample_episode(const std::vector<int>& class_pool, int ways, int shots,
                              int n_query, std::uint64_t seed, const ShapeDatasetConfig& cfg) {
  if (ways < 1 || shots < 1 || n_query < 1) {
    throw std::invalid_argument("sample_episode: ways, shots and n_query must be positive");
  }
  if (static_cast<std::size_t>(ways) > class_pool.size()) {
    throw std::invalid_argument("sample_episode: split part has " +
                                std::to_string(class_pool.size()) + " classes, need " +
                                std::to_string(ways));
  }
  Episode ep;
  std::vector<int> pool = class_pool;
  Rng rng(derive_seed(seed, 0xe915));
  rng.shuffle(pool);
  ep.classes.assign(pool.begin(), pool.begin() + ways);

  ep.support.resize(static_cast<std::size_t>(ways));
  for (int c = 0; c < ways; ++c) {
    auto& slot = ep.support[static_cast<std::size_t>(c)];
    slot.reserve(static_cast<std::size_t>(shots));
    for (int k = 0; k < shots; ++k) {
      SamplePair pair = render_instance(
          ep.classes[static_cast<std::size_t>(c)],
          derive_seed(seed, 1000 + static_cast<std::uint64_t>(c) * static_cast<std::uint64_t>(shots) +
                                static_cast<std::uint64_t>(k)),
          cfg);
      for (std::uint8_t& l : pair.mask.labels) {
        if (l == 1) l = static_cast<std::uint8_t>(c + 1);
      }
      slot.push_back(std::move(pair));
    }
  }

  ep.query.reserve(static_cast<std::size_t>(n_query));
  for (int i = 0; i < n_query; ++i) {
    const int slot = static_cast<int>(rng.uniform_int(0, ways - 1));
    SamplePair pair = render_instance(ep.classes[static_cast<std::size_t>(slot)],
                                      derive_seed(seed, 2000 + static_cast<std::uint64_t>(i)), cfg);
    for (std::uint8_t& l : pair.mask.labels) {
      if (l == 1) l = static_cast<std::uint8_t>(slot + 1);
    }
    ep.query.push_back(std::move(pair));
  }
  return ep;
}

// Horizontal flip of an image/mask pair, applied jointly (augmentation).
inline SamplePair flip_horizontal(const SamplePair& p) {
  const std::size_t h = p.mask.h, w = p.mask.w;
  std::vector<double> img(p.image.data());
  LabelMask mask = p.mask;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w / 2; ++x) {
      std::swap(img[y * w + x], img[y * w + (w - 1 - x)]);
      std::swap(mask.labels[y * w + x], mask.labels[y * w + (w - 1 - x)]);
    }
  }
  return SamplePair{Tensor(p.image.shape(), std::move(img)), std::move(mask)};
}

// --- on-disk episode format -------------------------------------------------
// One directory per episode; images and masks as binary PGM, mask pixel value
// equals the label id. A `meta` text file records class ids and the seed.

inline std::vector<std::uint8_t> image_to_bytes(const Tensor& image) {
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(image[i], 0.0, 1.0);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return bytes;
}

inline Tensor bytes_to_image(const std::vector<std::uint8_t>& bytes, std::size_t h, std::size_t w) {
  std::vector<double> data(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) data[i] = static_cast<double>(bytes[i]) / 255.0;
  return Tensor({1, h, w}, std::move(data));
}

inline void save_episode(const Episode& ep, const std::string& dir, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto write_pair = [&](const SamplePair& p, const std::string& stem) {
    write_pgm(dir + "/" + stem + ".pgm", p.mask.w, p.mask.h, image_to_bytes(p.image));
    write_pgm(dir + "/" + stem + "_mask.pgm", p.mask.w, p.mask.h, p.mask.labels);
  };
  for (std::size_t c = 0; c < ep.support.size(); ++c) {
    for (std::size_t k = 0; k < ep.support[c].size(); ++k) {
      write_pair(ep.support[c][k], "support_c" + std::to_string(c + 1) + "_k" + std::to_string(k));
    }
  }
  for (std::size_t i = 0; i < ep.query.size(); ++i) {
    write_pair(ep.query[i], "query_" + std::to_string(i));
  }
  std::ofstream meta(dir + "/meta");
  if (!meta) throw std::runtime_error("save_episode: cannot write " + dir + "/meta");
  meta << "classes =";
  for (int c : ep.classes) meta << " " << c;
  meta << "\nseed = " << seed << "\nways = " << ep.classes.size()
       << "\nshots = " << ep.support[0].size() << "\nn_query = " << ep.query.size()
       << "\nimage_size = " << ep.query[0].mask.h << "\n";
}

inline Episode load_episode(const std::string& dir) {
  std::ifstream meta(dir + "/meta");
  if (!meta) throw std::runtime_error("load_episode: cannot open " + dir + "/meta");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string v) {
      const auto b = v.find_first_not_of(" \t");
      const auto e = v.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  for (const char* key : {"classes", "ways", "shots", "n_query"}) {
    if (!kv.count(key)) throw std::runtime_error("load_episode: meta missing key '" + std::string(key) + "'");
  }
  Episode ep;
  {
    std::istringstream cs(kv["classes"]);
    int c;
    while (cs >> c) ep.classes.push_back(c);
  }
  const int ways = std::stoi(kv["ways"]);
  const int shots = std::stoi(kv["shots"]);
  const int n_query = std::stoi(kv["n_query"]);
  if (ways != static_cast<int>(ep.classes.size())) {
    throw std::runtime_error("load_episode: ways does not match class list in " + dir);
  }
  const auto read_pair = [&](const std::string& stem) {
    std::size_t w = 0, h = 0;
    const auto img = read_pgm(dir + "/" + stem + ".pgm", w, h);
    std::size_t mw = 0, mh = 0;
    auto lbl = read_pgm(dir + "/" + stem + "_mask.pgm", mw, mh);
    if (mw != w || mh != h) throw std::runtime_error("load_episode: image/mask size mismatch for " + stem);
    LabelMask mask(h, w);
    mask.labels = std::move(lbl);
    return SamplePair{bytes_to_image(img, h, w), std::move(mask)};
  };
  ep.support.resize(static_cast<std::size_t>(ways));
  for (int c = 0; c < ways; ++c) {
    for (int k = 0; k < shots; ++k) {
      ep.support[static_cast<std::size_t>(c)].push_back(
          read_pair("support_c" + std::to_string(c + 1) + "_k" + std::to_string(k)));
    }
  }
  for (int i = 0; i < n_query; ++i) ep.query.push_back(read_pair("query_" + std::to_string(i)));
  return ep;
}

}  // namespace protoseg
