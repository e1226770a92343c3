#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/annotations.hpp"
#include "protoseg/encoder.hpp"
#include "protoseg/episodes.hpp"
#include "protoseg/eval.hpp"
#include "protoseg/trainer.hpp"

namespace protoseg {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Split/probe knobs that belong to the dataset and eval sections but not to
// the library-level config structs.
struct RunConfig {
  ShapeDatasetConfig dataset;
  double unseen_fraction = 1.0 / 3.0;
  std::uint64_t split_seed = 7;

  EncoderConfig encoder;
  TrainConfig train;
  EvalConfig eval;
  bool probe_alignment = false;
  int probe_episodes = 200;

  ClassSplit split() const { return make_split(dataset.num_classes, unseen_fraction, split_seed); }

  void validate() const {
    dataset.validate();
    encoder.validate();
    train.validate();
    eval.validate();
    if (probe_episodes < 1) throw ConfigError("eval: probe_episodes must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: bad numeric value '" + v + "' for key '" + key + "'");
  }
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer value '" + v + "' for key '" + key + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  const std::int64_t i = parse_int(key, v);
  if (i < 0) throw ConfigError("config: key '" + key + "' must be non-negative");
  return static_cast<std::uint64_t>(i);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: bad boolean value '" + v + "' for key '" + key + "'");
}

inline MetricConfig::Distance parse_distance(const std::string& v) {
  if (v == "cosine") return MetricConfig::Distance::kCosine;
  if (v == "squared_euclidean") return MetricConfig::Distance::kSquaredEuclidean;
  throw ConfigError("config: distance must be 'cosine' or 'squared_euclidean', got '" + v + "'");
}

inline AnnotationKind parse_annotation(const std::string& v) {
  if (v == "dense") return AnnotationKind::kDense;
  if (v == "scribble") return AnnotationKind::kScribble;
  if (v == "bbox") return AnnotationKind::kBbox;
  throw ConfigError("config: annotation kind must be dense|scribble|bbox, got '" + v + "'");
}

// "out:pool_stride:dilation, ..." e.g. "16:2:1, 32:2:1, 32:1:2"
inline std::vector<EncoderBlock> parse_blocks(const std::string& v) {
  std::vector<EncoderBlock> blocks;
  std::istringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    EncoderBlock b{};
    if (std::sscanf(item.c_str(), "%d:%d:%d", &b.out_channels, &b.pool_stride, &b.dilation) != 3) {
      throw ConfigError("config: bad encoder block '" + item + "', expected out:stride:dilation");
    }
    blocks.push_back(b);
  }
  if (blocks.empty()) throw ConfigError("config: encoder blocks list is empty");
  return blocks;
}

}  // namespace detail

// Strict sectioned key = value parser: unknown sections or keys are errors so
// hyperparameter typos cannot pass silently.
inline void apply_config_line(RunConfig& cfg, const std::string& section, const std::string& key,
                              const std::string& value) {
  using namespace detail;
  const std::string full = section + "." + key;

  if (section == "dataset") {
    if (key == "num_classes") cfg.dataset.num_classes = static_cast<int>(parse_int(full, value));
    else if (key == "image_size") cfg.dataset.image_size = static_cast<int>(parse_int(full, value));
    else if (key == "noise_std") cfg.dataset.noise_std = parse_double(full, value);
    else if (key == "fg_intensity_min") cfg.dataset.fg_intensity_min = parse_double(full, value);
    else if (key == "fg_intensity_max") cfg.dataset.fg_intensity_max = parse_double(full, value);
    else if (key == "bg_intensity_min") cfg.dataset.bg_intensity_min = parse_double(full, value);
    else if (key == "bg_intensity_max") cfg.dataset.bg_intensity_max = parse_double(full, value);
    else if (key == "min_shape_fraction") cfg.dataset.min_shape_fraction = parse_double(full, value);
    else if (key == "unseen_fraction") cfg.unseen_fraction = parse_double(full, value);
    else if (key == "split_seed") cfg.split_seed = parse_u64(full, value);
    else throw ConfigError("config: unknown key '" + key + "' in section [dataset]");
    return;
  }
  if (section == "encoder") {
    if (key == "in_channels") cfg.encoder.in_channels = static_cast<int>(parse_int(full, value));
    else if (key == "blocks") cfg.encoder.blocks = parse_blocks(value);
    else throw ConfigError("config: unknown key '" + key + "' in section [encoder]");
    return;
  }
  if (section == "train") {
    if (key == "iterations") cfg.train.iterations = parse_u64(full, value);
    else if (key == "lr") cfg.train.lr = parse_double(full, value);
    else if (key == "momentum") cfg.train.momentum = parse_double(full, value);
    else if (key == "weight_decay") cfg.train.weight_decay = parse_double(full, value);
    else if (key == "lr_decay_factor") cfg.train.lr_decay_factor = parse_double(full, value);
    else if (key == "lr_decay_every") cfg.train.lr_decay_every = parse_u64(full, value);
    else if (key == "lambda_par") cfg.train.lambda_par = parse_double(full, value);
    else if (key == "alpha") cfg.train.alpha = parse_double(full, value);
    else if (key == "distance") cfg.train.distance = parse_distance(value);
    else if (key == "ways") cfg.train.ways = static_cast<int>(parse_int(full, value));
    else if (key == "shots") cfg.train.shots = static_cast<int>(parse_int(full, value));
    else if (key == "n_query") cfg.train.n_query = static_cast<int>(parse_int(full, value));
    else if (key == "hflip_augment") cfg.train.hflip_augment = parse_bool(full, value);
    else if (key == "seed") cfg.train.seed = parse_u64(full, value);
    else if (key == "checkpoint_every") cfg.train.checkpoint_every = parse_u64(full, value);
    else throw ConfigError("config: unknown key '" + key + "' in section [train]");
    return;
  }
  if (section == "eval") {
    if (key == "episodes") cfg.eval.episodes_per_run = static_cast<int>(parse_int(full, value));
    else if (key == "runs") cfg.eval.runs = static_cast<int>(parse_int(full, value));
    else if (key == "seed") cfg.eval.base_seed = parse_u64(full, value);
    else if (key == "ways") cfg.eval.ways = static_cast<int>(parse_int(full, value));
    else if (key == "shots") cfg.eval.shots = static_cast<int>(parse_int(full, value));
    else if (key == "n_query") cfg.eval.n_query = static_cast<int>(parse_int(full, value));
    else if (key == "probe_alignment") cfg.probe_alignment = parse_bool(full, value);
    else if (key == "probe_episodes") cfg.probe_episodes = static_cast<int>(parse_int(full, value));
    else throw ConfigError("config: unknown key '" + key + "' in section [eval]");
    return;
  }
  if (section == "annotations") {
    if (key == "kind") cfg.eval.annotation = parse_annotation(value);
    else if (key == "strokes") cfg.eval.scribble_strokes = static_cast<int>(parse_int(full, value));
    else throw ConfigError("config: unknown key '" + key + "' in section [annotations]");
    return;
  }
  throw ConfigError("config: unknown section [" + section + "]");
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto comment = line.find('#');
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("config: malformed section header at line " + std::to_string(lineno));
      }
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (section.empty()) {
      throw ConfigError("config: key '" + key + "' appears before any [section]");
    }
    apply_config_line(cfg, section, key, value);
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Canonical echo of the effective configuration, written into every command's
// output directory for provenance.
inline std::string config_echo(const RunConfig& cfg) {
  std::ostringstream os;
  char buf[160];
  auto put = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof(buf), fmt, args...);
    os << buf;
  };
  os << "[dataset]\n";
  put("num_classes = %d\n", cfg.dataset.num_classes);
  put("image_size = %d\n", cfg.dataset.image_size);
  put("noise_std = %.17g\n", cfg.dataset.noise_std);
  put("fg_intensity_min = %.17g\n", cfg.dataset.fg_intensity_min);
  put("fg_intensity_max = %.17g\n", cfg.dataset.fg_intensity_max);
  put("bg_intensity_min = %.17g\n", cfg.dataset.bg_intensity_min);
  put("bg_intensity_max = %.17g\n", cfg.dataset.bg_intensity_max);
  put("min_shape_fraction = %.17g\n", cfg.dataset.min_shape_fraction);
  put("unseen_fraction = %.17g\n", cfg.unseen_fraction);
  put("split_seed = %llu\n", static_cast<unsigned long long>(cfg.split_seed));
  os << "\n[encoder]\n";
  put("in_channels = %d\n", cfg.encoder.in_channels);
  os << "blocks = ";
  for (std::size_t i = 0; i < cfg.encoder.blocks.size(); ++i) {
    const auto& b = cfg.encoder.blocks[i];
    put("%s%d:%d:%d", i ? ", " : "", b.out_channels, b.pool_stride, b.dilation);
  }
  os << "\n\n[train]\n";
  put("iterations = %llu\n", static_cast<unsigned long long>(cfg.train.iterations));
  put("lr = %.17g\n", cfg.train.lr);
  put("momentum = %.17g\n", cfg.train.momentum);
  put("weight_decay = %.17g\n", cfg.train.weight_decay);
  put("lr_decay_factor = %.17g\n", cfg.train.lr_decay_factor);
  put("lr_decay_every = %llu\n", static_cast<unsigned long long>(cfg.train.lr_decay_every));
  put("lambda_par = %.17g\n", cfg.train.lambda_par);
  put("alpha = %.17g\n", cfg.train.alpha);
  put("distance = %s\n",
      cfg.train.distance == MetricConfig::Distance::kCosine ? "cosine" : "squared_euclidean");
  put("ways = %d\n", cfg.train.ways);
  put("shots = %d\n", cfg.train.shots);
  put("n_query = %d\n", cfg.train.n_query);
  put("hflip_augment = %s\n", cfg.train.hflip_augment ? "true" : "false");
  put("seed = %llu\n", static_cast<unsigned long long>(cfg.train.seed));
  put("checkpoint_every = %llu\n", static_cast<unsigned long long>(cfg.train.checkpoint_every));
  os << "\n[eval]\n";
  put("episodes = %d\n", cfg.eval.episodes_per_run);
  put("runs = %d\n", cfg.eval.runs);
  put("seed = %llu\n", static_cast<unsigned long long>(cfg.eval.base_seed));
  put("ways = %d\n", cfg.eval.ways);
  put("shots = %d\n", cfg.eval.shots);
  put("n_query = %d\n", cfg.eval.n_query);
  put("probe_alignment = %s\n", cfg.probe_alignment ? "true" : "false");
  put("probe_episodes = %d\n", cfg.probe_episodes);
  os << "\n[annotations]\n";
  put("kind = %s\n", annotation_kind_name(cfg.eval.annotation));
  put("strokes = %d\n", cfg.eval.scribble_strokes);
  return os.str();
}

}  // namespace protoseg
