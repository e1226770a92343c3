#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <future>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "protoseg/annotations.hpp"
#include "protoseg/encoder.hpp"
#include "protoseg/episodes.hpp"
#include "protoseg/prototypes.hpp"
#include "protoseg/trainer.hpp"

namespace protoseg {

// Intersection-over-union of one label. Both sets empty counts as 1, exactly
// one empty as 0.
inline double iou(const LabelMask& pred, const LabelMask& gt, int label) {
  if (pred.h != gt.h || pred.w != gt.w) {
    throw std::invalid_argument("iou: mask sizes differ, " + std::to_string(pred.h) + "x" +
                                std::to_string(pred.w) + " vs " + std::to_string(gt.h) + "x" +
                                std::to_string(gt.w));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.labels[i] == label;
    const bool b = gt.labels[i] == label;
    inter += (a && b) ? 1 : 0;
    uni += (a || b) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// All foreground categories collapsed into one class; mean of the foreground
// and background IoU.
inline double binary_iou(const LabelMask& pred, const LabelMask& gt) {
  if (pred.h != gt.h || pred.w != gt.w) {
    throw std::invalid_argument("binary_iou: mask sizes differ");
  }
  std::size_t fg_i = 0, fg_u = 0, bg_i = 0, bg_u = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.labels[i] != 0;
    const bool b = gt.labels[i] != 0;
    fg_i += (a && b) ? 1 : 0;
    fg_u += (a || b) ? 1 : 0;
    bg_i += (!a && !b) ? 1 : 0;
    bg_u += (!a || !b) ? 1 : 0;
  }
  const double fg = fg_u == 0 ? 1.0 : static_cast<double>(fg_i) / static_cast<double>(fg_u);
  const double bg = bg_u == 0 ? 1.0 : static_cast<double>(bg_i) / static_cast<double>(bg_u);
  return 0.5 * (fg + bg);
}

// What a segmentor is allowed to see at test time: annotated support pairs and
// the bare query images. Query ground truth stays outside for scoring only.
struct EpisodeInputs {
  std::vector<std::vector<SamplePair>> support;
  std::vector<Tensor> query_images;
};

// Returns one image-resolution predicted mask per query image.
using Segmentor = std::function<std::vector<LabelMask>(const EpisodeInputs&)>;

// Non-parametric PANet inference: encode, pool prototypes from the (possibly
// weak) support masks, classify each query pixel by nearest prototype, then
// lift the prediction back to image resolution.
inline Segmentor panet_segmentor(const EncoderConfig& ecfg, const EncoderParams& params,
                                 const MetricConfig& metric) {
  return [ecfg, params, metric](const EpisodeInputs& inputs) {
    const int ds = ecfg.downsample_factor();
    std::vector<Tensor> features;
    std::vector<LabelMask> masks;
    for (const auto& slot : inputs.support) {
      for (const SamplePair& pair : slot) {
        features.push_back(encode(ecfg, params, pair.image));
        masks.push_back(downsample_mask(pair.mask, ds));
      }
    }
    const PrototypeSet protos =
        compute_prototypes(features, masks, static_cast<int>(inputs.support.size()));
    std::vector<LabelMask> out;
    out.reserve(inputs.query_images.size());
    for (const Tensor& q : inputs.query_images) {
      const LabelMask pred = predict_mask(probability_map(encode(ecfg, params, q), protos, metric));
      out.push_back(upsample_mask(pred, ds));
    }
    return out;
  };
}

struct EvalConfig {
  int ways = 1;
  int shots = 1;
  int n_query = 1;
  int episodes_per_run = 200;
  int runs = 5;
  std::uint64_t base_seed = 9001;
  AnnotationKind annotation = AnnotationKind::kDense;
  int scribble_strokes = 3;

  void validate() const {
    if (ways < 1 || shots < 1 || n_query < 1 || episodes_per_run < 1 || runs < 1) {
      throw std::invalid_argument("eval: counts must be positive");
    }
  }
};

struct EvalReport {
  std::map<int, double> per_class_iou;  // global class id -> IoU averaged over runs
  double mean_iou = 0.0;
  double binary_iou = 0.0;
  int episodes = 0;
  std::vector<std::uint64_t> seeds;  // one per run
  std::vector<double> run_mean_ious;
  std::optional<double> proto_align_distance;
};

namespace detail {

struct EpisodeCounts {
  std::map<int, std::pair<std::uint64_t, std::uint64_t>> class_iu;
  std::uint64_t fg_i = 0, fg_u = 0, bg_i = 0, bg_u = 0;
};

inline void score_episode(const Episode& ep, const std::vector<LabelMask>& preds,
                          EpisodeCounts& counts) {
  for (std::size_t q = 0; q < ep.query.size(); ++q) {
    const LabelMask& gt = ep.query[q].mask;
    const LabelMask& pred = preds[q];
    if (pred.h != gt.h || pred.w != gt.w) {
      throw std::invalid_argument("evaluate: predicted mask size mismatch");
    }
    for (std::size_t slot = 1; slot <= ep.classes.size(); ++slot) {
      auto& iu = counts.class_iu[ep.classes[slot - 1]];
      for (std::size_t i = 0; i < gt.size(); ++i) {
        const bool a = pred.labels[i] == slot;
        const bool b = gt.labels[i] == slot;
        iu.first += (a && b) ? 1 : 0;
        iu.second += (a || b) ? 1 : 0;
      }
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const bool a = pred.labels[i] != 0;
      const bool b = gt.labels[i] != 0;
      counts.fg_i += (a && b) ? 1 : 0;
      counts.fg_u += (a || b) ? 1 : 0;
      counts.bg_i += (!a && !b) ? 1 : 0;
      counts.bg_u += (!a || !b) ? 1 : 0;
    }
  }
}

inline int eval_worker_count(int episodes) {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("PROTOSEG_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return std::min(n, episodes);
}

}  // namespace detail

// Derives the configured weak annotation for every support pair; dense mode
// passes the episode through unchanged.
inline EpisodeInputs episode_inputs(const Episode& ep, AnnotationKind kind, int strokes,
                                    std::uint64_t seed) {
  EpisodeInputs inputs;
  inputs.support.resize(ep.support.size());
  std::uint64_t idx = 0;
  for (std::size_t c = 0; c < ep.support.size(); ++c) {
    for (const SamplePair& pair : ep.support[c]) {
      SamplePair annotated = pair;
      if (kind == AnnotationKind::kScribble) {
        annotated.mask = derive_scribble(pair.mask, strokes, derive_seed(seed, 0xa0 + idx)).mask;
      } else if (kind == AnnotationKind::kBbox) {
        annotated.mask = derive_bbox(pair.mask, derive_seed(seed, 0xa0 + idx)).mask;
      }
      inputs.support[c].push_back(std::move(annotated));
      ++idx;
    }
  }
  for (const SamplePair& pair : ep.query) inputs.query_images.push_back(pair.image);
  return inputs;
}

// Episode-level evaluation per Algorithm 1's test loop: stream episodes from
// the given class pool, segment queries from support knowledge alone, and
// accumulate intersection/union counts per class over each run. Episodes are
// independent, so runs fan out over a small worker pool (capped by the
// PROTOSEG_THREADS environment variable) with per-episode slots keeping the
// reduction deterministic.
inline EvalReport evaluate(const Segmentor& segmentor, const ShapeDatasetConfig& ds_cfg,
                           const std::vector<int>& class_pool, const EvalConfig& cfg) {
  cfg.validate();
  ds_cfg.validate();

  EvalReport report;
  std::map<int, std::pair<double, int>> class_acc;  // class -> (sum of run IoUs, run count)
  double binary_acc = 0.0;

  for (int run = 0; run < cfg.runs; ++run) {
    const std::uint64_t run_seed = derive_seed(cfg.base_seed, 0xea1 + static_cast<std::uint64_t>(run));
    report.seeds.push_back(run_seed);

    std::vector<detail::EpisodeCounts> slots(static_cast<std::size_t>(cfg.episodes_per_run));
    const int workers = detail::eval_worker_count(cfg.episodes_per_run);
    auto work = [&](int worker) {
      for (int e = worker; e < cfg.episodes_per_run; e += workers) {
        const std::uint64_t ep_seed = derive_seed(run_seed, static_cast<std::uint64_t>(e));
        const Episode ep = sample_episode(class_pool, cfg.ways, cfg.shots, cfg.n_query, ep_seed,
                                          ds_cfg);
        const EpisodeInputs inputs =
            episode_inputs(ep, cfg.annotation, cfg.scribble_strokes, ep_seed);
        const std::vector<LabelMask> preds = segmentor(inputs);
        detail::score_episode(ep, preds, slots[static_cast<std::size_t>(e)]);
      }
    };
    if (workers == 1) {
      work(0);
    } else {
      std::vector<std::future<void>> futures;
      for (int w = 0; w < workers; ++w) {
        futures.push_back(std::async(std::launch::async, work, w));
      }
      for (auto& f : futures) f.get();
    }

    detail::EpisodeCounts run_counts;
    for (const auto& s : slots) {
      for (const auto& [cls, iu] : s.class_iu) {
        auto& acc = run_counts.class_iu[cls];
        acc.first += iu.first;
        acc.second += iu.second;
      }
      run_counts.fg_i += s.fg_i;
      run_counts.fg_u += s.fg_u;
      run_counts.bg_i += s.bg_i;
      run_counts.bg_u += s.bg_u;
    }

    double run_mean = 0.0;
    int run_classes = 0;
    for (const auto& [cls, iu] : run_counts.class_iu) {
      if (iu.second == 0) continue;  // class never appeared in this run
      const double v = static_cast<double>(iu.first) / static_cast<double>(iu.second);
      auto& acc = class_acc[cls];
      acc.first += v;
      acc.second += 1;
      run_mean += v;
      ++run_classes;
    }
    if (run_classes > 0) run_mean /= run_classes;
    report.run_mean_ious.push_back(run_mean);

    const double fg = run_counts.fg_u == 0
                          ? 1.0
                          : static_cast<double>(run_counts.fg_i) / static_cast<double>(run_counts.fg_u);
    const double bg = run_counts.bg_u == 0
                          ? 1.0
                          : static_cast<double>(run_counts.bg_i) / static_cast<double>(run_counts.bg_u);
    binary_acc += 0.5 * (fg + bg);
    report.episodes += cfg.episodes_per_run;
  }

  double mean = 0.0;
  for (const auto& [cls, acc] : class_acc) {
    const double v = acc.first / acc.second;
    report.per_class_iou[cls] = v;
    mean += v;
  }
  report.mean_iou = class_acc.empty() ? 0.0 : mean / static_cast<double>(class_acc.size());
  report.binary_iou = binary_acc / cfg.runs;
  return report;
}

// Mean Euclidean distance between support-pooled and query-pooled foreground
// prototypes over fresh episodes, both sides pooled from ground-truth masks.
// Smaller means the embedding aligns the two directions better.
inline double proto_alignment_distance(const EncoderConfig& ecfg, const EncoderParams& params,
                                       const ShapeDatasetConfig& ds_cfg,
                                       const std::vector<int>& class_pool, int ways, int shots,
                                       int n_query, int episodes, std::uint64_t seed) {
  const int ds = ecfg.downsample_factor();
  double total = 0.0;
  std::size_t pairs = 0;
  for (int e = 0; e < episodes; ++e) {
    const std::uint64_t ep_seed = derive_seed(seed, 0xa119 + static_cast<std::uint64_t>(e));
    const Episode ep = sample_episode(class_pool, ways, shots, n_query, ep_seed, ds_cfg);

    std::vector<Tensor> sup_feats, q_feats;
    std::vector<LabelMask> sup_masks, q_masks;
    for (const auto& slot : ep.support) {
      for (const SamplePair& pair : slot) {
        sup_feats.push_back(encode(ecfg, params, pair.image));
        sup_masks.push_back(downsample_mask(pair.mask, ds));
      }
    }
    for (const SamplePair& pair : ep.query) {
      q_feats.push_back(encode(ecfg, params, pair.image));
      q_masks.push_back(downsample_mask(pair.mask, ds));
    }
    const PrototypeSet sp = compute_prototypes(sup_feats, sup_masks, static_cast<int>(ep.ways()));
    const PrototypeSet qp = compute_prototypes(q_feats, q_masks, static_cast<int>(ep.ways()));
    for (std::size_t c = 1; c <= ep.ways(); ++c) {
      if (!sp.valid[c] || !qp.valid[c]) continue;
      const Tensor& a = sp.channel(c);
      const Tensor& b = qp.channel(c);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
      total += std::sqrt(acc);
      ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : total / static_cast<double>(pairs);
}

// Report serialization: human-readable text and a flat key = value file.
inline std::string report_text(const EvalReport& r) {
  std::string out;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "episodes: %d over %zu runs\n", r.episodes, r.seeds.size());
  out += buf;
  std::snprintf(buf, sizeof(buf), "mean_iou: %.6f\n", r.mean_iou);
  out += buf;
  std::snprintf(buf, sizeof(buf), "binary_iou: %.6f\n", r.binary_iou);
  out += buf;
  for (const auto& [cls, v] : r.per_class_iou) {
    std::snprintf(buf, sizeof(buf), "class %d iou: %.6f\n", cls, v);
    out += buf;
  }
  for (std::size_t i = 0; i < r.run_mean_ious.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "run %zu mean_iou: %.6f (seed %llu)\n", i, r.run_mean_ious[i],
                  static_cast<unsigned long long>(r.seeds[i]));
    out += buf;
  }
  if (r.proto_align_distance.has_value()) {
    std::snprintf(buf, sizeof(buf), "proto_align_distance: %.6f\n", *r.proto_align_distance);
    out += buf;
  }
  return out;
}

inline std::string report_keyvalues(const EvalReport& r) {
  std::string out;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "mean_iou = %.17g\n", r.mean_iou);
  out += buf;
  std::snprintf(buf, sizeof(buf), "binary_iou = %.17g\n", r.binary_iou);
  out += buf;
  std::snprintf(buf, sizeof(buf), "episodes = %d\n", r.episodes);
  out += buf;
  std::snprintf(buf, sizeof(buf), "runs = %zu\n", r.seeds.size());
  out += buf;
  for (const auto& [cls, v] : r.per_class_iou) {
    std::snprintf(buf, sizeof(buf), "class_%d_iou = %.17g\n", cls, v);
    out += buf;
  }
  for (std::size_t i = 0; i < r.run_mean_ious.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "run_%zu_mean_iou = %.17g\n", i, r.run_mean_ious[i]);
    out += buf;
  }
  if (r.proto_align_distance.has_value()) {
    std::snprintf(buf, sizeof(buf), "proto_align_distance = %.17g\n", *r.proto_align_distance);
    out += buf;
  }
  return out;
}

}  // namespace protoseg
