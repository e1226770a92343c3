#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/episodes.hpp"
#include "protoseg/tensor.hpp"

namespace protoseg {

struct MetricConfig {
  enum class Distance { kCosine, kSquaredEuclidean };

  double alpha = 20.0;
  Distance distance = Distance::kCosine;

  void validate() const {
    if (!(alpha > 0.0)) throw std::invalid_argument("metric: alpha must be positive");
  }
};

// Foreground prototype per episode slot plus one background prototype.
// Channel indexing matches ProbabilityMap: 0 is background, c in 1..C are the
// episode slots. A prototype whose pooled region was empty across all its
// images is invalid and excluded from the softmax.
struct PrototypeSet {
  std::vector<Tensor> foreground;  // size C; tensors undefined where invalid
  Tensor background;
  std::vector<bool> valid;  // size C+1

  std::size_t ways() const { return foreground.size(); }

  const Tensor& channel(std::size_t j) const { return j == 0 ? background : foreground[j - 1]; }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (bool v : valid) n += v ? 1 : 0;
    return n;
  }
};

// Per-pixel class distribution at feature resolution; channels of excluded
// prototypes are exactly zero and the rest sum to one per location.
struct ProbabilityMap {
  Tensor probs;             // [C+1, H', W']
  std::vector<bool> valid;  // size C+1

  std::size_t ways() const { return probs.dim(0) - 1; }
};

// Nearest-neighbor label subsampling, top-left sample per cell.
inline LabelMask downsample_mask(const LabelMask& mask, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample_mask: factor must be positive");
  const auto f = static_cast<std::size_t>(factor);
  if (mask.h % f != 0 || mask.w % f != 0) {
    throw std::invalid_argument("downsample_mask: " + std::to_string(mask.h) + "x" +
                                std::to_string(mask.w) + " not divisible by factor " +
                                std::to_string(factor));
  }
  LabelMask out(mask.h / f, mask.w / f);
  for (std::size_t y = 0; y < out.h; ++y) {
    for (std::size_t x = 0; x < out.w; ++x) out.set(y, x, mask.at(y * f, x * f));
  }
  return out;
}

// Nearest-neighbor label upsampling by an integer factor, used only to lift
// feature-resolution predictions back to image resolution for scoring.
inline LabelMask upsample_mask(const LabelMask& mask, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample_mask: factor must be positive");
  const auto f = static_cast<std::size_t>(factor);
  LabelMask out(mask.h * f, mask.w * f);
  for (std::size_t y = 0; y < out.h; ++y) {
    for (std::size_t x = 0; x < out.w; ++x) out.set(y, x, mask.at(y / f, x / f));
  }
  return out;
}

namespace detail {

inline std::vector<std::uint8_t> label_selection(const LabelMask& mask, std::uint8_t label) {
  std::vector<std::uint8_t> sel(mask.size());
  for (std::size_t i = 0; i < sel.size(); ++i) sel[i] = mask.labels[i] == label ? 1 : 0;
  return sel;
}

}  // namespace detail

// Masked average pooling over a set of feature maps and aligned label masks.
// Foreground slot c pools pixels labeled c per image, then averages over the
// images that contained any; the background prototype pools label-0 pixels
// over all images the same way. Unknown-labeled pixels (weak annotations)
// match neither selection and so contribute to no prototype.
inline PrototypeSet compute_prototypes(const std::vector<Tensor>& features,
                                       const std::vector<LabelMask>& masks, int ways) {
  if (features.empty() || features.size() != masks.size()) {
    throw std::invalid_argument("compute_prototypes: features and masks must align, got " +
                                std::to_string(features.size()) + " vs " +
                                std::to_string(masks.size()));
  }
  if (ways < 1) throw std::invalid_argument("compute_prototypes: ways must be positive");
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].rank() != 3 || features[i].dim(1) != masks[i].h ||
        features[i].dim(2) != masks[i].w) {
      throw std::invalid_argument("compute_prototypes: feature map " +
                                  Tensor::shape_string(features[i].shape()) +
                                  " does not match mask " + std::to_string(masks[i].h) + "x" +
                                  std::to_string(masks[i].w));
    }
  }

  PrototypeSet protos;
  protos.foreground.resize(static_cast<std::size_t>(ways));
  protos.valid.assign(static_cast<std::size_t>(ways) + 1, false);

  auto pooled_mean = [&](std::uint8_t label) -> Tensor {
    Tensor acc;
    int contributing = 0;
    for (std::size_t i = 0; i < features.size(); ++i) {
      const auto sel = detail::label_selection(masks[i], label);
      std::size_t count = 0;
      for (std::uint8_t s : sel) count += s;
      if (count == 0) continue;
      Tensor m = masked_spatial_mean(features[i], sel);
      acc = acc.defined() ? add(acc, m) : m;
      ++contributing;
    }
    if (contributing == 0) return Tensor();
    return contributing == 1 ? acc : affine(acc, 1.0 / contributing);
  };

  for (int c = 1; c <= ways; ++c) {
    Tensor p = pooled_mean(static_cast<std::uint8_t>(c));
    if (p.defined()) {
      protos.foreground[static_cast<std::size_t>(c - 1)] = std::move(p);
      protos.valid[static_cast<std::size_t>(c)] = true;
    }
  }
  Tensor bg = pooled_mean(0);
  if (bg.defined()) {
    protos.background = std::move(bg);
    protos.valid[0] = true;
  }
  return protos;
}

// Scalar distance between two feature vectors, cosine (1 - cos) or squared
// Euclidean depending on the config.
inline double distance(const Tensor& u, const Tensor& v, const MetricConfig& cfg) {
  cfg.validate();
  if (u.rank() != 1 || v.rank() != 1 || u.dim(0) != v.dim(0)) {
    throw std::invalid_argument("distance: shape mismatch " + Tensor::shape_string(u.shape()) +
                                " vs " + Tensor::shape_string(v.shape()));
  }
  if (cfg.distance == MetricConfig::Distance::kSquaredEuclidean) {
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += (u[i] - v[i]) * (u[i] - v[i]);
    return acc;
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  return 1.0 - dot / (std::sqrt(nu) * std::sqrt(nv) + kCosineEps);
}

namespace detail {

// Distance map of query features against one prototype, as a taped tensor op.
inline Tensor distance_map(const Tensor& features, const Tensor& prototype,
                           const MetricConfig& cfg) {
  if (cfg.distance == MetricConfig::Distance::kSquaredEuclidean) {
    return squared_euclidean_map(features, prototype);
  }
  // 1 - cos
  return affine(cosine_similarity_map(features, prototype), -1.0, 1.0);
}

// Softmax over -alpha * distance for the listed channels, scattered into a
// full (ways+1)-channel map with zeros at the excluded channels.
inline Tensor softmax_over_distances(const std::vector<Tensor>& distance_maps,
                                     const std::vector<std::size_t>& slots, std::size_t channels,
                                     double alpha) {
  std::vector<Tensor> logits;
  logits.reserve(distance_maps.size());
  for (const Tensor& d : distance_maps) logits.push_back(affine(d, -alpha));
  Tensor packed = softmax(stack_maps(logits), 0);
  return scatter_channels(packed, slots, channels);
}

}  // namespace detail

// Per-pixel class distribution over the valid prototypes of the set.
inline ProbabilityMap probability_map(const Tensor& query_features, const PrototypeSet& protos,
                                      const MetricConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> slots;
  std::vector<Tensor> dmaps;
  for (std::size_t j = 0; j < protos.valid.size(); ++j) {
    if (!protos.valid[j]) continue;
    slots.push_back(j);
    dmaps.push_back(detail::distance_map(query_features, protos.channel(j), cfg));
  }
  if (slots.empty()) {
    throw std::runtime_error("probability_map: no valid prototypes to classify against");
  }
  ProbabilityMap out;
  out.valid.assign(protos.valid.begin(), protos.valid.end());
  out.probs = detail::softmax_over_distances(dmaps, slots, protos.valid.size(), cfg.alpha);
  return out;
}

// Per-location argmax labeling; ties break toward the lower class index, so
// background wins exact ties.
inline LabelMask predict_mask(const ProbabilityMap& pm) {
  const std::size_t channels = pm.probs.dim(0), h = pm.probs.dim(1), w = pm.probs.dim(2);
  const std::size_t hw = h * w;
  LabelMask out(h, w);
  const double* pv = pm.probs.data().data();
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    double best_p = pv[i];
    for (std::size_t j = 1; j < channels; ++j) {
      const double p = pv[j * hw + i];
      if (p > best_p) {
        best_p = p;
        best = j;
      }
    }
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// Mean pixel cross-entropy of the query probability map against the
// downsampled ground truth. A label pointing at an excluded prototype is a
// hard error; episode construction guarantees it cannot occur in the forward
// direction.
inline Tensor seg_loss(const ProbabilityMap& pm, const LabelMask& gt) {
  if (pm.probs.dim(1) != gt.h || pm.probs.dim(2) != gt.w) {
    throw std::invalid_argument("seg_loss: probability map " +
                                Tensor::shape_string(pm.probs.shape()) + " vs mask " +
                                std::to_string(gt.h) + "x" + std::to_string(gt.w));
  }
  std::vector<std::uint8_t> valid(pm.valid.size());
  for (std::size_t j = 0; j < valid.size(); ++j) valid[j] = pm.valid[j] ? 1 : 0;
  return cross_entropy_mean(pm.probs, gt.labels, valid, /*strict=*/true);
}

// Prototype alignment regularization: prototypes are re-pooled from the query
// features under the predicted mask (hard labels, not differentiated), then
// each support image is segmented against the pair {its class, background} of
// those query-side prototypes and scored against its ground truth. Invalid
// pair members drop out of the softmax; if the whole pair is invalid the
// remaining valid query prototypes stand in. Pixels whose label has no valid
// channel are charged the log-clamp penalty.
inline Tensor par_loss(const std::vector<std::vector<Tensor>>& support_features,
                       const std::vector<std::vector<LabelMask>>& support_masks,
                       const std::vector<Tensor>& query_features,
                       const std::vector<LabelMask>& predicted_query_masks, int ways,
                       const MetricConfig& cfg) {
  cfg.validate();
  if (support_features.size() != static_cast<std::size_t>(ways) ||
      support_masks.size() != support_features.size()) {
    throw std::invalid_argument("par_loss: support structure does not match ways");
  }
  const PrototypeSet query_protos =
      compute_prototypes(query_features, predicted_query_masks, ways);
  if (query_protos.valid_count() == 0) {
    throw std::runtime_error("par_loss: predicted query masks yield no valid prototypes");
  }

  Tensor total;
  std::size_t images = 0;
  for (std::size_t c = 0; c < support_features.size(); ++c) {
    if (support_features[c].size() != support_masks[c].size()) {
      throw std::invalid_argument("par_loss: slot " + std::to_string(c) +
                                  " features/masks mismatch");
    }
    // Eq. 6 pair for a support image of class c: its own prototype and background
    std::vector<std::size_t> slots;
    if (query_protos.valid[c + 1]) slots.push_back(c + 1);
    if (query_protos.valid[0]) slots.push_back(0);
    if (slots.empty()) {
      for (std::size_t j = 0; j < query_protos.valid.size(); ++j) {
        if (query_protos.valid[j]) slots.push_back(j);
      }
    }
    std::sort(slots.begin(), slots.end());

    for (std::size_t k = 0; k < support_features[c].size(); ++k) {
      std::vector<Tensor> dmaps;
      dmaps.reserve(slots.size());
      for (std::size_t j : slots) {
        dmaps.push_back(detail::distance_map(support_features[c][k], query_protos.channel(j), cfg));
      }
      Tensor probs = detail::softmax_over_distances(dmaps, slots, query_protos.valid.size(),
                                                    cfg.alpha);
      std::vector<std::uint8_t> valid(query_protos.valid.size(), 0);
      for (std::size_t j : slots) valid[j] = 1;
      Tensor ce = cross_entropy_mean(probs, support_masks[c][k].labels, valid, /*strict=*/false);
      total = total.defined() ? add(total, ce) : ce;
      ++images;
    }
  }
  if (!total.defined()) throw std::invalid_argument("par_loss: no support images");
  return images == 1 ? total : affine(total, 1.0 / static_cast<double>(images));
}

// L = L_seg + lambda * L_PAR
inline Tensor total_loss(const Tensor& l_seg, const Tensor& l_par, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  if (lambda == 0.0) return l_seg;
  return add(l_seg, affine(l_par, lambda));
}

}  // namespace protoseg
