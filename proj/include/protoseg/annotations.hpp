#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "protoseg/episodes.hpp"
#include "protoseg/prototypes.hpp"
#include "protoseg/rng.hpp"

namespace protoseg {

enum class AnnotationKind { kDense, kScribble, kBbox };

inline const char* annotation_kind_name(AnnotationKind k) {
  switch (k) {
    case AnnotationKind::kDense: return "dense";
    case AnnotationKind::kScribble: return "scribble";
    case AnnotationKind::kBbox: return "bbox";
  }
  return "?";
}

// Sparse stand-in for a dense mask. Scribble masks mark a few stroke pixels
// per class plus one background stroke and leave everything else unknown;
// bbox masks fill the tight box of one connected component.
struct WeakAnnotation {
  AnnotationKind kind = AnnotationKind::kDense;
  LabelMask mask;
};

inline constexpr int kScribbleStrokeLength = 20;

namespace detail {

// 4-neighborhood erosion by one pixel; border pixels always erode.
inline std::vector<std::size_t> eroded_region(const LabelMask& mask, std::uint8_t label) {
  std::vector<std::size_t> out;
  for (std::size_t y = 0; y < mask.h; ++y) {
    for (std::size_t x = 0; x < mask.w; ++x) {
      if (mask.at(y, x) != label) continue;
      if (y == 0 || y + 1 == mask.h || x == 0 || x + 1 == mask.w) continue;
      if (mask.at(y - 1, x) == label && mask.at(y + 1, x) == label &&
          mask.at(y, x - 1) == label && mask.at(y, x + 1) == label) {
        out.push_back(y * mask.w + x);
      }
    }
  }
  return out;
}

inline std::vector<std::size_t> full_region(const LabelMask& mask, std::uint8_t label) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.labels[i] == label) out.push_back(i);
  }
  return out;
}

// Random walk of at most kScribbleStrokeLength pixels inside the region,
// preferring unvisited neighbors so strokes spread out.
inline void walk_stroke(const LabelMask& mask, std::uint8_t label,
                        const std::vector<std::size_t>& region, Rng& rng, LabelMask& out) {
  if (region.empty()) return;
  std::size_t pos = region[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(region.size()) - 1))];
  out.labels[pos] = label;
  for (int step = 1; step < kScribbleStrokeLength; ++step) {
    const std::size_t y = pos / mask.w, x = pos % mask.w;
    std::vector<std::size_t> fresh, seen;
    auto consider = [&](std::size_t ny, std::size_t nx) {
      const std::size_t idx = ny * mask.w + nx;
      if (mask.labels[idx] != label) return;
      (out.labels[idx] == label ? seen : fresh).push_back(idx);
    };
    if (y > 0) consider(y - 1, x);
    if (y + 1 < mask.h) consider(y + 1, x);
    if (x > 0) consider(y, x - 1);
    if (x + 1 < mask.w) consider(y, x + 1);
    const auto& pool = fresh.empty() ? seen : fresh;
    if (pool.empty()) break;
    pos = pool[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
    out.labels[pos] = label;
  }
}

}  // namespace detail

// Scribble derivation: per foreground class, `strokes` random-walk polylines
// inside the class region eroded by one pixel (the full region when erosion
// empties it), plus one background stroke. Everything else becomes unknown.
inline WeakAnnotation derive_scribble(const LabelMask& mask, int strokes, std::uint64_t rng_seed) {
  if (strokes < 0) throw std::invalid_argument("derive_scribble: strokes must be >= 0");
  std::vector<std::uint8_t> classes;
  bool any_fg = false;
  for (std::uint8_t l : mask.labels) {
    if (l == 0 || l == kUnknownLabel) continue;
    any_fg = true;
    if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
  }
  if (!any_fg) throw std::invalid_argument("derive_scribble: mask has no foreground pixels");
  std::sort(classes.begin(), classes.end());

  WeakAnnotation weak;
  weak.kind = AnnotationKind::kScribble;
  weak.mask = LabelMask(mask.h, mask.w, kUnknownLabel);

  Rng rng(derive_seed(rng_seed, 0x5c51b));
  for (std::uint8_t c : classes) {
    std::vector<std::size_t> region = detail::eroded_region(mask, c);
    if (region.empty()) region = detail::full_region(mask, c);
    for (int s = 0; s < strokes; ++s) detail::walk_stroke(mask, c, region, rng, weak.mask);
  }
  std::vector<std::size_t> bg = detail::eroded_region(mask, 0);
  if (bg.empty()) bg = detail::full_region(mask, 0);
  detail::walk_stroke(mask, 0, bg, rng, weak.mask);
  return weak;
}

// Bounding-box derivation: one 4-connected foreground component chosen
// uniformly at random; its tight axis-aligned box becomes the annotation.
inline WeakAnnotation derive_bbox(const LabelMask& mask, std::uint64_t rng_seed) {
  struct Component {
    std::uint8_t label;
    std::size_t y0, y1, x0, x1;
  };
  std::vector<Component> components;
  std::vector<std::uint8_t> visited(mask.size(), 0);
  for (std::size_t start = 0; start < mask.size(); ++start) {
    const std::uint8_t label = mask.labels[start];
    if (label == 0 || label == kUnknownLabel || visited[start]) continue;
    Component comp{label, mask.h, 0, mask.w, 0};
    std::vector<std::size_t> stack = {start};
    visited[start] = 1;
    while (!stack.empty()) {
      const std::size_t idx = stack.back();
      stack.pop_back();
      const std::size_t y = idx / mask.w, x = idx % mask.w;
      comp.y0 = std::min(comp.y0, y);
      comp.y1 = std::max(comp.y1, y);
      comp.x0 = std::min(comp.x0, x);
      comp.x1 = std::max(comp.x1, x);
      auto push = [&](std::size_t ny, std::size_t nx) {
        const std::size_t nidx = ny * mask.w + nx;
        if (!visited[nidx] && mask.labels[nidx] == label) {
          visited[nidx] = 1;
          stack.push_back(nidx);
        }
      };
      if (y > 0) push(y - 1, x);
      if (y + 1 < mask.h) push(y + 1, x);
      if (x > 0) push(y, x - 1);
      if (x + 1 < mask.w) push(y, x + 1);
    }
    components.push_back(comp);
  }
  if (components.empty()) {
    throw std::invalid_argument("derive_bbox: mask has no foreground component");
  }
  Rng rng(derive_seed(rng_seed, 0xb0b0));
  const auto& pick = components[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(components.size()) - 1))];

  WeakAnnotation weak;
  weak.kind = AnnotationKind::kBbox;
  weak.mask = LabelMask(mask.h, mask.w, 0);
  for (std::size_t y = pick.y0; y <= pick.y1; ++y) {
    for (std::size_t x = pick.x0; x <= pick.x1; ++x) weak.mask.set(y, x, pick.label);
  }
  return weak;
}

// Masked average pooling under weak annotations. Unknown pixels match no
// label selection, so they contribute to neither foreground nor background;
// otherwise this is exactly the dense pooling path.
inline PrototypeSet pool_with_weak(const std::vector<Tensor>& features,
                                   const std::vector<WeakAnnotation>& weak, int ways) {
  if (features.size() != weak.size()) {
    throw std::invalid_argument("pool_with_weak: features and annotations must align");
  }
  std::vector<LabelMask> masks;
  masks.reserve(weak.size());
  for (const auto& a : weak) masks.push_back(a.mask);
  return compute_prototypes(features, masks, ways);
}

}  // namespace protoseg
