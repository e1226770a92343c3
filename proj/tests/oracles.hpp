#pragma once

// Scalar brute-force reference implementations of the prototype/metric
// pipeline, kept deliberately independent of the library code paths they
// check: plain doubles, explicit loops, no tensor ops.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace oracles {

struct FeatureMap {
  std::size_t d = 0, h = 0, w = 0;
  std::vector<double> data;  // [d][h][w] row-major

  double at(std::size_t k, std::size_t y, std::size_t x) const {
    return data[(k * h + y) * w + x];
  }
};

struct Prototype {
  std::vector<double> v;
  bool valid = false;
};

// channel 0 = background, 1..C = slots
inline std::vector<Prototype> prototypes(const std::vector<FeatureMap>& features,
                                         const std::vector<std::vector<std::uint8_t>>& masks,
                                         int ways) {
  const std::size_t d = features[0].d;
  std::vector<Prototype> out(static_cast<std::size_t>(ways) + 1);
  for (int label = 0; label <= ways; ++label) {
    std::vector<double> acc(d, 0.0);
    int contributing = 0;
    for (std::size_t i = 0; i < features.size(); ++i) {
      const auto& fm = features[i];
      std::vector<double> img_sum(d, 0.0);
      std::size_t count = 0;
      for (std::size_t y = 0; y < fm.h; ++y) {
        for (std::size_t x = 0; x < fm.w; ++x) {
          if (masks[i][y * fm.w + x] != static_cast<std::uint8_t>(label)) continue;
          ++count;
          for (std::size_t k = 0; k < d; ++k) img_sum[k] += fm.at(k, y, x);
        }
      }
      if (count == 0) continue;
      for (std::size_t k = 0; k < d; ++k) acc[k] += img_sum[k] / static_cast<double>(count);
      ++contributing;
    }
    if (contributing > 0) {
      for (double& v : acc) v /= static_cast<double>(contributing);
      out[static_cast<std::size_t>(label)] = Prototype{std::move(acc), true};
    }
  }
  return out;
}

inline double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb) + 1e-8);
}

inline double squared_euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc;
}

// softmax over exp(-alpha * d) for the allowed channels; excluded channels get
// probability 0. Returns a [channels][h][w] grid.
inline std::vector<double> probability_map(const FeatureMap& fm,
                                           const std::vector<Prototype>& protos,
                                           const std::vector<std::size_t>& allowed, double alpha,
                                           bool cosine) {
  const std::size_t channels = protos.size(), hw = fm.h * fm.w;
  std::vector<double> out(channels * hw, 0.0);
  std::vector<double> fvec(fm.d);
  for (std::size_t y = 0; y < fm.h; ++y) {
    for (std::size_t x = 0; x < fm.w; ++x) {
      for (std::size_t k = 0; k < fm.d; ++k) fvec[k] = fm.at(k, y, x);
      std::vector<double> logits(allowed.size());
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < allowed.size(); ++a) {
        const auto& p = protos[allowed[a]].v;
        const double dist = cosine ? cosine_distance(fvec, p) : squared_euclidean(fvec, p);
        logits[a] = -alpha * dist;
        m = std::max(m, logits[a]);
      }
      double z = 0.0;
      for (double& l : logits) {
        l = std::exp(l - m);
        z += l;
      }
      for (std::size_t a = 0; a < allowed.size(); ++a) {
        out[allowed[a] * hw + y * fm.w + x] = logits[a] / z;
      }
    }
  }
  return out;
}

inline std::vector<std::size_t> all_valid(const std::vector<Prototype>& protos) {
  std::vector<std::size_t> allowed;
  for (std::size_t j = 0; j < protos.size(); ++j) {
    if (protos[j].valid) allowed.push_back(j);
  }
  return allowed;
}

inline std::vector<std::uint8_t> argmax_mask(const std::vector<double>& probs,
                                             std::size_t channels, std::size_t hw) {
  std::vector<std::uint8_t> out(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    double bp = probs[i];
    for (std::size_t j = 1; j < channels; ++j) {
      if (probs[j * hw + i] > bp) {
        bp = probs[j * hw + i];
        best = j;
      }
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

inline double cross_entropy(const std::vector<double>& probs,
                            const std::vector<std::uint8_t>& labels, std::size_t hw) {
  double acc = 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    acc -= std::log(std::max(probs[static_cast<std::size_t>(labels[i]) * hw + i], 1e-12));
  }
  return acc / static_cast<double>(hw);
}

// Full reverse-direction pipeline: pool query-side prototypes under the
// predicted masks, then score each support image against the pair {its class,
// background} of those prototypes (falling back to all valid ones when the
// pair is empty).
inline double par_loss(const std::vector<std::vector<FeatureMap>>& support_features,
                       const std::vector<std::vector<std::vector<std::uint8_t>>>& support_masks,
                       const std::vector<FeatureMap>& query_features,
                       const std::vector<std::vector<std::uint8_t>>& predicted_masks, int ways,
                       double alpha, bool cosine) {
  const std::vector<Prototype> qp = prototypes(query_features, predicted_masks, ways);
  double acc = 0.0;
  std::size_t images = 0;
  for (std::size_t c = 0; c < support_features.size(); ++c) {
    std::vector<std::size_t> allowed;
    if (qp[c + 1].valid) allowed.push_back(c + 1);
    if (qp[0].valid) allowed.insert(allowed.begin(), 0);
    if (allowed.empty()) allowed = all_valid(qp);
    for (std::size_t k = 0; k < support_features[c].size(); ++k) {
      const auto& fm = support_features[c][k];
      const auto probs = probability_map(fm, qp, allowed, alpha, cosine);
      acc += cross_entropy(probs, support_masks[c][k], fm.h * fm.w);
      ++images;
    }
  }
  return acc / static_cast<double>(images);
}

}  // namespace oracles
