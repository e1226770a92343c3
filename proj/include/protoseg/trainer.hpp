#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/encoder.hpp"
#include "protoseg/episodes.hpp"
#include "protoseg/prototypes.hpp"
#include "protoseg/serialize.hpp"

namespace protoseg {

// Raised when a loss or parameter goes non-finite; the CLI maps it to its
// numeric-failure exit code.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::uint64_t iterations = 5000;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_decay_factor = 0.1;
  std::uint64_t lr_decay_every = 2000;
  double lambda_par = 1.0;
  double alpha = 20.0;
  MetricConfig::Distance distance = MetricConfig::Distance::kCosine;
  int ways = 1;
  int shots = 1;
  int n_query = 1;
  bool hflip_augment = true;
  std::uint64_t seed = 1;
  std::uint64_t checkpoint_every = 1000;  // 0 disables periodic checkpoints

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) {
      throw std::invalid_argument("train: momentum must be in [0,1)");
    }
    if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
    if (lambda_par < 0.0) throw std::invalid_argument("train: lambda_par must be >= 0");
    if (!(alpha > 0.0)) throw std::invalid_argument("train: alpha must be positive");
    if (lr_decay_every == 0) throw std::invalid_argument("train: lr_decay_every must be positive");
    if (!(lr_decay_factor > 0.0)) {
      throw std::invalid_argument("train: lr_decay_factor must be positive");
    }
    if (ways < 1 || shots < 1 || n_query < 1) {
      throw std::invalid_argument("train: ways, shots and n_query must be positive");
    }
  }

  MetricConfig metric() const { return MetricConfig{alpha, distance}; }
};

// Piecewise-constant step schedule: lr * factor^floor(iter / every).
inline double learning_rate_at(const TrainConfig& cfg, std::uint64_t iter) {
  const auto steps = static_cast<double>(iter / cfg.lr_decay_every);
  return cfg.lr * std::pow(cfg.lr_decay_factor, steps);
}

// Momentum buffers, one per parameter tensor in EncoderParams order.
struct OptimizerState {
  std::vector<Tensor> velocity;

  static OptimizerState zeros_like(const EncoderParams& params) {
    OptimizerState s;
    s.velocity.reserve(params.tensors.size());
    for (const Tensor& t : params.tensors) s.velocity.push_back(Tensor::zeros(t.shape()));
    return s;
  }
};

// One SGD step with weight decay folded into the gradient:
//   g' = g + wd * w;  v = momentum * v + g';  w = w - lr_t * v
inline void sgd_step(EncoderParams& params, const Gradients& grads, OptimizerState& state,
                     const TrainConfig& cfg, std::uint64_t iter) {
  if (state.velocity.size() != params.tensors.size()) {
    throw std::invalid_argument("sgd_step: optimizer state does not match parameters");
  }
  const double lr_t = learning_rate_at(cfg, iter);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const Tensor& w = params.tensors[i];
    const Tensor g = grads.at(w);
    const Tensor& v = state.velocity[i];
    if (g.shape() != w.shape() || v.shape() != w.shape()) {
      throw std::invalid_argument("sgd_step: shape mismatch " + Tensor::shape_string(w.shape()) +
                                  " vs " + Tensor::shape_string(g.shape()));
    }
    std::vector<double> nv(w.size()), nw(w.size());
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] + cfg.weight_decay * w[j];
      nv[j] = cfg.momentum * v[j] + gj;
      nw[j] = w[j] - lr_t * nv[j];
    }
    state.velocity[i] = Tensor(w.shape(), std::move(nv));
    params.tensors[i] = Tensor(w.shape(), std::move(nw), true);
  }
}

struct TrainStepResult {
  double loss_seg = 0.0;
  double loss_par = 0.0;
};

namespace detail {

struct EpisodeForward {
  std::vector<std::vector<Tensor>> support_features;   // [C][K]
  std::vector<std::vector<LabelMask>> support_masks;   // [C][K], feature resolution
  std::vector<Tensor> query_features;                  // [n_query]
  std::vector<LabelMask> query_masks;                  // feature resolution
  PrototypeSet prototypes;
  std::vector<ProbabilityMap> query_probability_maps;
};

// Shared forward pass of Algorithm 1 lines 2-3: one encoder over every image,
// support prototypes, query probability maps.
inline EpisodeForward episode_forward(const EncoderConfig& ecfg, const EncoderParams& params,
                                      const Episode& ep, const MetricConfig& metric) {
  EpisodeForward fwd;
  const int ds = ecfg.downsample_factor();
  const auto ways = ep.support.size();
  fwd.support_features.resize(ways);
  fwd.support_masks.resize(ways);
  std::vector<Tensor> flat_features;
  std::vector<LabelMask> flat_masks;
  for (std::size_t c = 0; c < ways; ++c) {
    for (const SamplePair& pair : ep.support[c]) {
      Tensor f = encode(ecfg, params, pair.image);
      LabelMask m = downsample_mask(pair.mask, ds);
      flat_features.push_back(f);
      flat_masks.push_back(m);
      fwd.support_features[c].push_back(std::move(f));
      fwd.support_masks[c].push_back(std::move(m));
    }
  }
  for (const SamplePair& pair : ep.query) {
    fwd.query_features.push_back(encode(ecfg, params, pair.image));
    fwd.query_masks.push_back(downsample_mask(pair.mask, ds));
  }
  fwd.prototypes = compute_prototypes(flat_features, flat_masks, static_cast<int>(ways));
  for (const Tensor& qf : fwd.query_features) {
    fwd.query_probability_maps.push_back(probability_map(qf, fwd.prototypes, metric));
  }
  return fwd;
}

}  // namespace detail

// Algorithm 1 lines 2-8 on one episode: support prototypes, query
// probabilities and L_seg, then (for lambda > 0) the reverse direction and
// L_PAR, one backward pass and one SGD step. At lambda == 0 the PAR path is
// never evaluated.
inline TrainStepResult train_episode(const EncoderConfig& ecfg, EncoderParams& params,
                                     OptimizerState& state, const Episode& ep,
                                     const TrainConfig& cfg, std::uint64_t iter) {
  cfg.validate();
  const MetricConfig metric = cfg.metric();
  GradTape tape;
  detail::EpisodeForward fwd = detail::episode_forward(ecfg, params, ep, metric);

  Tensor l_seg;
  for (std::size_t i = 0; i < ep.query.size(); ++i) {
    Tensor l = seg_loss(fwd.query_probability_maps[i], fwd.query_masks[i]);
    l_seg = l_seg.defined() ? add(l_seg, l) : l;
  }
  if (ep.query.size() > 1) l_seg = affine(l_seg, 1.0 / static_cast<double>(ep.query.size()));

  TrainStepResult result;
  Tensor total = l_seg;
  if (cfg.lambda_par > 0.0) {
    std::vector<LabelMask> predictions;
    predictions.reserve(ep.query.size());
    for (const ProbabilityMap& pm : fwd.query_probability_maps) {
      predictions.push_back(predict_mask(pm));
    }
    Tensor l_par = par_loss(fwd.support_features, fwd.support_masks, fwd.query_features,
                            predictions, static_cast<int>(ep.ways()), metric);
    result.loss_par = l_par.value();
    total = total_loss(l_seg, l_par, cfg.lambda_par);
  }
  result.loss_seg = l_seg.value();
  if (!std::isfinite(result.loss_seg) || !std::isfinite(result.loss_par)) {
    throw NumericError("train_episode: non-finite loss at iteration " + std::to_string(iter));
  }

  Gradients grads = tape.backward(total);
  sgd_step(params, grads, state, cfg, iter);
  return result;
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'P', 'A', 'N', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  EncoderConfig encoder;
  TrainConfig train;
  std::uint64_t iteration = 0;  // next iteration to run; equals train.iterations when done
  EncoderParams params;
  OptimizerState opt_state;
};

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  out.write(kCheckpointMagic, 4);
  io::write_u32(out, kCheckpointVersion);
  io::write_u32(out, static_cast<std::uint32_t>(ck.encoder.in_channels));
  io::write_u32(out, static_cast<std::uint32_t>(ck.encoder.blocks.size()));
  for (const auto& b : ck.encoder.blocks) {
    io::write_u32(out, static_cast<std::uint32_t>(b.out_channels));
    io::write_u32(out, static_cast<std::uint32_t>(b.pool_stride));
    io::write_u32(out, static_cast<std::uint32_t>(b.dilation));
  }
  const TrainConfig& t = ck.train;
  io::write_u64(out, t.iterations);
  io::write_f64(out, t.lr);
  io::write_f64(out, t.momentum);
  io::write_f64(out, t.weight_decay);
  io::write_f64(out, t.lr_decay_factor);
  io::write_u64(out, t.lr_decay_every);
  io::write_f64(out, t.lambda_par);
  io::write_f64(out, t.alpha);
  io::write_u32(out, t.distance == MetricConfig::Distance::kCosine ? 0u : 1u);
  io::write_u32(out, static_cast<std::uint32_t>(t.ways));
  io::write_u32(out, static_cast<std::uint32_t>(t.shots));
  io::write_u32(out, static_cast<std::uint32_t>(t.n_query));
  io::write_u32(out, t.hflip_augment ? 1u : 0u);
  io::write_u64(out, t.seed);
  io::write_u64(out, t.checkpoint_every);
  io::write_u64(out, ck.iteration);
  io::write_u32(out, static_cast<std::uint32_t>(ck.params.tensors.size()));
  for (const Tensor& p : ck.params.tensors) io::write_tensor(out, p);
  io::write_u32(out, static_cast<std::uint32_t>(ck.opt_state.velocity.size()));
  for (const Tensor& v : ck.opt_state.velocity) io::write_tensor(out, v);
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    throw std::runtime_error("checkpoint: bad magic bytes");
  }
  const std::uint32_t version = io::read_u32(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.encoder.in_channels = static_cast<int>(io::read_u32(in));
  ck.encoder.blocks.resize(io::read_u32(in));
  for (auto& b : ck.encoder.blocks) {
    b.out_channels = static_cast<int>(io::read_u32(in));
    b.pool_stride = static_cast<int>(io::read_u32(in));
    b.dilation = static_cast<int>(io::read_u32(in));
  }
  TrainConfig& t = ck.train;
  t.iterations = io::read_u64(in);
  t.lr = io::read_f64(in);
  t.momentum = io::read_f64(in);
  t.weight_decay = io::read_f64(in);
  t.lr_decay_factor = io::read_f64(in);
  t.lr_decay_every = io::read_u64(in);
  t.lambda_par = io::read_f64(in);
  t.alpha = io::read_f64(in);
  t.distance = io::read_u32(in) == 0 ? MetricConfig::Distance::kCosine
                                     : MetricConfig::Distance::kSquaredEuclidean;
  t.ways = static_cast<int>(io::read_u32(in));
  t.shots = static_cast<int>(io::read_u32(in));
  t.n_query = static_cast<int>(io::read_u32(in));
  t.hflip_augment = io::read_u32(in) != 0;
  t.seed = io::read_u64(in);
  t.checkpoint_every = io::read_u64(in);
  ck.iteration = io::read_u64(in);
  ck.params.tensors.resize(io::read_u32(in));
  for (Tensor& p : ck.params.tensors) p = io::read_tensor(in, /*requires_grad=*/true);
  ck.opt_state.velocity.resize(io::read_u32(in));
  for (Tensor& v : ck.opt_state.velocity) v = io::read_tensor(in);
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  write_checkpoint(out, ck);
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  return read_checkpoint(in);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct LossRow {
  std::uint64_t iter;
  double lr;
  double loss_seg;
  double loss_par;
};

// Seed streams: any iteration is reproducible in isolation, which also makes
// checkpoint resume exact and lets gen-data dump the very episodes a training
// run would consume.
inline std::uint64_t episode_seed_for_iteration(std::uint64_t master, std::uint64_t iter) {
  return derive_seed(master, iter, 0);
}

inline std::uint64_t augment_seed_for_iteration(std::uint64_t master, std::uint64_t iter) {
  return derive_seed(master, iter, 1);
}

inline Episode augment_episode(Episode ep, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& slot : ep.support) {
    for (auto& pair : slot) {
      if (rng.next_double() < 0.5) pair = flip_horizontal(pair);
    }
  }
  for (auto& pair : ep.query) {
    if (rng.next_double() < 0.5) pair = flip_horizontal(pair);
  }
  return ep;
}

using EpisodeSource = std::function<Episode(std::uint64_t iter, std::uint64_t episode_seed)>;

struct TrainSinks {
  std::ostream* loss_csv = nullptr;                                   // header + one row per iteration
  std::function<void(const Checkpoint&)> on_periodic_checkpoint;      // every checkpoint_every iters
  std::function<void(const LossRow&)> on_progress;                    // after each iteration
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRow> log;
};

// Full episodic training per Algorithm 1. Fresh episodes stream from the seen
// classes (or a custom source); horizontal flip augmentation is applied per
// image pair. Resuming from a checkpoint reproduces the uninterrupted
// trajectory exactly.
inline TrainResult train(const EncoderConfig& ecfg, const TrainConfig& cfg,
                         const ShapeDatasetConfig& ds_cfg, const std::vector<int>& class_pool,
                         const TrainSinks& sinks = {}, const Checkpoint* resume = nullptr,
                         const EpisodeSource& source = nullptr) {
  cfg.validate();
  ecfg.validate();
  ds_cfg.validate();

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  if (resume != nullptr) {
    ck = *resume;
    if (ck.iteration > cfg.iterations) {
      throw std::invalid_argument("train: checkpoint is already past the requested iterations");
    }
  } else {
    ck.encoder = ecfg;
    ck.params = init_params(ecfg, derive_seed(cfg.seed, 0x1217));
    ck.opt_state = OptimizerState::zeros_like(ck.params);
    ck.iteration = 0;
  }
  ck.train = cfg;

  if (sinks.loss_csv != nullptr && ck.iteration == 0) {
    *sinks.loss_csv << "iter,lr,loss_seg,loss_par\n";
  }

  for (std::uint64_t iter = ck.iteration; iter < cfg.iterations; ++iter) {
    const std::uint64_t ep_seed = episode_seed_for_iteration(cfg.seed, iter);
    Episode ep = source ? source(iter, ep_seed)
                        : sample_episode(class_pool, cfg.ways, cfg.shots, cfg.n_query, ep_seed,
                                         ds_cfg);
    if (cfg.hflip_augment) {
      ep = augment_episode(std::move(ep), augment_seed_for_iteration(cfg.seed, iter));
    }
    const TrainStepResult step = train_episode(ck.encoder, ck.params, ck.opt_state, ep, cfg, iter);

    const LossRow row{iter, learning_rate_at(cfg, iter), step.loss_seg, step.loss_par};
    result.log.push_back(row);
    if (sinks.loss_csv != nullptr) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%llu,%.17g,%.17g,%.17g\n",
                    static_cast<unsigned long long>(row.iter), row.lr, row.loss_seg, row.loss_par);
      *sinks.loss_csv << buf;
    }
    if (sinks.on_progress) sinks.on_progress(row);

    ck.iteration = iter + 1;
    if (cfg.checkpoint_every != 0 && ck.iteration % cfg.checkpoint_every == 0 &&
        ck.iteration < cfg.iterations && sinks.on_periodic_checkpoint) {
      sinks.on_periodic_checkpoint(ck);
    }
  }
  return result;
}

}  // namespace protoseg
