#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/rng.hpp"
#include "protoseg/tensor.hpp"

namespace protoseg {

// Small fully-convolutional feature extractor shared between support and
// query images. Each block is conv(3x3, stride 1, same padding) -> relu ->
// maxpool(window = stride). A pool stride of 1 keeps resolution; dilation
// widens the receptive field without shrinking the map.
struct EncoderBlock {
  int out_channels;
  int pool_stride;
  int dilation;
};

struct EncoderConfig {
  int in_channels = 1;
  std::vector<EncoderBlock> blocks = {{16, 2, 1}, {32, 2, 1}, {32, 1, 2}};

  int feature_dim() const { return blocks.empty() ? in_channels : blocks.back().out_channels; }

  int downsample_factor() const {
    int ds = 1;
    for (const auto& b : blocks) ds *= b.pool_stride;
    return ds;
  }

  void validate() const {
    if (in_channels < 1) throw std::invalid_argument("encoder: in_channels must be positive");
    if (blocks.empty()) throw std::invalid_argument("encoder: at least one block required");
    for (const auto& b : blocks) {
      if (b.out_channels < 1 || b.pool_stride < 1 || b.dilation < 1) {
        throw std::invalid_argument("encoder: block fields must be positive");
      }
    }
  }
};

inline constexpr int kEncoderKernel = 3;

// Per-block kernel and bias tensors in a stable flat order (kernel0, bias0,
// kernel1, bias1, ...), the order used by checkpoint serialization and the
// optimizer state.
struct EncoderParams {
  std::vector<Tensor> tensors;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& t : tensors) n += t.size();
    return n;
  }
};

// He-style initialization: kernels from normal(0, sqrt(2/fan_in)), biases
// zero. Deterministic per seed.
inline EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  EncoderParams params;
  Rng rng(derive_seed(seed, 0x1417));
  int in_ch = cfg.in_channels;
  for (const auto& block : cfg.blocks) {
    const auto co = static_cast<std::size_t>(block.out_channels);
    const auto ci = static_cast<std::size_t>(in_ch);
    const std::size_t k = kEncoderKernel;
    const double stddev = std::sqrt(2.0 / static_cast<double>(ci * k * k));
    std::vector<double> kernel(co * ci * k * k);
    for (double& v : kernel) v = rng.normal(0.0, stddev);
    params.tensors.emplace_back(std::vector<std::size_t>{co, ci, k, k}, std::move(kernel), true);
    params.tensors.emplace_back(Tensor::zeros({co}, true));
    in_ch = block.out_channels;
  }
  return params;
}

// Feature extraction: [in_channels,H,W] -> [feature_dim, H/ds, W/ds], taped
// for backward when the parameters require gradients.
inline Tensor encode(const EncoderConfig& cfg, const EncoderParams& params, const Tensor& image) {
  cfg.validate();
  if (params.tensors.size() != cfg.blocks.size() * 2) {
    throw std::invalid_argument("encode: parameter count does not match config");
  }
  if (image.rank() != 3 || image.dim(0) != static_cast<std::size_t>(cfg.in_channels)) {
    throw std::invalid_argument("encode: expected image [" + std::to_string(cfg.in_channels) +
                                ",H,W], got " + Tensor::shape_string(image.shape()));
  }
  const int ds = cfg.downsample_factor();
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (h % static_cast<std::size_t>(ds) != 0 || w % static_cast<std::size_t>(ds) != 0) {
    throw std::invalid_argument("encode: input " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by downsample factor " + std::to_string(ds));
  }
  Tensor x = image;
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const auto& block = cfg.blocks[i];
    const Tensor& kernel = params.tensors[2 * i];
    const Tensor& bias = params.tensors[2 * i + 1];
    // same padding for the 3x3 kernel at the block's dilation
    x = relu(conv2d(x, kernel, bias, 1, block.dilation, block.dilation));
    if (block.pool_stride > 1) {
      x = maxpool2d(x, block.pool_stride, block.pool_stride);
    }
  }
  return x;
}

}  // namespace protoseg
