#include "protoseg/encoder.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "protoseg/serialize.hpp"
#include "testutil.hpp"

using namespace protoseg;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.blocks = {{4, 2, 1}, {6, 2, 1}};
  return cfg;
}

}  // namespace

TEST(InitParams, DeterministicPerSeed) {
  const EncoderConfig cfg;
  EncoderParams a = init_params(cfg, 11);
  EncoderParams b = init_params(cfg, 11);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    EXPECT_EQ(a.tensors[i].data(), b.tensors[i].data());
  }
  EncoderParams c = init_params(cfg, 12);
  EXPECT_NE(a.tensors[0].data(), c.tensors[0].data());
}

TEST(InitParams, BiasesAreZero) {
  EncoderParams p = init_params(EncoderConfig{}, 3);
  for (std::size_t i = 1; i < p.tensors.size(); i += 2) {
    for (std::size_t j = 0; j < p.tensors[i].size(); ++j) EXPECT_EQ(p.tensors[i][j], 0.0);
  }
}

TEST(InitParams, HeVarianceMatchesFanIn) {
  EncoderConfig cfg;
  cfg.in_channels = 16;
  cfg.blocks = {{32, 2, 1}};
  const double expected = 2.0 / (3.0 * 3.0 * 16.0);
  double mean_var = 0.0;
  const int seeds = 10;
  for (int s = 0; s < seeds; ++s) {
    EncoderParams p = init_params(cfg, static_cast<std::uint64_t>(s));
    const Tensor& kernel = p.tensors[0];
    double mean = 0.0;
    for (std::size_t i = 0; i < kernel.size(); ++i) mean += kernel[i];
    mean /= static_cast<double>(kernel.size());
    double var = 0.0;
    for (std::size_t i = 0; i < kernel.size(); ++i) {
      var += (kernel[i] - mean) * (kernel[i] - mean);
    }
    var /= static_cast<double>(kernel.size() - 1);
    mean_var += var;
  }
  mean_var /= seeds;
  EXPECT_GT(mean_var, 0.8 * expected);
  EXPECT_LT(mean_var, 1.2 * expected);
}

TEST(InitParams, CountIsPureFunctionOfConfig) {
  const EncoderConfig cfg;
  EXPECT_EQ(init_params(cfg, 1).parameter_count(), init_params(cfg, 999).parameter_count());
  // default: 16*1*9+16 + 32*16*9+32 + 32*32*9+32 = 160 + 4640 + 9248
  EXPECT_EQ(init_params(cfg, 1).parameter_count(), 160u + 4640u + 9248u);
}

TEST(Encode, DefaultConfigShape) {
  const EncoderConfig cfg;
  EXPECT_EQ(cfg.downsample_factor(), 4);
  EXPECT_EQ(cfg.feature_dim(), 32);
  EncoderParams p = init_params(cfg, 5);
  Tensor features = encode(cfg, p, Tensor::zeros({1, 32, 32}));
  EXPECT_EQ(features.shape(), (std::vector<std::size_t>{32, 8, 8}));
}

TEST(Encode, ZeroImageZeroFeatures) {
  const EncoderConfig cfg;
  EncoderParams p = init_params(cfg, 5);
  Tensor features = encode(cfg, p, Tensor::zeros({1, 32, 32}));
  for (std::size_t i = 0; i < features.size(); ++i) EXPECT_EQ(features[i], 0.0);
}

TEST(Encode, IndivisibleInputRejectedWithMessage) {
  const EncoderConfig cfg;
  EncoderParams p = init_params(cfg, 5);
  try {
    encode(cfg, p, Tensor::zeros({1, 30, 30}));
    FAIL() << "expected a divisibility error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("30"), std::string::npos);
    EXPECT_NE(msg.find("4"), std::string::npos);
  }
}

TEST(Encode, DeterministicForward) {
  const EncoderConfig cfg;
  EncoderParams p = init_params(cfg, 5);
  Rng rng(2);
  Tensor img = testutil::random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  Tensor a = encode(cfg, p, img);
  Tensor b = encode(cfg, p, img);
  EXPECT_EQ(a.data(), b.data());
}

TEST(Encode, GradientsPassFiniteDifference) {
  const EncoderConfig cfg = tiny_config();
  EncoderParams params = init_params(cfg, 21);
  Rng rng(4);
  Tensor img = testutil::random_tensor({1, 8, 8}, rng, 0.0, 1.0);
  Tensor weights = testutil::random_tensor({6, 2, 2}, rng, -1.0, 1.0);

  for (std::size_t pi = 0; pi < params.tensors.size(); ++pi) {
    auto f = [&, pi](const Tensor& p) {
      EncoderParams probe = params;
      probe.tensors[pi] = p;
      return sum(mul(encode(cfg, probe, img), weights));
    };
    EXPECT_LT(testutil::gradcheck(f, params.tensors[pi]), 1e-4) << "param " << pi;
  }
}

TEST(Encode, MatchesGoldenTensor) {
  const char* dir = PROTOSEG_TEST_DATA_DIR;
  const std::string path = std::string(dir) + "/golden/encoder_forward.bin";
  ASSERT_TRUE(std::filesystem::exists(path))
      << "golden file missing; build and run the golden_gen tool";
  std::ifstream in(path, std::ios::binary);
  Tensor golden = io::read_tensor(in);

  const EncoderConfig cfg;
  EncoderParams p = init_params(cfg, 4242);
  Rng rng(4242);
  Tensor img = testutil::random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  Tensor features = encode(cfg, p, img);
  ASSERT_EQ(features.shape(), golden.shape());
  EXPECT_EQ(features.data(), golden.data());
}
