#include "protoseg/annotations.hpp"

#include <gtest/gtest.h>

#include "testutil.hpp"

using namespace protoseg;
using testutil::random_tensor;

namespace {

LabelMask disk_mask(std::size_t s, double cx, double cy, double r, std::uint8_t label = 1) {
  LabelMask m(s, s);
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      if (dx * dx + dy * dy <= r * r) m.set(y, x, label);
    }
  }
  return m;
}

LabelMask rect_mask(std::size_t s, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1,
                    std::uint8_t label = 1) {
  LabelMask m(s, s);
  for (std::size_t y = y0; y <= y1; ++y) {
    for (std::size_t x = x0; x <= x1; ++x) m.set(y, x, label);
  }
  return m;
}

}  // namespace

TEST(DeriveScribble, PixelsAreSubsetOfDenseLabels) {
  LabelMask dense = disk_mask(16, 8.0, 8.0, 5.0);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    WeakAnnotation weak = derive_scribble(dense, 3, seed);
    ASSERT_EQ(weak.kind, AnnotationKind::kScribble);
    for (std::size_t i = 0; i < dense.size(); ++i) {
      if (weak.mask.labels[i] == kUnknownLabel) continue;
      ASSERT_EQ(weak.mask.labels[i], dense.labels[i]) << "seed " << seed << " pixel " << i;
    }
  }
}

TEST(DeriveScribble, ZeroStrokesLeavesOnlyBackgroundStroke) {
  LabelMask dense = disk_mask(16, 8.0, 8.0, 5.0);
  WeakAnnotation weak = derive_scribble(dense, 0, 7);
  std::size_t bg_pixels = 0;
  for (std::size_t i = 0; i < weak.mask.size(); ++i) {
    if (weak.mask.labels[i] == kUnknownLabel) continue;
    EXPECT_EQ(weak.mask.labels[i], 0);
    ++bg_pixels;
  }
  EXPECT_GE(bg_pixels, 1u);
  EXPECT_LE(bg_pixels, static_cast<std::size_t>(kScribbleStrokeLength));
}

TEST(DeriveScribble, PixelCountBound) {
  LabelMask dense = disk_mask(16, 8.0, 8.0, 5.5);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const int strokes = static_cast<int>(seed % 4);
    WeakAnnotation weak = derive_scribble(dense, strokes, seed);
    std::size_t marked = 0;
    for (std::uint8_t l : weak.mask.labels) marked += (l != kUnknownLabel) ? 1 : 0;
    EXPECT_LE(marked, static_cast<std::size_t>(strokes * 20 + 20));
  }
}

TEST(DeriveScribble, DeterministicPerSeed) {
  LabelMask dense = disk_mask(16, 7.0, 9.0, 4.0);
  EXPECT_EQ(derive_scribble(dense, 3, 42).mask, derive_scribble(dense, 3, 42).mask);
  EXPECT_NE(derive_scribble(dense, 3, 42).mask, derive_scribble(dense, 3, 43).mask);
}

TEST(DeriveScribble, EmptyMaskRejected) {
  EXPECT_THROW(derive_scribble(LabelMask(8, 8), 3, 1), std::invalid_argument);
}

TEST(DeriveBbox, RectangularComponentEqualsDense) {
  LabelMask dense = rect_mask(12, 3, 7, 2, 9);
  WeakAnnotation weak = derive_bbox(dense, 5);
  EXPECT_EQ(weak.kind, AnnotationKind::kBbox);
  EXPECT_EQ(weak.mask, dense);
}

TEST(DeriveBbox, DiskGetsCornerNoise) {
  LabelMask dense = disk_mask(16, 8.0, 8.0, 5.0);
  WeakAnnotation weak = derive_bbox(dense, 5);
  std::size_t disk_area = dense.count(1), box_area = weak.mask.count(1);
  EXPECT_GT(box_area, disk_area);
  // every dense pixel is inside the box
  for (std::size_t i = 0; i < dense.size(); ++i) {
    if (dense.labels[i] == 1) EXPECT_EQ(weak.mask.labels[i], 1);
  }
}

TEST(DeriveBbox, LShapeRatioMatchesHandGeometry) {
  // vertical arm rows 2..7 x cols 2..3 (12 px) plus foot rows 6..7 x cols 4..5
  // (4 px): 16 px total, tight box 6x4 = 24 px, ratio 1.5
  LabelMask dense(10, 10);
  for (std::size_t y = 2; y <= 7; ++y) {
    for (std::size_t x = 2; x <= 3; ++x) dense.set(y, x, 1);
  }
  for (std::size_t y = 6; y <= 7; ++y) {
    for (std::size_t x = 4; x <= 5; ++x) dense.set(y, x, 1);
  }
  ASSERT_EQ(dense.count(1), 16u);
  WeakAnnotation weak = derive_bbox(dense, 3);
  EXPECT_EQ(weak.mask.count(1), 24u);
  EXPECT_DOUBLE_EQ(static_cast<double>(weak.mask.count(1)) / static_cast<double>(dense.count(1)),
                   1.5);
}

TEST(DeriveBbox, PicksOneComponentAndIsDeterministic) {
  LabelMask dense = rect_mask(16, 1, 3, 1, 3);
  for (std::size_t y = 10; y <= 14; ++y) {
    for (std::size_t x = 10; x <= 14; ++x) dense.set(y, x, 1);
  }
  WeakAnnotation a = derive_bbox(dense, 11);
  WeakAnnotation b = derive_bbox(dense, 11);
  EXPECT_EQ(a.mask, b.mask);
  const std::size_t area = a.mask.count(1);
  EXPECT_TRUE(area == 9u || area == 25u) << area;
}

TEST(DeriveBbox, EmptyMaskRejected) {
  EXPECT_THROW(derive_bbox(LabelMask(8, 8), 1), std::invalid_argument);
}

TEST(PoolWithWeak, DenseKindReducesToComputePrototypes) {
  Rng rng(1);
  Tensor f = random_tensor({3, 4, 4}, rng);
  LabelMask m = disk_mask(4, 2.0, 2.0, 1.4);
  WeakAnnotation dense{AnnotationKind::kDense, m};
  PrototypeSet a = pool_with_weak({f}, {dense}, 1);
  PrototypeSet b = compute_prototypes({f}, {m}, 1);
  ASSERT_TRUE(a.valid[1] && b.valid[1]);
  EXPECT_EQ(a.foreground[0].data(), b.foreground[0].data());
  EXPECT_EQ(a.background.data(), b.background.data());
}

TEST(PoolWithWeak, FullCoverageScribbleEqualsDense) {
  Rng rng(2);
  Tensor f = random_tensor({2, 4, 4}, rng);
  LabelMask m = rect_mask(4, 0, 1, 0, 3);
  // scribble that happens to cover every pixel
  WeakAnnotation full{AnnotationKind::kScribble, m};
  PrototypeSet a = pool_with_weak({f}, {full}, 1);
  PrototypeSet b = compute_prototypes({f}, {m}, 1);
  EXPECT_EQ(a.foreground[0].data(), b.foreground[0].data());
  EXPECT_EQ(a.background.data(), b.background.data());
}

TEST(PoolWithWeak, ConstantFeaturesMakeSubsetMeanEqualFullMean) {
  Tensor f({2, 4, 4}, [] {
    std::vector<double> d(32);
    for (std::size_t i = 0; i < 16; ++i) d[i] = 0.7;
    for (std::size_t i = 16; i < 32; ++i) d[i] = -0.2;
    return d;
  }());
  LabelMask dense = rect_mask(4, 1, 2, 1, 2);
  WeakAnnotation scribble = derive_scribble(dense, 2, 9);
  PrototypeSet a = pool_with_weak({f}, {scribble}, 1);
  PrototypeSet b = compute_prototypes({f}, {dense}, 1);
  ASSERT_TRUE(a.valid[1] && b.valid[1]);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_DOUBLE_EQ(a.foreground[0][k], b.foreground[0][k]);
    EXPECT_DOUBLE_EQ(a.background[k], b.background[k]);
  }
}

TEST(PoolWithWeak, UnknownPixelsNeverInfluencePrototypes) {
  Rng rng(3);
  LabelMask dense = disk_mask(8, 4.0, 4.0, 2.5);
  WeakAnnotation weak = derive_scribble(dense, 2, 4);
  Tensor f = random_tensor({3, 8, 8}, rng);

  std::vector<double> perturbed = f.data();
  for (std::size_t i = 0; i < weak.mask.size(); ++i) {
    if (weak.mask.labels[i] != kUnknownLabel) continue;
    for (std::size_t k = 0; k < 3; ++k) perturbed[k * 64 + i] += 100.0;
  }
  PrototypeSet a = pool_with_weak({f}, {weak}, 1);
  PrototypeSet b = pool_with_weak({Tensor({3, 8, 8}, std::move(perturbed))}, {weak}, 1);
  ASSERT_EQ(a.valid, b.valid);
  EXPECT_EQ(a.foreground[0].data(), b.foreground[0].data());
  EXPECT_EQ(a.background.data(), b.background.data());
}

TEST(PoolWithWeak, PrototypeIsConvexCombinationOfPooledPixels) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    LabelMask dense = disk_mask(8, 4.0, 4.0, 2.5);
    WeakAnnotation weak = derive_scribble(dense, 2, static_cast<std::uint64_t>(t));
    Tensor f = random_tensor({3, 8, 8}, rng, -2.0, 2.0);
    PrototypeSet ps = pool_with_weak({f}, {weak}, 1);
    ASSERT_TRUE(ps.valid[1]);
    for (std::size_t k = 0; k < 3; ++k) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t i = 0; i < 64; ++i) {
        if (weak.mask.labels[i] != 1) continue;
        lo = std::min(lo, f[k * 64 + i]);
        hi = std::max(hi, f[k * 64 + i]);
      }
      EXPECT_GE(ps.foreground[0][k], lo - 1e-12);
      EXPECT_LE(ps.foreground[0][k], hi + 1e-12);
    }
  }
}
