#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "support.hpp"

namespace mrcl {
namespace {

using masking::MaskPlan;
using masking::MaskStrategy;

TEST(Patchify, DefaultGridArithmetic) {
  Rng rng = make_rng({1});
  const auto big = masking::patchify<float>(testing::random_image(224, 224, 3, rng), 16);
  EXPECT_EQ(big.num_patches(), 196);
  EXPECT_EQ(big.patches.rows(), 196);
  EXPECT_EQ(big.patches.cols(), 768);
  const auto small = masking::patchify<float>(testing::random_image(32, 32, 3, rng), 4);
  EXPECT_EQ(small.num_patches(), 64);
  EXPECT_EQ(small.patch_dim(), 48);
}

TEST(Patchify, FlatteningOrderIsRowColChannel) {
  Image img(4, 4, 2);
  std::iota(img.data.begin(), img.data.end(), 0.0f);
  const auto seq = masking::patchify<double>(img, 2);
  ASSERT_EQ(seq.rows, 2);
  ASSERT_EQ(seq.cols, 2);
  // Patch 1 is the top-right 2x2 block; entry (py=1, px=0, c=1).
  EXPECT_EQ(seq.patches(1, (1 * 2 + 0) * 2 + 1), img.at(1, 2, 1));
  EXPECT_EQ(seq.patches(2, 0), img.at(2, 0, 0));
}

TEST(Patchify, NonDivisibleSizeNamesTheDimensions) {
  Rng rng = make_rng({2});
  try {
    (void)masking::patchify<float>(testing::random_image(30, 30, 3, rng), 4);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("30"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4"), std::string::npos) << msg;
  }
}

TEST(Unpatchify, InvertsPatchifyExactly) {
  Rng rng = make_rng({3});
  for (int trial = 0; trial < 20; ++trial) {
    const int p = 1 + static_cast<int>(rng() % 4);
    const int h = p * (1 + static_cast<int>(rng() % 5));
    const int w = p * (1 + static_cast<int>(rng() % 5));
    const int c = 1 + static_cast<int>(rng() % 3);
    const auto img = testing::random_image(h, w, c, rng);
    EXPECT_EQ(masking::unpatchify(masking::patchify<float>(img, p)), img);
  }
}

TEST(Unpatchify, SinglePatchIsAReshape) {
  Rng rng = make_rng({4});
  const auto img = testing::random_image(3, 3, 2, rng);
  const auto seq = masking::patchify<float>(img, 3);
  ASSERT_EQ(seq.num_patches(), 1);
  for (int k = 0; k < 18; ++k) EXPECT_EQ(seq.patches(0, k), img.data[static_cast<std::size_t>(k)]);
  EXPECT_EQ(masking::unpatchify(seq), img);
}

TEST(Unpatchify, TamperedGridIsAShapeError) {
  Rng rng = make_rng({5});
  auto seq = masking::patchify<float>(testing::random_image(8, 8, 3, rng), 4);
  seq.rows = 3;
  EXPECT_THROW((void)masking::unpatchify(seq), ShapeError);
}

TEST(MaskPlan, CountsFollowTheRoundingRule) {
  Rng rng = make_rng({6});
  const auto a = masking::make_mask_plan(196, 0.75, MaskStrategy::kRandom, rng);
  EXPECT_EQ(a.num_visible, 49);
  EXPECT_EQ(a.num_masked(), 147);
  const auto b = masking::make_mask_plan(10, 0.0, MaskStrategy::kRandom, rng);
  EXPECT_EQ(b.num_visible, 10);
  EXPECT_EQ(b, masking::identity_plan(10));
  const auto c = masking::make_mask_plan(10, 0.2, MaskStrategy::kRandom, rng);
  EXPECT_EQ(c.num_visible, 8);
  EXPECT_EQ(c.num_masked(), 2);
}

TEST(MaskPlan, RatioOutsideRangeIsAConfigError) {
  Rng rng = make_rng({7});
  EXPECT_THROW((void)masking::make_mask_plan(10, 1.0, MaskStrategy::kRandom, rng), ConfigError);
  EXPECT_THROW((void)masking::make_mask_plan(10, -0.1, MaskStrategy::kRandom, rng), ConfigError);
  EXPECT_THROW((void)masking::parse_strategy("checkerboard"), ConfigError);
}

void expect_partition(const MaskPlan& plan, int n, double r) {
  ASSERT_EQ(plan.num_patches(), n);
  std::set<int> vis(plan.visible().begin(), plan.visible().end());
  std::set<int> msk(plan.masked().begin(), plan.masked().end());
  ASSERT_EQ(static_cast<int>(vis.size() + msk.size()), n);
  for (int i = 0; i < n; ++i) ASSERT_NE(vis.count(i), msk.count(i)) << "index " << i;
  ASSERT_EQ(plan.num_masked(), static_cast<int>(std::lround(r * n)));
  ASSERT_NO_THROW(plan.validate());
}

TEST(MaskPlan, PartitionAndCountHoldForEveryStrategy) {
  Rng rng = make_rng({8});
  for (int trial = 0; trial < 3000; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 64);
    const double r = uniform(rng, 0.0, 0.95);
    for (auto s : {MaskStrategy::kRandom, MaskStrategy::kBlockwise, MaskStrategy::kGridwise}) {
      expect_partition(masking::make_mask_plan(n, r, s, rng), n, r);
    }
  }
}

TEST(MaskPlan, RandomVisibilityIsUniform) {
  Rng rng = make_rng({9});
  const int n = 8;
  const int plans = 20000;
  std::vector<int> hits(n, 0);
  int visible = 0;
  for (int t = 0; t < plans; ++t) {
    const auto plan = masking::make_mask_plan(n, 0.4, MaskStrategy::kRandom, rng);
    visible = plan.num_visible;
    for (int i : plan.visible()) ++hits[static_cast<std::size_t>(i)];
  }
  const double p = static_cast<double>(visible) / n;
  const double sigma = std::sqrt(plans * p * (1 - p));
  for (int i = 0; i < n; ++i) EXPECT_NEAR(hits[static_cast<std::size_t>(i)], plans * p, 3 * sigma) << i;
}

TEST(MaskPlan, BlockwiseMasksAContiguousRectangle) {
  Rng rng = make_rng({10});
  for (int t = 0; t < 200; ++t) {
    const auto plan = masking::make_mask_plan(64, 0.25, MaskStrategy::kBlockwise, rng, {8, 8});
    int r0 = 8, r1 = -1, c0 = 8, c1 = -1;
    for (int i : plan.masked()) {
      r0 = std::min(r0, i / 8);
      r1 = std::max(r1, i / 8);
      c0 = std::min(c0, i % 8);
      c1 = std::max(c1, i % 8);
    }
    EXPECT_EQ((r1 - r0 + 1) * (c1 - c0 + 1), 16) << "16 cells should fill a 4x4 block";
  }
}

TEST(MaskPlan, GridwiseMasksEveryKthPatch) {
  Rng rng = make_rng({11});
  const auto plan = masking::make_mask_plan(64, 0.25, MaskStrategy::kGridwise, rng, {8, 8});
  ASSERT_EQ(plan.num_masked(), 16);
  std::vector<int> m(plan.masked().begin(), plan.masked().end());
  std::sort(m.begin(), m.end());
  for (std::size_t i = 1; i < m.size(); ++i) EXPECT_EQ(m[i] - m[i - 1], 4);
}

TEST(MaskPlan, JsonRoundTrip) {
  Rng rng = make_rng({12});
  const auto plan = masking::make_mask_plan(12, 0.5, MaskStrategy::kBlockwise, rng, {3, 4});
  EXPECT_EQ(MaskPlan::from_json(plan.to_json()), plan);
  EXPECT_THROW((void)MaskPlan::from_json(R"({"strategy":"random","ratio":0.5,"permutation":[0,0],"num_visible":1})"),
               ShapeError);
}

TEST(ApplyMask, IdentityPlanKeepsEverything) {
  Rng rng = make_rng({13});
  const Mat<double> tokens = testing::random_mat<double>(5, 3, rng);
  EXPECT_EQ(masking::apply_mask(tokens, masking::identity_plan(5)), tokens);
}

TEST(ApplyMask, HandBuiltPermutation) {
  Mat<double> tokens(4, 2);
  tokens << 0, 0, 1, 1, 2, 2, 3, 3;
  MaskPlan plan;
  plan.permutation = {2, 0, 3, 1};
  plan.num_visible = 2;
  plan.mask_ratio = 0.5;
  const auto out = masking::apply_mask(tokens, plan);
  ASSERT_EQ(out.rows(), 2);
  EXPECT_EQ(out(0, 0), 2);
  EXPECT_EQ(out(1, 0), 0);
  EXPECT_THROW((void)masking::apply_mask(Mat<double>(3, 2), plan), ShapeError);
}

TEST(ApplyMask, RestoreOrderPutsRowsBackInTheirSlots) {
  Rng rng = make_rng({14});
  for (int t = 0; t < 100; ++t) {
    const int n = 1 + static_cast<int>(rng() % 20);
    const auto plan = masking::make_mask_plan(n, uniform(rng, 0, 0.9), MaskStrategy::kRandom, rng);
    const Mat<double> tokens = testing::random_mat<double>(n, 3, rng);
    const RowVec<double> fill = RowVec<double>::Constant(3, 42.0);
    const auto restored = masking::restore_order(masking::apply_mask(tokens, plan), plan, fill);
    const auto masked = plan.is_masked();
    for (int i = 0; i < n; ++i) {
      if (masked[static_cast<std::size_t>(i)]) {
        EXPECT_EQ(restored.row(i), fill);
      } else {
        EXPECT_EQ(restored.row(i), tokens.row(i));
      }
    }
    const auto inv = plan.inverse();
    for (int i = 0; i < n; ++i) EXPECT_EQ(plan.permutation[static_cast<std::size_t>(inv[static_cast<std::size_t>(i)])], i);
  }
}

}  // namespace
}  // namespace mrcl
