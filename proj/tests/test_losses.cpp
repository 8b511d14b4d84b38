#include <gtest/gtest.h>

#include <cmath>
#include <tuple>

#include "support.hpp"

namespace mrcl {
namespace {

using loss::ContrastiveHead;
using masking::MaskPlan;
using masking::PatchSequence;

// Double-loop oracles.

double cosine(const Mat<double>& a, Eigen::Index i, const Mat<double>& b, Eigen::Index j) {
  double dot = 0, na = 0, nb = 0;
  for (Eigen::Index k = 0; k < a.cols(); ++k) {
    dot += a(i, k) * b(j, k);
    na += a(i, k) * a(i, k);
    nb += b(j, k) * b(j, k);
  }
  return dot / std::sqrt(na * nb);
}

double oracle_info_nce(const Mat<double>& z1, const Mat<double>& z2, double tau) {
  const Eigen::Index n = z1.rows();
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double row = 0, col = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      row += std::exp(cosine(z1, i, z2, j) / tau);
      col += std::exp(cosine(z1, j, z2, i) / tau);
    }
    const double pos = cosine(z1, i, z2, i) / tau;
    total += (std::log(row) - pos) + (std::log(col) - pos);
  }
  return total / (2.0 * static_cast<double>(n));
}

double oracle_barlow(const Mat<double>& z1, const Mat<double>& z2, double lambda, double eps) {
  const Eigen::Index n = z1.rows(), d = z1.cols();
  auto standardize = [&](const Mat<double>& z) {
    Mat<double> s(n, d);
    for (Eigen::Index k = 0; k < d; ++k) {
      double mean = 0, var = 0;
      for (Eigen::Index i = 0; i < n; ++i) mean += z(i, k);
      mean /= static_cast<double>(n);
      for (Eigen::Index i = 0; i < n; ++i) var += (z(i, k) - mean) * (z(i, k) - mean);
      var /= static_cast<double>(n);
      for (Eigen::Index i = 0; i < n; ++i) s(i, k) = (z(i, k) - mean) / std::sqrt(var + eps);
    }
    return s;
  };
  const Mat<double> s1 = standardize(z1), s2 = standardize(z2);
  double total = 0;
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index b = 0; b < d; ++b) {
      double c = 0;
      for (Eigen::Index i = 0; i < n; ++i) c += s1(i, a) * s2(i, b);
      c /= static_cast<double>(n);
      total += a == b ? (1 - c) * (1 - c) : lambda * c * c;
    }
  }
  return total;
}

PatchSequence<double> seq(const Mat<double>& m) {
  PatchSequence<double> s;
  s.patches = m;
  s.rows = 1;
  s.cols = static_cast<int>(m.rows());
  s.patch_size = 1;
  s.channels = static_cast<int>(m.cols());
  return s;
}

TEST(InfoNce, AllIdenticalProjectionsGiveLogB) {
  Mat<double> z = Mat<double>::Constant(4, 5, 0.3);
  EXPECT_NEAR(loss::info_nce<double>(z, z, 0.2), std::log(4.0), 1e-6);
  Mat<float> zf = Mat<float>::Constant(4, 5, 1.5f);
  EXPECT_NEAR(loss::info_nce<float>(zf, zf, 0.2f), std::log(4.0), 1e-6);
}

TEST(InfoNce, SinglePairIsZero) {
  Rng rng = make_rng({1});
  EXPECT_NEAR(loss::info_nce<double>(testing::random_mat<double>(1, 6, rng), testing::random_mat<double>(1, 6, rng),
                                     0.1),
              0.0, 1e-12);
}

TEST(InfoNce, OrthonormalPairsFrozenValue) {
  // log(1 + e^-2)
  const Mat<double> eye = Mat<double>::Identity(2, 2);
  EXPECT_NEAR(loss::info_nce<double>(eye, eye, 0.5), 0.1269280110429726, 1e-14);
}

TEST(InfoNce, MatchesDoubleLoopOracle) {
  Rng rng = make_rng({2});
  for (int trial = 0; trial < 20; ++trial) {
    const auto z1 = testing::random_mat<double>(8, 4, rng);
    const auto z2 = testing::random_mat<double>(8, 4, rng);
    const double tau = uniform(rng, 0.05, 1.0);
    EXPECT_NEAR(loss::info_nce<double>(z1, z2, tau), oracle_info_nce(z1, z2, tau), 1e-10);
  }
}

TEST(InfoNce, NonNegativeAndScaleInvariant) {
  Rng rng = make_rng({3});
  for (int trial = 0; trial < 200; ++trial) {
    const auto b = static_cast<Eigen::Index>(1 + rng() % 9);
    const auto z1 = testing::random_mat<double>(b, 3, rng);
    const auto z2 = testing::random_mat<double>(b, 3, rng);
    const double value = loss::info_nce<double>(z1, z2, 0.2);
    EXPECT_GE(value, 0.0);
    const double c = uniform(rng, 0.01, 100.0);
    EXPECT_NEAR(loss::info_nce<double>(Mat<double>(z1 * c), Mat<double>(z2 * c), 0.2), value,
                1e-12 * std::max(1.0, value));
  }
}

TEST(InfoNce, ErrorsAreTyped) {
  Mat<double> z = Mat<double>::Ones(3, 2);
  Mat<double> zero = z;
  zero.row(1).setZero();
  EXPECT_THROW((void)loss::info_nce<double>(z, zero, 0.2), NumericError);
  EXPECT_THROW((void)loss::info_nce<double>(z, Mat<double>::Ones(2, 2), 0.2), ShapeError);
  EXPECT_THROW((void)loss::info_nce<double>(z, z, 0.0), ConfigError);
}

TEST(Barlow, IdentityAndAntiIdentity) {
  // Columns are orthogonal, zero-mean, unit-variance features over B=4.
  Mat<double> z(4, 2);
  z << 1, 1, -1, 1, 1, -1, -1, -1;
  EXPECT_NEAR(loss::barlow_twins<double>(z, z, 0.005, 0.0), 0.0, 1e-8);
  EXPECT_NEAR(loss::barlow_twins<double>(z, Mat<double>(-z), 0.005, 0.0), 4.0 * 2, 1e-6);
  Rng rng = make_rng({4});
  const auto r = testing::random_mat<double>(16, 6, rng);
  EXPECT_NEAR(loss::barlow_twins<double>(r, Mat<double>(-r), 0.0051, 0.0), 4.0 * 6 + 0.0051 * oracle_barlow(r, r, 1, 0),
              1e-6);
}

TEST(Barlow, MatchesDoubleLoopOracle) {
  Rng rng = make_rng({5});
  for (int trial = 0; trial < 20; ++trial) {
    const auto z1 = testing::random_mat<double>(8, 4, rng);
    const auto z2 = testing::random_mat<double>(8, 4, rng);
    EXPECT_NEAR(loss::barlow_twins<double>(z1, z2, 0.0051, 1e-5), oracle_barlow(z1, z2, 0.0051, 1e-5), 1e-10);
  }
}

TEST(Barlow, AffineFeatureRescalingIsInvisible) {
  Rng rng = make_rng({6});
  for (int trial = 0; trial < 100; ++trial) {
    const auto z1 = testing::random_mat<double>(10, 5, rng);
    const auto z2 = testing::random_mat<double>(10, 5, rng);
    Mat<double> a1 = z1, a2 = z2;
    for (Eigen::Index k = 0; k < 5; ++k) {
      double scale = uniform(rng, 0.1, 10.0) * (bernoulli(rng, 0.5) ? 1 : -1);
      const double shift = uniform(rng, -5, 5);
      a1.col(k) = (z1.col(k).array() * scale + shift).matrix();
      a2.col(k) = (z2.col(k).array() * scale + shift).matrix();
    }
    EXPECT_NEAR(loss::barlow_twins<double>(a1, a2, 0.0051, 0.0), loss::barlow_twins<double>(z1, z2, 0.0051, 0.0),
                1e-9);
  }
}

TEST(Barlow, DegenerateInputs) {
  Mat<double> z = Mat<double>::Random(4, 3);
  Mat<double> flat = z;
  flat.col(2).setConstant(0.5);
  try {
    (void)loss::barlow_twins<double>(z, flat, 0.005, 1e-5);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("feature 2"), std::string::npos);
  }
  EXPECT_THROW((void)loss::barlow_twins<double>(Mat<double>::Ones(1, 3), Mat<double>::Ones(1, 3), 0.005, 1e-5),
               ShapeError);
}

TEST(Reconstruction, PerfectIsZero) {
  Rng rng = make_rng({7});
  const auto t = seq(testing::random_mat<double>(6, 5, rng));
  const auto plan = masking::make_mask_plan(6, 0.5, masking::MaskStrategy::kRandom, rng);
  const auto terms = loss::reconstruction_loss(t, t, plan);
  EXPECT_EQ(terms.masked, 0.0);
  EXPECT_EQ(terms.unmasked, 0.0);
}

TEST(Reconstruction, UnitErrorEverywhereGivesOnes) {
  Rng rng = make_rng({13});
  for (double r : {0.25, 0.5, 0.75}) {
    const auto plan = masking::make_mask_plan(8, r, masking::MaskStrategy::kRandom, rng);
    const auto terms = loss::reconstruction_loss(seq(Mat<double>::Ones(8, 3)), seq(Mat<double>::Zero(8, 3)), plan);
    EXPECT_EQ(terms.masked, 1.0);
    EXPECT_EQ(terms.unmasked, 1.0);
  }
}

TEST(Reconstruction, ClosedFormSlotMeans) {
  // Four 2-value patches; the plan keeps patches 3 and 1.
  const auto target = seq(Mat<double>::Zero(4, 2));
  Mat<double> r(4, 2);
  r << 1, 1, 2, 0, 3, 3, 0, 4;
  MaskPlan plan{{3, 1, 0, 2}, 2, 0.5, masking::MaskStrategy::kRandom};
  const auto terms = loss::reconstruction_loss(seq(r), target, plan);
  EXPECT_DOUBLE_EQ(terms.masked, (1 + 1 + 9 + 9) / 4.0);
  EXPECT_DOUBLE_EQ(terms.unmasked, (4 + 0 + 0 + 16) / 4.0);
  const auto none = loss::reconstruction_loss(seq(r), target, masking::identity_plan(4));
  EXPECT_EQ(none.masked, 0.0);
  EXPECT_DOUBLE_EQ(none.unmasked, (2 + 4 + 18 + 16) / 8.0);
}

TEST(Reconstruction, TermsAreSeparable) {
  Rng rng = make_rng({8});
  for (int trial = 0; trial < 50; ++trial) {
    const auto target = seq(testing::random_mat<double>(8, 3, rng));
    auto recon = seq(testing::random_mat<double>(8, 3, rng));
    const auto plan = masking::make_mask_plan(8, 0.5, masking::MaskStrategy::kRandom, rng);
    const auto before = loss::reconstruction_loss(recon, target, plan);
    auto changed = recon;
    for (int i : plan.visible()) changed.patches.row(i) = testing::random_mat<double>(1, 3, rng);
    EXPECT_EQ(loss::reconstruction_loss(changed, target, plan).masked, before.masked);
    changed = recon;
    for (int i : plan.masked()) changed.patches.row(i) = testing::random_mat<double>(1, 3, rng);
    EXPECT_EQ(loss::reconstruction_loss(changed, target, plan).unmasked, before.unmasked);
  }
}

TEST(Reconstruction, ShapeMismatchIsTyped) {
  EXPECT_THROW((void)loss::reconstruction_loss(seq(Mat<double>::Zero(4, 2)), seq(Mat<double>::Zero(4, 3)),
                                               masking::identity_plan(4)),
               ShapeError);
  EXPECT_THROW((void)loss::reconstruction_loss(seq(Mat<double>::Zero(4, 2)), seq(Mat<double>::Zero(4, 2)),
                                               masking::identity_plan(5)),
               ShapeError);
}

TEST(LossGrad, ContrastiveHeadsAndReconstruction) {
  Rng rng = make_rng({9});
  Mat<double> z1 = testing::random_mat<double>(5, 3, rng);
  Mat<double> z2 = testing::random_mat<double>(5, 3, rng);
  Mat<double> g1, g2;
  (void)loss::info_nce<double>(z1, z2, 0.3, &g1, &g2);
  auto nce = [&] { return loss::info_nce<double>(z1, z2, 0.3); };
  EXPECT_LT(testing::rel_error(g1, testing::numeric_grad<double>(z1, nce, 1e-6)), 1e-7);
  EXPECT_LT(testing::rel_error(g2, testing::numeric_grad<double>(z2, nce, 1e-6)), 1e-7);

  (void)loss::barlow_twins<double>(z1, z2, 0.05, 1e-5, &g1, &g2);
  auto bt = [&] { return loss::barlow_twins<double>(z1, z2, 0.05, 1e-5); };
  EXPECT_LT(testing::rel_error(g1, testing::numeric_grad<double>(z1, bt, 1e-6)), 1e-7);
  EXPECT_LT(testing::rel_error(g2, testing::numeric_grad<double>(z2, bt, 1e-6)), 1e-7);

  const auto target = seq(testing::random_mat<double>(6, 2, rng));
  auto recon = seq(testing::random_mat<double>(6, 2, rng));
  const auto plan = masking::make_mask_plan(6, 0.33, masking::MaskStrategy::kRandom, rng);
  const Mat<double> g = loss::reconstruction_grad(recon, target, plan, 8.0, 5.0);
  auto rec = [&] {
    const auto t = loss::reconstruction_loss(recon, target, plan);
    return 8.0 * t.masked + 5.0 * t.unmasked;
  };
  EXPECT_LT(testing::rel_error(g, testing::numeric_grad<double>(recon.patches, rec, 1e-6)), 1e-8);
}

loss::PairOutputs<double> random_outputs(Rng& rng, std::size_t b, int n, int pd) {
  loss::PairOutputs<double> out;
  out.proj1 = testing::random_mat<double>(static_cast<Eigen::Index>(b), 4, rng);
  out.proj2 = testing::random_mat<double>(static_cast<Eigen::Index>(b), 4, rng);
  for (std::size_t i = 0; i < b; ++i) {
    out.recon1.push_back(seq(testing::random_mat<double>(n, pd, rng)));
    out.recon2.push_back(seq(testing::random_mat<double>(n, pd, rng)));
    out.target1.push_back(seq(testing::random_mat<double>(n, pd, rng)));
    out.target2.push_back(seq(testing::random_mat<double>(n, pd, rng)));
    out.plan1.push_back(masking::make_mask_plan(n, uniform(rng, 0, 0.9), masking::MaskStrategy::kRandom, rng));
    out.plan2.push_back(masking::make_mask_plan(n, uniform(rng, 0, 0.9), masking::MaskStrategy::kRandom, rng));
  }
  return out;
}

TEST(TotalLoss, DecompositionIdentityHoldsExactly) {
  Rng rng = make_rng({10});
  for (int trial = 0; trial < 100; ++trial) {
    const auto out = random_outputs(rng, 2 + rng() % 5, 6, 3);
    loss::LossWeights w;
    w.alpha = uniform(rng, 0, 10);
    w.lam = uniform(rng, 0, 10);
    w.contrastive_weight = uniform(rng, 0.1, 3);
    const auto head = trial % 2 ? ContrastiveHead::kBarlow : ContrastiveHead::kInfoNce;
    const auto l = loss::total_loss(out, w, head);
    EXPECT_EQ(l.total, w.contrastive_weight * l.contrastive + w.alpha * l.rec_masked + w.lam * l.rec_unmasked);
    EXPECT_EQ(l.weights, w);
  }
}

TEST(TotalLoss, ComponentsMatchPerViewBatchMeans) {
  Rng rng = make_rng({11});
  const auto out = random_outputs(rng, 3, 8, 2);
  loss::LossWeights w;  // alpha 8, lam 5
  const auto l = loss::total_loss(out, w, ContrastiveHead::kInfoNce);
  double m = 0, u = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto a = loss::reconstruction_loss(out.recon1[i], out.target1[i], out.plan1[i]);
    const auto b = loss::reconstruction_loss(out.recon2[i], out.target2[i], out.plan2[i]);
    m += (a.masked + b.masked) / 3.0;
    u += (a.unmasked + b.unmasked) / 3.0;
  }
  EXPECT_NEAR(l.rec_masked, m, 1e-12);
  EXPECT_NEAR(l.rec_unmasked, u, 1e-12);
  EXPECT_NEAR(l.contrastive, oracle_info_nce(out.proj1, out.proj2, 0.2), 1e-10);
  EXPECT_NEAR(l.total, l.contrastive + 8 * m + 5 * u, 1e-10);
}

TEST(TotalLoss, ZeroWeightsReduceToContrastive) {
  Rng rng = make_rng({12});
  const auto out = random_outputs(rng, 4, 5, 2);
  loss::LossWeights w;
  w.alpha = 0;
  w.lam = 0;
  const auto l = loss::total_loss(out, w, ContrastiveHead::kBarlow);
  EXPECT_EQ(l.total, l.contrastive);
  EXPECT_GT(l.rec_masked + l.rec_unmasked, 0.0);
}

TEST(TotalLoss, NoContrastiveWeightAndPerfectReconstructionIsZero) {
  Rng rng = make_rng({14});
  auto out = random_outputs(rng, 3, 5, 2);
  out.recon1 = out.target1;
  out.recon2 = out.target2;
  loss::LossWeights w;
  w.contrastive_weight = 0;
  EXPECT_EQ(loss::total_loss(out, w, ContrastiveHead::kInfoNce).total, 0.0);
}

TEST(TotalLoss, MrSimclrWeightsComposeByHand) {
  Rng rng = make_rng({15});
  const auto out = random_outputs(rng, 2, 4, 2);
  loss::LossWeights w;
  w.alpha = 8;
  w.lam = 5;
  const auto l = loss::total_loss(out, w, ContrastiveHead::kInfoNce);
  double m = 0, u = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    for (const auto& [r, t, p] : {std::tie(out.recon1[i], out.target1[i], out.plan1[i]),
                                  std::tie(out.recon2[i], out.target2[i], out.plan2[i])}) {
      double sm = 0, su = 0;
      const auto masked = p.is_masked();
      for (Eigen::Index n = 0; n < 4; ++n) {
        for (Eigen::Index k = 0; k < 2; ++k) {
          const double e = r.patches(n, k) - t.patches(n, k);
          (masked[static_cast<std::size_t>(n)] ? sm : su) += e * e;
        }
      }
      if (p.num_masked() > 0) m += sm / (2.0 * p.num_masked()) / 2.0;
      if (p.num_visible > 0) u += su / (2.0 * p.num_visible) / 2.0;
    }
  }
  EXPECT_NEAR(l.total, oracle_info_nce(out.proj1, out.proj2, 0.2) + 8 * m + 5 * u, 1e-10);
}

TEST(LossWeights, Validation) {
  loss::LossWeights w;
  EXPECT_NO_THROW(w.validate());
  w.alpha = -1;
  EXPECT_THROW(w.validate(), ConfigError);
  w = {};
  w.tau = 0;
  EXPECT_THROW(w.validate(), ConfigError);
  w = {};
  w.contrastive_weight = 0;
  EXPECT_THROW(w.validate(), ConfigError);
  EXPECT_EQ(loss::parse_head("barlow"), ContrastiveHead::kBarlow);
  EXPECT_THROW((void)loss::parse_head("byol"), ConfigError);
}

}  // namespace
}  // namespace mrcl
