#include "imhead/model.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace imhead;

namespace {

Eigen::VectorXd randn(Eigen::Index n, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> g(0, s);
  return Eigen::VectorXd::NullaryExpr(n, [&] { return g(rng); });
}

Points random_points(Eigen::Index n, std::uint64_t seed, double half = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-half, half);
  Points p(n, 3);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  return p;
}

ModelConfig tiny() {
  ModelConfig c = ModelConfig::desk();
  c.local_width = 16;
  c.feature_dim = 8;
  c.fusion_width = 16;
  c.deformer_width = 16;
  c.deformer_layers = 3;
  c.landmark_width = 16;
  return c;
}

// Randomises the zero-initialised deformer output so warps are non-trivial.
template <typename S>
void perturb_deformer(Model<S>& m, std::uint64_t seed, double s = 0.05) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, s);
  auto& ps = m.params();
  for (int i = 0; i < ps.size(); ++i) {
    const auto& name = ps.names[static_cast<std::size_t>(i)];
    if (name.rfind("deformer.", 0) != 0) continue;
    auto& v = ps.values[static_cast<std::size_t>(i)];
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] += static_cast<S>(g(rng));
  }
}

}  // namespace

TEST(ModelConfig, DefaultsGiveThirtyNineByThirtyTwoEmbeddings) {
  ModelConfig c;
  c.local_width = 8;
  c.feature_dim = 8;
  c.fusion_width = 8;
  c.deformer_width = 8;
  c.landmark_width = 8;
  const Model<float> m(c, RegionTopology::generic(39, 13), 1);
  std::mt19937_64 rng(1);
  const auto e = decompose_identity(m, EditedIdentity(randn(256, rng)));
  EXPECT_EQ(e.rows(), 39);
  EXPECT_EQ(e.cols(), 32);
  EXPECT_EQ(m.config().identity_dim(), 256);
  EXPECT_EQ(m.config().d_e, 16);
}

TEST(ModelConfig, AblationLatentSizes) {
  ModelConfig c;
  c.ablation = Ablation::kLocalLatentOnly;
  EXPECT_EQ(c.region_dim(), 256 / 39);
  EXPECT_EQ(c.identity_dim(), 39 * (256 / 39));
  c.ablation = Ablation::kLocalPlusGlobal;
  EXPECT_EQ(c.identity_dim(), 39 * 32 + 256);
  EXPECT_EQ(ablation_from_string(to_string(Ablation::kNoFusionNet)), Ablation::kNoFusionNet);
  EXPECT_THROW(ablation_from_string("nope"), std::invalid_argument);
}

TEST(Topology, SyntheticPairsShareNetworks) {
  const auto t = RegionTopology::synthetic();
  EXPECT_EQ(t.size(), 13);
  for (const auto& p : t.pairs) {
    EXPECT_EQ(t.network_of(p[0]), t.network_of(p[1]));
    EXPECT_TRUE(t.is_right(p[1]));
    EXPECT_FALSE(t.is_right(p[0]));
  }
  EXPECT_EQ(t.num_networks(), 13 - static_cast<int>(t.pairs.size()));
  RegionTopology bad = t;
  bad.pairs.push_back({0, 0});
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(DecNet, IsLinearAndZeroAtOriginWithZeroBias) {
  const Model<double> m(tiny(), RegionTopology::synthetic(), 2);
  std::mt19937_64 rng(2);
  const Eigen::VectorXd a = randn(256, rng), b = randn(256, rng);
  const double alpha = 0.7, beta = -1.3;
  const auto lhs = decompose_identity(m, EditedIdentity(Eigen::VectorXd(alpha * a + beta * b)));
  const auto rhs = alpha * decompose_identity(m, a) + beta * decompose_identity(m, b);
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(decompose_identity(m, Eigen::VectorXd(Eigen::VectorXd::Zero(256))).cwiseAbs().maxCoeff(), 0.0);
}

TEST(LandmarkNet, DependsOnEmbeddingsAndUsesMeanBias) {
  Points mean(13, 3);
  for (int j = 0; j < 13; ++j) mean.row(j) << 0.1 * j, -0.05 * j, 0.3;
  const Model<double> m(tiny(), RegionTopology::synthetic(), 3, mean);
  std::mt19937_64 rng(3);
  const auto& ps = m.params();
  const auto& bias = ps.values[static_cast<std::size_t>(ps.index("landmark.2.b"))];
  for (int j = 0; j < 13; ++j) EXPECT_EQ(Vec3(bias.middleCols(3 * j, 3).transpose()), Vec3(mean.row(j).transpose()));
  const auto k0 = identity_anchors(m, Eigen::VectorXd(Eigen::VectorXd::Zero(256)));
  EXPECT_LT((k0 - mean).cwiseAbs().maxCoeff(), 0.05);
  const auto k1 = identity_anchors(m, randn(256, rng, 3.0));
  EXPECT_GT((k1 - k0).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Fusion, ClosedFormsAtSigma) {
  Points anchors(2, 3);
  anchors << 0, 0, 0, 0.1, 0, 0;
  const auto w = fusion_weights(Vec3(0, 0, 0), anchors, 0.1);
  const double e = std::exp(1.0);
  EXPECT_NEAR(w(0), e / (1 + e), 1e-15);
  EXPECT_NEAR(w(1), 1 / (1 + e), 1e-15);
  EXPECT_NEAR(w(0), 0.7311, 5e-5);
  EXPECT_NEAR(w(1), 0.2689, 5e-5);
  EXPECT_THROW(fusion_weights(Vec3::Zero(), anchors, 0.0), std::invalid_argument);
}

TEST(Fusion, FarPointsDoNotUnderflow) {
  Points anchors = random_points(13, 4);
  const auto w = fusion_weights(Vec3(50, 50, 50), anchors, 0.1);
  EXPECT_NEAR(w.sum(), 1.0, 1e-12);
  EXPECT_TRUE(w.allFinite());
}

TEST(Fusion, FuseIsLinearInFeatures) {
  std::mt19937_64 rng(5);
  Eigen::VectorXd w = randn(4, rng).cwiseAbs();
  w /= w.sum();
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(4, 6), b = Eigen::MatrixXd::Random(4, 6);
  const Eigen::VectorXd lhs = fuse_features(w, 2.0 * a - b);
  const Eigen::VectorXd rhs = 2.0 * fuse_features(w, a) - fuse_features(w, b);
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-14);
  Eigen::VectorXd manual = Eigen::VectorXd::Zero(6);
  for (int j = 0; j < 4; ++j) manual += w(j) * a.row(j).transpose();
  EXPECT_LT((fuse_features(w, a) - manual).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Fusion, TapeWeightsMatchClosedForm) {
  const Model<double> m(tiny(), RegionTopology::synthetic(), 6);
  ad::Tape<double> t;
  std::mt19937_64 rng(6);
  const Points x = random_points(5, 6);
  const Points k = random_points(13, 7);
  ad::Mat<double> kf(1, 39);
  for (int j = 0; j < 13; ++j) kf.middleCols(3 * j, 3) = k.row(j);
  const std::vector<int> sample(5, 0);
  auto w = m.weights(t.constant(ad::Mat<double>(x)), t.constant(kf), sample);
  for (int i = 0; i < 5; ++i) {
    const auto ref = fusion_weights(x.row(i).transpose(), k, 0.1);
    EXPECT_LT((w.value().row(i).transpose() - ref).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(LocalNets, RightRegionIsMirroredLeftNetwork) {
  const Model<double> m(tiny(), RegionTopology::synthetic(), 7);
  const auto& t = m.topology();
  std::mt19937_64 rng(7);
  const Eigen::MatrixXd e = Eigen::MatrixXd::NullaryExpr(13, m.config().d_l, [&] { return randn(1, rng)(0); });
  const Points k = random_points(13, 8);
  const Points probes = random_points(200, 9);
  for (const auto& p : t.pairs) {
    Eigen::MatrixXd e2 = e;
    e2.row(p[0]) = e.row(p[1]);
    Points k2 = k;
    k2.row(p[0]) = mirror_point(k.row(p[1]).transpose()).transpose();
    for (Eigen::Index i = 0; i < probes.rows(); ++i) {
      const Vec3 x = probes.row(i).transpose();
      const auto right = local_part_features(m, x, e, k);
      const auto left = local_part_features(m, mirror_point(x), e2, k2);
      EXPECT_EQ(right.row(p[1]), left.row(p[0]));
    }
  }
}

TEST(LocalNets, TranslationInvariantInLocalFrame) {
  const Model<double> m(tiny(), RegionTopology::synthetic(), 8);
  std::mt19937_64 rng(8);
  const Eigen::MatrixXd e = Eigen::MatrixXd::NullaryExpr(13, m.config().d_l, [&] { return randn(1, rng)(0); });
  const Points k = random_points(13, 10);
  const Vec3 shift(0.25, -0.5, 0.125);
  const Points ks = k.rowwise() + shift.transpose();
  const Vec3 x(0.1, 0.2, -0.3);
  const auto a = local_part_features(m, x, e, k);
  const auto b = local_part_features(m, Vec3(x + shift), e, ks);
  for (int j : m.topology().midline()) EXPECT_LT((a.row(j) - b.row(j)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Deformer, ZeroInitialisedWarpIsIdentity) {
  const Model<double> m(tiny(), RegionTopology::synthetic(), 9);
  std::mt19937_64 rng(9);
  const auto w = expression_warp(m, Vec3(0.3, 0.1, 0.2), randn(256, rng), randn(16, rng));
  EXPECT_EQ(w.delta.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(w.ambient.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Forward, ComposesWarpAndCanonicalField) {
  Model<double> m(tiny(), RegionTopology::synthetic(), 10);
  perturb_deformer(m, 10);
  std::mt19937_64 rng(10);
  const Eigen::VectorXd z = randn(256, rng, 0.3), ze = randn(16, rng, 0.3);
  const Vec3 x(0.2, -0.1, 0.4);
  const auto w = expression_warp(m, x, z, ze);
  ASSERT_GT(w.delta.norm(), 0.0);
  const double direct = identity_sdf(m, Vec3(x + w.delta), Eigen::Vector2d(w.ambient), z);
  EXPECT_NEAR(evaluate_sdf(m, x, z, ze), direct, 1e-12);
}

TEST(Forward, BatchMatchesSinglePoint) {
  Model<double> m(tiny(), RegionTopology::synthetic(), 11);
  perturb_deformer(m, 11);
  std::mt19937_64 rng(11);
  const Eigen::VectorXd z = randn(256, rng, 0.3), ze = randn(16, rng, 0.3);
  const Points x = random_points(64, 11);
  const auto batch = evaluate_sdf(m, x, z, ze, nullptr, 20);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    EXPECT_NEAR(batch(i), evaluate_sdf(m, Vec3(x.row(i).transpose()), z, ze), 1e-12);
  }
}

TEST(Forward, EmptyOverrideChangesNothing) {
  const Model<float> m(tiny(), RegionTopology::synthetic(), 12);
  std::mt19937_64 rng(12);
  const Eigen::VectorXd z = randn(256, rng, 0.3), ze = Eigen::VectorXd::Zero(16);
  const Points x = random_points(100, 12);
  EditedIdentity edit(z);
  const auto a = evaluate_sdf(m, x, z, ze);
  const auto b = evaluate_sdf(m, x, edit, ze);
  EXPECT_EQ(a, b);
}

TEST(Forward, OverrideReplacesSlot) {
  const Model<double> m(tiny(), RegionTopology::synthetic(), 13);
  std::mt19937_64 rng(13);
  const Eigen::VectorXd z = randn(256, rng, 0.3);
  EditedIdentity edit(z);
  edit.overrides[4] = randn(m.config().d_l, rng);
  const auto e = decompose_identity(m, edit);
  const auto base = decompose_identity(m, z);
  EXPECT_EQ(Eigen::VectorXd(e.row(4).transpose()), edit.overrides[4]);
  EXPECT_EQ(e.row(3), base.row(3));
  EditedIdentity bad(z);
  bad.overrides[4] = Eigen::VectorXd::Zero(3);
  EXPECT_THROW(decompose_identity(m, bad), std::invalid_argument);
  EXPECT_THROW(evaluate_sdf(m, Vec3(Vec3::Zero()), Eigen::VectorXd(Eigen::VectorXd::Zero(5)), Eigen::VectorXd(Eigen::VectorXd::Zero(16))), std::invalid_argument);
}

TEST(Forward, SpatialGradientMatchesCentralDifferences) {
  Model<double> m(tiny(), RegionTopology::synthetic(), 14);
  perturb_deformer(m, 14);
  std::mt19937_64 rng(14);
  const Eigen::VectorXd z = randn(256, rng, 0.3), ze = randn(16, rng, 0.3);
  const Points x = random_points(100, 14);
  Points grad;
  evaluate_sdf(m, x, z, ze, &grad);
  const double h = 1e-4;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Vec3 fd;
    for (int c = 0; c < 3; ++c) {
      Vec3 a = x.row(i).transpose(), b = a;
      a(c) += h;
      b(c) -= h;
      fd(c) = (evaluate_sdf(m, a, z, ze) - evaluate_sdf(m, b, z, ze)) / (2 * h);
    }
    const Vec3 g = grad.row(i).transpose();
    EXPECT_LT((g - fd).norm() / std::max(fd.norm(), 1e-8), 1e-3) << "point " << i;
  }
}

TEST(Forward, InitialFieldIsRoughlyASphere) {
  const Model<double> m(tiny(), RegionTopology::synthetic(), 15);
  const Eigen::VectorXd z = Eigen::VectorXd::Zero(256), ze = Eigen::VectorXd::Zero(16);
  EXPECT_LT(evaluate_sdf(m, Vec3(0, 0, 0), z, ze), 0.0);
  EXPECT_GT(evaluate_sdf(m, Vec3(1.1, 0, 0), z, ze), 0.0);
}

TEST(Ablations, AllVariantsEvaluate) {
  for (auto a : {Ablation::kLocalLatentOnly, Ablation::kLocalPlusGlobal, Ablation::kNoFusionNet, Ablation::kNoLocalCanonical}) {
    ModelConfig c = tiny();
    c.ablation = a;
    const Model<float> m(c, RegionTopology::synthetic(), 16);
    std::mt19937_64 rng(16);
    Points g;
    const auto v = evaluate_sdf(m, random_points(10, 16), EditedIdentity(randn(c.identity_dim(), rng, 0.1)),
                                Eigen::VectorXd::Zero(16), &g);
    EXPECT_TRUE(v.allFinite()) << to_string(a);
    EXPECT_TRUE(g.allFinite()) << to_string(a);
  }
}

TEST(Parameters, CastAndHash) {
  const Model<float> m(tiny(), RegionTopology::synthetic(), 17);
  const auto d = m.cast<double>();
  EXPECT_EQ(d.params().hash(), m.params().hash());
  const Model<float> other(tiny(), RegionTopology::synthetic(), 18);
  EXPECT_NE(other.params().hash(), m.params().hash());
}
