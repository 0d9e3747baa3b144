#include "imhead/geometry.hpp"
#include "imhead/marching_cubes.hpp"
#include "imhead/synthetic_head.hpp"

#include <gtest/gtest.h>

#include <numbers>
#include <random>

using namespace imhead;

namespace {

SyntheticHeadParams single_sphere(const Vec3& c, double r) {
  SyntheticHeadParams p;
  for (auto& part : p.parts) {
    part.center = c;
    part.radii = Vec3::Constant(r);
    part.blend_k = 0.0;
  }
  return p;
}

Vec3 random_point(std::mt19937_64& rng, double half) {
  std::uniform_real_distribution<double> u(-half, half);
  return {u(rng), u(rng), u(rng)};
}

TEST(SyntheticIdentity, DeterministicPerSeed) {
  const auto a = make_synthetic_identity(0);
  const auto b = make_synthetic_identity(0);
  const auto c = make_synthetic_identity(1);
  bool differs = false;
  for (int i = 0; i < kNumHeadParts; ++i) {
    EXPECT_EQ(a.parts[i].center, b.parts[i].center);
    EXPECT_EQ(a.parts[i].radii, b.parts[i].radii);
    EXPECT_EQ(a.parts[i].blend_k, b.parts[i].blend_k);
    differs = differs || a.parts[i].center != c.parts[i].center || a.parts[i].radii != c.parts[i].radii;
  }
  EXPECT_TRUE(differs);
  EXPECT_TRUE(a.expression.neutral());
}

TEST(SyntheticIdentity, ParametersStayInDocumentedRanges) {
  const auto& tmpl = detail::head_template();
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto p = make_synthetic_identity(seed);
    for (int i = 0; i < kNumHeadParts; ++i) {
      const auto& part = p.parts[i];
      EXPECT_TRUE((part.center.array().abs() <= 1.0).all());
      EXPECT_TRUE((part.radii.array() > 0.0).all());
      const Eigen::Array3d ratio = part.radii.array() / tmpl[i].radii.array();
      const double lo = SyntheticRanges::kRadiusScaleLo * (1.0 - SyntheticRanges::kAsymmetry);
      const double hi = SyntheticRanges::kRadiusScaleHi * (1.0 + SyntheticRanges::kAsymmetry);
      EXPECT_TRUE((ratio >= lo - 1e-12).all() && (ratio <= hi + 1e-12).all()) << "seed " << seed << " part " << i;
      EXPECT_GE(part.blend_k, SyntheticRanges::kBlendLo);
      EXPECT_LE(part.blend_k, SyntheticRanges::kBlendHi);
      // Every part is within the unit ball.
      EXPECT_LT((part.center.cwiseAbs() + part.radii).norm(), 1.3);
    }
    for (const auto& pair : kHeadPartPairs) {
      const auto& l = p.part(pair[0]);
      const auto& r = p.part(pair[1]);
      EXPECT_TRUE(r.center.isApprox(mirror_point(l.center)));
      EXPECT_TRUE(((r.radii - l.radii).array().abs() <= 0.1 * l.radii.array()).all());
    }
  }
}

TEST(OracleSdf, SingleSphereIsExact) {
  const Vec3 c(0.1, -0.2, 0.05);
  const auto p = single_sphere(c, 0.4);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const Vec3 x = random_point(rng, 1.5);
    EXPECT_NEAR(oracle_sdf(p, x), (x - c).norm() - 0.4, 1e-12);
  }
}

TEST(OracleSdf, SmoothMinBoundedByMinAndBlend) {
  std::mt19937_64 rng(2);
  const auto p = make_synthetic_identity(4);
  const auto& a = p.part(HeadPart::kNose);
  const auto& b = p.part(HeadPart::kCheekLeft);
  for (int i = 0; i < 10000; ++i) {
    const Vec3 x = random_point(rng, 1.0);
    const double da = detail::ellipsoid_distance(x, a);
    const double db = detail::ellipsoid_distance(x, b);
    const double s = smooth_min(da, db, b.blend_k);
    EXPECT_LE(s, std::min(da, db) + b.blend_k);
    EXPECT_LE(s, std::min(da, db));
    EXPECT_GE(s, std::min(da, db) - 0.25 * b.blend_k);
  }
}

TEST(OracleSdf, GradientNormBoundedOutsideBlendZones) {
  std::mt19937_64 rng(3);
  int tested = 0;
  for (std::uint64_t seed : {0, 1, 2, 3}) {
    auto p = make_synthetic_identity(seed);
    if (seed % 2 == 1) p.expression = make_synthetic_expression(seed, 1);
    while (tested < 2500 * static_cast<int>(seed + 1)) {
      const Vec3 x = random_point(rng, 1.0);
      if (in_blend_zone(p, x)) continue;
      const double g = oracle_gradient(p, x).norm();
      EXPECT_GE(g, 0.8) << x.transpose();
      EXPECT_LE(g, 1.2) << x.transpose();
      ++tested;
    }
  }
  EXPECT_EQ(tested, 10000);
}

TEST(SampleSurface, PointsLieOnSurfaceWithUnitNormals) {
  for (std::uint64_t seed : {0, 7}) {
    auto p = make_synthetic_identity(seed);
    if (seed == 7) p.expression = {0.3, 0.03, 0.02};
    const auto pc = sample_surface(p, 2000, 11);
    ASSERT_EQ(pc.size(), 2000);
    ASSERT_TRUE(pc.has_normals());
    for (Eigen::Index i = 0; i < pc.size(); ++i) {
      EXPECT_LT(std::abs(oracle_sdf(p, pc.points.row(i).transpose())), 1e-4);
      EXPECT_NEAR(pc.normals->row(i).norm(), 1.0, 1e-5);
    }
  }
}

TEST(SampleSurface, SphereNormalsMatchAnalyticGradient) {
  const Vec3 c(0.05, 0.0, -0.1);
  const auto p = single_sphere(c, 0.5);
  const auto pc = sample_surface(p, 500, 3);
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    const Vec3 x = pc.points.row(i).transpose();
    EXPECT_NEAR((x - c).norm(), 0.5, 1e-4);
    EXPECT_LT((pc.normals->row(i).transpose() - (x - c) / 0.5).norm(), 1e-3);
  }
}

TEST(SampleSurface, DeterministicPerSeedAndRejectsEmptyRequest) {
  const auto p = make_synthetic_identity(2);
  EXPECT_EQ(sample_surface(p, 50, 1).points, sample_surface(p, 50, 1).points);
  EXPECT_THROW(sample_surface(p, 0, 1), std::invalid_argument);
}

TEST(PositionalEncoding, LayoutAndDimensions) {
  for (int l = 0; l <= 10; ++l) EXPECT_EQ(positional_encode(Vec3(0.1, 0.2, 0.3), {l}).size(), 3 * (2 * l + 1));
  const auto z = positional_encode(Vec3::Zero(), {7});
  ASSERT_EQ(z.size(), 45);
  for (int l = 0; l < 7; ++l) {
    for (int c = 0; c < 3; ++c) {
      EXPECT_EQ(z(3 + 6 * l + c), 0.0);
      EXPECT_EQ(z(3 + 6 * l + 3 + c), 1.0);
    }
  }
  const auto h = positional_encode(Vec3(0.5, 0.0, 0.0), {7});
  EXPECT_NEAR(h(3), 1.0, 1e-15);
  EXPECT_NEAR(h(6), 0.0, 1e-15);
  const Vec3 x(0.3, -0.7, 0.9);
  EXPECT_EQ(positional_encode(x, {0}), Eigen::VectorXd(x));
}

TEST(Mirror, LinearInvolutionWithPlaneFixedPoints) {
  EXPECT_EQ(mirror_point(Vec3(0.3, 0.1, -0.2)), Vec3(-0.3, 0.1, -0.2));
  EXPECT_EQ(mirror_point(Vec3(0.0, 0.4, 0.5)), Vec3(0.0, 0.4, 0.5));
  std::mt19937_64 rng(9);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 a = random_point(rng, 2.0);
    const Vec3 b = random_point(rng, 2.0);
    EXPECT_EQ(mirror_point(mirror_point(a)), a);
    EXPECT_TRUE(mirror_point(2.0 * a - 3.0 * b).isApprox(2.0 * mirror_point(a) - 3.0 * mirror_point(b)));
  }
}

double mean_sphere_residual(int res) {
  const auto mesh = marching_cubes([](const Vec3& x) { return x.norm() - 0.5; }, res, Box::cube(1.0));
  double acc = 0.0;
  for (Eigen::Index v = 0; v < mesh.num_vertices(); ++v) acc += std::abs(mesh.vertices.row(v).norm() - 0.5);
  return acc / static_cast<double>(mesh.num_vertices());
}

TEST(MarchingCubes, SphereAccuracyImprovesWithResolution) {
  const double r128 = mean_sphere_residual(128);
  const double r64 = mean_sphere_residual(64);
  EXPECT_LT(r128, 2.0 * (2.0 / 128.0));
  EXPECT_LT(r128, r64);
}

TEST(MarchingCubes, OrientationFollowsFieldGradient) {
  const auto mesh = marching_cubes([](const Vec3& x) { return x.norm() - 0.5; }, 32, Box::cube(1.0));
  ASSERT_FALSE(mesh.empty());
  EXPECT_TRUE(is_closed(mesh));
  EXPECT_EQ(connected_components(mesh), 1);
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
    const Vec3 c = (mesh.corner(f, 0) + mesh.corner(f, 1) + mesh.corner(f, 2)) / 3.0;
    EXPECT_GT(mesh.face_normal_unnormalized(f).dot(c), 0.0);
    EXPECT_GT(mesh.face_area(f), 1e-12);
  }
}

TEST(MarchingCubes, ConstantFieldYieldsEmptyMesh) {
  const auto mesh = marching_cubes([](const Vec3&) { return 1.0; }, 16, Box::cube(1.0));
  EXPECT_TRUE(mesh.empty());
  EXPECT_THROW(marching_cubes([](const Vec3&) { return 1.0; }, 4, Box::cube(1.0)), std::invalid_argument);
}

TEST(MarchingCubes, NeutralHeadIsSingleClosedComponentNearLevelSet) {
  for (std::uint64_t seed : {0, 5, 13}) {
    const auto p = make_synthetic_identity(seed);
    const int res = 96;
    const Box box = Box::cube(1.2);
    const auto mesh = marching_cubes([&](const Vec3& x) { return oracle_sdf(p, x); }, res, box);
    EXPECT_EQ(connected_components(mesh), 1) << "seed " << seed;
    EXPECT_TRUE(is_closed(mesh)) << "seed " << seed;
    const double diag = (box.extent() / res).norm();
    for (Eigen::Index v = 0; v < mesh.num_vertices(); ++v) {
      EXPECT_LT(std::abs(oracle_sdf(p, mesh.vertices.row(v).transpose())), diag);
    }
  }
}

TEST(MarchingCubes, BandPrunedSamplingMatchesDenseMesh) {
  const auto p = make_synthetic_identity(1);
  const BatchField field = [&](const Points& pts, Eigen::VectorXd& out) {
    for (Eigen::Index i = 0; i < pts.rows(); ++i) out(i) = oracle_sdf(p, pts.row(i).transpose());
  };
  for (int res : {64, 96, 128}) {
    const auto dense = marching_cubes(sample_grid_batched(field, res, Box::cube(1.2), false));
    const auto pruned = marching_cubes(sample_grid_batched(field, res, Box::cube(1.2), true));
    EXPECT_EQ(dense.vertices, pruned.vertices) << res;
    EXPECT_EQ(dense.faces, pruned.faces) << res;
  }
}

}  // namespace
