#pragma once

// Parametric family of analytic "heads": a smooth union of ellipsoids with an
// analytic expression warp. Used as the ground-truth oracle for training data,
// landmarks and evaluation.

#include "imhead/geometry.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string_view>

namespace imhead {

enum class HeadPart : int {
  kCranium = 0,
  kForehead,
  kEyeSocketLeft,
  kEyeSocketRight,
  kNose,
  kCheekLeft,
  kCheekRight,
  kMouth,
  kChin,
  kEarLeft,
  kEarRight,
  kNeck,
  kOcciput,
};

inline constexpr int kNumHeadParts = 13;

inline constexpr std::array<std::string_view, kNumHeadParts> kHeadPartNames{
    "cranium", "forehead", "eye_socket_left", "eye_socket_right", "nose",  "cheek_left", "cheek_right",
    "mouth",   "chin",     "ear_left",        "ear_right",        "neck", "occiput"};

/// Left/right part pairs; left lies on the +x0 side.
inline constexpr std::array<std::array<HeadPart, 2>, 3> kHeadPartPairs{{
    {HeadPart::kEyeSocketLeft, HeadPart::kEyeSocketRight},
    {HeadPart::kCheekLeft, HeadPart::kCheekRight},
    {HeadPart::kEarLeft, HeadPart::kEarRight},
}};

struct PartParams {
  Vec3 center = Vec3::Zero();
  Vec3 radii = Vec3::Ones();
  double blend_k = 0.05;
};

struct ExpressionControls {
  double jaw_open = 0.0;     ///< radians
  double mouth_width = 0.0;  ///< lateral stretch amplitude
  double brow_raise = 0.0;   ///< vertical brow displacement

  [[nodiscard]] bool neutral() const { return jaw_open == 0.0 && mouth_width == 0.0 && brow_raise == 0.0; }
};

struct SyntheticHeadParams {
  std::uint64_t identity_seed = 0;
  std::array<PartParams, kNumHeadParts> parts{};
  ExpressionControls expression{};

  [[nodiscard]] const PartParams& part(HeadPart p) const { return parts[static_cast<std::size_t>(p)]; }
  [[nodiscard]] PartParams& part(HeadPart p) { return parts[static_cast<std::size_t>(p)]; }
};

/// Ranges used by make_synthetic_identity.
struct SyntheticRanges {
  static constexpr double kCenterJitter = 0.03;
  static constexpr double kRadiusScaleLo = 0.85;
  static constexpr double kRadiusScaleHi = 1.15;
  static constexpr double kBlendLo = 0.04;
  static constexpr double kBlendHi = 0.08;
  static constexpr double kAsymmetry = 0.05;  ///< relative, on right-side radii
};

namespace detail {

struct PartTemplate {
  Vec3 center;
  Vec3 radii;
};

inline const std::array<PartTemplate, kNumHeadParts>& head_template() {
  static const std::array<PartTemplate, kNumHeadParts> t{{
      {{0.0, 0.15, -0.05}, {0.40, 0.44, 0.46}},    // cranium
      {{0.0, 0.30, 0.26}, {0.27, 0.17, 0.15}},     // forehead
      {{0.14, 0.13, 0.33}, {0.08, 0.06, 0.06}},    // eye socket (left)
      {{-0.14, 0.13, 0.33}, {0.08, 0.06, 0.06}},   // eye socket (right)
      {{0.0, 0.02, 0.42}, {0.06, 0.10, 0.08}},     // nose
      {{0.18, -0.04, 0.27}, {0.12, 0.11, 0.11}},   // cheek (left)
      {{-0.18, -0.04, 0.27}, {0.12, 0.11, 0.11}},  // cheek (right)
      {{0.0, -0.15, 0.30}, {0.11, 0.05, 0.07}},    // mouth
      {{0.0, -0.25, 0.21}, {0.12, 0.09, 0.11}},    // chin
      {{0.35, 0.06, -0.04}, {0.05, 0.10, 0.07}},   // ear (left)
      {{-0.35, 0.06, -0.04}, {0.05, 0.10, 0.07}},  // ear (right)
      {{0.0, -0.44, -0.08}, {0.17, 0.26, 0.17}},   // neck
      {{0.0, 0.06, -0.30}, {0.31, 0.31, 0.24}},    // occiput
  }};
  return t;
}

/// Exact signed distance to an axis-aligned ellipsoid.
///
/// The closest point is x_i = r_i^2 q_i / (t + r_i^2) where t is the root of
/// F(t) = sum_i (r_i q_i / (t + r_i^2))^2 - 1 on (-r_min^2, inf). F is convex
/// and decreasing there, so Newton iteration started left of the root
/// converges monotonically.
inline double ellipsoid_distance(const Vec3& x, const PartParams& part) {
  const Eigen::Array3d q = (x - part.center).array().abs();
  const Eigen::Array3d r = part.radii.array();
  const Eigen::Array3d r2 = r.square();
  const double k0 = (q / r).matrix().norm();
  if (k0 == 1.0) return 0.0;
  const double sign = k0 > 1.0 ? 1.0 : -1.0;

  int m = 0;
  r.minCoeff(&m);
  const double rmin2 = r2(m);
  // Inside, with the query on the plane of the shortest axis: the closest
  // point may leave that plane (medial region).
  if (sign < 0.0 && q(m) < 1e-12 * r(m)) {
    Eigen::Array3d c = Eigen::Array3d::Zero();
    double acc = 0.0;
    bool regular = false;
    for (int i = 0; i < 3; ++i) {
      if (i == m) continue;
      if (r2(i) - rmin2 <= 1e-15) {
        regular = true;
        break;
      }
      c(i) = r2(i) * q(i) / (r2(i) - rmin2);
      acc += (c(i) / r(i)) * (c(i) / r(i));
    }
    if (!regular && acc < 1.0) {
      c(m) = r(m) * std::sqrt(1.0 - acc);
      return -(q - c).matrix().norm();
    }
  }

  double t = -rmin2 + std::max(r(m) * q(m), 1e-12 * rmin2);
  for (int it = 0; it < 100; ++it) {
    const Eigen::Array3d d = t + r2;
    const Eigen::Array3d a = r * q / d;
    const double f = a.square().sum() - 1.0;
    const double df = -2.0 * (a.square() / d).sum();
    if (f <= 0.0 || df == 0.0) break;
    const double step = f / df;
    t -= step;
    if (std::abs(step) <= 1e-15 * std::max(1.0, std::abs(t))) break;
  }
  const Eigen::Array3d closest = r2 * q / (t + r2);
  return sign * (q - closest).matrix().norm();
}

/// Polynomial smooth minimum; equals min(a, b) once |a - b| >= k.
inline double smooth_min(double a, double b, double k) {
  if (k <= 0.0) return std::min(a, b);
  const double h = std::max(k - std::abs(a - b), 0.0) / k;
  return std::min(a, b) - h * h * k * 0.25;
}

inline double gaussian(const Vec3& x, const Vec3& c, double width) {
  return std::exp(-(x - c).squaredNorm() / (2.0 * width * width));
}

inline double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

}  // namespace detail

using detail::smooth_min;

/// Deterministic identity from a seed; expression controls are neutral.
inline SyntheticHeadParams make_synthetic_identity(std::uint64_t seed) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0x1234567ULL);
  std::uniform_real_distribution<double> jitter(-SyntheticRanges::kCenterJitter, SyntheticRanges::kCenterJitter);
  std::uniform_real_distribution<double> rscale(SyntheticRanges::kRadiusScaleLo, SyntheticRanges::kRadiusScaleHi);
  std::uniform_real_distribution<double> blend(SyntheticRanges::kBlendLo, SyntheticRanges::kBlendHi);
  std::uniform_real_distribution<double> asym(-SyntheticRanges::kAsymmetry, SyntheticRanges::kAsymmetry);

  SyntheticHeadParams params;
  params.identity_seed = seed;
  const auto& tmpl = detail::head_template();
  for (int i = 0; i < kNumHeadParts; ++i) {
    auto& part = params.parts[static_cast<std::size_t>(i)];
    part.center = tmpl[static_cast<std::size_t>(i)].center + Vec3(jitter(rng), jitter(rng), jitter(rng));
    part.radii = tmpl[static_cast<std::size_t>(i)].radii.cwiseProduct(Vec3(rscale(rng), rscale(rng), rscale(rng)));
    part.blend_k = blend(rng);
  }
  for (auto& c : {HeadPart::kCranium, HeadPart::kForehead, HeadPart::kNose, HeadPart::kMouth, HeadPart::kChin,
                  HeadPart::kNeck, HeadPart::kOcciput}) {
    params.part(c).center.x() = 0.0;
  }
  for (const auto& pair : kHeadPartPairs) {
    const PartParams& left = params.part(pair[0]);
    PartParams& right = params.part(pair[1]);
    right.center = mirror_point(left.center);
    right.radii = left.radii.cwiseProduct(Vec3(1.0 + asym(rng), 1.0 + asym(rng), 1.0 + asym(rng)));
    right.blend_k = left.blend_k;
  }
  return params;
}

/// Expression controls for (identity, expression index); index 0 is neutral.
inline ExpressionControls make_synthetic_expression(std::uint64_t identity_seed, int index) {
  if (index <= 0) return {};
  std::mt19937_64 rng((identity_seed + 1) * 0xD1B54A32D192ED03ULL + static_cast<std::uint64_t>(index));
  std::uniform_real_distribution<double> jaw(0.08, 0.30);
  std::uniform_real_distribution<double> width(-0.02, 0.04);
  std::uniform_real_distribution<double> brow(-0.02, 0.03);
  return {jaw(rng), width(rng), brow(rng)};
}

/// Maps an observed (posed) point back to the neutral frame of the identity.
inline Vec3 expression_backward_warp(const SyntheticHeadParams& params, const Vec3& x) {
  const ExpressionControls& e = params.expression;
  if (e.neutral()) return x;
  const Vec3& mouth = params.part(HeadPart::kMouth).center;
  const Vec3 brow_center =
      0.5 * (params.part(HeadPart::kEyeSocketLeft).center + params.part(HeadPart::kEyeSocketRight).center) +
      Vec3(0.0, 0.08, 0.02);

  Vec3 y = x;
  y.x() -= e.mouth_width * (x.x() / 0.12) * detail::gaussian(x, mouth, 0.09);
  y.y() -= e.brow_raise * detail::gaussian(x, brow_center, 0.12);

  // Jaw: lower front of the face rotates about a lateral hinge axis.
  const Vec3 hinge(0.0, mouth.y() + 0.12, mouth.z() - 0.38);
  const double mask = detail::logistic((mouth.y() + 0.01 - y.y()) / 0.06) *
                      detail::logistic((y.y() - mouth.y() + 0.42) / 0.1) *
                      detail::logistic((y.z() - hinge.z() - 0.1) / 0.1);
  const double angle = -e.jaw_open * mask;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double dy = y.y() - hinge.y();
  const double dz = y.z() - hinge.z();
  y.y() = hinge.y() + c * dy - s * dz;
  y.z() = hinge.z() + s * dy + c * dz;
  return y;
}

/// Signed distance estimate of the neutral composition (no expression).
inline double neutral_sdf(const SyntheticHeadParams& params, const Vec3& x) {
  double d = detail::ellipsoid_distance(x, params.parts[0]);
  for (int i = 1; i < kNumHeadParts; ++i) {
    const auto& part = params.parts[static_cast<std::size_t>(i)];
    d = smooth_min(d, detail::ellipsoid_distance(x, part), part.blend_k);
  }
  return d;
}

/// Oracle field of the posed head: neutral field pulled back through the warp.
inline double oracle_sdf(const SyntheticHeadParams& params, const Vec3& x) {
  return neutral_sdf(params, expression_backward_warp(params, x));
}

/// Central-difference gradient of the oracle.
inline Vec3 oracle_gradient(const SyntheticHeadParams& params, const Vec3& x, double h = 1e-6) {
  Vec3 g;
  for (int k = 0; k < 3; ++k) {
    Vec3 a = x;
    Vec3 b = x;
    a(k) += h;
    b(k) -= h;
    g(k) = (oracle_sdf(params, a) - oracle_sdf(params, b)) / (2.0 * h);
  }
  return g;
}

/// Ground-truth region anchors (part centers in the neutral frame), K x 3.
inline Points part_anchors(const SyntheticHeadParams& params) {
  Points a(kNumHeadParts, 3);
  for (int i = 0; i < kNumHeadParts; ++i) a.row(i) = params.parts[static_cast<std::size_t>(i)].center.transpose();
  return a;
}

/// True when `x` sits where two or more parts blend (smooth-min is active).
inline bool in_blend_zone(const SyntheticHeadParams& params, const Vec3& x) {
  const Vec3 y = expression_backward_warp(params, x);
  double best = std::numeric_limits<double>::infinity();
  int best_i = -1;
  std::array<double, kNumHeadParts> d{};
  for (int i = 0; i < kNumHeadParts; ++i) {
    d[static_cast<std::size_t>(i)] = detail::ellipsoid_distance(y, params.parts[static_cast<std::size_t>(i)]);
    if (d[static_cast<std::size_t>(i)] < best) {
      best = d[static_cast<std::size_t>(i)];
      best_i = i;
    }
  }
  for (int i = 0; i < kNumHeadParts; ++i) {
    if (i == best_i) continue;
    const double k = std::max(params.parts[static_cast<std::size_t>(i)].blend_k,
                              params.parts[static_cast<std::size_t>(best_i)].blend_k);
    if (d[static_cast<std::size_t>(i)] - best < k) return true;
  }
  return false;
}

/// Random points on the posed oracle surface with oracle normals.
///
/// Rays from a bounding sphere toward the head core are sphere-traced to the
/// surface, then refined by Newton projection. Throws when more than 1% of
/// traced candidates fail to converge within 50 Newton steps.
inline PointCloud sample_surface(const SyntheticHeadParams& params, Eigen::Index n, std::uint64_t seed = 0) {
  if (n < 1) throw std::invalid_argument("sample_surface: n must be positive");
  constexpr double kTolerance = 1e-7;
  constexpr int kNewtonSteps = 50;
  std::mt19937_64 rng(seed ^ (params.identity_seed * 0xA24BAED4963EE407ULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto random_direction = [&] {
    Vec3 d(gauss(rng), gauss(rng), gauss(rng));
    return d.normalized();
  };
  Points pts(n, 3);
  Points nrm(n, 3);
  Eigen::Index filled = 0;
  std::size_t attempts = 0;
  std::size_t failures = 0;
  while (filled < n) {
    if (attempts > static_cast<std::size_t>(100 * n + 1000)) {
      throw std::runtime_error("sample_surface: too many rays missed the surface");
    }
    const Vec3 origin = 1.6 * random_direction();
    const Vec3 target = Vec3(0.0, 0.0, 0.05) + 0.25 * random_direction();
    const Vec3 dir = (target - origin).normalized();
    Vec3 x = origin;
    double t = 0.0;
    bool hit = false;
    for (int i = 0; i < 400 && t < 3.6; ++i) {
      const double d = oracle_sdf(params, x);
      if (d < 1e-3) {
        hit = true;
        break;
      }
      t += 0.8 * d;
      x = origin + t * dir;
    }
    if (!hit) continue;
    ++attempts;
    bool converged = false;
    for (int i = 0; i < kNewtonSteps; ++i) {
      const double f = oracle_sdf(params, x);
      if (std::abs(f) < kTolerance) {
        converged = true;
        break;
      }
      const Vec3 g = oracle_gradient(params, x);
      const double g2 = g.squaredNorm();
      if (g2 < 1e-12) break;
      x -= (f / g2) * g;
    }
    if (!converged) {
      ++failures;
      if (attempts >= 100 && failures * 100 > attempts) {
        throw std::runtime_error("sample_surface: Newton projection failed for more than 1% of candidates");
      }
      continue;
    }
    pts.row(filled) = x.transpose();
    nrm.row(filled) = oracle_gradient(params, x).normalized().transpose();
    ++filled;
  }
  return PointCloud(std::move(pts), std::move(nrm));
}

}  // namespace imhead
