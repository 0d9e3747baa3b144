#pragma once

// Surface extraction from a model and point-set metrics between surfaces.

#include "imhead/marching_cubes.hpp"
#include "imhead/model.hpp"
#include "imhead/spatial_index.hpp"

namespace imhead {

inline constexpr int kDefaultMeshResolution = 128;
inline constexpr double kDefaultBoundsHalf = 1.2;
inline constexpr Eigen::Index kMetricSamples = 10000;
inline constexpr double kDefaultFScoreTau = 0.01;

/// Zero level set of the model for one identity and expression.
template <typename S>
TriMesh extract_mesh(const Model<S>& m, const EditedIdentity& id, const Eigen::VectorXd& z_exp,
                     int resolution = kDefaultMeshResolution, const Box& bounds = Box::cube(kDefaultBoundsHalf)) {
  detail::check_identity(m, id);
  if (z_exp.size() != m.config().d_e) throw std::invalid_argument("expression code has wrong dimension");
  const Eigen::VectorXd z_warp = deformer_identity(m, id);
  const BatchField field = [&](const Points& p, Eigen::VectorXd& out) {
    out = detail::evaluate_sdf_with(m, p, id, z_warp, z_exp, nullptr, 4096);
  };
  return marching_cubes(sample_grid_batched(field, resolution, bounds));
}

/// Keeps the points (and normals) satisfying `keep`.
template <typename Pred>
PointCloud filter_points(const PointCloud& pc, Pred keep) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < pc.size(); ++i)
    if (keep(Vec3(pc.points.row(i).transpose()))) rows.push_back(i);
  Points p(static_cast<Eigen::Index>(rows.size()), 3);
  Points n(pc.has_normals() ? p.rows() : 0, 3);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    p.row(static_cast<Eigen::Index>(r)) = pc.points.row(rows[r]);
    if (pc.has_normals()) n.row(static_cast<Eigen::Index>(r)) = pc.normals->row(rows[r]);
  }
  return pc.has_normals() ? PointCloud(std::move(p), std::move(n)) : PointCloud(std::move(p));
}

/// Front half-space z > z0: the face region.
struct FaceMask {
  double z0 = 0.0;
  [[nodiscard]] bool operator()(const Vec3& x) const { return x.z() > z0; }
};

namespace detail {

/// Distance from every point of `a` to its nearest neighbour in `b`.
inline Eigen::VectorXd nn_distances(const Points& a, const KdTree& b, std::vector<Eigen::Index>* index = nullptr) {
  Eigen::VectorXd d(a.rows());
  if (index) index->resize(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const auto hit = b.nearest(a.row(i).transpose());
    d(i) = hit.distance;
    if (index) (*index)[static_cast<std::size_t>(i)] = hit.index;
  }
  return d;
}

inline void require_nonempty(const PointCloud& a, const PointCloud& b, const char* what) {
  if (a.empty() || b.empty()) throw std::invalid_argument(std::string(what) + ": point sets must be nonempty");
}

}  // namespace detail

/// 0.5 * (mean_a min_b |a - b| + mean_b min_a |a - b|).
inline double chamfer(const PointCloud& a, const PointCloud& b) {
  detail::require_nonempty(a, b, "chamfer");
  const KdTree ta(a.points), tb(b.points);
  return 0.5 * (detail::nn_distances(a.points, tb).mean() + detail::nn_distances(b.points, ta).mean());
}

/// Symmetric mean cosine between each normal and its nearest neighbour's normal.
inline double normal_consistency(const PointCloud& a, const PointCloud& b) {
  detail::require_nonempty(a, b, "normal_consistency");
  if (!a.has_normals() || !b.has_normals()) throw std::invalid_argument("normal_consistency: normals required");
  const KdTree ta(a.points), tb(b.points);
  auto one_way = [](const PointCloud& from, const PointCloud& to, const KdTree& tree) {
    std::vector<Eigen::Index> nn;
    detail::nn_distances(from.points, tree, &nn);
    double s = 0;
    for (Eigen::Index i = 0; i < from.size(); ++i) {
      s += from.normals->row(i).dot(to.normals->row(nn[static_cast<std::size_t>(i)]));
    }
    return s / static_cast<double>(from.size());
  };
  return 0.5 * (one_way(a, b, tb) + one_way(b, a, ta));
}

struct FScore {
  double precision = 0;
  double recall = 0;
  double f = 0;
};

inline FScore f_score_detail(const PointCloud& a, const PointCloud& b, double tau = kDefaultFScoreTau) {
  detail::require_nonempty(a, b, "f_score");
  if (!(tau > 0)) throw std::invalid_argument("f_score: tau must be positive");
  const KdTree ta(a.points), tb(b.points);
  FScore r;
  r.precision = (detail::nn_distances(a.points, tb).array() <= tau).cast<double>().mean();
  r.recall = (detail::nn_distances(b.points, ta).array() <= tau).cast<double>().mean();
  r.f = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

/// Harmonic mean of precision (a within tau of b) and recall (b within tau of a).
inline double f_score(const PointCloud& a, const PointCloud& b, double tau = kDefaultFScoreTau) {
  return f_score_detail(a, b, tau).f;
}

/// Mean over `pts` of the distance to the nearest point of `ref`.
inline double mean_distance_to(const Points& pts, const KdTree& ref) { return detail::nn_distances(pts, ref).mean(); }

/// Ranks starting at 1; ties share their average rank.
inline Eigen::VectorXd ranks(const Eigen::VectorXd& v) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(v.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return v(a) < v(b); });
  Eigen::VectorXd r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v(order[j + 1]) == v(order[i])) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r(order[k]) = avg;
    i = j + 1;
  }
  return r;
}

/// Spearman rank correlation.
inline double rank_correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("rank_correlation: need two equal-length series");
  const Eigen::VectorXd ra = ranks(a).array() - ranks(a).mean();
  const Eigen::VectorXd rb = ranks(b).array() - ranks(b).mean();
  const double den = ra.norm() * rb.norm();
  return den > 0 ? ra.dot(rb) / den : 0.0;
}

}  // namespace imhead
