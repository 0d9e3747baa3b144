#pragma once

// Exact nearest-neighbour queries: a kd-tree over points and a bounding-volume
// hierarchy over triangles for point-to-surface distance.

#include "imhead/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

namespace imhead {

class KdTree {
 public:
  struct Hit {
    Eigen::Index index = -1;
    double distance = std::numeric_limits<double>::infinity();
  };

  KdTree() = default;
  explicit KdTree(const Points& points) : points_(points) {
    order_.resize(static_cast<std::size_t>(points_.rows()));
    std::iota(order_.begin(), order_.end(), Eigen::Index{0});
    if (!order_.empty()) build(0, order_.size(), 0);
  }

  [[nodiscard]] Eigen::Index size() const { return points_.rows(); }

  [[nodiscard]] Hit nearest(const Vec3& q) const {
    Hit best;
    double best_d2 = std::numeric_limits<double>::infinity();
    if (!order_.empty()) search(q, 0, order_.size(), 0, best.index, best_d2);
    best.distance = std::sqrt(best_d2);
    return best;
  }

 private:
  static constexpr std::size_t kLeaf = 8;

  void build(std::size_t lo, std::size_t hi, int axis) {
    if (hi - lo <= kLeaf) return;
    const std::size_t mid = (lo + hi) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](Eigen::Index a, Eigen::Index b) { return points_(a, axis) < points_(b, axis); });
    build(lo, mid, (axis + 1) % 3);
    build(mid + 1, hi, (axis + 1) % 3);
  }

  void search(const Vec3& q, std::size_t lo, std::size_t hi, int axis, Eigen::Index& best, double& best_d2) const {
    if (hi - lo <= kLeaf) {
      for (std::size_t i = lo; i < hi; ++i) consider(q, order_[i], best, best_d2);
      return;
    }
    const std::size_t mid = (lo + hi) / 2;
    const Eigen::Index m = order_[mid];
    consider(q, m, best, best_d2);
    const double delta = q(axis) - points_(m, axis);
    const int next = (axis + 1) % 3;
    if (delta < 0) {
      search(q, lo, mid, next, best, best_d2);
      if (delta * delta <= best_d2) search(q, mid + 1, hi, next, best, best_d2);
    } else {
      search(q, mid + 1, hi, next, best, best_d2);
      if (delta * delta <= best_d2) search(q, lo, mid, next, best, best_d2);
    }
  }

  void consider(const Vec3& q, Eigen::Index i, Eigen::Index& best, double& best_d2) const {
    const double d2 = (points_.row(i).transpose() - q).squaredNorm();
    // Ties resolve to the lowest index so results match a linear scan.
    if (d2 < best_d2 || (d2 == best_d2 && i < best)) {
      best_d2 = d2;
      best = i;
    }
  }

  Points points_;
  std::vector<Eigen::Index> order_;
};

/// Linear-scan nearest neighbour; the reference the kd-tree is tested against.
inline KdTree::Hit brute_force_nearest(const Points& points, const Vec3& q) {
  KdTree::Hit best;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const double d2 = (points.row(i).transpose() - q).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best.index = i;
    }
  }
  best.distance = std::sqrt(best_d2);
  return best;
}

/// Closest point on triangle (a, b, c) to p (Ericson, Real-Time Collision Detection 5.1.5).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = ab.dot(ap);
  const double d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp);
  const double d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + (d1 / (d1 - d3)) * ab;
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp);
  const double d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

/// Median-split AABB tree over mesh triangles.
class TriangleBvh {
 public:
  explicit TriangleBvh(const TriMesh& mesh) : mesh_(&mesh) {
    const auto nf = static_cast<std::size_t>(mesh.num_faces());
    order_.resize(nf);
    std::iota(order_.begin(), order_.end(), Eigen::Index{0});
    centroids_.resize(static_cast<Eigen::Index>(nf), 3);
    for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
      centroids_.row(f) = ((mesh.corner(f, 0) + mesh.corner(f, 1) + mesh.corner(f, 2)) / 3.0).transpose();
    }
    if (nf > 0) build(0, nf);
  }

  /// Distance from q to the nearest point on the mesh surface.
  [[nodiscard]] double distance(const Vec3& q) const {
    double best = std::numeric_limits<double>::infinity();
    if (!nodes_.empty()) search(0, q, best);
    return std::sqrt(best);
  }

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    std::size_t lo = 0, hi = 0;
    int left = -1, right = -1;
  };
  static constexpr std::size_t kLeaf = 4;

  int build(std::size_t lo, std::size_t hi) {
    Node node;
    node.lo = lo;
    node.hi = hi;
    for (std::size_t i = lo; i < hi; ++i)
      for (int k = 0; k < 3; ++k) node.box.extend(mesh_->corner(order_[i], k));
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    if (hi - lo > kLeaf) {
      int axis = 0;
      (node.box.max() - node.box.min()).maxCoeff(&axis);
      const std::size_t mid = (lo + hi) / 2;
      std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                       order_.begin() + static_cast<std::ptrdiff_t>(hi),
                       [&](Eigen::Index a, Eigen::Index b) { return centroids_(a, axis) < centroids_(b, axis); });
      const int l = build(lo, mid);
      const int r = build(mid, hi);
      nodes_[static_cast<std::size_t>(id)].left = l;
      nodes_[static_cast<std::size_t>(id)].right = r;
    }
    return id;
  }

  void search(int id, const Vec3& q, double& best) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.box.squaredExteriorDistance(q) > best) return;
    if (n.left < 0) {
      for (std::size_t i = n.lo; i < n.hi; ++i) {
        const Eigen::Index f = order_[i];
        const Vec3 c = closest_point_on_triangle(q, mesh_->corner(f, 0), mesh_->corner(f, 1), mesh_->corner(f, 2));
        best = std::min(best, (c - q).squaredNorm());
      }
      return;
    }
    const double dl = nodes_[static_cast<std::size_t>(n.left)].box.squaredExteriorDistance(q);
    const double dr = nodes_[static_cast<std::size_t>(n.right)].box.squaredExteriorDistance(q);
    if (dl < dr) {
      search(n.left, q, best);
      search(n.right, q, best);
    } else {
      search(n.right, q, best);
      search(n.left, q, best);
    }
  }

  const TriMesh* mesh_;
  std::vector<Eigen::Index> order_;
  Points centroids_;
  std::vector<Node> nodes_;
};

}  // namespace imhead
