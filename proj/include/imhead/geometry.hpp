#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

namespace imhead {

using Vec3 = Eigen::Vector3d;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Axis-aligned box.
struct Box {
  Vec3 lo = Vec3::Constant(-1.0);
  Vec3 hi = Vec3::Constant(1.0);

  static Box cube(double half) { return {Vec3::Constant(-half), Vec3::Constant(half)}; }
  [[nodiscard]] Vec3 extent() const { return hi - lo; }
  [[nodiscard]] bool contains(const Vec3& p) const {
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }
};

/// Sampled surface observation. Normals are either absent or unit length.
struct PointCloud {
  Points points;
  std::optional<Points> normals;

  PointCloud() = default;
  explicit PointCloud(Points p, std::optional<Points> n = std::nullopt)
      : points(std::move(p)), normals(std::move(n)) {
    if (normals && normals->rows() != points.rows()) {
      throw std::invalid_argument("PointCloud: normals/points row mismatch");
    }
  }

  [[nodiscard]] Eigen::Index size() const { return points.rows(); }
  [[nodiscard]] bool empty() const { return points.rows() == 0; }
  [[nodiscard]] bool has_normals() const { return normals.has_value(); }
};

/// Indexed triangle mesh with an optional per-vertex scalar channel.
struct TriMesh {
  Points vertices;
  Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor> faces;
  std::optional<Eigen::VectorXd> scalars;

  [[nodiscard]] bool empty() const { return faces.rows() == 0; }
  [[nodiscard]] Eigen::Index num_vertices() const { return vertices.rows(); }
  [[nodiscard]] Eigen::Index num_faces() const { return faces.rows(); }

  [[nodiscard]] Vec3 corner(Eigen::Index f, int k) const { return vertices.row(faces(f, k)).transpose(); }
  [[nodiscard]] Vec3 face_normal_unnormalized(Eigen::Index f) const {
    return (corner(f, 1) - corner(f, 0)).cross(corner(f, 2) - corner(f, 0));
  }
  [[nodiscard]] double face_area(Eigen::Index f) const { return 0.5 * face_normal_unnormalized(f).norm(); }
};

/// Reflection across the sagittal plane x0 = 0.
inline Vec3 mirror_point(const Vec3& x) { return {-x.x(), x.y(), x.z()}; }

// ---------------------------------------------------------------------------
// Positional encoding

struct EncodingConfig {
  int num_bands = 7;

  [[nodiscard]] int output_dim() const { return 3 * (2 * num_bands + 1); }
};

/// (x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)).
/// Each sin/cos group holds all three coordinates.
inline Eigen::VectorXd positional_encode(const Vec3& x, const EncodingConfig& cfg) {
  if (cfg.num_bands < 0) throw std::invalid_argument("positional_encode: negative band count");
  Eigen::VectorXd out(cfg.output_dim());
  out.head<3>() = x;
  for (int l = 0; l < cfg.num_bands; ++l) {
    const double w = std::ldexp(std::numbers::pi, l);
    for (int c = 0; c < 3; ++c) {
      out(3 + 6 * l + c) = std::sin(w * x(c));
      out(3 + 6 * l + 3 + c) = std::cos(w * x(c));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mesh utilities

/// Area-weighted random surface samples with face normals.
inline PointCloud sample_mesh(const TriMesh& mesh, Eigen::Index n, std::uint64_t seed) {
  if (mesh.empty()) throw std::invalid_argument("sample_mesh: empty mesh");
  std::vector<double> cdf(static_cast<std::size_t>(mesh.num_faces()));
  double acc = 0.0;
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
    acc += mesh.face_area(f);
    cdf[static_cast<std::size_t>(f)] = acc;
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Points pts(n, 3);
  Points nrm(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = u(rng) * acc;
    auto it = std::lower_bound(cdf.begin(), cdf.end(), r);
    const auto f = static_cast<Eigen::Index>(std::min<std::ptrdiff_t>(it - cdf.begin(), mesh.num_faces() - 1));
    double a = u(rng);
    double b = u(rng);
    if (a + b > 1.0) {
      a = 1.0 - a;
      b = 1.0 - b;
    }
    const Vec3 p = mesh.corner(f, 0) + a * (mesh.corner(f, 1) - mesh.corner(f, 0)) +
                   b * (mesh.corner(f, 2) - mesh.corner(f, 0));
    pts.row(i) = p.transpose();
    nrm.row(i) = mesh.face_normal_unnormalized(f).normalized().transpose();
  }
  return PointCloud(std::move(pts), std::move(nrm));
}

/// Number of face-connected components (faces sharing a vertex are joined).
inline int connected_components(const TriMesh& mesh) {
  std::vector<int> parent(static_cast<std::size_t>(mesh.num_vertices()));
  for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = static_cast<int>(i);
  auto find = [&](int a) {
    while (parent[static_cast<std::size_t>(a)] != a) {
      parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
      a = parent[static_cast<std::size_t>(a)];
    }
    return a;
  };
  std::vector<char> used(parent.size(), 0);
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
    for (int k = 0; k < 3; ++k) used[static_cast<std::size_t>(mesh.faces(f, k))] = 1;
    const int a = find(mesh.faces(f, 0));
    parent[static_cast<std::size_t>(find(mesh.faces(f, 1)))] = a;
    parent[static_cast<std::size_t>(find(mesh.faces(f, 2)))] = a;
  }
  int count = 0;
  for (std::size_t i = 0; i < parent.size(); ++i) {
    if (used[i] && find(static_cast<int>(i)) == static_cast<int>(i)) ++count;
  }
  return count;
}

/// True when every undirected edge is shared by exactly two faces.
inline bool is_closed(const TriMesh& mesh) {
  std::vector<std::uint64_t> edges;
  edges.reserve(static_cast<std::size_t>(mesh.num_faces()) * 3);
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
    for (int k = 0; k < 3; ++k) {
      auto a = static_cast<std::uint64_t>(mesh.faces(f, k));
      auto b = static_cast<std::uint64_t>(mesh.faces(f, (k + 1) % 3));
      if (a > b) std::swap(a, b);
      edges.push_back((a << 32) | b);
    }
  }
  std::sort(edges.begin(), edges.end());
  for (std::size_t i = 0; i < edges.size();) {
    std::size_t j = i;
    while (j < edges.size() && edges[j] == edges[i]) ++j;
    if (j - i != 2) return false;
    i = j;
  }
  return !edges.empty();
}

}  // namespace imhead
