#pragma once

#include "imhead/detail/mc_tables.hpp"
#include "imhead/geometry.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace imhead {

/// Scalar samples on a (res+1)^3 lattice spanning `bounds`, x fastest.
struct ScalarGrid {
  int resolution = 0;
  Box bounds;
  std::vector<double> values;

  [[nodiscard]] int samples_per_axis() const { return resolution + 1; }
  [[nodiscard]] std::size_t index(int i, int j, int k) const {
    const auto n = static_cast<std::size_t>(samples_per_axis());
    return (static_cast<std::size_t>(k) * n + static_cast<std::size_t>(j)) * n + static_cast<std::size_t>(i);
  }
  [[nodiscard]] Vec3 cell_size() const { return bounds.extent() / static_cast<double>(resolution); }
  [[nodiscard]] Vec3 position(int i, int j, int k) const {
    return bounds.lo + cell_size().cwiseProduct(Vec3(i, j, k));
  }
  [[nodiscard]] double at(int i, int j, int k) const { return values[index(i, j, k)]; }
};

using PointField = std::function<double(const Vec3&)>;
/// Evaluates a batch of points (rows) into `out` (same length).
using BatchField = std::function<void(const Points&, Eigen::VectorXd&)>;

inline ScalarGrid sample_grid(const PointField& field, int resolution, const Box& bounds) {
  if (resolution < 1) throw std::invalid_argument("sample_grid: resolution must be positive");
  ScalarGrid g{resolution, bounds, {}};
  const int n = g.samples_per_axis();
  g.values.resize(static_cast<std::size_t>(n) * n * n);
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) g.values[g.index(i, j, k)] = field(g.position(i, j, k));
  return g;
}

/// Dense lattice evaluation, or hierarchical narrow-band evaluation when
/// `band_pruning` is set. A lattice at up to 1/8 of the resolution is evaluated
/// first. Each level then halves the spacing, but only inside cells that
/// straddle zero or whose corner values come within 1.5 cell diagonals of it.
/// Samples in skipped cells take the corner value nearest zero, which shares
/// the sign of every corner, so no spurious crossings appear. The pruning
/// bound assumes a distance-like field.
inline ScalarGrid sample_grid_batched(const BatchField& field, int resolution, const Box& bounds,
                                      bool band_pruning = true, Eigen::Index batch = 8192) {
  if (resolution < 1) throw std::invalid_argument("sample_grid: resolution must be positive");
  ScalarGrid g{resolution, bounds, {}};
  const int n = g.samples_per_axis();
  g.values.assign(static_cast<std::size_t>(n) * n * n, std::numeric_limits<double>::quiet_NaN());

  auto evaluate = [&](const std::vector<std::array<int, 3>>& ids) {
    for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t count = std::min(ids.size() - start, static_cast<std::size_t>(batch));
      Points p(static_cast<Eigen::Index>(count), 3);
      for (std::size_t r = 0; r < count; ++r) {
        const auto& id = ids[start + r];
        p.row(static_cast<Eigen::Index>(r)) = g.position(id[0], id[1], id[2]).transpose();
      }
      Eigen::VectorXd out(static_cast<Eigen::Index>(count));
      field(p, out);
      for (std::size_t r = 0; r < count; ++r) {
        const auto& id = ids[start + r];
        g.values[g.index(id[0], id[1], id[2])] = out(static_cast<Eigen::Index>(r));
      }
    }
  };

  int top = 1;
  while (top < 8 && resolution % (2 * top) == 0 && resolution / (2 * top) >= 4) top *= 2;
  if (!band_pruning || top == 1) {
    std::vector<std::array<int, 3>> ids;
    ids.reserve(g.values.size());
    for (int k = 0; k < n; ++k)
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) ids.push_back({i, j, k});
    evaluate(ids);
    return g;
  }

  std::vector<std::array<int, 3>> coarse;
  for (int k = 0; k < n; k += top)
    for (int j = 0; j < n; j += top)
      for (int i = 0; i < n; i += top) coarse.push_back({i, j, k});
  evaluate(coarse);

  for (int step = top; step > 1; step /= 2) {
    const int half = step / 2;
    const int nc = resolution / step;
    const double limit = 1.5 * (g.cell_size() * step).norm();
    std::vector<std::array<int, 3>> active;
    std::vector<std::pair<std::array<int, 3>, double>> skipped;
    for (int ck = 0; ck < nc; ++ck)
      for (int cj = 0; cj < nc; ++cj)
        for (int ci = 0; ci < nc; ++ci) {
          double nearest = std::numeric_limits<double>::infinity();
          bool pos = false;
          bool neg = false;
          for (const auto& o : detail::kMcCornerOffsets) {
            const double v = g.at((ci + o[0]) * step, (cj + o[1]) * step, (ck + o[2]) * step);
            if (std::abs(v) < std::abs(nearest)) nearest = v;
            pos = pos || v > 0.0;
            neg = neg || v <= 0.0;
          }
          if ((pos && neg) || std::abs(nearest) < limit) {
            active.push_back({ci, cj, ck});
          } else {
            skipped.push_back({{ci, cj, ck}, nearest});
          }
        }
    std::vector<std::array<int, 3>> todo;
    for (const auto& c : active)
      for (int k = c[2] * step; k <= (c[2] + 1) * step; k += half)
        for (int j = c[1] * step; j <= (c[1] + 1) * step; j += half)
          for (int i = c[0] * step; i <= (c[0] + 1) * step; i += half) {
            double& v = g.values[g.index(i, j, k)];
            if (std::isnan(v)) {
              v = 0.0;  // claimed; overwritten by evaluate
              todo.push_back({i, j, k});
            }
          }
    evaluate(todo);
    for (const auto& [c, value] : skipped)
      for (int k = c[2] * step; k <= (c[2] + 1) * step; k += half)
        for (int j = c[1] * step; j <= (c[1] + 1) * step; j += half)
          for (int i = c[0] * step; i <= (c[0] + 1) * step; i += half) {
            double& v = g.values[g.index(i, j, k)];
            if (std::isnan(v)) v = value;
          }
  }
  return g;
}

/// Extracts the zero level set of a sampled grid. Inside is `value <= 0`.
/// Faces are wound so their normals point toward increasing field values.
/// Vertices are shared across cells; zero-area faces are dropped.
inline TriMesh marching_cubes(const ScalarGrid& grid) {
  const int res = grid.resolution;
  const int n = grid.samples_per_axis();
  std::unordered_map<std::uint64_t, int> edge_vertex;
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> faces;

  auto lattice_id = [n](int i, int j, int k) {
    return (static_cast<std::uint64_t>(k) * static_cast<std::uint64_t>(n) + static_cast<std::uint64_t>(j)) *
               static_cast<std::uint64_t>(n) +
           static_cast<std::uint64_t>(i);
  };
  const std::uint64_t corner_key_base = 3 * lattice_id(0, 0, n);

  for (int k = 0; k < res; ++k)
    for (int j = 0; j < res; ++j)
      for (int i = 0; i < res; ++i) {
        std::array<double, 8> v{};
        int case_index = 0;
        for (int c = 0; c < 8; ++c) {
          const auto& o = detail::kMcCornerOffsets[static_cast<std::size_t>(c)];
          v[static_cast<std::size_t>(c)] = grid.at(i + o[0], j + o[1], k + o[2]);
          if (v[static_cast<std::size_t>(c)] <= 0.0) case_index |= 1 << c;
        }
        const auto& tri = detail::kMcTriangles[static_cast<std::size_t>(case_index)];
        if (tri[0] < 0) continue;
        std::array<int, 12> edge_ids{};
        edge_ids.fill(-1);
        for (int t = 0; t < 16 && tri[static_cast<std::size_t>(t)] >= 0; ++t) {
          const int e = tri[static_cast<std::size_t>(t)];
          if (edge_ids[static_cast<std::size_t>(e)] >= 0) continue;
          const auto& ec = detail::kMcEdgeCorners[static_cast<std::size_t>(e)];
          const auto& oa = detail::kMcCornerOffsets[static_cast<std::size_t>(ec[0])];
          const auto& ob = detail::kMcCornerOffsets[static_cast<std::size_t>(ec[1])];
          std::uint64_t a = lattice_id(i + oa[0], j + oa[1], k + oa[2]);
          std::uint64_t b = lattice_id(i + ob[0], j + ob[1], k + ob[2]);
          if (a > b) std::swap(a, b);
          const double fa = v[static_cast<std::size_t>(ec[0])];
          const double fb = v[static_cast<std::size_t>(ec[1])];
          const double denom = fa - fb;
          double t_param = std::abs(denom) < 1e-300 ? 0.5 : std::clamp(fa / denom, 0.0, 1.0);
          // Crossings that land on (or within 1e-7 of) a lattice corner are
          // welded to the corner and shared by every edge touching it.
          if (t_param < 1e-7) t_param = 0.0;
          if (t_param > 1.0 - 1e-7) t_param = 1.0;
          std::uint64_t key = a * 3 + (b - a == 1 ? 0 : (b - a == static_cast<std::uint64_t>(n) ? 1 : 2));
          if (t_param == 0.0) key = corner_key_base + lattice_id(i + oa[0], j + oa[1], k + oa[2]);
          if (t_param == 1.0) key = corner_key_base + lattice_id(i + ob[0], j + ob[1], k + ob[2]);
          auto it = edge_vertex.find(key);
          if (it == edge_vertex.end()) {
            const Vec3 pa = grid.position(i + oa[0], j + oa[1], k + oa[2]);
            const Vec3 pb = grid.position(i + ob[0], j + ob[1], k + ob[2]);
            verts.push_back(pa + t_param * (pb - pa));
            it = edge_vertex.emplace(key, static_cast<int>(verts.size() - 1)).first;
          }
          edge_ids[static_cast<std::size_t>(e)] = it->second;
        }
        for (int t = 0; t + 2 < 16 && tri[static_cast<std::size_t>(t)] >= 0; t += 3) {
          // Table winding is clockwise seen from outside; store counter-clockwise.
          faces.push_back({edge_ids[static_cast<std::size_t>(tri[static_cast<std::size_t>(t)])],
                           edge_ids[static_cast<std::size_t>(tri[static_cast<std::size_t>(t + 2)])],
                           edge_ids[static_cast<std::size_t>(tri[static_cast<std::size_t>(t + 1)])]});
        }
      }

  // Collapse sliver faces (area <= 1e-12) by welding their shortest edge, so
  // no holes open up, then drop faces whose corners coincide.
  std::vector<int> weld(verts.size());
  for (std::size_t i = 0; i < weld.size(); ++i) weld[i] = static_cast<int>(i);
  auto root = [&](int a) {
    while (weld[static_cast<std::size_t>(a)] != a) a = weld[static_cast<std::size_t>(a)] = weld[static_cast<std::size_t>(weld[static_cast<std::size_t>(a)])];
    return a;
  };
  std::vector<std::array<int, 3>> kept;
  for (int pass = 0; pass < 8; ++pass) {
    kept.clear();
    bool collapsed = false;
    for (const auto& f0 : faces) {
      std::array<int, 3> f{root(f0[0]), root(f0[1]), root(f0[2])};
      if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
      const Vec3& a = verts[static_cast<std::size_t>(f[0])];
      const Vec3& b = verts[static_cast<std::size_t>(f[1])];
      const Vec3& c = verts[static_cast<std::size_t>(f[2])];
      if (0.5 * (b - a).cross(c - a).norm() <= 1e-12) {
        const std::array<double, 3> len{(b - a).squaredNorm(), (c - b).squaredNorm(), (a - c).squaredNorm()};
        const int e = static_cast<int>(std::min_element(len.begin(), len.end()) - len.begin());
        weld[static_cast<std::size_t>(f[static_cast<std::size_t>((e + 1) % 3)])] = f[static_cast<std::size_t>(e)];
        collapsed = true;
        continue;
      }
      kept.push_back(f);
    }
    if (!collapsed) break;
  }
  std::vector<int> remap(verts.size(), -1);
  int next = 0;
  for (const auto& f : kept)
    for (int c : f)
      if (remap[static_cast<std::size_t>(c)] < 0) remap[static_cast<std::size_t>(c)] = next++;

  TriMesh mesh;
  mesh.vertices.resize(next, 3);
  for (std::size_t v = 0; v < verts.size(); ++v)
    if (remap[v] >= 0) mesh.vertices.row(remap[v]) = verts[v].transpose();
  mesh.faces.resize(static_cast<Eigen::Index>(kept.size()), 3);
  for (std::size_t f = 0; f < kept.size(); ++f)
    for (int c = 0; c < 3; ++c)
      mesh.faces(static_cast<Eigen::Index>(f), c) = remap[static_cast<std::size_t>(kept[f][static_cast<std::size_t>(c)])];
  return mesh;
}

/// Samples `field` on a res^3-cell lattice over `bounds` and extracts its zero
/// level set. An empty mesh means the grid holds no sign change.
inline TriMesh marching_cubes(const PointField& field, int resolution, const Box& bounds) {
  if (resolution < 8) throw std::invalid_argument("marching_cubes: resolution must be at least 8");
  return marching_cubes(sample_grid(field, resolution, bounds));
}

}  // namespace imhead
