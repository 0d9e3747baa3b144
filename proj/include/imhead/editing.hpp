#pragma once

// Region-level edits in the post-DecNet embedding space, displacement maps and
// canonical-space correspondence transfer.

#include "imhead/checkpoint.hpp"
#include "imhead/metrics.hpp"

#include <set>

namespace imhead {

/// Region indices for names; throws on an unknown name.
inline std::vector<int> region_indices(const RegionTopology& topo, const std::vector<std::string>& names) {
  std::vector<int> out;
  for (const auto& n : names) {
    const int j = topo.index_of(n);
    if (j < 0) {
      std::string valid;
      for (const auto& v : topo.names) valid += (valid.empty() ? "" : ", ") + v;
      throw std::invalid_argument("unknown region '" + n + "' (regions: " + valid + ")");
    }
    out.push_back(j);
  }
  return out;
}

namespace detail {

inline std::set<int> checked_regions(const std::vector<int>& regions, int k) {
  std::set<int> out;
  for (int j : regions) {
    if (j < 0 || j >= k) throw std::invalid_argument("region index " + std::to_string(j) + " out of range");
    out.insert(j);
  }
  return out;
}

}  // namespace detail

/// Overrides the selected regions with mean + scale * std * N(0, 1) draws.
/// With `symmetric`, a region's left/right partner receives the same embedding.
inline EditedIdentity sample_region(const EditedIdentity& base, const std::vector<int>& regions, const LatentStatistics& stats,
                                    const RegionTopology& topo, double scale, std::uint64_t seed, bool symmetric = true) {
  if (!(scale >= 0)) throw std::invalid_argument("sample_region: scale must be >= 0");
  const int k = static_cast<int>(stats.region_mean.rows());
  if (topo.size() != k) throw std::invalid_argument("sample_region: topology does not match statistics");
  const auto sel = detail::checked_regions(regions, k);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  EditedIdentity out = base;
  std::set<int> done;
  for (int j : sel) {
    if (done.count(j)) continue;
    Eigen::VectorXd v = stats.region_mean.row(j).transpose();
    for (Eigen::Index c = 0; c < v.size(); ++c) v(c) += scale * stats.region_std(j, c) * g(rng);
    out.overrides[j] = v;
    done.insert(j);
    const int p = topo.partner(j);
    if (symmetric && p >= 0) {
      out.overrides[p] = v;
      done.insert(p);
    }
  }
  return out;
}

/// `a` with the listed regions set to `b`'s effective embeddings.
template <typename S>
EditedIdentity swap_regions(const Model<S>& m, const EditedIdentity& a, const EditedIdentity& b, const std::vector<int>& regions) {
  if (a.base.size() != b.base.size()) throw std::invalid_argument("swap_regions: identities come from different configurations");
  detail::check_identity(m, a);
  const auto sel = detail::checked_regions(regions, m.num_regions());
  if (sel.empty()) return a;
  const Eigen::MatrixXd eb = decompose_identity(m, b);
  EditedIdentity out = a;
  for (int j : sel) out.overrides[j] = eb.row(j).transpose();
  return out;
}

/// (1 - t) a + t b.
inline Eigen::VectorXd interpolate(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double t) {
  if (a.size() != b.size()) throw std::invalid_argument("interpolate: dimension mismatch");
  return (1.0 - t) * a + t * b;
}

/// Per-vertex distance from `before` to the surface of `after`.
inline Eigen::VectorXd displacement_map(const TriMesh& before, const TriMesh& after) {
  if (before.num_vertices() == 0 || after.empty()) throw std::invalid_argument("displacement_map: meshes must be nonempty");
  const TriangleBvh bvh(after);
  Eigen::VectorXd d(before.num_vertices());
  for (Eigen::Index v = 0; v < before.num_vertices(); ++v) d(v) = bvh.distance(before.vertices.row(v).transpose());
  return d;
}

struct LocalityReport {
  double peak_inside = 0;  ///< max displacement within the radius
  double p95_outside = 0;  ///< 95th percentile outside it
  Eigen::Index n_inside = 0;
  Eigen::Index n_outside = 0;
  [[nodiscard]] double ratio() const { return peak_inside > 0 ? p95_outside / peak_inside : 0.0; }
};

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline LocalityReport locality_report(const TriMesh& before, const Eigen::VectorXd& displacement, const Vec3& center,
                                      double radius) {
  if (displacement.size() != before.num_vertices()) throw std::invalid_argument("locality_report: size mismatch");
  LocalityReport r;
  std::vector<double> outside;
  for (Eigen::Index v = 0; v < before.num_vertices(); ++v) {
    if ((before.vertices.row(v).transpose() - center).norm() <= radius) {
      r.peak_inside = std::max(r.peak_inside, displacement(v));
      ++r.n_inside;
    } else {
      outside.push_back(displacement(v));
    }
  }
  r.n_outside = static_cast<Eigen::Index>(outside.size());
  r.p95_outside = percentile(std::move(outside), 0.95);
  return r;
}

// ---------------------------------------------------------------------------
// Correspondence

struct ColoredMesh {
  TriMesh mesh;
  Points colors;  ///< per-vertex RGB in [0, 1]
};

struct TransferResult {
  ColoredMesh mesh;
  Eigen::VectorXd nn_distance;             ///< canonical distance to the source vertex used
  std::vector<Eigen::Index> source_vertex;
};

/// Canonical positions x + delta(x) for a batch of observed points.
template <typename S>
Points warp_to_canonical(const Model<S>& m, const Points& x, const Eigen::VectorXd& z_id, const Eigen::VectorXd& z_exp,
                         Eigen::Index chunk = 4096) {
  if (z_id.size() != m.config().identity_dim() || z_exp.size() != m.config().d_e) {
    throw std::invalid_argument("warp_to_canonical: latent dimension mismatch");
  }
  ad::DenormalGuard ftz;
  Points out(x.rows(), 3);
  for (Eigen::Index s = 0; s < x.rows(); s += chunk) {
    const Eigen::Index n = std::min(chunk, x.rows() - s);
    ad::Tape<S> t;
    auto p = m.bind(t, false);
    const std::vector<int> sample(static_cast<std::size_t>(n), 0);
    auto [d, w] = m.warp(p, t.constant(ad::Mat<S>(x.middleRows(s, n).template cast<S>())),
                         t.constant(detail::row_matrix<S>(z_id)), t.constant(detail::row_matrix<S>(z_exp)), sample);
    out.middleRows(s, n) = x.middleRows(s, n) + d.value().template cast<double>();
  }
  return out;
}

/// Colours every expression mesh of `z_id` from `src` by 1-NN lookup in canonical space.
template <typename S>
std::vector<TransferResult> transfer_correspondence(const ColoredMesh& src, const Model<S>& m, const Eigen::VectorXd& z_id,
                                                    const std::vector<Eigen::VectorXd>& expressions,
                                                    int resolution = kDefaultMeshResolution) {
  std::vector<TransferResult> out;
  if (expressions.empty()) return out;
  if (src.colors.rows() != src.mesh.num_vertices() || src.mesh.num_vertices() == 0) {
    throw std::invalid_argument("transfer_correspondence: source needs one colour per vertex");
  }
  const Eigen::VectorXd neutral = Eigen::VectorXd::Zero(m.config().d_e);
  const KdTree tree(warp_to_canonical(m, src.mesh.vertices, z_id, neutral));
  for (const auto& ze : expressions) {
    TransferResult r;
    r.mesh.mesh = extract_mesh(m, z_id, ze, resolution);
    const Points can = warp_to_canonical(m, r.mesh.mesh.vertices, z_id, ze);
    r.nn_distance = detail::nn_distances(can, tree, &r.source_vertex);
    r.mesh.colors.resize(can.rows(), 3);
    for (Eigen::Index v = 0; v < can.rows(); ++v) r.mesh.colors.row(v) = src.colors.row(r.source_vertex[static_cast<std::size_t>(v)]);
    out.push_back(std::move(r));
  }
  return out;
}

/// Smooth colour ramp over canonical position, for visualising correspondences.
inline Points position_colors(const Points& p) {
  Points c(p.rows(), 3);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (int k = 0; k < 3; ++k) c(i, k) = 0.5 + 0.5 * std::sin(3.0 * p(i, k));
  }
  return c;
}

inline json colors_to_json(const Points& c) {
  json a = json::array();
  for (Eigen::Index i = 0; i < c.rows(); ++i) a.push_back({c(i, 0), c(i, 1), c(i, 2)});
  return {{"colors", a}};
}

/// FILE.obj plus FILE.obj.json holding {"colors": [[r, g, b], ...]}.
inline void write_colored_obj(const fs::path& path, const ColoredMesh& m) {
  detail::write_file(path, encode_obj(m.mesh));
  detail::write_file(sidecar_path(path), colors_to_json(m.colors).dump());
}

// ---------------------------------------------------------------------------
// JSON

/// {"base": [...], "base_id": i (optional), "overrides": {"j": [...]}}.
inline json to_json(const EditedIdentity& e, std::optional<int> base_id = std::nullopt) {
  json ov = json::object();
  for (const auto& [j, v] : e.overrides) ov[std::to_string(j)] = to_json(v);
  json out{{"base", to_json(e.base)}, {"overrides", ov}};
  if (base_id) out["base_id"] = *base_id;
  return out;
}

/// Resolves "base_id" through `ckpt` when "base" is absent.
inline EditedIdentity edited_identity_from_json(const json& j, const Checkpoint* ckpt = nullptr) {
  EditedIdentity e;
  if (j.contains("base")) {
    e.base = vector_from_json(j.at("base"));
  } else if (j.contains("base_id")) {
    if (!ckpt) throw std::invalid_argument("edited identity refers to base_id without a checkpoint");
    e.base = ckpt->identity(j.at("base_id").get<int>());
  } else {
    throw std::invalid_argument("edited identity needs 'base' or 'base_id'");
  }
  if (j.contains("overrides")) {
    for (const auto& [key, v] : j.at("overrides").items()) {
      std::size_t used = 0;
      const int idx = std::stoi(key, &used);
      if (used != key.size()) throw std::invalid_argument("override key '" + key + "' is not a region index");
      e.overrides[idx] = vector_from_json(v);
    }
  }
  if (ckpt) detail::check_identity(ckpt->model, e);
  return e;
}

}  // namespace imhead
