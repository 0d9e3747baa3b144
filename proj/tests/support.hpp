#pragma once

#include "imhead/checkpoint.hpp"
#include "imhead/dataset.hpp"

#include <random>

#include <unistd.h>

namespace imhead::testing {

/// Fresh per-process directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("imhead_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

inline PointCloud unit_sphere(Eigen::Index n, std::uint64_t seed, double r = 1.0, const Vec3& c = Vec3::Zero()) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Points p(n, 3), nr(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vec3 v(g(rng), g(rng), g(rng));
    v.normalize();
    nr.row(i) = v.transpose();
    p.row(i) = (c + r * v).transpose();
  }
  return PointCloud(std::move(p), std::move(nr));
}

inline ModelConfig small_config() {
  ModelConfig cfg = ModelConfig::desk();
  cfg.d_g = 16;
  cfg.d_l = 4;
  cfg.d_e = 3;
  cfg.local_width = 8;
  cfg.feature_dim = 6;
  cfg.fusion_width = 8;
  cfg.deformer_width = 8;
  cfg.landmark_width = 8;
  return cfg;
}

/// Untrained model with random latent tables (3 identities x 2 expressions).
inline Checkpoint small_checkpoint(std::uint64_t seed = 11) {
  const ModelConfig cfg = small_config();
  Checkpoint ck;
  ck.model = Model<float>(cfg, RegionTopology::synthetic(), seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> g(0, 0.3);
  ck.identities = Eigen::MatrixXd::NullaryExpr(3, cfg.identity_dim(), [&] { return g(rng); });
  ck.expressions = Eigen::MatrixXd::NullaryExpr(6, cfg.d_e, [&] { return g(rng); });
  for (int s = 0; s < 6; s += 2) ck.expressions.row(s).setZero();
  ck.identity_labels = {"a", "b", "c"};
  for (int s = 0; s < 6; ++s) ck.samples.push_back({s / 2, s % 2, scan_name(s / 2, s % 2)});
  ck.stats = latent_statistics(ck);
  return ck;
}

/// small_checkpoint with every weight outside the deformer jittered, so the
/// field depends on the latent while the warp stays zero.
/// `deformer` also jitters the deformation network, so the warp depends on the latents.
inline Checkpoint sensitive_checkpoint(std::uint64_t seed = 21, bool deformer = false) {
  Checkpoint ck = small_checkpoint(seed);
  auto& ps = ck.model.params();
  std::mt19937_64 rng(5);
  std::normal_distribution<float> g(0, 0.05f);
  for (int i = 0; i < ps.size(); ++i) {
    if (!deformer && ps.names[static_cast<std::size_t>(i)].rfind("deformer", 0) == 0) continue;
    auto& v = ps.values[static_cast<std::size_t>(i)];
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] += g(rng);
  }
  ck.stats = latent_statistics(ck);
  return ck;
}

}  // namespace imhead::testing
