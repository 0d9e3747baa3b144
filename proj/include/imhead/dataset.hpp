#pragma once

// Synthetic dataset directories: per scan a PLY point cloud and a JSON file
// with the generating parameters, plus an index (dataset.json).

#include "imhead/io.hpp"
#include "imhead/synthetic_head.hpp"

#include <cstdio>

namespace imhead {

struct ScanRecord {
  int identity = 0;    ///< row in the identity table
  int expression = 0;  ///< 0 is neutral
  std::string name;
  SyntheticHeadParams params;
  PointCloud cloud;
};

struct Dataset {
  std::vector<ScanRecord> scans;

  [[nodiscard]] int num_identities() const {
    int n = 0;
    for (const auto& s : scans) n = std::max(n, s.identity + 1);
    return n;
  }
  /// Neutral parameters of identity i (expression controls cleared).
  [[nodiscard]] SyntheticHeadParams identity_params(int i) const {
    for (const auto& s : scans) {
      if (s.identity == i) {
        SyntheticHeadParams p = s.params;
        p.expression = {};
        return p;
      }
    }
    throw std::out_of_range("dataset has no identity " + std::to_string(i));
  }
};

inline json params_to_json(const SyntheticHeadParams& p) {
  json parts = json::array();
  for (int i = 0; i < kNumHeadParts; ++i) {
    const auto& part = p.parts[static_cast<std::size_t>(i)];
    parts.push_back({{"name", kHeadPartNames[static_cast<std::size_t>(i)]},
                     {"center", {part.center.x(), part.center.y(), part.center.z()}},
                     {"radii", {part.radii.x(), part.radii.y(), part.radii.z()}},
                     {"blend_k", part.blend_k}});
  }
  return {{"identity_seed", p.identity_seed},
          {"parts", parts},
          {"expression",
           {{"jaw_open", p.expression.jaw_open},
            {"mouth_width", p.expression.mouth_width},
            {"brow_raise", p.expression.brow_raise}}}};
}

inline SyntheticHeadParams params_from_json(const json& j) {
  SyntheticHeadParams p;
  p.identity_seed = j.at("identity_seed").get<std::uint64_t>();
  const auto& parts = j.at("parts");
  if (parts.size() != static_cast<std::size_t>(kNumHeadParts)) throw IoError("params: expected 13 parts");
  for (int i = 0; i < kNumHeadParts; ++i) {
    const auto& jp = parts[static_cast<std::size_t>(i)];
    auto& part = p.parts[static_cast<std::size_t>(i)];
    const auto c = jp.at("center").get<std::array<double, 3>>();
    const auto r = jp.at("radii").get<std::array<double, 3>>();
    part.center = Vec3(c[0], c[1], c[2]);
    part.radii = Vec3(r[0], r[1], r[2]);
    part.blend_k = jp.at("blend_k").get<double>();
  }
  const auto& e = j.at("expression");
  p.expression = {e.at("jaw_open").get<double>(), e.at("mouth_width").get<double>(), e.at("brow_raise").get<double>()};
  return p;
}

/// Seed of identity `index` in a dataset generated from `seed`.
inline std::uint64_t identity_seed(std::uint64_t seed, int index) { return seed * 100003ULL + static_cast<std::uint64_t>(index); }

inline std::string scan_name(int identity, int expression) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "id%03d_exp%02d", identity, expression);
  return buf;
}

/// Generates identities x expressions scans in memory.
inline Dataset make_synthetic_dataset(std::uint64_t seed, int num_ids, int num_exprs, Eigen::Index points_per_scan) {
  if (num_ids < 1 || num_exprs < 1 || points_per_scan < 1) throw std::invalid_argument("make_synthetic_dataset: counts");
  Dataset ds;
  for (int i = 0; i < num_ids; ++i) {
    const SyntheticHeadParams neutral = make_synthetic_identity(identity_seed(seed, i));
    for (int e = 0; e < num_exprs; ++e) {
      ScanRecord r;
      r.identity = i;
      r.expression = e;
      r.name = scan_name(i, e);
      r.params = neutral;
      r.params.expression = make_synthetic_expression(neutral.identity_seed, e);
      r.cloud = sample_surface(r.params, points_per_scan, seed + 7919ULL * static_cast<std::uint64_t>(e + 1));
      ds.scans.push_back(std::move(r));
    }
  }
  return ds;
}

inline void write_dataset(const fs::path& dir, const Dataset& ds, const json& meta = json::object()) {
  fs::create_directories(dir);
  json index = {{"meta", meta}, {"scans", json::array()}};
  for (const auto& s : ds.scans) {
    write_ply(dir / (s.name + ".ply"), s.cloud);
    write_json(dir / (s.name + ".json"), params_to_json(s.params));
    index["scans"].push_back({{"name", s.name}, {"identity", s.identity}, {"expression", s.expression}});
  }
  write_json(dir / "dataset.json", index);
}

inline Dataset read_dataset(const fs::path& dir) {
  const json index = read_json(dir / "dataset.json");
  Dataset ds;
  for (const auto& js : index.at("scans")) {
    ScanRecord r;
    r.name = js.at("name").get<std::string>();
    r.identity = js.at("identity").get<int>();
    r.expression = js.at("expression").get<int>();
    r.params = params_from_json(read_json(dir / (r.name + ".json")));
    r.cloud = read_ply(dir / (r.name + ".ply"));
    ds.scans.push_back(std::move(r));
  }
  return ds;
}

}  // namespace imhead
