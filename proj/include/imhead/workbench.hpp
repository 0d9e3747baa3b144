#pragma once

// Library side of the command-line workbench. Each run_* function is what one
// subcommand does, minus argument parsing.

#include "imhead/dataset.hpp"
#include "imhead/editing.hpp"
#include "imhead/eval.hpp"
#include "imhead/fitting.hpp"
#include "imhead/training.hpp"

#include <fstream>

namespace imhead {

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::uint64_t seed = 0;
  int ids = 16;
  int exprs = 4;
  Eigen::Index points = 20000;

  void validate() const {
    if (ids < 1 || exprs < 1) throw std::invalid_argument("synth: need at least one identity and one expression");
    if (points < 1) throw std::invalid_argument("synth: points must be positive");
  }
};

inline json to_json(const SynthOptions& o) {
  return {{"seed", o.seed}, {"ids", o.ids}, {"exprs", o.exprs}, {"points", o.points}};
}

inline Dataset run_synth(const SynthOptions& o, const fs::path& out) {
  o.validate();
  Dataset ds = make_synthetic_dataset(o.seed, o.ids, o.exprs, o.points);
  write_dataset(out, ds, to_json(o));
  return ds;
}

// ---------------------------------------------------------------------------
// train

/// Trains on a dataset directory and writes CKPT plus CKPT/train_log.jsonl.
inline TrainResult run_train(const fs::path& data, const json& config, const fs::path& out,
                             std::optional<std::uint64_t> seed = std::nullopt, std::ostream* progress = nullptr) {
  TrainConfig cfg = train_config_from_json(config);
  if (seed) cfg.seed = *seed;
  const Dataset ds = read_dataset(data);
  std::ostringstream log;
  TrainResult r = train(ds, cfg, &log, [&](const json& rec) {
    if (progress) *progress << rec.dump() << '\n' << std::flush;
  });
  save_checkpoint(r.checkpoint, out);
  detail::write_file(out / "train_log.jsonl", log.str());
  return r;
}

// ---------------------------------------------------------------------------
// fit

/// Generating parameters written beside a synthetic scan, if present.
inline std::optional<SyntheticHeadParams> scan_params(const fs::path& scan) {
  fs::path p = scan;
  p.replace_extension(".json");
  if (!fs::exists(p)) return std::nullopt;
  try {
    return params_from_json(read_json(p));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

/// Fits a PLY scan; the document holds the latents and the resolved options.
inline json run_fit(const Checkpoint& ck, const fs::path& scan, const FitOptions& opt, double noise_std = 0.0) {
  if (noise_std < 0) throw std::invalid_argument("fit: noise must be >= 0");
  PointCloud obs = read_ply(scan);
  if (noise_std > 0) {
    const auto oracle = scan_params(scan);
    obs = add_noise(obs, noise_std, opt.seed, oracle ? &*oracle : nullptr);
  }
  const FitResult r = fit(obs, ck, opt);
  json cfg = to_json(opt);
  cfg["noise"] = noise_std;
  cfg["scan"] = scan.string();
  return {{"fit", to_json(r)}, {"config", cfg}};
}

// ---------------------------------------------------------------------------
// mesh

/// Latents for one mesh, plus the unedited identity when there is one.
struct MeshSource {
  EditedIdentity identity;
  Eigen::VectorXd z_exp;
  std::optional<int> base_id;
  bool edited = false;
  json description = json::object();
};

inline MeshSource source_from_identity(const Checkpoint& ck, int id, std::optional<int> sample = std::nullopt) {
  MeshSource s;
  s.identity = ck.identity(id);
  s.z_exp = sample ? ck.expression(*sample) : ck.neutral_expression();
  s.description = {{"identity", id}};
  if (sample) s.description["sample"] = *sample;
  return s;
}

/// Reads a run_fit document (or a bare FitResult).
inline MeshSource source_from_fit(const Checkpoint& ck, const json& doc) {
  const FitResult r = fit_result_from_json(doc.contains("fit") ? doc.at("fit") : doc);
  MeshSource s;
  s.identity = r.z_id;
  s.z_exp = r.z_exp;
  detail::check_identity(ck.model, s.identity);
  if (s.z_exp.size() != ck.model.config().d_e) throw std::invalid_argument("fit expression has the wrong dimension");
  s.description = {{"fit", true}};
  return s;
}

inline MeshSource source_from_edit(const Checkpoint& ck, const json& doc, std::optional<int> sample = std::nullopt) {
  MeshSource s;
  s.identity = edited_identity_from_json(doc, &ck);
  s.edited = true;
  if (doc.contains("base_id")) s.base_id = doc.at("base_id").get<int>();
  if (sample) {
    s.z_exp = ck.expression(*sample);
  } else if (doc.contains("z_exp")) {
    s.z_exp = vector_from_json(doc.at("z_exp"));
    if (s.z_exp.size() != ck.model.config().d_e) throw std::invalid_argument("edit expression has the wrong dimension");
  } else {
    s.z_exp = ck.neutral_expression();
  }
  s.description = {{"edit", true}};
  if (s.base_id) s.description["base_id"] = *s.base_id;
  if (sample) s.description["sample"] = *sample;
  return s;
}

/// Extracts the mesh. For an edit of a stored identity the scalars hold each
/// vertex's distance to the unedited surface.
inline TriMesh run_mesh(const Checkpoint& ck, const MeshSource& src, int resolution = kDefaultMeshResolution) {
  TriMesh mesh = extract_mesh(ck.model, src.identity, src.z_exp, resolution);
  if (src.edited && src.base_id && !mesh.empty()) {
    const TriMesh base = extract_mesh(ck.model, ck.identity(*src.base_id), src.z_exp, resolution);
    if (!base.empty()) mesh.scalars = displacement_map(mesh, base);
  }
  return mesh;
}

inline json mesh_summary(const TriMesh& mesh, const MeshSource& src, int resolution) {
  json j{{"vertices", mesh.num_vertices()},
         {"faces", mesh.num_faces()},
         {"empty", mesh.empty()},
         {"resolution", resolution},
         {"bounds", kDefaultBoundsHalf},
         {"source", src.description}};
  if (mesh.scalars && mesh.scalars->size() > 0) j["max_displacement"] = mesh.scalars->maxCoeff();
  return j;
}

// ---------------------------------------------------------------------------
// edit

/// An edited identity, the stored identity it started from, and the ops applied.
struct EditDocument {
  EditedIdentity identity;
  std::optional<int> base_id;
  json ops = json::array();
};

inline json to_json(const EditDocument& d) {
  json j = to_json(d.identity, d.base_id);
  j["ops"] = d.ops;
  return j;
}

inline EditDocument edit_document_from_json(const Checkpoint& ck, const json& j) {
  EditDocument d;
  d.identity = edited_identity_from_json(j, &ck);
  if (j.contains("base_id")) d.base_id = j.at("base_id").get<int>();
  if (j.contains("ops")) d.ops = j.at("ops");
  return d;
}

inline EditDocument edit_base(const Checkpoint& ck, int id) {
  EditDocument d;
  d.identity = ck.identity(id);
  d.base_id = id;
  return d;
}

inline EditDocument run_edit_sample(const Checkpoint& ck, EditDocument doc, const std::vector<std::string>& regions,
                                    double scale, std::uint64_t seed, bool symmetric = true) {
  const auto& topo = ck.model.topology();
  doc.identity = sample_region(doc.identity, region_indices(topo, regions), ck.stats, topo, scale, seed, symmetric);
  doc.ops.push_back({{"mode", "sample"}, {"regions", regions}, {"scale", scale}, {"seed", seed}, {"symmetric", symmetric}});
  return doc;
}

inline EditDocument run_edit_swap(const Checkpoint& ck, EditDocument doc, int source_id, const std::vector<std::string>& regions) {
  doc.identity = swap_regions(ck.model, doc.identity, ck.identity(source_id), region_indices(ck.model.topology(), regions));
  doc.ops.push_back({{"mode", "swap"}, {"regions", regions}, {"source_id", source_id}});
  return doc;
}

/// Drops overrides so the listed regions follow the base latent again.
inline EditDocument run_edit_reset(const Checkpoint& ck, EditDocument doc, const std::vector<std::string>& regions) {
  for (int j : region_indices(ck.model.topology(), regions)) doc.identity.overrides.erase(j);
  doc.ops.push_back({{"mode", "reset"}, {"regions", regions}});
  return doc;
}

inline EditDocument run_edit_interp(const Checkpoint& ck, int a, int b, double t) {
  EditDocument d;
  d.identity = interpolate(ck.identity(a), ck.identity(b), t);
  d.ops.push_back({{"mode", "interp"}, {"a", a}, {"b", b}, {"t", t}});
  return d;
}

// ---------------------------------------------------------------------------
// eval

struct SpecificityOptions {
  int samples = 8;
  std::vector<double> stds = {0.5, 1.0, 2.0, 3.0};
  int resolution = 64;
};

/// Fits every scan of `ds`; optionally adds the specificity sweep against the
/// dataset's clouds.
inline MetricReport run_eval(const Checkpoint& ck, const Dataset& ds, const EvalOptions& opt,
                             const std::optional<SpecificityOptions>& spec = std::nullopt) {
  MetricReport rep = evaluate_fit(ck, ds.scans, opt);
  if (spec) {
    std::vector<PointCloud> refs;
    for (const auto& s : ds.scans) refs.push_back(s.cloud);
    rep.specificity = specificity(ck, refs, spec->samples, spec->stds, opt.seed, spec->resolution);
    rep.config["specificity"] = {{"samples", spec->samples}, {"stds", spec->stds}, {"resolution", spec->resolution}};
  }
  return rep;
}

}  // namespace imhead
