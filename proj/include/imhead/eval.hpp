#pragma once

// Evaluation protocol: fit-and-measure over a scan split, specificity curves,
// and the report format.

#include "imhead/dataset.hpp"
#include "imhead/fitting.hpp"

#include <iomanip>
#include <set>
#include <sstream>

namespace imhead {

// ---------------------------------------------------------------------------
// Specificity

struct SpecificityRow {
  double scale = 0;
  double error = 0;  ///< mean over samples; infinite when a sample yields no surface
  int empty_meshes = 0;
};

/// Mean distance from each vertex of `mesh` to the closest reference, minimised over references.
inline double closest_reference_distance(const TriMesh& mesh, const std::vector<KdTree>& refs) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : refs) best = std::min(best, mean_distance_to(mesh.vertices, r));
  return best;
}

/// Identity latents mean + s * std * eps at neutral expression. The same eps
/// draws are reused for every s.
inline std::vector<SpecificityRow> specificity(const Checkpoint& ck, const std::vector<PointCloud>& references, int n_samples,
                                               const std::vector<double>& stds, std::uint64_t seed,
                                               int resolution = kDefaultMeshResolution) {
  if (references.empty()) throw std::invalid_argument("specificity: reference set is empty");
  if (n_samples < 1) throw std::invalid_argument("specificity: n_samples must be positive");
  std::vector<KdTree> trees;
  for (const auto& r : references) trees.emplace_back(r.points);
  const auto& st = ck.stats;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<Eigen::VectorXd> eps;
  for (int i = 0; i < n_samples; ++i) eps.push_back(Eigen::VectorXd::NullaryExpr(st.id_mean.size(), [&] { return g(rng); }));

  std::vector<SpecificityRow> rows;
  for (double s : stds) {
    SpecificityRow row{s, 0.0, 0};
    for (const auto& e : eps) {
      const Eigen::VectorXd z = st.id_mean + s * st.id_std.cwiseProduct(e);
      const TriMesh mesh = extract_mesh(ck.model, z, ck.neutral_expression(), resolution);
      if (mesh.num_vertices() == 0) {
        ++row.empty_meshes;
        row.error = std::numeric_limits<double>::infinity();
        continue;
      }
      row.error += closest_reference_distance(mesh, trees) / n_samples;
    }
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Fit-and-measure

struct EvalOptions {
  FitOptions fit;
  bool warm_start = false;        ///< initialise from stored latents when the scan was trained on
  std::optional<FaceMask> mask;   ///< restrict metrics to the face region
  int resolution = kDefaultMeshResolution;
  Eigen::Index metric_samples = kMetricSamples;
  double tau = kDefaultFScoreTau;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
};

inline json to_json(const EvalOptions& o) {
  json j{{"fit", to_json(o.fit)},
         {"warm_start", o.warm_start},
         {"resolution", o.resolution},
         {"metric_samples", o.metric_samples},
         {"tau", o.tau},
         {"noise_std", o.noise_std},
         {"seed", o.seed}};
  j["mask"] = o.mask ? json{{"z_min", o.mask->z0}} : json(nullptr);
  return j;
}

struct ScanMetrics {
  std::string name;
  int identity = 0;
  int expression = 0;
  double chamfer = std::numeric_limits<double>::quiet_NaN();
  double normal_consistency = std::numeric_limits<double>::quiet_NaN();
  double f_score = std::numeric_limits<double>::quiet_NaN();
  double fit_seconds = 0;
  double fit_loss = 0;
  bool converged = false;
  std::string error;  ///< empty on success

  [[nodiscard]] bool ok() const { return error.empty(); }
};

struct Aggregate {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  int count = 0;
};

inline Aggregate aggregate(std::vector<double> v) {
  Aggregate a;
  a.count = static_cast<int>(v.size());
  if (v.empty()) return a;
  a.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  a.median = v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
  return a;
}

inline json to_json(const Aggregate& a) {
  auto num = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
  return {{"mean", num(a.mean)}, {"median", num(a.median)}, {"count", a.count}};
}

struct MetricReport {
  std::vector<ScanMetrics> scans;
  std::vector<SpecificityRow> specificity;
  json config = json::object();

  [[nodiscard]] Aggregate summary(double ScanMetrics::*field) const {
    std::vector<double> v;
    for (const auto& s : scans)
      if (s.ok()) v.push_back(s.*field);
    return aggregate(std::move(v));
  }
  [[nodiscard]] int failures() const {
    return static_cast<int>(std::count_if(scans.begin(), scans.end(), [](const ScanMetrics& s) { return !s.ok(); }));
  }
};

inline json to_json(const MetricReport& r) {
  auto num = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
  json rows = json::array();
  for (const auto& s : r.scans) {
    json j{{"name", s.name},
           {"identity", s.identity},
           {"expression", s.expression},
           {"chamfer", num(s.chamfer)},
           {"normal_consistency", num(s.normal_consistency)},
           {"f_score", num(s.f_score)},
           {"fit_seconds", s.fit_seconds},
           {"fit_loss", num(s.fit_loss)},
           {"converged", s.converged}};
    if (!s.ok()) j["error"] = s.error;
    rows.push_back(j);
  }
  json spec = json::array();
  for (const auto& s : r.specificity) spec.push_back({{"std", s.scale}, {"error", num(s.error)}, {"empty_meshes", s.empty_meshes}});
  return {{"config", r.config},
          {"scans", rows},
          {"summary",
           {{"chamfer", to_json(r.summary(&ScanMetrics::chamfer))},
            {"normal_consistency", to_json(r.summary(&ScanMetrics::normal_consistency))},
            {"f_score", to_json(r.summary(&ScanMetrics::f_score))},
            {"fit_seconds", to_json(r.summary(&ScanMetrics::fit_seconds))},
            {"failures", r.failures()}}},
          {"specificity", spec}};
}

/// One row per scan: name, identity, expression, CD, NC, F@tau, seconds, converged, error.
inline std::string to_csv(const MetricReport& r) {
  const double tau = r.config.value("tau", kDefaultFScoreTau);
  std::ostringstream out;
  out << std::setprecision(9);
  out << "name,identity,expression,CD,NC,F@" << tau << ",fit_seconds,converged,error\n";
  for (const auto& s : r.scans) {
    std::string err = s.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << s.name << ',' << s.identity << ',' << s.expression << ',' << s.chamfer << ',' << s.normal_consistency << ','
        << s.f_score << ',' << s.fit_seconds << ',' << (s.converged ? 1 : 0) << ',' << err << '\n';
  }
  return out.str();
}

namespace detail {

inline std::optional<int> sample_index(const Checkpoint& ck, const std::string& label) {
  for (std::size_t s = 0; s < ck.samples.size(); ++s)
    if (ck.samples[s].label == label) return static_cast<int>(s);
  return std::nullopt;
}

}  // namespace detail

/// Fits one scan and measures the fitted surface against the oracle surface.
inline ScanMetrics evaluate_scan(const Checkpoint& ck, const ScanRecord& scan, const EvalOptions& opt, std::uint64_t seed) {
  ScanMetrics m{scan.name, scan.identity, scan.expression};
  try {
    FitOptions fo = opt.fit;
    fo.seed = seed;
    if (opt.warm_start) {
      if (auto s = detail::sample_index(ck, scan.name)) {
        fo.init = FitInit::kGiven;
        fo.init_id = ck.identity(ck.samples[static_cast<std::size_t>(*s)].identity);
        fo.init_exp = ck.expression(*s);
      }
    }
    const PointCloud obs = opt.noise_std > 0 ? add_noise(scan.cloud, opt.noise_std, seed, &scan.params) : scan.cloud;
    const FitResult r = fit(obs, ck, fo);
    m.fit_seconds = r.seconds;
    m.fit_loss = r.best_loss();
    m.converged = r.converged;
    const TriMesh mesh = extract_mesh(ck.model, r.z_id, r.z_exp, opt.resolution);
    if (mesh.empty()) throw std::runtime_error("fitted latent produced no surface");
    PointCloud pred = sample_mesh(mesh, opt.metric_samples, seed);
    PointCloud truth = sample_surface(scan.params, opt.metric_samples, seed);
    if (opt.mask) {
      pred = filter_points(pred, *opt.mask);
      truth = filter_points(truth, *opt.mask);
      if (pred.empty() || truth.empty()) throw std::runtime_error("mask removed every point");
    }
    m.chamfer = chamfer(pred, truth);
    m.normal_consistency = normal_consistency(pred, truth);
    m.f_score = f_score(pred, truth, opt.tau);
  } catch (const std::exception& e) {
    m.error = e.what();
  }
  return m;
}

/// Per-scan failures are recorded in the report, not thrown.
inline MetricReport evaluate_fit(const Checkpoint& ck, const std::vector<ScanRecord>& split, const EvalOptions& opt = {}) {
  if (split.empty()) throw std::invalid_argument("evaluate_fit: split is empty");
  MetricReport rep;
  rep.config = to_json(opt);
  for (std::size_t i = 0; i < split.size(); ++i) {
    rep.scans.push_back(evaluate_scan(ck, split[i], opt, opt.seed + i));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Reconstruction of the training set with stored latents

struct ReconstructionRow {
  std::string name;
  double chamfer = std::numeric_limits<double>::infinity();
};

struct ReconstructionReport {
  std::vector<ReconstructionRow> scans;
  std::vector<double> eikonal;         ///< per identity, mean (|grad| - 1)^2
  std::vector<double> landmark_error;  ///< per identity, mean anchor distance
  [[nodiscard]] double mean_chamfer() const {
    double s = 0;
    for (const auto& r : scans) s += r.chamfer;
    return scans.empty() ? 0.0 : s / static_cast<double>(scans.size());
  }
  [[nodiscard]] double mean_eikonal() const { return aggregate(eikonal).mean; }
  [[nodiscard]] double mean_landmark_error() const { return aggregate(landmark_error).mean; }
};

inline json to_json(const ReconstructionReport& r) {
  json rows = json::array();
  for (const auto& s : r.scans) rows.push_back({{"name", s.name}, {"chamfer", std::isfinite(s.chamfer) ? json(s.chamfer) : json(nullptr)}});
  return {{"scans", rows},
          {"mean_chamfer", r.mean_chamfer()},
          {"eikonal", r.eikonal},
          {"mean_eikonal", r.mean_eikonal()},
          {"landmark_error", r.landmark_error},
          {"mean_landmark_error", r.mean_landmark_error()}};
}

/// Mean (|grad f| - 1)^2 over `n` uniform points in [-half, half]^3.
inline double eikonal_residual(const Model<float>& m, const EditedIdentity& id, const Eigen::VectorXd& z_exp, Eigen::Index n,
                               std::uint64_t seed, double half = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-half, half);
  Points p(n, 3);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  Points g;
  evaluate_sdf(m, p, id, z_exp, &g);
  return (g.rowwise().norm().array() - 1.0).square().mean();
}

/// Meshes every scan of `ds` found among the checkpoint samples (matched by
/// name) and compares it with the oracle surface. Identities are checked at
/// neutral for the Eikonal residual and anchor placement.
inline ReconstructionReport reconstruction_report(const Checkpoint& ck, const Dataset& ds, int resolution = kDefaultMeshResolution,
                                                  Eigen::Index samples = kMetricSamples, std::uint64_t seed = 0) {
  ReconstructionReport rep;
  std::set<int> identities;
  for (const auto& scan : ds.scans) {
    const auto s = detail::sample_index(ck, scan.name);
    if (!s) continue;
    const int id = ck.samples[static_cast<std::size_t>(*s)].identity;
    ReconstructionRow row{scan.name};
    const TriMesh mesh = extract_mesh(ck.model, ck.identity(id), ck.expression(*s), resolution);
    if (!mesh.empty()) row.chamfer = chamfer(sample_mesh(mesh, samples, seed), sample_surface(scan.params, samples, seed));
    rep.scans.push_back(row);
    if (identities.insert(id).second) {
      rep.eikonal.push_back(eikonal_residual(ck.model, ck.identity(id), ck.neutral_expression(), samples, seed + id));
      const Points truth = part_anchors(ds.identity_params(scan.identity));
      rep.landmark_error.push_back((identity_anchors(ck.model, ck.identity(id)) - truth).rowwise().norm().mean());
    }
  }
  return rep;
}

}  // namespace imhead
