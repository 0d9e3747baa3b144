// Acceptance suite. Prints one PASS/FAIL line per criterion (INFO for the
// informational ones) and exits non-zero if any criterion fails.
//
// The desk-scale training run and the ablation runs are cached under the
// directory given by --cache; a cache entry is reused only when its recorded
// configuration matches exactly.

#include "imhead/editing.hpp"
#include "imhead/eval.hpp"
#include "imhead/fitting.hpp"
#include "imhead/training.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <iostream>

using namespace imhead;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  std::string name;
  bool pass = false;
  bool informational = false;
};

std::vector<Outcome> g_outcomes;

void report(const std::string& name, bool pass, const std::string& detail, double seconds, bool informational = false) {
  const char* tag = informational ? "INFO" : pass ? "PASS" : "FAIL";
  std::cout << '[' << tag << "] " << name << ": " << detail << " (" << std::fixed << std::setprecision(1) << seconds << " s)"
            << std::defaultfloat << std::endl;
  g_outcomes.push_back({name, pass, informational});
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

Points uniform_points(Eigen::Index n, std::uint64_t seed, double half) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-half, half);
  Points p(n, 3);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  return p;
}

/// Curve check: every step is non-decreasing except at most `max_inversions`
/// drops, each no larger than `tol` relative to the preceding value.
bool trend_ok(const std::vector<double>& v, int max_inversions, double tol, std::string* detail) {
  int inversions = 0;
  bool ok = true;
  std::ostringstream o;
  for (std::size_t i = 0; i < v.size(); ++i) {
    o << (i ? ", " : "[") << fmt(v[i]);
    if (i == 0 || !(v[i] < v[i - 1])) continue;
    ++inversions;
    if ((v[i - 1] - v[i]) > tol * v[i - 1]) ok = false;
  }
  o << "], inversions " << inversions;
  *detail = o.str();
  return ok && inversions <= max_inversions && std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Cached training

struct TrainedModel {
  Checkpoint ck;
  double seconds = 0;
  int steps = 0;
  bool from_cache = false;
};

TrainedModel train_cached(const Dataset& ds, const TrainConfig& cfg, const json& data_key, const fs::path& dir) {
  const json key = {{"data", data_key}, {"train", to_json(cfg)}};
  const fs::path meta = dir / "acceptance_meta.json";
  if (fs::exists(meta)) {
    try {
      const json m = read_json(meta);
      if (m.at("key") == key) {
        return {load_checkpoint(dir), m.at("seconds").get<double>(), m.at("steps").get<int>(), true};
      }
    } catch (const std::exception& e) {
      std::cerr << "ignoring cache at " << dir << ": " << e.what() << '\n';
    }
  }
  std::cerr << "training " << dir.filename() << " for " << cfg.steps << " steps\n";
  fs::remove_all(dir);
  const TrainResult r = train(ds, cfg);
  save_checkpoint(r.checkpoint, dir);
  write_json(meta, {{"key", key}, {"seconds", r.seconds}, {"steps", cfg.steps}});
  return {r.checkpoint, r.seconds, cfg.steps, false};
}

// ---------------------------------------------------------------------------
// Criteria that need no training

void fusion_algebra() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1), s(0.05, 0.5);
  double worst_sum = 0;
  bool in_range = true;
  for (int trial = 0; trial < 100000; ++trial) {
    Points k(kNumHeadParts, 3);
    for (Eigen::Index i = 0; i < k.size(); ++i) k.data()[i] = u(rng);
    const Vec3 x(u(rng), u(rng), u(rng));
    const Eigen::VectorXd w = fusion_weights(x, k, s(rng));
    worst_sum = std::max(worst_sum, std::abs(w.sum() - 1.0));
    in_range = in_range && (w.array() > 0).all() && (w.array() < 1).all();
  }
  Points two(2, 3);
  two << 0, 0, 0, 0.1, 0, 0;
  const Eigen::VectorXd w2 = fusion_weights(Vec3::Zero(), two, 0.1);
  const double closed = std::max(std::abs(w2(0) - 0.7311), std::abs(w2(1) - 0.2689));
  const double secs = since(t0);
  // 0.7311/0.2689 are four-digit roundings of e/(1+e), 1/(1+e); compare the exact form at 1e-6.
  const double e = std::exp(1.0);
  const double exact = std::max(std::abs(w2(0) - e / (1 + e)), std::abs(w2(1) - 1 / (1 + e)));
  const bool pass = worst_sum < 1e-6 && in_range && exact < 1e-6 && closed < 5e-5 && secs < 10;
  report("fusion algebra", pass,
         "max |sum-1| " + fmt(worst_sum) + ", all in (0,1) " + (in_range ? "yes" : "no") + ", two-anchor error " + fmt(exact) +
             " (vs 0.7311/0.2689: " + fmt(closed) + ")",
         secs);
}

double gradient_error(const Model<float>& mf, const Eigen::VectorXd& z, const Eigen::VectorXd& ze, std::uint64_t seed) {
  const Model<double> m(mf.config(), mf.topology(), mf.params().cast<double>());
  const Points x = uniform_points(100, seed, 1.0);
  Points grad;
  evaluate_sdf(m, x, z, ze, &grad);
  const double h = 1e-5;
  double worst = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Vec3 fd;
    for (int c = 0; c < 3; ++c) {
      Vec3 a = x.row(i).transpose(), b = a;
      a(c) += h;
      b(c) -= h;
      fd(c) = (evaluate_sdf(m, a, z, ze) - evaluate_sdf(m, b, z, ze)) / (2 * h);
    }
    worst = std::max(worst, (grad.row(i).transpose() - fd).norm() / std::max(fd.norm(), 1e-8));
  }
  return worst;
}

void gradient_integrity(const Checkpoint& trained) {
  const auto t0 = Clock::now();
  Model<float> fresh(ModelConfig::desk(), RegionTopology::synthetic(), 3);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0, 0.1);
  const Eigen::VectorXd z0 = Eigen::VectorXd::NullaryExpr(fresh.config().identity_dim(), [&] { return g(rng); });
  const Eigen::VectorXd e0 = Eigen::VectorXd::NullaryExpr(fresh.config().d_e, [&] { return g(rng); });
  const double untrained = gradient_error(fresh, z0, e0, 4);
  const double after = gradient_error(trained.model, trained.identity(1), trained.expression(5), 5);
  const double secs = since(t0);
  report("gradient integrity", untrained < 1e-3 && after < 1e-3 && secs < 30,
         "max relative error untrained " + fmt(untrained) + ", trained " + fmt(after), secs);
}

void loss_suite() {
  using M = ad::Mat<double>;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  auto rnd = [&](Eigen::Index r, Eigen::Index c) { return M(M::NullaryExpr(r, c, [&] { return g(rng); })); };
  auto scalar = [](ad::Var<double> v) { return v.value()(0, 0); };
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    ad::Tape<double> t;
    const Eigen::Index n = 64;
    const M v = rnd(n, 1), grad = rnd(n, 3);
    M nrm = rnd(n, 3);
    nrm.rowwise().normalize();
    M jet(4 * n, 1);
    jet.topRows(n) = v;
    for (int k = 0; k < 3; ++k) jet.middleRows((k + 1) * n, n) = grad.col(k);
    auto f = t.constant(jet, true);
    double eik = 0, rec2 = 0, rec1 = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      eik += std::pow(grad.row(i).norm() - 1.0, 2);
      rec2 += std::abs(v(i)) + (grad.row(i) - nrm.row(i)).norm();
      rec1 += std::abs(v(i)) + (grad.row(i) - nrm.row(i)).cwiseAbs().sum();
    }
    worst = std::max(worst, std::abs(scalar(eikonal_loss(f)) - eik / n));
    worst = std::max(worst, std::abs(scalar(reconstruction_loss(f, std::optional<M>(nrm))) - rec2 / n));
    worst = std::max(worst, std::abs(scalar(reconstruction_loss(f, std::optional<M>(nrm), NormalNorm::kL1)) - rec1 / n));

    const M a = rnd(3, 3 * kNumHeadParts), truth = rnd(3, 3 * kNumHeadParts);
    double kpt = 0;
    for (int b = 0; b < 3; ++b)
      for (int j = 0; j < kNumHeadParts; ++j) kpt += (a.block(b, 3 * j, 1, 3) - truth.block(b, 3 * j, 1, 3)).norm();
    worst = std::max(worst, std::abs(scalar(keypoint_loss(t.constant(a), truth)) - kpt / (3.0 * kNumHeadParts)));

    const auto topo = RegionTopology::synthetic();
    const int rd = 5;
    const M e = rnd(2, kNumHeadParts * rd);
    double sym = 0;
    for (int b = 0; b < 2; ++b)
      for (const auto& p : topo.pairs) sym += (e.block(b, p[0] * rd, 1, rd) - e.block(b, p[1] * rd, 1, rd)).squaredNorm();
    sym /= 2.0 * static_cast<double>(topo.pairs.size());
    worst = std::max(worst, std::abs(scalar(symmetry_loss(t.constant(e), topo, rd)) - sym));

    const M zi = rnd(4, 16), ze = rnd(4, 5), amb = rnd(30, 2), d = rnd(30, 3);
    const double lat = (zi.rowwise().squaredNorm() + ze.rowwise().squaredNorm()).mean() + amb.rowwise().squaredNorm().mean();
    worst = std::max(worst, std::abs(scalar(latent_reg(t.constant(zi), t.constant(ze), t.constant(amb))) - lat));
    worst = std::max(worst, std::abs(scalar(deformation_reg(t.constant(d))) - d.rowwise().squaredNorm().mean()));
  }
  ad::Tape<double> t;
  const M x = rnd(500, 3);
  auto xv = ad::jet_points(t, x);
  const double sphere = scalar(eikonal_loss(ad::add_scalar(detail::sqrt_safe(ad::row_sum(ad::square(xv))), -0.5)));
  const double plane = scalar(eikonal_loss(ad::scale(ad::cols(xv, 0, 1), 2.0)));
  const bool pass = worst < 1e-6 && sphere < 1e-20 && plane == 1.0;
  report("loss suite", pass,
         "max brute-force deviation " + fmt(worst) + ", sphere Eikonal " + fmt(sphere, 17) + ", 2*x1 Eikonal " + fmt(plane, 17),
         since(t0));
}

void swap_algebra(const Checkpoint& ck) {
  const auto t0 = Clock::now();
  const auto& m = ck.model;
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  const int k = m.num_regions();
  int restore_ok = 0, commute_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto draw = [&] {
      return Eigen::VectorXd(ck.stats.id_mean + ck.stats.id_std.cwiseProduct(Eigen::VectorXd::NullaryExpr(ck.stats.id_mean.size(), [&] { return g(rng); })));
    };
    const EditedIdentity a = draw(), b = draw(), c = draw();
    std::vector<int> perm(static_cast<std::size_t>(k));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto n1 = static_cast<std::size_t>(1 + rng() % 6), n2 = static_cast<std::size_t>(1 + rng() % 6);
    const std::vector<int> r1(perm.begin(), perm.begin() + static_cast<long>(n1));
    const std::vector<int> r2(perm.begin() + static_cast<long>(n1), perm.begin() + static_cast<long>(n1 + n2));
    restore_ok += decompose_identity(m, swap_regions(m, swap_regions(m, a, b, r1), a, r1)) == decompose_identity(m, a);
    commute_ok += decompose_identity(m, swap_regions(m, swap_regions(m, a, b, r1), c, r2)) ==
                  decompose_identity(m, swap_regions(m, swap_regions(m, a, c, r2), b, r1));
  }
  report("swap algebra", restore_ok == 100 && commute_ok == 100,
         "restoration exact " + std::to_string(restore_ok) + "/100, disjoint commutativity exact " + std::to_string(commute_ok) +
             "/100",
         since(t0));
}

void mirror_construction(const Checkpoint& ck) {
  const auto t0 = Clock::now();
  const auto& m = ck.model;
  const auto& topo = m.topology();
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0, 0.5);
  const Eigen::MatrixXd e = Eigen::MatrixXd::NullaryExpr(topo.size(), m.config().region_dim(), [&] { return g(rng); });
  const Points k = identity_anchors(m, ck.identity(0));
  const Points x = uniform_points(10000, 13, 1.0);
  long checked = 0, exact = 0;
  for (const auto& p : topo.pairs) {
    Eigen::MatrixXd e2 = e;
    e2.row(p[0]) = e.row(p[1]);
    Points k2 = k;
    k2.row(p[0]) = mirror_point(k.row(p[1]).transpose()).transpose();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Vec3 xi = x.row(i).transpose();
      const auto right = local_part_features(m, xi, e, k);
      const auto left = local_part_features(m, mirror_point(xi), e2, k2);
      ++checked;
      exact += right.row(p[1]) == left.row(p[0]);
    }
  }
  report("mirror construction", exact == checked,
         std::to_string(exact) + "/" + std::to_string(checked) + " probe-pair features bitwise equal over " +
             std::to_string(x.rows()) + " probes",
         since(t0));
}

// ---------------------------------------------------------------------------
// Criteria on the trained model

void training_quality(const TrainedModel& tm, const Dataset& ds) {
  const auto t0 = Clock::now();
  const ReconstructionReport rep = reconstruction_report(tm.ck, ds, kDefaultMeshResolution, kMetricSamples, 0);
  const double cd = rep.mean_chamfer(), eik = rep.mean_eikonal(), lm = rep.mean_landmark_error();
  const bool pass = cd < 0.02 && eik < 0.05 && lm < 0.05 && tm.steps <= 20000 && tm.seconds <= 7200;
  report("desk training", pass,
         "mean Chamfer " + fmt(cd) + ", Eikonal residual " + fmt(eik) + ", landmark error " + fmt(lm) + "; " +
             std::to_string(tm.steps) + " steps in " + fmt(tm.seconds / 60, 3) + " min" + (tm.from_cache ? " (cached)" : ""),
         since(t0));
}

struct FitMeasure {
  double chamfer = 0;
  double seconds = 0;
  long root_calls = 0;
};

FitMeasure fit_and_measure(const Checkpoint& ck, const PointCloud& obs, const SyntheticHeadParams& truth, std::uint64_t seed) {
  FitOptions o;
  o.seed = seed;
  const FitResult r = fit(obs, ck, o);
  const TriMesh mesh = extract_mesh(ck.model, r.z_id, r.z_exp);
  FitMeasure out{std::numeric_limits<double>::infinity(), r.seconds, r.root_finding_calls};
  if (!mesh.empty()) out.chamfer = chamfer(sample_mesh(mesh, kMetricSamples, seed), sample_surface(truth, kMetricSamples, seed));
  return out;
}

void fitting_generalization(const Checkpoint& ck, const Dataset& held) {
  const auto t0 = Clock::now();
  std::vector<double> neutral, expr;
  double slowest = 0;
  long roots = 0;
  std::uint64_t seed = 100;
  for (const auto& s : held.scans) {
    const FitMeasure f = fit_and_measure(ck, s.cloud, s.params, seed++);
    (s.expression == 0 ? neutral : expr).push_back(f.chamfer);
    slowest = std::max(slowest, f.seconds);
    roots += f.root_calls;
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  const double mn = mean(neutral), me = mean(expr);
  const bool pass = mn < 0.03 && me < 0.04 && slowest < 60 && roots == 0;
  report("fitting generalization", pass,
         std::to_string(held.num_identities()) + " held-out identities: neutral Chamfer " + fmt(mn) + " (worst " +
             fmt(*std::max_element(neutral.begin(), neutral.end())) + "), expressions " + fmt(me) + " (worst " +
             fmt(*std::max_element(expr.begin(), expr.end())) + "), slowest fit " + fmt(slowest, 3) + " s, root-finding calls " +
             std::to_string(roots),
         since(t0));
}

void edit_locality(const Checkpoint& ck) {
  const auto t0 = Clock::now();
  const auto& m = ck.model;
  const auto& topo = m.topology();
  const int nose = topo.index_of("nose");
  const Eigen::VectorXd neutral = ck.neutral_expression();

  std::ostringstream detail;
  bool pass = true;
  double worst_ratio = 0;
  for (int id = 0; id < 3; ++id) {
    const TriMesh before = extract_mesh(m, ck.identity(id), neutral);
    const EditedIdentity e = sample_region(ck.identity(id), {nose}, ck.stats, topo, 1.0, 40 + static_cast<std::uint64_t>(id));
    const TriMesh after = extract_mesh(m, e, neutral);
    if (before.empty() || after.empty()) {
      pass = false;
      detail << "empty mesh for identity " << id << "; ";
      continue;
    }
    const Vec3 center = identity_anchors(m, ck.identity(id)).row(nose).transpose();
    const LocalityReport r = locality_report(before, displacement_map(before, after), center, 0.35);
    worst_ratio = std::max(worst_ratio, r.ratio());
    pass = pass && r.peak_inside > 0 && r.ratio() < 0.2;
  }
  detail << "nose sample p95-outside/peak-inside worst " << fmt(worst_ratio) << " over 3 identities";

  // Empty override.
  const Points probes = uniform_points(10000, 21, 1.0);
  const EditedIdentity empty = sample_region(ck.identity(0), {}, ck.stats, topo, 1.0, 1);
  const double empty_change =
      (evaluate_sdf(m, probes, empty, neutral) - evaluate_sdf(m, probes, ck.identity(0), neutral)).cwiseAbs().maxCoeff();
  pass = pass && empty_change < 1e-7;
  detail << "; empty edit max SDF change " << fmt(empty_change);

  // Full swap: vertex sets of the two meshes.
  std::vector<int> all(static_cast<std::size_t>(topo.size()));
  std::iota(all.begin(), all.end(), 0);
  const TriMesh swapped = extract_mesh(m, swap_regions(m, ck.identity(0), ck.identity(1), all), neutral);
  const TriMesh source = extract_mesh(m, ck.identity(1), neutral);
  const double swap_cd = chamfer(PointCloud(swapped.vertices), PointCloud(source.vertices));
  pass = pass && swap_cd < 1e-3;
  detail << "; full swap Chamfer " << fmt(swap_cd);
  report("edit locality", pass, detail.str(), since(t0));

  // Decay of the SDF change with distance to the edited anchor.
  const auto t1 = Clock::now();
  const EditedIdentity e = sample_region(ck.identity(0), {nose}, ck.stats, topo, 1.0, 40);
  const Eigen::VectorXd change =
      (evaluate_sdf(m, probes, e, neutral) - evaluate_sdf(m, probes, ck.identity(0), neutral)).cwiseAbs();
  const Vec3 center = identity_anchors(m, ck.identity(0)).row(nose).transpose();
  std::vector<double> bin_sum(12, 0.0), bin_n(12, 0.0);
  for (Eigen::Index i = 0; i < probes.rows(); ++i) {
    const auto b = static_cast<std::size_t>((probes.row(i).transpose() - center).norm() / 0.1);
    if (b < bin_sum.size()) {
      bin_sum[b] += change(i);
      bin_n[b] += 1;
    }
  }
  std::vector<double> dist, mean_change;
  for (std::size_t b = 0; b < bin_sum.size(); ++b) {
    if (bin_n[b] < 20) continue;
    dist.push_back(0.1 * (static_cast<double>(b) + 0.5));
    mean_change.push_back(bin_sum[b] / bin_n[b]);
  }
  const double rho = -rank_correlation(Eigen::Map<Eigen::VectorXd>(dist.data(), static_cast<Eigen::Index>(dist.size())),
                                       Eigen::Map<Eigen::VectorXd>(mean_change.data(), static_cast<Eigen::Index>(mean_change.size())));
  report("edit locality decay", rho >= 0.8,
         "rank correlation of SDF change against anchor distance (negated) " + fmt(rho) + " over " + std::to_string(dist.size()) +
             " distance bins",
         since(t1));

  const auto t2 = Clock::now();
  const TriMesh m0 = extract_mesh(m, ck.identity(0), neutral);
  const TriMesh mh = extract_mesh(m, interpolate(ck.identity(0), ck.identity(1), 0.5), neutral);
  const TriMesh m1 = extract_mesh(m, ck.identity(1), neutral);
  const PointCloud p0 = sample_mesh(m0, kMetricSamples, 1);
  const double half = chamfer(sample_mesh(mh, kMetricSamples, 2), p0);
  const double full = chamfer(sample_mesh(m1, kMetricSamples, 3), p0);
  report("interpolation smoothness", half < full, "Chamfer(t=0.5, t=0) " + fmt(half) + " vs Chamfer(t=1, t=0) " + fmt(full), since(t2));
}

/// References are 200 neutral heads of the synthetic family that training never saw.
void specificity_trend(const Checkpoint& ck) {
  const auto t0 = Clock::now();
  std::vector<PointCloud> refs;
  for (std::uint64_t i = 0; i < 200; ++i) refs.push_back(sample_surface(make_synthetic_identity(5000003 + i), 20000, 9));
  const std::vector<double> stds{0.5, 1.0, 1.5, 2.0, 2.5, 3.0};
  const auto rows = specificity(ck, refs, 10, stds, 77, 64);
  std::vector<double> err;
  for (const auto& r : rows) err.push_back(r.error);
  std::string detail;
  const bool pass = trend_ok(err, 1, 0.05, &detail);
  report("specificity trend", pass, "error over std {0.5..3} against 200 reference heads: " + detail, since(t0));
}

void correspondence(const Checkpoint& ck, const Dataset& ds) {
  const auto t0 = Clock::now();
  const auto& m = ck.model;
  const int mouth = m.topology().index_of("mouth");
  std::vector<std::size_t> picks;
  for (std::size_t s = 0; s < ds.scans.size() && picks.size() < 4; ++s) {
    if (ds.scans[s].params.expression.jaw_open >= 0.2) picks.push_back(s);
  }
  if (picks.empty()) {
    report("correspondence preservation", false, "no training scan with jaw opening >= 0.2 rad", since(t0));
    return;
  }
  double worst = 1.0;
  std::ostringstream detail;
  for (std::size_t s : picks) {
    const auto& scan = ds.scans[s];
    const Eigen::VectorXd z = ck.identity(scan.identity);
    const TriMesh src = extract_mesh(m, z, ck.neutral_expression());
    const ColoredMesh colored{src, position_colors(src.vertices)};
    const auto res = transfer_correspondence(colored, m, z, {ck.expression(static_cast<int>(s))});
    const TransferResult& r = res.front();
    const Points canon = warp_to_canonical(m, r.mesh.mesh.vertices, z, ck.expression(static_cast<int>(s)));
    const Points anchors = identity_anchors(m, z);
    long kept = 0, counted = 0;
    for (Eigen::Index v = 0; v < canon.rows(); ++v) {
      Eigen::Index nearest = 0;
      (anchors.rowwise() - canon.row(v)).rowwise().squaredNorm().minCoeff(&nearest);
      if (nearest == mouth) continue;
      ++counted;
      kept += r.nn_distance(v) < 0.05;
    }
    const double frac = counted ? static_cast<double>(kept) / static_cast<double>(counted) : 0.0;
    worst = std::min(worst, frac);
    detail << scan.name << " (jaw " << fmt(scan.params.expression.jaw_open, 3) << " rad) " << fmt(100 * frac, 4) << "%; ";
  }
  detail << "worst " << fmt(100 * worst, 4) << "% of non-mouth vertices within 0.05";
  report("correspondence preservation", worst >= 0.9, detail.str(), since(t0));
}

void noise_robustness(const Checkpoint& ck, const Dataset& held) {
  const auto t0 = Clock::now();
  const std::vector<double> stds{0.0, 0.01, 0.02, 0.05};
  std::vector<double> curve(stds.size(), 0.0);
  int n = 0;
  for (const auto& s : held.scans) {
    if (s.expression != 0) continue;
    const PointCloud reference = sample_surface(s.params, kMetricSamples, 5);
    FitOptions o;
    o.seed = 200 + static_cast<std::uint64_t>(n);
    const auto rows = noise_sweep(s.cloud, ck, stds, reference, o, &s.params, kDefaultMeshResolution, o.seed);
    for (std::size_t i = 0; i < rows.size(); ++i) curve[i] += rows[i].chamfer;
    ++n;
  }
  for (double& c : curve) c /= n;
  std::string detail;
  const bool pass = trend_ok(curve, static_cast<int>(stds.size()), 0.05, &detail);
  report("noise robustness", pass, "mean Chamfer over " + std::to_string(n) + " held-out identities at std {0, .01, .02, .05}: " + detail,
         since(t0));
}

void ablation_ordering(const Dataset& ds, const json& data_key, const fs::path& cache, int steps) {
  const auto t0 = Clock::now();
  std::ostringstream detail;
  std::map<Ablation, double> cd;
  for (Ablation a : {Ablation::kNone, Ablation::kLocalLatentOnly, Ablation::kNoFusionNet, Ablation::kNoLocalCanonical}) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.model.ablation = a;
    cfg.log_every = steps;
    cfg.eval_every = steps;
    const std::string name = to_string(a);
    const TrainedModel tm = train_cached(ds, cfg, data_key, cache / ("ablation_" + name));
    cd[a] = reconstruction_report(tm.ck, ds, 64, 4000, 0).mean_chamfer();
    detail << name << " " << fmt(cd[a]) << "; ";
  }
  const bool ordered = cd[Ablation::kNone] <= cd[Ablation::kLocalLatentOnly] && cd[Ablation::kNone] <= cd[Ablation::kNoFusionNet] &&
                       cd[Ablation::kNone] <= cd[Ablation::kNoLocalCanonical];
  detail << "default best: " << (ordered ? "yes" : "no") << " (" << steps << " steps each)";
  report("ablation ordering", ordered, detail.str(), since(t0), true);
}

void persistence(const Checkpoint& ck, const fs::path& cache) {
  const auto t0 = Clock::now();
  const fs::path dir = cache / "roundtrip";
  fs::remove_all(dir);
  save_checkpoint(ck, dir);
  const Checkpoint back = load_checkpoint(dir);
  const Points probes = uniform_points(100, 31, 1.0);
  const double diff = (evaluate_sdf(ck.model, probes, ck.identity(2), ck.expression(7)) -
                       evaluate_sdf(back.model, probes, back.identity(2), back.expression(7)))
                          .cwiseAbs()
                          .maxCoeff();
  fs::remove_all(dir);

  const Points pts = uniform_points(1000, 32, 1.0);
  const Points queries = uniform_points(1000, 33, 1.3);
  const KdTree tree(pts);
  int equal = 0;
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    const Vec3 x = queries.row(q).transpose();
    const auto a = tree.nearest(x);
    const auto b = brute_force_nearest(pts, x);
    equal += a.index == b.index && a.distance == b.distance;
  }
  report("persistence", diff < 1e-7 && equal == 1000,
         "round-trip max SDF difference " + fmt(diff) + " at 100 probes; index equals brute force on " + std::to_string(equal) +
             "/1000 queries",
         since(t0));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"imhead acceptance suite"};
  fs::path cache = "acceptance_cache";
  int steps = 8000;
  int ablation_steps = 1500;
  bool skip_ablation = false;
  app.add_option("--cache", cache, "Directory for cached training runs")->capture_default_str();
  app.add_option("--steps", steps, "Desk training steps")->capture_default_str();
  app.add_option("--ablation-steps", ablation_steps, "Training steps per ablation variant")->capture_default_str();
  app.add_flag("--skip-ablation", skip_ablation, "Skip the informational ablation runs");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(cache);

  const auto t0 = Clock::now();
  fusion_algebra();
  loss_suite();

  const Dataset ds = make_synthetic_dataset(1, 16, 4, 8000);
  const Dataset held = make_synthetic_dataset(1001, 4, 4, 8000);
  const json data_key = {{"seed", 1}, {"ids", 16}, {"exprs", 4}, {"points", 8000}};
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.log_every = 250;
  cfg.eval_every = 1000;
  const TrainedModel tm = train_cached(ds, cfg, data_key, cache / "desk");
  const Checkpoint& ck = tm.ck;

  training_quality(tm, ds);
  gradient_integrity(ck);
  fitting_generalization(ck, held);
  edit_locality(ck);
  swap_algebra(ck);
  mirror_construction(ck);
  specificity_trend(ck);
  correspondence(ck, ds);
  noise_robustness(ck, held);
  if (!skip_ablation) ablation_ordering(ds, data_key, cache, ablation_steps);
  persistence(ck, cache);

  int failed = 0;
  for (const auto& o : g_outcomes) failed += !o.pass && !o.informational;
  std::cout << "acceptance: " << g_outcomes.size() - static_cast<std::size_t>(failed) << '/' << g_outcomes.size()
            << " lines without failure, " << failed << " failed, total " << fmt(since(t0) / 60, 3) << " min" << std::endl;
  return failed == 0 ? 0 : 1;
}
