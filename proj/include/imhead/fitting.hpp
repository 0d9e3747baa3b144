#pragma once

// Latent-only fitting of a frozen model to an observed point cloud. Observed
// points are warped backward into canonical space, so every iteration is a
// single forward/backward pass.

#include "imhead/checkpoint.hpp"
#include "imhead/losses.hpp"
#include "imhead/metrics.hpp"
#include "imhead/synthetic_head.hpp"
#include "imhead/training.hpp"

#include <chrono>
#include <set>

namespace imhead {

enum class FitInit { kZero, kMean, kGiven };

inline FitInit fit_init_from_string(std::string_view s) {
  if (s == "zero") return FitInit::kZero;
  if (s == "mean") return FitInit::kMean;
  if (s == "given") return FitInit::kGiven;
  throw std::invalid_argument("unknown fit init '" + std::string(s) + "'");
}

struct FitOptions {
  int iters = 400;
  double lr = 5e-3;
  int decay_at = 200;
  double decay_factor = 0.2;
  FitInit init = FitInit::kMean;
  Eigen::VectorXd init_id;   ///< used with kGiven
  Eigen::VectorXd init_exp;  ///< used with kGiven; empty means neutral
  double prior_weight = 1e-3;
  int points_per_iter = 512;
  bool fit_expression = true;
  NormalNorm normal_norm = NormalNorm::kL2;
  std::optional<Points> landmarks;  ///< K x 3 canonical anchors; off when empty
  double landmark_weight = 1.0;
  int divergence_patience = 50;
  double divergence_factor = 10.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (iters < 0) throw std::invalid_argument("FitOptions: iters must be >= 0");
    if (!(lr > 0)) throw std::invalid_argument("FitOptions: lr must be positive");
    if (points_per_iter < 1) throw std::invalid_argument("FitOptions: points_per_iter must be positive");
    if (prior_weight < 0 || landmark_weight < 0) throw std::invalid_argument("FitOptions: weights must be >= 0");
  }
};

inline json to_json(const FitOptions& o) {
  json j{{"iters", o.iters},
         {"lr", o.lr},
         {"decay_at", o.decay_at},
         {"decay_factor", o.decay_factor},
         {"init", o.init == FitInit::kZero ? "zero" : o.init == FitInit::kMean ? "mean" : "given"},
         {"prior_weight", o.prior_weight},
         {"points_per_iter", o.points_per_iter},
         {"fit_expression", o.fit_expression},
         {"normal_norm", o.normal_norm == NormalNorm::kL2 ? "l2" : "l1"},
         {"landmark_weight", o.landmark_weight},
         {"divergence_patience", o.divergence_patience},
         {"divergence_factor", o.divergence_factor},
         {"seed", o.seed}};
  if (o.init == FitInit::kGiven) {
    j["init_id"] = to_json(o.init_id);
    j["init_exp"] = to_json(o.init_exp);
  }
  return j;
}

/// Missing keys keep the values of `base`; unknown keys are rejected.
inline FitOptions fit_options_from_json(const json& j, FitOptions base = {}) {
  if (!j.is_object()) throw std::invalid_argument("fit config must be a JSON object");
  static const std::set<std::string> known = {"iters", "lr", "decay_at", "decay_factor", "init", "init_id", "init_exp",
                                              "prior_weight", "points_per_iter", "fit_expression", "normal_norm",
                                              "landmark_weight", "divergence_patience", "divergence_factor", "seed"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw std::invalid_argument("unknown fit config key '" + k + "'");
  }
  FitOptions o = std::move(base);
  o.iters = j.value("iters", o.iters);
  o.lr = j.value("lr", o.lr);
  o.decay_at = j.value("decay_at", o.decay_at);
  o.decay_factor = j.value("decay_factor", o.decay_factor);
  if (j.contains("init")) o.init = fit_init_from_string(j.at("init").get<std::string>());
  if (j.contains("init_id")) o.init_id = vector_from_json(j.at("init_id"));
  if (j.contains("init_exp")) o.init_exp = vector_from_json(j.at("init_exp"));
  o.prior_weight = j.value("prior_weight", o.prior_weight);
  o.points_per_iter = j.value("points_per_iter", o.points_per_iter);
  o.fit_expression = j.value("fit_expression", o.fit_expression);
  if (j.contains("normal_norm")) o.normal_norm = normal_norm_from_string(j.at("normal_norm").get<std::string>());
  o.landmark_weight = j.value("landmark_weight", o.landmark_weight);
  o.divergence_patience = j.value("divergence_patience", o.divergence_patience);
  o.divergence_factor = j.value("divergence_factor", o.divergence_factor);
  o.seed = j.value("seed", o.seed);
  o.validate();
  return o;
}

struct FitResult {
  Eigen::VectorXd z_id;
  Eigen::VectorXd z_exp;
  std::vector<double> trace;       ///< loss per iteration (index 0 is the initial loss)
  std::vector<double> best_trace;  ///< running minimum of trace
  double seconds = 0;
  bool converged = true;
  int iterations = 0;            ///< forward/backward passes performed
  long root_finding_calls = 0;   ///< canonical-to-observed inverse solves; none exist in this algorithm
  int best_iteration = 0;

  [[nodiscard]] double initial_loss() const { return trace.empty() ? 0.0 : trace.front(); }
  [[nodiscard]] double best_loss() const { return best_trace.empty() ? 0.0 : best_trace.back(); }
};

inline json to_json(const FitResult& r) {
  return {{"z_id", to_json(r.z_id)},
          {"z_exp", to_json(r.z_exp)},
          {"trace", r.trace},
          {"seconds", r.seconds},
          {"converged", r.converged},
          {"iterations", r.iterations},
          {"root_finding_calls", r.root_finding_calls},
          {"best_iteration", r.best_iteration},
          {"best_loss", r.best_loss()}};
}

inline FitResult fit_result_from_json(const json& j) {
  FitResult r;
  r.z_id = vector_from_json(j.at("z_id"));
  r.z_exp = vector_from_json(j.at("z_exp"));
  r.trace = j.value("trace", std::vector<double>{});
  r.seconds = j.value("seconds", 0.0);
  r.converged = j.value("converged", true);
  r.iterations = j.value("iterations", 0);
  r.root_finding_calls = j.value("root_finding_calls", 0L);
  r.best_iteration = j.value("best_iteration", 0);
  double best = std::numeric_limits<double>::infinity();
  for (double v : r.trace) r.best_trace.push_back(best = std::min(best, v));
  return r;
}

namespace detail {

/// mean(((z - mu) / sigma)^2) with sigma floored.
template <typename S>
ad::Var<S> mahalanobis(ad::Var<S> z, const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma) {
  auto& t = *z.tape;
  const Eigen::VectorXd inv = sigma.cwiseMax(1e-3).cwiseInverse();
  auto d = ad::sub(z, t.constant(ad::Mat<S>(mu.transpose().template cast<S>())));
  auto scaled = ad::scale_cols(d, Eigen::Matrix<S, 1, Eigen::Dynamic>(inv.transpose().template cast<S>()));
  return ad::mean(ad::square(scaled));
}

}  // namespace detail

/// Optimises (z_id, z_exp) against `obs` with the checkpoint frozen.
inline FitResult fit(const PointCloud& obs, const Checkpoint& ckpt, const FitOptions& opt = {}) {
  using S = float;
  opt.validate();
  if (obs.size() < 100) throw std::invalid_argument("fit: observation needs at least 100 points");
  const auto t0 = std::chrono::steady_clock::now();
  ad::DenormalGuard ftz;
  const Model<S>& m = ckpt.model;
  const auto& cfg = m.config();
  const auto& st = ckpt.stats;

  ad::Mat<S> zi(1, cfg.identity_dim()), ze(1, cfg.d_e);
  switch (opt.init) {
    case FitInit::kZero:
      zi.setZero();
      ze.setZero();
      break;
    case FitInit::kMean:
      zi = st.id_mean.transpose().cast<S>();
      ze = st.exp_mean.transpose().cast<S>();
      break;
    case FitInit::kGiven:
      if (opt.init_id.size() != cfg.identity_dim()) throw std::invalid_argument("fit: init_id has wrong dimension");
      if (opt.init_exp.size() != 0 && opt.init_exp.size() != cfg.d_e) {
        throw std::invalid_argument("fit: init_exp has wrong dimension");
      }
      zi = opt.init_id.transpose().cast<S>();
      ze = opt.init_exp.size() ? ad::Mat<S>(opt.init_exp.transpose().cast<S>()) : ad::Mat<S>::Zero(1, cfg.d_e);
      break;
  }
  if (opt.landmarks && opt.landmarks->rows() != m.num_regions()) throw std::invalid_argument("fit: landmarks must be K x 3");

  std::mt19937_64 rng(opt.seed);
  const int n = static_cast<int>(std::min<Eigen::Index>(opt.points_per_iter, obs.size()));
  const std::vector<const PointCloud*> clouds{&obs};
  ad::Mat<S> lm_truth;
  if (opt.landmarks) {
    lm_truth.resize(1, 3 * m.num_regions());
    for (int j = 0; j < m.num_regions(); ++j) lm_truth.block(0, 3 * j, 1, 3) = opt.landmarks->row(j).cast<S>();
  }

  FitResult res;
  AdamSlot<S> sid, sexp;
  ad::Mat<S> best_id = zi, best_exp = ze;
  double best = std::numeric_limits<double>::infinity();
  int over = 0;

  for (int it = 0; it <= opt.iters; ++it) {
    TrainingBatch b = sample_points(clouds, n, 0, 0.0, 0.0, rng);
    ad::Tape<S> t;
    auto p = m.bind(t, false);
    auto vid = t.leaf(zi);
    auto vexp = opt.fit_expression ? t.leaf(ze) : t.constant(ze);
    auto x = ad::jet_points(t, ad::Mat<S>(b.points.cast<S>()));
    auto f = m.forward(p, x, vid, vexp, b.sample);
    std::optional<ad::Mat<S>> normals;
    if (obs.has_normals()) normals = b.normals.cast<S>();
    auto loss = reconstruction_loss(f.sdf, normals, opt.normal_norm);
    if (opt.prior_weight > 0) {
      auto prior = detail::mahalanobis(vid, st.id_mean, st.id_std);
      prior = ad::add(prior, detail::mahalanobis(vexp, st.exp_mean, st.exp_std));
      loss = ad::add(loss, ad::scale(prior, static_cast<S>(opt.prior_weight)));
    }
    if (opt.landmarks) loss = ad::add(loss, ad::scale(keypoint_loss(f.anchors, lm_truth), static_cast<S>(opt.landmark_weight)));

    const double value = static_cast<double>(loss.value()(0, 0));
    res.trace.push_back(value);
    if (std::isfinite(value) && value < best) {
      best = value;
      best_id = zi;
      best_exp = ze;
      res.best_iteration = it;
    }
    res.best_trace.push_back(best);
    if (it == opt.iters) break;

    if (!std::isfinite(value) || value > opt.divergence_factor * res.trace.front()) {
      if (++over >= opt.divergence_patience) {
        res.converged = false;
        break;
      }
    } else {
      over = 0;
    }
    if (!std::isfinite(value)) continue;

    t.backward(loss);
    ++res.iterations;
    const double lr = it < opt.decay_at ? opt.lr : opt.lr * opt.decay_factor;
    if (vid.grad().size()) adam_update<S>(zi, vid.grad(), sid, lr);
    if (opt.fit_expression && vexp.grad().size()) adam_update<S>(ze, vexp.grad(), sexp, lr);
  }
  res.z_id = best_id.transpose().cast<double>();
  res.z_exp = best_exp.transpose().cast<double>();
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// Isotropic Gaussian perturbation. Normals come from `oracle` when given, else are dropped.
inline PointCloud add_noise(const PointCloud& obs, double std, std::uint64_t seed,
                            const SyntheticHeadParams* oracle = nullptr) {
  if (!(std >= 0)) throw std::invalid_argument("add_noise: std must be >= 0");
  if (std == 0) return obs;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, std);
  Points p = obs.points;
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] += g(rng);
  if (!oracle) return PointCloud(std::move(p));
  Points n(p.rows(), 3);
  for (Eigen::Index i = 0; i < p.rows(); ++i) n.row(i) = oracle_gradient(*oracle, p.row(i).transpose()).normalized().transpose();
  return PointCloud(std::move(p), std::move(n));
}

struct NoiseSweepRow {
  double std = 0;
  double chamfer = 0;
  double seconds = 0;
  bool converged = true;
};

/// One fit per noise level; Chamfer of the fitted mesh against `reference`.
inline std::vector<NoiseSweepRow> noise_sweep(const PointCloud& obs, const Checkpoint& ckpt, const std::vector<double>& stds,
                                              const PointCloud& reference, const FitOptions& opt = {},
                                              const SyntheticHeadParams* oracle = nullptr,
                                              int resolution = kDefaultMeshResolution, std::uint64_t seed = 0) {
  if (!std::is_sorted(stds.begin(), stds.end())) throw std::invalid_argument("noise_sweep: stds must be ascending");
  std::vector<NoiseSweepRow> rows;
  for (double s : stds) {
    const PointCloud noisy = add_noise(obs, s, seed, oracle);
    const FitResult r = fit(noisy, ckpt, opt);
    const TriMesh mesh = extract_mesh(ckpt.model, r.z_id, r.z_exp, resolution);
    NoiseSweepRow row{s, std::numeric_limits<double>::infinity(), r.seconds, r.converged};
    if (!mesh.empty()) row.chamfer = chamfer(sample_mesh(mesh, kMetricSamples, seed), reference);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace imhead
