#pragma once

// Auto-decoder training: network weights and per-scan latent codes are
// optimised jointly with Adam under a cosine learning-rate schedule.

#include "imhead/checkpoint.hpp"
#include "imhead/dataset.hpp"
#include "imhead/losses.hpp"

#include <chrono>
#include <functional>
#include <numeric>

namespace imhead {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  ModelConfig model = ModelConfig::desk();
  LossWeights weights;
  NormalNorm normal_norm = NormalNorm::kL2;
  int steps = 4000;
  int scans_per_batch = 4;
  int n_surf = 128;
  int n_off = 128;
  double off_half_extent = 1.2;
  double off_sigma = 0.05;
  double lr_network = 5e-4;
  double lr_latent = 1e-3;
  double init_latent_std = 0.01;
  std::uint64_t seed = 0;
  int log_every = 50;
  int eval_every = 250;

  void validate() const {
    model.validate();
    weights.validate();
    if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
    if (scans_per_batch < 1 || n_surf < 1 || n_off < 0) throw std::invalid_argument("TrainConfig: batch sizes");
    if (!(lr_network > 0) || !(lr_latent > 0)) throw std::invalid_argument("TrainConfig: learning rates must be positive");
    if (log_every < 1 || eval_every < 1) throw std::invalid_argument("TrainConfig: log/eval intervals must be positive");
  }
};

inline json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"weights", {{"eik", c.weights.eik}, {"kpt", c.weights.kpt}, {"sym", c.weights.sym}, {"reg", c.weights.reg}, {"def", c.weights.def}}},
          {"normal_norm", c.normal_norm == NormalNorm::kL2 ? "l2" : "l1"},
          {"steps", c.steps},
          {"scans_per_batch", c.scans_per_batch},
          {"n_surf", c.n_surf},
          {"n_off", c.n_off},
          {"off_half_extent", c.off_half_extent},
          {"off_sigma", c.off_sigma},
          {"lr_network", c.lr_network},
          {"lr_latent", c.lr_latent},
          {"init_latent_std", c.init_latent_std},
          {"seed", c.seed},
          {"log_every", c.log_every},
          {"eval_every", c.eval_every}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  const json known = to_json(c);
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw std::invalid_argument("unknown train config key '" + k + "'");
  }
  try {
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      for (const auto& [k, v] : w.items()) {
        if (!known["weights"].contains(k)) throw std::invalid_argument("unknown loss weight '" + k + "'");
      }
      c.weights.eik = w.value("eik", c.weights.eik);
      c.weights.kpt = w.value("kpt", c.weights.kpt);
      c.weights.sym = w.value("sym", c.weights.sym);
      c.weights.reg = w.value("reg", c.weights.reg);
      c.weights.def = w.value("def", c.weights.def);
    }
    if (j.contains("normal_norm")) {
      c.normal_norm = normal_norm_from_string(j.at("normal_norm").get<std::string>());
    }
    c.steps = j.value("steps", c.steps);
    c.scans_per_batch = j.value("scans_per_batch", c.scans_per_batch);
    c.n_surf = j.value("n_surf", c.n_surf);
    c.n_off = j.value("n_off", c.n_off);
    c.off_half_extent = j.value("off_half_extent", c.off_half_extent);
    c.off_sigma = j.value("off_sigma", c.off_sigma);
    c.lr_network = j.value("lr_network", c.lr_network);
    c.lr_latent = j.value("lr_latent", c.lr_latent);
    c.init_latent_std = j.value("init_latent_std", c.init_latent_std);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.eval_every = j.value("eval_every", c.eval_every);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Batches

/// Points of B scans. Rows are [surface of slot 0..B-1; off-surface of slot 0..B-1].
struct TrainingBatch {
  std::vector<int> scans;   ///< dataset scan index per slot
  Points points;            ///< N x 3
  Points normals;           ///< num_surface x 3
  std::vector<int> sample;  ///< slot per point
  Eigen::Index num_surface = 0;
};

/// Surface points with normals, half uniform in the cube and half jittered surface points.
inline TrainingBatch sample_points(const std::vector<const PointCloud*>& clouds, int n_surf, int n_off, double half,
                                   double sigma, std::mt19937_64& rng) {
  const auto b = static_cast<Eigen::Index>(clouds.size());
  TrainingBatch out;
  out.num_surface = b * n_surf;
  out.points.resize(b * (n_surf + n_off), 3);
  out.normals.resize(out.num_surface, 3);
  out.sample.resize(static_cast<std::size_t>(out.points.rows()));
  std::uniform_real_distribution<double> cube(-half, half);
  std::normal_distribution<double> jitter(0.0, sigma);
  for (Eigen::Index s = 0; s < b; ++s) {
    const PointCloud& pc = *clouds[static_cast<std::size_t>(s)];
    if (pc.empty()) throw std::invalid_argument("sample_points: empty point cloud");
    std::uniform_int_distribution<Eigen::Index> pick(0, pc.size() - 1);
    for (int i = 0; i < n_surf; ++i) {
      const Eigen::Index r = s * n_surf + i;
      const Eigen::Index k = pick(rng);
      out.points.row(r) = pc.points.row(k);
      out.normals.row(r) = pc.has_normals() ? Eigen::RowVector3d(pc.normals->row(k)) : Eigen::RowVector3d::Zero();
      out.sample[static_cast<std::size_t>(r)] = static_cast<int>(s);
    }
    for (int i = 0; i < n_off; ++i) {
      const Eigen::Index r = out.num_surface + s * n_off + i;
      if (i < n_off / 2) {
        out.points.row(r) << cube(rng), cube(rng), cube(rng);
      } else {
        out.points.row(r) = pc.points.row(pick(rng));
        out.points.row(r) += Eigen::RowVector3d(jitter(rng), jitter(rng), jitter(rng));
      }
      out.sample[static_cast<std::size_t>(r)] = static_cast<int>(s);
    }
  }
  return out;
}

inline TrainingBatch sample_training_batch(const Dataset& ds, const TrainConfig& cfg, std::mt19937_64& rng) {
  const int n = static_cast<int>(ds.scans.size());
  if (n == 0) throw std::invalid_argument("sample_training_batch: empty dataset");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> scans;
  for (int s = 0; s < cfg.scans_per_batch; ++s) {
    if (s % n == 0) std::shuffle(order.begin(), order.end(), rng);
    scans.push_back(order[static_cast<std::size_t>(s % n)]);
  }
  std::vector<const PointCloud*> clouds;
  for (int s : scans) clouds.push_back(&ds.scans[static_cast<std::size_t>(s)].cloud);
  TrainingBatch b = sample_points(clouds, cfg.n_surf, cfg.n_off, cfg.off_half_extent, cfg.off_sigma, rng);
  b.scans = std::move(scans);
  return b;
}

/// Loss terms of one batch. `anchor_truth` (B x 3K) enables the keypoint term;
/// `with_normals` selects the normal part of the reconstruction term.
template <typename S>
LossTerms<S> batch_terms(const Model<S>& m, const Bound<S>& p, ad::Var<S> z_id, ad::Var<S> z_exp, const TrainingBatch& b,
                         const ad::Mat<S>* anchor_truth, NormalNorm norm, bool with_normals = true,
                         const EmbeddingOverride<S>* ov = nullptr) {
  auto& t = *p.tape;
  auto x = ad::jet_points(t, ad::Mat<S>(b.points.template cast<S>()));
  auto f = m.forward(p, x, z_id, z_exp, b.sample, ov);
  auto surf = ad::rows(f.sdf, 0, b.num_surface);
  LossTerms<S> c;
  std::optional<ad::Mat<S>> normals;
  if (with_normals) normals = b.normals.template cast<S>();
  c.rec = reconstruction_loss(surf, normals, norm);
  c.eik = eikonal_loss(f.sdf);
  c.kpt = anchor_truth ? keypoint_loss(f.anchors, *anchor_truth) : t.constant(ad::Mat<S>::Zero(1, 1));
  c.sym = symmetry_loss(f.embeddings, m.topology(), m.config().region_dim());
  c.reg = latent_reg(z_id, z_exp, f.ambient);
  c.def = deformation_reg(f.delta);
  return c;
}

// ---------------------------------------------------------------------------
// Adam

template <typename S>
struct AdamSlot {
  ad::Mat<S> m, v;
  long step = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
void adam_update(Eigen::Ref<ad::Mat<S>> value, const ad::Mat<S>& g, AdamSlot<S>& s, double lr, const AdamHyper& h = {}) {
  if (s.m.size() == 0) {
    s.m = ad::Mat<S>::Zero(g.rows(), g.cols());
    s.v = ad::Mat<S>::Zero(g.rows(), g.cols());
  }
  ++s.step;
  s.m = static_cast<S>(h.beta1) * s.m + static_cast<S>(1 - h.beta1) * g;
  s.v = static_cast<S>(h.beta2) * s.v + static_cast<S>(1 - h.beta2) * g.cwiseProduct(g);
  const double c1 = 1 - std::pow(h.beta1, static_cast<double>(s.step));
  const double c2 = 1 - std::pow(h.beta2, static_cast<double>(s.step));
  const S a = static_cast<S>(lr * std::sqrt(c2) / c1);
  value -= (a * s.m.array() / (s.v.array().sqrt() + static_cast<S>(h.eps))).matrix();
}

inline double cosine_lr(double base, int step, int total) {
  if (total <= 0) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(step, total) / static_cast<double>(total)));
}

// ---------------------------------------------------------------------------
// Trainer

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<json> log;  ///< one record per logged step
  LossReport final_train;
  LossReport final_eval;
  double seconds = 0;
};

namespace detail {

inline void check_training_set(const Dataset& ds) {
  const int n = ds.num_identities();
  if (n == 0) throw std::invalid_argument("training set is empty");
  std::vector<int> neutral(static_cast<std::size_t>(n), 0);
  for (const auto& s : ds.scans) {
    if (s.identity < 0) throw std::invalid_argument("scan " + s.name + " has a negative identity index");
    if (s.expression == 0) ++neutral[static_cast<std::size_t>(s.identity)];
  }
  for (int i = 0; i < n; ++i) {
    if (neutral[static_cast<std::size_t>(i)] == 0) {
      throw std::invalid_argument("identity " + std::to_string(i) + " has no neutral scan");
    }
  }
}

inline json report_json(const LossReport& r) {
  return {{"total", r.total}, {"rec", r.rec}, {"eik", r.eik}, {"kpt", r.kpt}, {"sym", r.sym}, {"reg", r.reg}, {"def", r.def}};
}

}  // namespace detail

class Trainer {
 public:
  using S = float;
  using Logger = std::function<void(const json&)>;

  Trainer(const Dataset& ds, TrainConfig cfg) : ds_(ds), cfg_(std::move(cfg)), rng_(cfg_.seed) {
    cfg_.validate();
    detail::check_training_set(ds_);
    if (cfg_.model.num_regions != kNumHeadParts) {
      throw std::invalid_argument("synthetic training data has " + std::to_string(kNumHeadParts) + " regions");
    }
    const int nid = ds_.num_identities();
    Points mean = Points::Zero(kNumHeadParts, 3);
    truth_.resize(ds_.scans.size());
    for (int i = 0; i < nid; ++i) mean += part_anchors(ds_.identity_params(i)) / nid;
    for (std::size_t s = 0; s < ds_.scans.size(); ++s) {
      truth_[s] = part_anchors(ds_.identity_params(ds_.scans[s].identity));
    }
    model_ = Model<S>(cfg_.model, RegionTopology::synthetic(), cfg_.seed, mean);

    std::normal_distribution<double> g(0.0, cfg_.init_latent_std);
    ids_ = ad::Mat<S>::NullaryExpr(nid, cfg_.model.identity_dim(), [&] { return static_cast<S>(g(rng_)); });
    exps_ = ad::Mat<S>::Zero(static_cast<Eigen::Index>(ds_.scans.size()), cfg_.model.d_e);
    for (std::size_t s = 0; s < ds_.scans.size(); ++s) {
      if (ds_.scans[s].expression == 0) continue;
      for (Eigen::Index c = 0; c < exps_.cols(); ++c) exps_(static_cast<Eigen::Index>(s), c) = static_cast<S>(g(rng_));
    }
    net_slots_.resize(static_cast<std::size_t>(model_.params().size()));
    id_slots_.resize(static_cast<std::size_t>(nid));
    exp_slots_.resize(ds_.scans.size());

    std::mt19937_64 eval_rng(cfg_.seed ^ 0x9E3779B97F4A7C15ULL);
    eval_batch_ = sample_training_batch(ds_, cfg_, eval_rng);
  }

  /// One optimisation step; returns the batch losses before the update.
  LossReport step() {
    ad::DenormalGuard ftz;
    const TrainingBatch b = sample_training_batch(ds_, cfg_, rng_);
    ad::Tape<S> t;
    auto p = model_.bind(t, true);
    auto lat = bind_latents(t, b, true);
    auto [total, report] = total_loss(terms(p, lat, b), cfg_.weights);
    if (!std::isfinite(report.total)) {
      throw TrainingError("loss became non-finite at step " + std::to_string(step_));
    }
    t.backward(total);

    const double lr_net = cosine_lr(cfg_.lr_network, step_, cfg_.steps);
    const double lr_lat = cosine_lr(cfg_.lr_latent, step_, cfg_.steps);
    auto& ps = model_.params();
    for (int i = 0; i < ps.size(); ++i) {
      const auto& g = p[i].grad();
      if (g.size() == 0) continue;
      adam_update<S>(ps.values[static_cast<std::size_t>(i)], g, net_slots_[static_cast<std::size_t>(i)], lr_net);
    }
    const auto& gid = lat.id_leaf.grad();
    for (std::size_t u = 0; u < lat.id_rows.size() && gid.size() > 0; ++u) {
      const int r = lat.id_rows[u];
      adam_update<S>(ids_.row(r), ad::Mat<S>(gid.row(static_cast<Eigen::Index>(u))), id_slots_[static_cast<std::size_t>(r)], lr_lat);
    }
    const auto& gex = lat.exp_leaf.grad();
    for (std::size_t u = 0; u < lat.exp_rows.size() && gex.size() > 0; ++u) {
      const int r = lat.exp_rows[u];
      adam_update<S>(exps_.row(r), ad::Mat<S>(gex.row(static_cast<Eigen::Index>(u))), exp_slots_[static_cast<std::size_t>(r)], lr_lat);
    }
    ++step_;
    return report;
  }

  /// Losses on the fixed evaluation batch with the current parameters.
  [[nodiscard]] LossReport evaluate() const {
    ad::DenormalGuard ftz;
    ad::Tape<S> t;
    auto p = model_.bind(t, false);
    auto lat = bind_latents(t, eval_batch_, false);
    return total_loss(terms(p, lat, eval_batch_), cfg_.weights).second;
  }

  /// Runs the remaining steps. Records go to `log` (JSON lines) and `on_record`.
  TrainResult run(std::ostream* log = nullptr, const Logger& on_record = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res;
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    while (step_ < cfg_.steps) {
      const LossReport r = step();
      res.final_train = r;
      const bool do_log = step_ % cfg_.log_every == 0 || step_ == cfg_.steps;
      const bool do_eval = step_ % cfg_.eval_every == 0 || step_ == cfg_.steps;
      if (!do_log && !do_eval) continue;
      json rec = {{"step", step_},
                  {"lr_network", cosine_lr(cfg_.lr_network, step_ - 1, cfg_.steps)},
                  {"lr_latent", cosine_lr(cfg_.lr_latent, step_ - 1, cfg_.steps)},
                  {"train", detail::report_json(r)},
                  {"seconds", elapsed()}};
      if (do_eval) {
        res.final_eval = evaluate();
        rec["eval"] = detail::report_json(res.final_eval);
      }
      if (log) *log << rec.dump() << '\n' << std::flush;
      if (on_record) on_record(rec);
      res.log.push_back(std::move(rec));
    }
    if (cfg_.steps == 0) res.final_eval = evaluate();
    res.seconds = elapsed();
    res.checkpoint = checkpoint();
    return res;
  }

  [[nodiscard]] Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.model = model_;
    ck.identities = ids_.cast<double>();
    ck.expressions = exps_.cast<double>();
    for (int i = 0; i < ds_.num_identities(); ++i) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "id%03d", i);
      ck.identity_labels.emplace_back(buf);
    }
    for (const auto& s : ds_.scans) ck.samples.push_back({s.identity, s.expression, s.name});
    ck.stats = latent_statistics(ck);
    ck.train_config = to_json(cfg_);
    return ck;
  }

  [[nodiscard]] int steps_done() const { return step_; }
  [[nodiscard]] const Model<S>& model() const { return model_; }
  [[nodiscard]] const ad::Mat<S>& identity_table() const { return ids_; }
  [[nodiscard]] const ad::Mat<S>& expression_table() const { return exps_; }

 private:
  struct Latents {
    ad::Var<S> id_leaf, exp_leaf, z_id, z_exp;
    std::vector<int> id_rows, exp_rows;  ///< table row of each leaf row (exp leaf has a trailing zero row)
    ad::Mat<S> truth;
  };

  Latents bind_latents(ad::Tape<S>& t, const TrainingBatch& b, bool trainable) const {
    Latents l;
    const auto bsz = static_cast<Eigen::Index>(b.scans.size());
    std::vector<int> id_slot, exp_slot;
    auto slot_of = [](std::vector<int>& rows, int r) {
      auto it = std::find(rows.begin(), rows.end(), r);
      if (it != rows.end()) return static_cast<int>(it - rows.begin());
      rows.push_back(r);
      return static_cast<int>(rows.size() - 1);
    };
    for (int s : b.scans) {
      const auto& rec = ds_.scans[static_cast<std::size_t>(s)];
      id_slot.push_back(slot_of(l.id_rows, rec.identity));
      exp_slot.push_back(rec.expression == 0 ? -1 : slot_of(l.exp_rows, s));
    }
    const int zero_row = static_cast<int>(l.exp_rows.size());
    for (auto& e : exp_slot)
      if (e < 0) e = zero_row;
    ad::Mat<S> idm(static_cast<Eigen::Index>(l.id_rows.size()), ids_.cols());
    for (std::size_t u = 0; u < l.id_rows.size(); ++u) idm.row(static_cast<Eigen::Index>(u)) = ids_.row(l.id_rows[u]);
    ad::Mat<S> exm = ad::Mat<S>::Zero(zero_row + 1, exps_.cols());
    for (std::size_t u = 0; u < l.exp_rows.size(); ++u) exm.row(static_cast<Eigen::Index>(u)) = exps_.row(l.exp_rows[u]);
    l.id_leaf = trainable ? t.leaf(idm) : t.constant(idm);
    l.exp_leaf = trainable ? t.leaf(exm) : t.constant(exm);
    l.z_id = ad::gather_rows(l.id_leaf, id_slot);
    l.z_exp = ad::gather_rows(l.exp_leaf, exp_slot);
    l.truth.resize(bsz, 3 * kNumHeadParts);
    for (Eigen::Index s = 0; s < bsz; ++s) {
      const Points& a = truth_[static_cast<std::size_t>(b.scans[static_cast<std::size_t>(s)])];
      for (int j = 0; j < kNumHeadParts; ++j) l.truth.block(s, 3 * j, 1, 3) = a.row(j).template cast<S>();
    }
    return l;
  }

  LossTerms<S> terms(const Bound<S>& p, const Latents& l, const TrainingBatch& b) const {
    return batch_terms(model_, p, l.z_id, l.z_exp, b, &l.truth, cfg_.normal_norm);
  }

  const Dataset& ds_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  Model<S> model_;
  ad::Mat<S> ids_, exps_;
  std::vector<Points> truth_;
  std::vector<AdamSlot<S>> net_slots_, id_slots_, exp_slots_;
  TrainingBatch eval_batch_;
  int step_ = 0;
};

/// Convenience wrapper: trains from scratch and returns the result.
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg, std::ostream* log = nullptr,
                         const Trainer::Logger& on_record = {}) {
  Trainer t(ds, cfg);
  return t.run(log, on_record);
}

}  // namespace imhead
