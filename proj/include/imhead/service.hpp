#pragma once

// HTTP/JSON editing service over a frozen checkpoint. EditService holds the
// state and can be driven directly; mount_routes exposes it over httplib.

#include "imhead/workbench.hpp"

#include "httplib.h"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <shared_mutex>
#include <thread>

namespace imhead {

struct ApiError : std::runtime_error {
  int status;
  std::string code;
  ApiError(int s, std::string c, const std::string& msg) : std::runtime_error(msg), status(s), code(std::move(c)) {}
};

inline ApiError not_found(const std::string& what) { return {404, "not_found", what}; }
inline ApiError unprocessable(const std::string& what) { return {422, "invalid", what}; }
inline ApiError conflict(const std::string& what) { return {409, "conflict", what}; }

enum class JobKind { kFit, kMesh, kEditMesh };
enum class JobState { kQueued, kRunning, kDone, kFailed };

inline const char* to_string(JobKind k) {
  switch (k) {
    case JobKind::kFit: return "fit";
    case JobKind::kMesh: return "mesh";
    case JobKind::kEditMesh: return "edit-mesh";
  }
  return "?";
}

inline const char* to_string(JobState s) {
  switch (s) {
    case JobState::kQueued: return "queued";
    case JobState::kRunning: return "running";
    case JobState::kDone: return "done";
    case JobState::kFailed: return "failed";
  }
  return "?";
}

struct Job {
  std::string id;
  JobKind kind = JobKind::kMesh;
  JobState state = JobState::kQueued;
  json result = nullptr;  ///< for mesh jobs {"mesh_id": ...}
  std::string error;
};

inline json to_json(const Job& j) {
  json out{{"id", j.id}, {"kind", to_string(j.kind)}, {"state", to_string(j.state)}, {"result", j.result}};
  out["error"] = j.error.empty() ? json(nullptr) : json(j.error);
  return out;
}

struct StoredMesh {
  TriMesh mesh;  ///< scalars hold the displacement from the edit baseline, if any
  json summary;
};

struct ServiceOptions {
  int workers = 2;
  std::size_t max_queued = 64;
  int max_resolution = 256;
  int min_resolution = 8;
  std::string cors_origin = "*";
};

class EditService {
 public:
  explicit EditService(Checkpoint ck, ServiceOptions opt = {}) : ck_(std::move(ck)), opt_(std::move(opt)) {
    if (opt_.workers < 1) throw std::invalid_argument("service needs at least one worker");
    hash_ = ck_.model.params().hash();
    for (int i = 0; i < opt_.workers; ++i) pool_.emplace_back([this] { work(); });
  }
  EditService(const EditService&) = delete;
  EditService& operator=(const EditService&) = delete;
  ~EditService() {
    {
      std::lock_guard lk(queue_mu_);
      stopping_ = true;
    }
    queue_cv_.notify_all();
    for (auto& t : pool_) t.join();
  }

  [[nodiscard]] const Checkpoint& checkpoint() const { return ck_; }
  [[nodiscard]] std::uint64_t checkpoint_hash() const { return ck_.model.params().hash(); }
  [[nodiscard]] bool checkpoint_intact() const { return checkpoint_hash() == hash_; }
  [[nodiscard]] const ServiceOptions& options() const { return opt_; }

  // -- read-only tables ------------------------------------------------------

  [[nodiscard]] json regions() const {
    const auto& topo = ck_.model.topology();
    const Points anchors = identity_anchors(ck_.model, EditedIdentity(ck_.stats.id_mean));
    json rs = json::array();
    for (int j = 0; j < topo.size(); ++j) {
      rs.push_back({{"index", j},
                    {"name", topo.names[static_cast<std::size_t>(j)]},
                    {"anchor", {anchors(j, 0), anchors(j, 1), anchors(j, 2)}},
                    {"partner", topo.partner(j) >= 0 ? json(topo.partner(j)) : json(nullptr)}});
    }
    json pairs = json::array();
    for (const auto& p : topo.pairs) pairs.push_back({p[0], p[1]});
    return {{"regions", rs}, {"symmetry_pairs", pairs}};
  }

  [[nodiscard]] json identities() const {
    json ids = json::array();
    for (int i = 0; i < ck_.num_identities(); ++i) {
      const auto& labels = ck_.identity_labels;
      ids.push_back({{"id", i}, {"label", i < static_cast<int>(labels.size()) ? labels[static_cast<std::size_t>(i)] : ""}});
    }
    json samples = json::array();
    for (std::size_t s = 0; s < ck_.samples.size(); ++s) {
      const auto& si = ck_.samples[s];
      samples.push_back({{"sample", s}, {"identity", si.identity}, {"expression", si.expression}, {"label", si.label}});
    }
    return {{"identities", ids},
            {"samples", samples},
            {"identity_dim", ck_.model.config().identity_dim()},
            {"expression_dim", ck_.model.config().d_e}};
  }

  [[nodiscard]] json latent_stats() const {
    const auto& st = ck_.stats;
    auto rows = [](const Eigen::MatrixXd& m) {
      json a = json::array();
      for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(to_json(Eigen::VectorXd(m.row(r).transpose())));
      return a;
    };
    return {{"id_mean", to_json(st.id_mean)},
            {"id_std", to_json(st.id_std)},
            {"exp_mean", to_json(st.exp_mean)},
            {"exp_std", to_json(st.exp_std)},
            {"region_mean", rows(st.region_mean)},
            {"region_std", rows(st.region_std)}};
  }

  // -- edits -----------------------------------------------------------------

  /// {base, ops: [{region, mode, source_id?, scale?, seed?}]} -> {"id", "version", "edit"}.
  json create_edit(const json& body) {
    if (!body.is_object()) throw unprocessable("edit body must be a JSON object");
    const int base = identity_arg(body, body.contains("base") ? "base" : "base_id");
    EditDocument doc = apply_ops(edit_base(ck_, base), body.value("ops", json::array()));
    auto rec = std::make_shared<EditRecord>();
    rec->doc = std::move(doc);
    std::unique_lock lk(edits_mu_);
    const std::string id = "e" + std::to_string(++edit_counter_);
    edits_[id] = rec;
    lk.unlock();
    std::lock_guard w(rec->write);
    return edit_json(id, *rec);
  }

  /// Appends ops. `version`, when given, must match the stored one.
  json update_edit(const std::string& id, const json& body) {
    if (!body.is_object()) throw unprocessable("edit body must be a JSON object");
    auto rec = find_edit(id);
    std::unique_lock w(rec->write, std::try_to_lock);
    if (!w.owns_lock()) throw conflict("edit " + id + " is being written by another request");
    if (body.contains("version") && body.at("version").get<int>() != rec->version) {
      throw conflict("edit " + id + " is at version " + std::to_string(rec->version));
    }
    rec->doc = apply_ops(rec->doc, body.value("ops", json::array()));
    ++rec->version;
    return edit_json(id, *rec);
  }

  [[nodiscard]] json get_edit(const std::string& id) const {
    auto rec = find_edit(id);
    std::lock_guard w(rec->write);
    return edit_json(id, *rec);
  }

  // -- jobs ------------------------------------------------------------------

  /// Queues a fit of a PLY payload; `options` uses the fit config keys.
  std::string submit_fit(const std::string& ply, const json& options = json::object()) {
    PointCloud obs;
    try {
      obs = decode_ply(ply);
    } catch (const std::exception& e) {
      throw unprocessable(std::string("scan is not a readable PLY: ") + e.what());
    }
    FitOptions fo;
    try {
      fo = fit_options_from_json(options);
    } catch (const std::exception& e) {
      throw unprocessable(e.what());
    }
    return enqueue(JobKind::kFit, [this, obs = std::move(obs), fo] {
      const FitResult r = fit(obs, ck_, fo);
      json out = to_json(r);
      out["config"] = to_json(fo);
      return out;
    });
  }

  /// {identity | edit | z_id, expression? | sample?, resolution?}.
  std::string submit_mesh(const json& body) {
    if (!body.is_object()) throw unprocessable("mesh body must be a JSON object");
    const int res = body.value("resolution", kDefaultMeshResolution);
    if (res < opt_.min_resolution || res > opt_.max_resolution) {
      throw unprocessable("resolution must lie in [" + std::to_string(opt_.min_resolution) + ", " +
                          std::to_string(opt_.max_resolution) + "]");
    }
    MeshSource src;
    JobKind kind = JobKind::kMesh;
    if (body.contains("edit")) {
      auto rec = find_edit(body.at("edit").get<std::string>());
      std::lock_guard w(rec->write);
      src.identity = rec->doc.identity;
      src.base_id = rec->doc.base_id;
      src.edited = true;
      src.description = {{"edit", body.at("edit")}};
      kind = JobKind::kEditMesh;
    } else if (body.contains("identity")) {
      const int id = identity_arg(body, "identity");
      src.identity = ck_.identity(id);
      src.description = {{"identity", id}};
    } else if (body.contains("z_id")) {
      src.identity = latent_arg(body.at("z_id"), ck_.model.config().identity_dim(), "z_id");
      src.description = {{"latent", true}};
    } else {
      throw unprocessable("mesh body needs 'identity', 'edit' or 'z_id'");
    }
    if (body.contains("expression")) {
      src.z_exp = latent_arg(body.at("expression"), ck_.model.config().d_e, "expression");
    } else if (body.contains("sample")) {
      const int s = body.at("sample").get<int>();
      if (s < 0 || s >= static_cast<int>(ck_.expressions.rows())) throw not_found("unknown sample " + std::to_string(s));
      src.z_exp = ck_.expression(s);
    } else {
      src.z_exp = ck_.neutral_expression();
    }
    return enqueue(kind, [this, src = std::move(src), res] {
      auto stored = std::make_shared<StoredMesh>();
      stored->mesh = run_mesh(ck_, src, res);
      stored->summary = mesh_summary(stored->mesh, src, res);
      std::lock_guard lk(meshes_mu_);
      const std::string mid = "m" + std::to_string(++mesh_counter_);
      meshes_[mid] = stored;
      json out = stored->summary;
      out["mesh_id"] = mid;
      return out;
    });
  }

  [[nodiscard]] Job job(const std::string& id) const {
    std::lock_guard lk(jobs_mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw not_found("unknown job " + id);
    return it->second;
  }

  /// Blocks until the job leaves queued/running or the timeout passes.
  Job wait(const std::string& id, std::chrono::milliseconds timeout = std::chrono::minutes(10)) const {
    std::unique_lock lk(jobs_mu_);
    if (!jobs_.count(id)) throw not_found("unknown job " + id);
    jobs_cv_.wait_for(lk, timeout, [&] {
      const auto s = jobs_.at(id).state;
      return s == JobState::kDone || s == JobState::kFailed;
    });
    return jobs_.at(id);
  }

  [[nodiscard]] std::shared_ptr<const StoredMesh> mesh(const std::string& id) const {
    std::lock_guard lk(meshes_mu_);
    auto it = meshes_.find(id);
    if (it == meshes_.end()) throw not_found("unknown mesh " + id);
    return it->second;
  }

 private:
  struct EditRecord {
    EditDocument doc;
    int version = 1;
    mutable std::mutex write;
  };

  int identity_arg(const json& body, const char* key) const {
    if (!body.contains(key) || !body.at(key).is_number_integer()) throw unprocessable(std::string("'") + key + "' must be an integer");
    const int id = body.at(key).get<int>();
    if (id < 0 || id >= ck_.num_identities()) throw not_found("unknown identity " + std::to_string(id));
    return id;
  }

  static Eigen::VectorXd latent_arg(const json& v, int dim, const std::string& what) {
    Eigen::VectorXd z;
    try {
      z = vector_from_json(v);
    } catch (const std::exception&) {
      throw unprocessable("'" + what + "' must be an array of numbers");
    }
    if (z.size() != dim) {
      throw unprocessable("'" + what + "' has " + std::to_string(z.size()) + " entries, expected " + std::to_string(dim));
    }
    if (!z.allFinite()) throw unprocessable("'" + what + "' must be finite");
    return z;
  }

  EditDocument apply_ops(EditDocument doc, const json& ops) const {
    if (!ops.is_array()) throw unprocessable("'ops' must be an array");
    for (const auto& op : ops) {
      if (!op.is_object() || !op.contains("region") || !op.contains("mode")) {
        throw unprocessable("each op needs 'region' and 'mode'");
      }
      const std::vector<std::string> regions = op.at("region").is_array() ? op.at("region").get<std::vector<std::string>>()
                                                                          : std::vector<std::string>{op.at("region").get<std::string>()};
      const std::string mode = op.at("mode").get<std::string>();
      try {
        if (mode == "sample") {
          doc = run_edit_sample(ck_, std::move(doc), regions, op.value("scale", 1.0), op.value("seed", std::uint64_t{0}),
                                op.value("symmetric", true));
        } else if (mode == "swap") {
          const int src = identity_arg(op, "source_id");
          doc = run_edit_swap(ck_, std::move(doc), src, regions);
        } else if (mode == "reset") {
          doc = run_edit_reset(ck_, std::move(doc), regions);
        } else {
          throw unprocessable("unknown edit mode '" + mode + "'");
        }
      } catch (const std::invalid_argument& e) {
        throw unprocessable(e.what());
      }
    }
    return doc;
  }

  std::shared_ptr<EditRecord> find_edit(const std::string& id) const {
    std::shared_lock lk(edits_mu_);
    auto it = edits_.find(id);
    if (it == edits_.end()) throw not_found("unknown edit " + id);
    return it->second;
  }

  static json edit_json(const std::string& id, const EditRecord& r) {
    return {{"id", id}, {"version", r.version}, {"edit", to_json(r.doc)}};
  }

  std::string enqueue(JobKind kind, std::function<json()> fn) {
    std::string id;
    {
      std::lock_guard q(queue_mu_);
      if (queue_.size() >= opt_.max_queued) throw ApiError(503, "busy", "job queue is full");
      std::lock_guard lk(jobs_mu_);
      id = "j" + std::to_string(++job_counter_);
      jobs_[id] = Job{id, kind};
      queue_.emplace_back(id, std::move(fn));
    }
    queue_cv_.notify_one();
    return id;
  }

  void set_state(const std::string& id, JobState s, json result = nullptr, std::string error = {}) {
    {
      std::lock_guard lk(jobs_mu_);
      Job& j = jobs_.at(id);
      j.state = s;
      if (!result.is_null()) j.result = std::move(result);
      j.error = std::move(error);
    }
    jobs_cv_.notify_all();
  }

  void work() {
    for (;;) {
      std::pair<std::string, std::function<json()>> task;
      {
        std::unique_lock lk(queue_mu_);
        queue_cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
        if (queue_.empty()) return;
        task = std::move(queue_.front());
        queue_.pop_front();
      }
      set_state(task.first, JobState::kRunning);
      try {
        set_state(task.first, JobState::kDone, task.second());
      } catch (const std::exception& e) {
        set_state(task.first, JobState::kFailed, nullptr, e.what());
      }
    }
  }

  const Checkpoint ck_;
  const ServiceOptions opt_;
  std::uint64_t hash_ = 0;

  mutable std::shared_mutex edits_mu_;
  std::map<std::string, std::shared_ptr<EditRecord>> edits_;
  long edit_counter_ = 0;

  mutable std::mutex jobs_mu_;
  mutable std::condition_variable jobs_cv_;
  std::map<std::string, Job> jobs_;
  long job_counter_ = 0;

  mutable std::mutex meshes_mu_;
  std::map<std::string, std::shared_ptr<const StoredMesh>> meshes_;
  long mesh_counter_ = 0;

  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<std::pair<std::string, std::function<json()>>> queue_;
  bool stopping_ = false;
  std::vector<std::thread> pool_;
};

// ---------------------------------------------------------------------------
// HTTP

namespace detail {

inline void send_json(httplib::Response& res, const json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& code, const std::string& msg) {
  send_json(res, {{"code", code}, {"message", msg}}, status);
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const ApiError& e) {
    send_error(res, e.status, e.code, e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, "bad_request", e.what());
  } catch (const std::out_of_range& e) {
    send_error(res, 404, "not_found", e.what());
  } catch (const std::invalid_argument& e) {
    send_error(res, 422, "invalid", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal", e.what());
  }
}

inline json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw ApiError(400, "bad_request", std::string("body is not valid JSON: ") + e.what());
  }
}

}  // namespace detail

/// Registers the /api routes and CORS handling on `srv`.
inline void mount_routes(httplib::Server& srv, EditService& svc) {
  using httplib::Request;
  using httplib::Response;
  using detail::guarded;
  using detail::send_json;

  srv.set_default_headers({{"Access-Control-Allow-Origin", svc.options().cors_origin},
                           {"Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Options(R"(/api/.*)", [](const Request&, Response& res) { res.status = 204; });

  srv.Get("/api/regions", [&](const Request&, Response& res) { guarded(res, [&] { send_json(res, svc.regions()); }); });
  srv.Get("/api/identities", [&](const Request&, Response& res) { guarded(res, [&] { send_json(res, svc.identities()); }); });
  srv.Get("/api/latent-stats", [&](const Request&, Response& res) { guarded(res, [&] { send_json(res, svc.latent_stats()); }); });

  srv.Post("/api/edits", [&](const Request& req, Response& res) {
    guarded(res, [&] { send_json(res, svc.create_edit(detail::parse_body(req)), 201); });
  });
  srv.Get(R"(/api/edits/([^/]+))", [&](const Request& req, Response& res) {
    guarded(res, [&] { send_json(res, svc.get_edit(req.matches[1])); });
  });
  srv.Put(R"(/api/edits/([^/]+))", [&](const Request& req, Response& res) {
    guarded(res, [&] { send_json(res, svc.update_edit(req.matches[1], detail::parse_body(req))); });
  });

  srv.Post("/api/fit", [&](const Request& req, Response& res) {
    guarded(res, [&] {
      std::string ply;
      json options = json::object();
      if (req.is_multipart_form_data()) {
        if (!req.has_file("scan")) throw unprocessable("multipart body needs a 'scan' part");
        ply = req.get_file_value("scan").content;
        if (req.has_file("options")) options = json::parse(req.get_file_value("options").content);
      } else {
        ply = req.body;
      }
      send_json(res, {{"job_id", svc.submit_fit(ply, options)}}, 202);
    });
  });
  srv.Post("/api/mesh", [&](const Request& req, Response& res) {
    guarded(res, [&] { send_json(res, {{"job_id", svc.submit_mesh(detail::parse_body(req))}}, 202); });
  });
  srv.Get(R"(/api/jobs/([^/]+))", [&](const Request& req, Response& res) {
    guarded(res, [&] { send_json(res, to_json(svc.job(req.matches[1]))); });
  });

  srv.Get(R"(/api/meshes/([^/]+))", [&](const Request& req, Response& res) {
    guarded(res, [&] {
      const auto m = svc.mesh(req.matches[1]);
      if (m->mesh.scalars) res.set_header("Link", "</api/meshes/" + std::string(req.matches[1]) + "/displacement>; rel=\"displacement\"");
      res.set_content(encode_obj(m->mesh), "text/plain");
    });
  });
  srv.Get(R"(/api/meshes/([^/]+)/displacement)", [&](const Request& req, Response& res) {
    guarded(res, [&] {
      const auto m = svc.mesh(req.matches[1]);
      if (!m->mesh.scalars) throw not_found("mesh " + std::string(req.matches[1]) + " has no edit baseline");
      send_json(res, {{"displacement", scalars_to_json(*m->mesh.scalars)}, {"summary", m->summary}});
    });
  });

  srv.set_error_handler([](const Request&, Response& res) {
    if (res.body.empty()) detail::send_error(res, res.status, res.status == 404 ? "not_found" : "error", "no such route");
  });
}

/// Serves until the process is stopped. Returns false if the port cannot be bound.
inline bool serve(const Checkpoint& ck, const std::string& host, int port, ServiceOptions opt = {}) {
  EditService svc(ck, std::move(opt));
  httplib::Server srv;
  srv.new_task_queue = [n = svc.options().workers + 2] { return new httplib::ThreadPool(static_cast<std::size_t>(n)); };
  mount_routes(srv, svc);
  return srv.listen(host, port);
}

}  // namespace imhead
