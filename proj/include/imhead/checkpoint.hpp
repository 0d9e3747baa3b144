#pragma once

// Trained state (network, latent tables, statistics) and its on-disk form:
// a directory holding manifest.json and tensors.bin (little-endian float32).

#include "imhead/io.hpp"
#include "imhead/model.hpp"

#include <fcntl.h>
#include <unistd.h>

namespace imhead {

inline constexpr int kCheckpointSchemaVersion = 1;

struct CheckpointError : IoError {
  using IoError::IoError;
};

struct SampleInfo {
  int identity = 0;
  int expression = 0;
  std::string label;
};

/// Component-wise moments of the latent spaces; region slots go through DecNet.
struct LatentStatistics {
  Eigen::VectorXd id_mean, id_std;
  Eigen::VectorXd exp_mean, exp_std;
  Eigen::MatrixXd region_mean, region_std;  ///< K x region_dim
};

struct Checkpoint {
  Model<float> model;
  Eigen::MatrixXd identities;   ///< one row per training identity
  Eigen::MatrixXd expressions;  ///< one row per training scan
  std::vector<std::string> identity_labels;
  std::vector<SampleInfo> samples;
  LatentStatistics stats;
  json train_config = json::object();

  [[nodiscard]] int num_identities() const { return static_cast<int>(identities.rows()); }
  [[nodiscard]] Eigen::VectorXd identity(int i) const {
    if (i < 0 || i >= num_identities()) throw std::out_of_range("identity index " + std::to_string(i));
    return identities.row(i).transpose();
  }
  [[nodiscard]] Eigen::VectorXd expression(int s) const {
    if (s < 0 || s >= expressions.rows()) throw std::out_of_range("sample index " + std::to_string(s));
    return expressions.row(s).transpose();
  }
  [[nodiscard]] Eigen::VectorXd neutral_expression() const { return Eigen::VectorXd::Zero(model.config().d_e); }
};

namespace detail {

inline void moments(const Eigen::MatrixXd& rows, Eigen::VectorXd& mean, Eigen::VectorXd& std) {
  if (rows.rows() == 0) {
    mean = std = Eigen::VectorXd::Zero(rows.cols());
    return;
  }
  mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd c = rows.rowwise() - mean.transpose();
  std = (c.array().square().colwise().sum() / static_cast<double>(rows.rows())).sqrt().transpose();
}

}  // namespace detail

/// Mean and population std of the identity table, the expression table and
/// every region-embedding slot.
template <typename S>
LatentStatistics latent_statistics(const Model<S>& model, const Eigen::MatrixXd& identities, const Eigen::MatrixXd& expressions) {
  LatentStatistics st;
  detail::moments(identities, st.id_mean, st.id_std);
  detail::moments(expressions, st.exp_mean, st.exp_std);
  const int k = model.num_regions();
  const int rd = model.config().region_dim();
  st.region_mean.resize(k, rd);
  st.region_std.resize(k, rd);
  std::vector<Eigen::MatrixXd> per_id;
  for (Eigen::Index i = 0; i < identities.rows(); ++i) {
    per_id.push_back(decompose_identity(model, EditedIdentity(Eigen::VectorXd(identities.row(i).transpose()))));
  }
  for (int j = 0; j < k; ++j) {
    Eigen::MatrixXd slot(identities.rows(), rd);
    for (Eigen::Index i = 0; i < identities.rows(); ++i) slot.row(i) = per_id[static_cast<std::size_t>(i)].row(j);
    Eigen::VectorXd m, s;
    detail::moments(slot, m, s);
    st.region_mean.row(j) = m.transpose();
    st.region_std.row(j) = s.transpose();
  }
  return st;
}

inline LatentStatistics latent_statistics(const Checkpoint& ckpt) {
  return latent_statistics(ckpt.model, ckpt.identities, ckpt.expressions);
}

// ---------------------------------------------------------------------------
// JSON forms of the configuration types

inline json to_json(const ModelConfig& c) {
  return {{"d_g", c.d_g},
          {"d_l", c.d_l},
          {"d_e", c.d_e},
          {"num_regions", c.num_regions},
          {"num_bands", c.num_bands},
          {"sigma", c.sigma},
          {"local_layers", c.local_layers},
          {"local_width", c.local_width},
          {"feature_dim", c.feature_dim},
          {"fusion_layers", c.fusion_layers},
          {"fusion_width", c.fusion_width},
          {"deformer_layers", c.deformer_layers},
          {"deformer_width", c.deformer_width},
          {"deformer_bands", c.deformer_bands},
          {"landmark_width", c.landmark_width},
          {"softplus_beta", c.softplus_beta},
          {"init_radius", c.init_radius},
          {"ablation", to_string(c.ablation)}};
}

/// Missing keys keep the values of `base`; unknown keys are rejected.
inline ModelConfig model_config_from_json(const json& j, ModelConfig base = ModelConfig::desk()) {
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  const json known = to_json(base);
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw std::invalid_argument("unknown model config key '" + k + "'");
  }
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  get("d_g", base.d_g);
  get("d_l", base.d_l);
  get("d_e", base.d_e);
  get("num_regions", base.num_regions);
  get("num_bands", base.num_bands);
  get("sigma", base.sigma);
  get("local_layers", base.local_layers);
  get("local_width", base.local_width);
  get("feature_dim", base.feature_dim);
  get("fusion_layers", base.fusion_layers);
  get("fusion_width", base.fusion_width);
  get("deformer_layers", base.deformer_layers);
  get("deformer_width", base.deformer_width);
  get("deformer_bands", base.deformer_bands);
  get("landmark_width", base.landmark_width);
  get("softplus_beta", base.softplus_beta);
  get("init_radius", base.init_radius);
  if (j.contains("ablation")) base.ablation = ablation_from_string(j.at("ablation").get<std::string>());
  base.validate();
  return base;
}

inline json to_json(const RegionTopology& t) {
  json pairs = json::array();
  for (const auto& p : t.pairs) pairs.push_back({p[0], p[1]});
  return {{"names", t.names}, {"pairs", pairs}, {"midline", t.midline()}};
}

inline RegionTopology topology_from_json(const json& j) {
  RegionTopology t;
  t.names = j.at("names").get<std::vector<std::string>>();
  for (const auto& p : j.at("pairs")) t.pairs.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

struct TensorWriter {
  json index = json::array();
  std::vector<float> blob;

  void add(const std::string& name, const float* data, Eigen::Index rows, Eigen::Index cols) {
    const auto n = static_cast<std::size_t>(rows * cols);
    index.push_back({{"name", name}, {"shape", {rows, cols}}, {"offset", blob.size() * sizeof(float)},
                     {"length", n * sizeof(float)}});
    blob.insert(blob.end(), data, data + n);
  }
  template <typename Derived>
  void add(const std::string& name, const Eigen::MatrixBase<Derived>& m) {
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = m.template cast<float>();
    add(name, f.data(), f.rows(), f.cols());
  }
};

using TensorMap = std::map<std::string, Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// Exclusive lock file held for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw CheckpointError("checkpoint directory is locked by another writer: " + path_.string());
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;
  ~DirectoryLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
  int fd_ = -1;
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  detail::DirectoryLock lock(dir);
  detail::TensorWriter w;
  const auto& ps = ckpt.model.params();
  for (int i = 0; i < ps.size(); ++i) {
    const auto& v = ps.values[static_cast<std::size_t>(i)];
    w.add("param/" + ps.names[static_cast<std::size_t>(i)], v.data(), v.rows(), v.cols());
  }
  w.add("latent/identity", ckpt.identities);
  w.add("latent/expression", ckpt.expressions);
  const auto& st = ckpt.stats;
  w.add("stats/id_mean", st.id_mean.transpose());
  w.add("stats/id_std", st.id_std.transpose());
  w.add("stats/exp_mean", st.exp_mean.transpose());
  w.add("stats/exp_std", st.exp_std.transpose());
  w.add("stats/region_mean", st.region_mean);
  w.add("stats/region_std", st.region_std);

  json samples = json::array();
  for (const auto& s : ckpt.samples) samples.push_back({{"identity", s.identity}, {"expression", s.expression}, {"label", s.label}});
  const json manifest = {{"schema_version", kCheckpointSchemaVersion},
                         {"model_config", to_json(ckpt.model.config())},
                         {"topology", to_json(ckpt.model.topology())},
                         {"identity_labels", ckpt.identity_labels},
                         {"samples", samples},
                         {"train_config", ckpt.train_config},
                         {"blob", "tensors.bin"},
                         {"tensors", w.index}};
  std::string bytes(reinterpret_cast<const char*>(w.blob.data()), w.blob.size() * sizeof(float));
  detail::write_file(dir / "tensors.bin", bytes);
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw CheckpointError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  try {
    const int version = manifest.at("schema_version").get<int>();
    if (version != kCheckpointSchemaVersion) {
      throw CheckpointError("checkpoint schema version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kCheckpointSchemaVersion) + ")");
    }
    const std::string blob = detail::read_file(dir / manifest.at("blob").get<std::string>());
    detail::TensorMap tensors;
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<std::array<Eigen::Index, 2>>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto length = t.at("length").get<std::size_t>();
      if (shape[0] < 0 || shape[1] < 0 || length != static_cast<std::size_t>(shape[0] * shape[1]) * sizeof(float)) {
        throw CheckpointError("tensor '" + name + "' has inconsistent shape and length");
      }
      if (offset > blob.size() || length > blob.size() - offset) {
        throw CheckpointError("tensor '" + name + "' lies outside the blob (truncated tensors.bin?)");
      }
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(shape[0], shape[1]);
      std::memcpy(m.data(), blob.data() + offset, length);
      tensors.emplace(name, std::move(m));
    }
    auto take = [&](const std::string& name) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
      auto m = std::move(it->second);
      tensors.erase(it);
      return m;
    };

    const ModelConfig cfg = model_config_from_json(manifest.at("model_config"), ModelConfig{});
    const RegionTopology topo = topology_from_json(manifest.at("topology"));
    Model<float> layout(cfg, topo, 0);
    ParameterSet<float> ps;
    for (const auto& name : layout.params().names) ps.add(name, take("param/" + name));

    Checkpoint ck;
    ck.model = Model<float>(cfg, topo, std::move(ps));
    ck.identities = take("latent/identity").cast<double>();
    ck.expressions = take("latent/expression").cast<double>();
    if (ck.identities.cols() != cfg.identity_dim() || ck.expressions.cols() != cfg.d_e) {
      throw CheckpointError("latent table widths do not match the model config");
    }
    auto vec = [&](const std::string& n) { return Eigen::VectorXd(take(n).cast<double>().transpose()); };
    ck.stats.id_mean = vec("stats/id_mean");
    ck.stats.id_std = vec("stats/id_std");
    ck.stats.exp_mean = vec("stats/exp_mean");
    ck.stats.exp_std = vec("stats/exp_std");
    ck.stats.region_mean = take("stats/region_mean").cast<double>();
    ck.stats.region_std = take("stats/region_std").cast<double>();
    if (!tensors.empty()) throw CheckpointError("unknown tensor '" + tensors.begin()->first + "' in checkpoint");

    ck.identity_labels = manifest.at("identity_labels").get<std::vector<std::string>>();
    for (const auto& s : manifest.at("samples")) {
      ck.samples.push_back({s.at("identity").get<int>(), s.at("expression").get<int>(), s.at("label").get<std::string>()});
    }
    ck.train_config = manifest.value("train_config", json::object());
    return ck;
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint manifest schema error: " + std::string(e.what()));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError("checkpoint manifest schema error: " + std::string(e.what()));
  }
}

}  // namespace imhead
