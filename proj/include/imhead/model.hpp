#pragma once

// The imHead network M(x, z_id, z_exp).
//
//   x_obs --Deformer(z_id, z_exp)--> x_can = x_obs + dx, ambient w
//   z_id  --DecNet--> region embeddings e_j --LandmarkNet--> anchors k_j
//   f_j   = LocalPart_net(j)(gamma(x' - k'_j), e_j)      (x', k' mirrored for right regions)
//   f_hat = sum_j softmax_j(-|x_can - k_j| / sigma) f_j
//   y     = Fusion(gamma(x_can), w, f_hat)
//
// Everything is expressed as tape ops over jets, so spatial gradients are
// available for the loss and remain differentiable with respect to
// parameters and latents.

#include "imhead/autodiff.hpp"
#include "imhead/geometry.hpp"
#include "imhead/synthetic_head.hpp"

#include <cstdint>
#include <cstring>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace imhead {

enum class Ablation { kNone, kLocalLatentOnly, kLocalPlusGlobal, kNoFusionNet, kNoLocalCanonical };

inline constexpr std::array<std::pair<Ablation, std::string_view>, 5> kAblationNames{{
    {Ablation::kNone, "none"},
    {Ablation::kLocalLatentOnly, "local_latent_only"},
    {Ablation::kLocalPlusGlobal, "local_plus_global"},
    {Ablation::kNoFusionNet, "no_fusion_net"},
    {Ablation::kNoLocalCanonical, "no_local_canonical"},
}};

inline std::string to_string(Ablation a) {
  for (const auto& [k, v] : kAblationNames)
    if (k == a) return std::string(v);
  return "none";
}

inline Ablation ablation_from_string(std::string_view s) {
  for (const auto& [k, v] : kAblationNames)
    if (v == s) return k;
  throw std::invalid_argument("unknown ablation '" + std::string(s) + "'");
}

struct ModelConfig {
  int d_g = 256;
  int d_l = 32;
  int d_e = 16;
  int num_regions = 39;
  int num_bands = 7;
  double sigma = 0.1;
  int local_layers = 4;
  int local_width = 200;
  int feature_dim = 200;
  int fusion_layers = 4;
  int fusion_width = 200;
  int deformer_layers = 8;
  int deformer_width = 128;
  int deformer_bands = 7;
  int landmark_width = 256;
  double softplus_beta = 100.0;
  double init_radius = 0.5;
  Ablation ablation = Ablation::kNone;

  static constexpr int kAmbientDim = 2;

  /// Reduced widths that train on a single CPU core in well under an hour.
  static ModelConfig desk() {
    ModelConfig c;
    c.num_regions = kNumHeadParts;
    c.num_bands = 4;
    c.local_width = 48;
    c.feature_dim = 32;
    c.fusion_width = 96;
    c.deformer_width = 64;
    c.deformer_bands = 3;
    c.landmark_width = 128;
    return c;
  }

  /// Per-identity latent length.
  [[nodiscard]] int identity_dim() const {
    switch (ablation) {
      case Ablation::kLocalLatentOnly: return num_regions * local_only_dim();
      case Ablation::kLocalPlusGlobal: return num_regions * d_l + d_g;
      default: return d_g;
    }
  }
  /// Per-region embedding length fed to the local nets and LandmarkNet.
  [[nodiscard]] int region_dim() const { return ablation == Ablation::kLocalLatentOnly ? local_only_dim() : d_l; }
  [[nodiscard]] int local_only_dim() const { return std::max(1, d_g / num_regions); }
  [[nodiscard]] int local_output_dim() const { return ablation == Ablation::kNoFusionNet ? 1 : feature_dim; }

  void validate() const {
    auto pos = [](int v, const char* what) {
      if (v <= 0) throw std::invalid_argument(std::string("ModelConfig: ") + what + " must be positive");
    };
    pos(d_g, "d_g");
    pos(d_l, "d_l");
    pos(d_e, "d_e");
    pos(num_regions, "num_regions");
    pos(local_width, "local_width");
    pos(feature_dim, "feature_dim");
    pos(fusion_width, "fusion_width");
    pos(deformer_width, "deformer_width");
    pos(landmark_width, "landmark_width");
    if (local_layers < 2 || fusion_layers < 2 || deformer_layers < 2) {
      throw std::invalid_argument("ModelConfig: networks need at least 2 layers");
    }
    if (num_bands < 0 || deformer_bands < 0) throw std::invalid_argument("ModelConfig: negative band count");
    if (!(sigma > 0)) throw std::invalid_argument("ModelConfig: sigma must be positive");
    if (!(softplus_beta > 0)) throw std::invalid_argument("ModelConfig: softplus_beta must be positive");
  }
};

/// Region names, left/right pairing and the shared-network assignment.
struct RegionTopology {
  std::vector<std::string> names;
  std::vector<std::array<int, 2>> pairs;  ///< (left, right)

  [[nodiscard]] int size() const { return static_cast<int>(names.size()); }

  [[nodiscard]] int partner(int j) const {
    for (const auto& p : pairs) {
      if (p[0] == j) return p[1];
      if (p[1] == j) return p[0];
    }
    return -1;
  }
  [[nodiscard]] bool is_right(int j) const {
    return std::any_of(pairs.begin(), pairs.end(), [j](const auto& p) { return p[1] == j; });
  }
  [[nodiscard]] std::vector<int> midline() const {
    std::vector<int> out;
    for (int j = 0; j < size(); ++j)
      if (partner(j) < 0) out.push_back(j);
    return out;
  }
  /// Index of the local-part network that serves region j; right regions reuse their left partner's.
  [[nodiscard]] int network_of(int j) const {
    const int owner = is_right(j) ? partner(j) : j;
    int net = 0;
    for (int i = 0; i < owner; ++i)
      if (!is_right(i)) ++net;
    return net;
  }
  [[nodiscard]] int num_networks() const { return size() - static_cast<int>(pairs.size()); }
  [[nodiscard]] int index_of(std::string_view name) const {
    for (int j = 0; j < size(); ++j)
      if (names[static_cast<std::size_t>(j)] == name) return j;
    return -1;
  }

  void validate() const {
    std::vector<int> seen(names.size(), 0);
    for (const auto& p : pairs) {
      for (int j : p) {
        if (j < 0 || j >= size()) throw std::invalid_argument("RegionTopology: pair index out of range");
        if (seen[static_cast<std::size_t>(j)]++) throw std::invalid_argument("RegionTopology: region in two pairs");
      }
      if (p[0] == p[1]) throw std::invalid_argument("RegionTopology: region paired with itself");
    }
  }

  /// One region per synthetic head part.
  static RegionTopology synthetic() {
    RegionTopology t;
    for (auto n : kHeadPartNames) t.names.emplace_back(n);
    for (const auto& p : kHeadPartPairs) t.pairs.push_back({static_cast<int>(p[0]), static_cast<int>(p[1])});
    return t;
  }

  /// K regions named region_j; the first `num_pairs` pairs are (2p, 2p+1).
  static RegionTopology generic(int k, int num_pairs) {
    if (k <= 0 || num_pairs < 0 || 2 * num_pairs > k) throw std::invalid_argument("RegionTopology::generic");
    RegionTopology t;
    for (int j = 0; j < k; ++j) t.names.push_back("region_" + std::to_string(j));
    for (int p = 0; p < num_pairs; ++p) t.pairs.push_back({2 * p, 2 * p + 1});
    return t;
  }
};

/// Identity latent plus per-region embedding overrides applied after DecNet.
struct EditedIdentity {
  Eigen::VectorXd base;
  std::map<int, Eigen::VectorXd> overrides;

  EditedIdentity() = default;
  EditedIdentity(Eigen::VectorXd z) : base(std::move(z)) {}  // NOLINT: implicit by design
};

struct WarpResult {
  Vec3 delta = Vec3::Zero();
  Eigen::Vector2d ambient = Eigen::Vector2d::Zero();
};

// ---------------------------------------------------------------------------
// Parameters

template <typename S>
struct ParameterSet {
  std::vector<std::string> names;
  std::vector<ad::Mat<S>> values;

  int add(std::string name, ad::Mat<S> value) {
    names.push_back(std::move(name));
    values.push_back(std::move(value));
    return static_cast<int>(values.size() - 1);
  }
  [[nodiscard]] int size() const { return static_cast<int>(values.size()); }
  [[nodiscard]] int index(std::string_view name) const {
    for (int i = 0; i < size(); ++i)
      if (names[static_cast<std::size_t>(i)] == name) return i;
    return -1;
  }
  [[nodiscard]] Eigen::Index num_scalars() const {
    Eigen::Index n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }
  template <typename T>
  [[nodiscard]] ParameterSet<T> cast() const {
    ParameterSet<T> out;
    out.names = names;
    for (const auto& v : values) out.values.push_back(v.template cast<T>());
    return out;
  }
  /// FNV-1a over the float32 rounding of every value.
  [[nodiscard]] std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& v : values) {
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        const float f = static_cast<float>(v.data()[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof bits);
        for (int b = 0; b < 4; ++b) {
          h ^= (bits >> (8 * b)) & 0xffu;
          h *= 1099511628211ull;
        }
      }
    }
    return h;
  }
};

/// Parameters placed on a tape, as leaves (trainable) or constants.
template <typename S>
struct Bound {
  ad::Tape<S>* tape = nullptr;
  std::vector<ad::Var<S>> vars;

  ad::Var<S> operator[](int i) const { return vars[static_cast<std::size_t>(i)]; }
};

/// Replacement of selected embedding entries: e' = e * keep + value.
template <typename S>
struct EmbeddingOverride {
  ad::Mat<S> keep;
  ad::Mat<S> value;
};

namespace detail {

struct Layer {
  int w = -1;   ///< weight on the per-point input
  int wc = -1;  ///< weight on the per-sample condition (first layer only)
  int b = -1;
};
using Mlp = std::vector<Layer>;

template <typename S>
ad::Var<S> sqrt_safe(ad::Var<S> a) {
  return ad::unary(
      a, [](S x) { return std::sqrt(x); }, [](S x) { return S(0.5) / std::sqrt(std::max(x, S(1e-12))); },
      [](S x) {
        const S m = std::max(x, S(1e-12));
        return S(-0.25) / (m * std::sqrt(m));
      });
}

/// gamma(x) on a tape, same layout as positional_encode.
template <typename S>
ad::Var<S> encode(ad::Var<S> x, int bands) {
  std::vector<ad::Var<S>> parts{x};
  for (int l = 0; l < bands; ++l) {
    auto s = ad::scale(x, static_cast<S>(std::ldexp(std::numbers::pi, l)));
    parts.push_back(ad::sin(s));
    parts.push_back(ad::cos(s));
  }
  return ad::hcat<S>(std::span<const ad::Var<S>>(parts));
}

/// Constant with the same row layout as `like`; tangent rows zero when jet.
template <typename S>
ad::Var<S> rows_constant(ad::Tape<S>& t, const ad::Mat<S>& values, bool jet) {
  if (!jet) return t.constant(values);
  const Eigen::Index n = values.rows();
  ad::Mat<S> v = ad::Mat<S>::Zero(ad::kJetBlocks * n, values.cols());
  v.topRows(n) = values;
  return t.constant(std::move(v), true);
}

/// Row-wise softmax of an n x K node (plain or jet).
template <typename S>
ad::Var<S> softmax_rows(ad::Var<S> logits) {
  const Eigen::Index n = logits.samples();
  const Eigen::Index k = logits.cols();
  ad::Mat<S> m = logits.value().topRows(n).rowwise().maxCoeff().replicate(1, k);
  auto e = ad::exp(ad::sub(logits, rows_constant(*logits.tape, m, logits.jet())));
  auto z = ad::broadcast_cols(ad::reciprocal(ad::row_sum(e)), k);
  return ad::mul(e, z);
}

inline const Eigen::Matrix<double, 1, Eigen::Dynamic>& mirror_factors() {
  static const Eigen::Matrix<double, 1, Eigen::Dynamic> f = (Eigen::Matrix<double, 1, Eigen::Dynamic>(3) << -1, 1, 1).finished();
  return f;
}

}  // namespace detail

/// Intermediate and final quantities of one forward pass.
template <typename S>
struct Forward {
  ad::Var<S> embeddings;  ///< B x (K * region_dim)
  ad::Var<S> anchors;     ///< B x 3K
  ad::Var<S> delta;       ///< N x 3 (jet when the input was)
  ad::Var<S> ambient;     ///< N x 2
  ad::Var<S> x_can;       ///< N x 3
  ad::Var<S> sdf;         ///< N x 1
};

template <typename S>
class Model {
 public:
  using Mat = ad::Mat<S>;
  using Var = ad::Var<S>;

  Model() = default;

  /// Fresh parameters. `mean_anchors` (K x 3) initialises the LandmarkNet output bias.
  Model(ModelConfig cfg, RegionTopology topo, std::uint64_t seed, const std::optional<Points>& mean_anchors = std::nullopt)
      : cfg_(std::move(cfg)), topo_(std::move(topo)) {
    check_shapes();
    std::mt19937_64 rng(seed);
    build(&rng, mean_anchors);
  }

  /// Layout only; values are taken from `params` (checkpoint loading).
  Model(ModelConfig cfg, RegionTopology topo, ParameterSet<S> params) : cfg_(std::move(cfg)), topo_(std::move(topo)) {
    check_shapes();
    build(nullptr, std::nullopt);
    if (params.names != params_.names) throw std::invalid_argument("Model: parameter names do not match config");
    for (int i = 0; i < params_.size(); ++i) {
      const auto& a = params_.values[static_cast<std::size_t>(i)];
      const auto& b = params.values[static_cast<std::size_t>(i)];
      if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument("Model: shape mismatch for " + params_.names[static_cast<std::size_t>(i)]);
      }
    }
    params_ = std::move(params);
  }

  template <typename T>
  [[nodiscard]] Model<T> cast() const {
    return Model<T>(cfg_, topo_, params_.template cast<T>());
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] const RegionTopology& topology() const { return topo_; }
  [[nodiscard]] const ParameterSet<S>& params() const { return params_; }
  [[nodiscard]] ParameterSet<S>& params() { return params_; }
  [[nodiscard]] int num_regions() const { return cfg_.num_regions; }

  [[nodiscard]] Bound<S> bind(ad::Tape<S>& t, bool trainable) const {
    Bound<S> b{&t, {}};
    b.vars.reserve(params_.values.size());
    for (const auto& v : params_.values) b.vars.push_back(trainable ? t.leaf(v) : t.constant(v));
    return b;
  }

  // -- stages ---------------------------------------------------------------

  /// B x identity_dim -> B x (K * region_dim).
  Var decompose(const Bound<S>& p, Var z_id) const {
    ad::detail::check(z_id.cols() == cfg_.identity_dim(), "decompose: identity latent dimension mismatch");
    switch (cfg_.ablation) {
      case Ablation::kLocalLatentOnly: return z_id;
      case Ablation::kLocalPlusGlobal: return ad::cols(z_id, 0, cfg_.num_regions * cfg_.d_l);
      default: return ad::linear(z_id, p[dec_w_], p[dec_b_]);
    }
  }

  Var apply_override(Var e, const EmbeddingOverride<S>* ov) const {
    if (ov == nullptr) return e;
    auto& t = *e.tape;
    return ad::add(ad::mul(e, t.constant(ov->keep)), t.constant(ov->value));
  }

  /// DecNet weight W (K * d_l x d_g) with e = W z + b; empty for the ablations without DecNet.
  [[nodiscard]] Eigen::MatrixXd decoder_weight() const {
    if (dec_w_ < 0) return {};
    return params_.values[static_cast<std::size_t>(dec_w_)].template cast<double>();
  }

  /// B x (K * region_dim) -> B x 3K.
  Var landmarks(const Bound<S>& p, Var e) const { return run(p, landmark_, e); }

  /// Backward warp of observed points; returns (delta, ambient).
  std::pair<Var, Var> warp(const Bound<S>& p, Var x_obs, Var z_id, Var z_exp, std::span<const int> sample) const {
    ad::detail::check(z_exp.cols() == cfg_.d_e, "warp: expression latent dimension mismatch");
    auto out = run(p, deformer_, detail::encode(x_obs, cfg_.deformer_bands), ad::hcat<S>({z_id, z_exp}), sample);
    return {ad::cols(out, 0, 3), ad::cols(out, 3, ModelConfig::kAmbientDim)};
  }

  /// Per-point anchor of region j as an N x 3 node without spatial dependence.
  Var region_anchor(Var anchors, std::span<const int> sample, int j, bool jet) const {
    return ad::gather_rows(ad::cols(anchors, 3 * j, 3), sample, jet);
  }

  /// f^j at the canonical points: N x local_output_dim.
  Var region_features(const Bound<S>& p, Var x_can, Var e, Var anchors, Var z_id, std::span<const int> sample,
                      int j) const {
    const bool jet = x_can.jet();
    Var x = x_can;
    Var k = region_anchor(anchors, sample, j, jet);
    if (topo_.is_right(j)) {
      const Eigen::Matrix<S, 1, Eigen::Dynamic> f = detail::mirror_factors().cast<S>();
      x = ad::scale_cols(x, f);
      k = ad::scale_cols(k, f);
    }
    Var local = cfg_.ablation == Ablation::kNoLocalCanonical ? x : ad::sub(x, k);
    Var cond = ad::cols(e, j * cfg_.region_dim(), cfg_.region_dim());
    if (cfg_.ablation == Ablation::kLocalPlusGlobal) {
      cond = ad::hcat<S>({cond, ad::cols(z_id, cfg_.num_regions * cfg_.d_l, cfg_.d_g)});
    }
    return run(p, local_[static_cast<std::size_t>(topo_.network_of(j))], detail::encode(local, cfg_.num_bands), cond,
               sample);
  }

  /// N x K softmax of -|x - k_j| / sigma.
  Var weights(Var x_can, Var anchors, std::span<const int> sample) const {
    const bool jet = x_can.jet();
    std::vector<Var> logits;
    logits.reserve(static_cast<std::size_t>(cfg_.num_regions));
    for (int j = 0; j < cfg_.num_regions; ++j) {
      auto d = ad::sub(x_can, region_anchor(anchors, sample, j, jet));
      logits.push_back(detail::sqrt_safe(ad::row_sum(ad::square(d))));
    }
    auto l = ad::scale(ad::hcat<S>(std::span<const Var>(logits)), static_cast<S>(-1.0 / cfg_.sigma));
    return detail::softmax_rows(l);
  }

  /// Signed distance of canonical points.
  Var canonical_sdf(const Bound<S>& p, Var x_can, Var ambient, Var e, Var anchors, Var z_id,
                    std::span<const int> sample) const {
    Var w = weights(x_can, anchors, sample);
    const Eigen::Index f = cfg_.local_output_dim();
    Var fused;
    for (int j = 0; j < cfg_.num_regions; ++j) {
      Var term = ad::mul(ad::broadcast_cols(ad::cols(w, j, 1), f), region_features(p, x_can, e, anchors, z_id, sample, j));
      fused = j == 0 ? term : ad::add(fused, term);
    }
    if (cfg_.ablation == Ablation::kNoFusionNet) return fused;
    return run(p, fusion_, ad::hcat<S>({detail::encode(x_can, cfg_.num_bands), ambient, fused}));
  }

  /// Full model. `sample[i]` selects the latent row used by point i.
  /// `z_warp`, when valid, replaces z_id as the deformer's identity input.
  Forward<S> forward(const Bound<S>& p, Var x_obs, Var z_id, Var z_exp, std::span<const int> sample,
                     const EmbeddingOverride<S>* ov = nullptr, Var z_warp = {}) const {
    Forward<S> out;
    out.embeddings = apply_override(decompose(p, z_id), ov);
    out.anchors = landmarks(p, out.embeddings);
    std::tie(out.delta, out.ambient) = warp(p, x_obs, z_warp.valid() ? z_warp : z_id, z_exp, sample);
    out.x_can = ad::add(x_obs, out.delta);
    out.sdf = canonical_sdf(p, out.x_can, out.ambient, out.embeddings, out.anchors, z_id, sample);
    return out;
  }

 private:
  void check_shapes() const {
    cfg_.validate();
    topo_.validate();
    if (topo_.size() != cfg_.num_regions) throw std::invalid_argument("Model: topology size differs from num_regions");
  }

  Mat init_matrix(std::mt19937_64* rng, Eigen::Index r, Eigen::Index c, double std) {
    Mat m = Mat::Zero(r, c);
    if (rng == nullptr || std == 0.0) return m;
    std::normal_distribution<double> g(0.0, std);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(g(*rng));
    return m;
  }

  /// Plain MLP: dims = {in, hidden..., out}; cond_dim > 0 adds a per-sample first-layer input.
  detail::Mlp make_mlp(std::mt19937_64* rng, const std::string& prefix, const std::vector<int>& dims, int cond_dim) {
    detail::Mlp m;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const int in = dims[l] + (l == 0 ? cond_dim : 0);
      const double std = std::sqrt(2.0 / in);
      detail::Layer layer;
      const std::string n = prefix + "." + std::to_string(l);
      layer.w = params_.add(n + ".w", init_matrix(rng, dims[l + 1], dims[l], std));
      if (l == 0 && cond_dim > 0) layer.wc = params_.add(n + ".wc", init_matrix(rng, dims[l + 1], cond_dim, std));
      layer.b = params_.add(n + ".b", Mat::Zero(1, dims[l + 1]));
      m.push_back(layer);
    }
    return m;
  }

  Mat& value(int i) { return params_.values[static_cast<std::size_t>(i)]; }

  void build(std::mt19937_64* rng, const std::optional<Points>& mean_anchors) {
    const int k = cfg_.num_regions;
    const int rd = cfg_.region_dim();
    const int enc = 3 * (2 * cfg_.num_bands + 1);
    const int denc = 3 * (2 * cfg_.deformer_bands + 1);

    if (cfg_.ablation != Ablation::kLocalLatentOnly && cfg_.ablation != Ablation::kLocalPlusGlobal) {
      dec_w_ = params_.add("dec.w", init_matrix(rng, k * cfg_.d_l, cfg_.d_g, 1.0 / std::sqrt(cfg_.d_g)));
      dec_b_ = params_.add("dec.b", Mat::Zero(1, k * cfg_.d_l));
    }

    landmark_ = make_mlp(rng, "landmark", {k * rd, cfg_.landmark_width, cfg_.landmark_width, 3 * k}, 0);
    value(landmark_.back().w) *= S(0.01);
    if (mean_anchors) {
      if (mean_anchors->rows() != k) throw std::invalid_argument("Model: mean_anchors must be K x 3");
      for (int j = 0; j < k; ++j)
        for (int c = 0; c < 3; ++c) value(landmark_.back().b)(0, 3 * j + c) = static_cast<S>((*mean_anchors)(j, c));
    }

    const int cond = rd + (cfg_.ablation == Ablation::kLocalPlusGlobal ? cfg_.d_g : 0);
    std::vector<int> ldims{enc};
    for (int l = 0; l + 1 < cfg_.local_layers; ++l) ldims.push_back(cfg_.local_width);
    ldims.push_back(cfg_.local_output_dim());
    for (int n = 0; n < topo_.num_networks(); ++n) {
      local_.push_back(make_mlp(rng, "local" + std::to_string(n), ldims, cond));
    }
    if (cfg_.ablation == Ablation::kNoFusionNet) {
      // Each local net regresses a sphere-like SDF around the origin at start.
      for (auto& m : local_) geometric_init(rng, m, 3);
    }

    if (cfg_.ablation != Ablation::kNoFusionNet) {
      std::vector<int> fdims{enc + ModelConfig::kAmbientDim + cfg_.feature_dim};
      for (int l = 0; l + 1 < cfg_.fusion_layers; ++l) fdims.push_back(cfg_.fusion_width);
      fdims.push_back(1);
      fusion_ = make_mlp(rng, "fusion", fdims, 0);
      geometric_init(rng, fusion_, 3);
    }

    std::vector<int> ddims{denc};
    for (int l = 0; l + 1 < cfg_.deformer_layers; ++l) ddims.push_back(cfg_.deformer_width);
    ddims.push_back(3 + ModelConfig::kAmbientDim);
    deformer_ = make_mlp(rng, "deformer", ddims, cfg_.identity_dim() + cfg_.d_e);
    value(deformer_.back().w).setZero();
    value(deformer_.back().b).setZero();
  }

  /// Sphere initialisation: only the first `raw` input columns are active in layer 0,
  /// hidden layers ~ N(0, 2/width), output ~ sqrt(pi/width) with bias -r.
  void geometric_init(std::mt19937_64* rng, detail::Mlp& m, int raw) {
    if (rng == nullptr) return;
    for (std::size_t l = 0; l < m.size(); ++l) {
      Mat& w = value(m[l].w);
      Mat& b = value(m[l].b);
      b.setZero();
      if (l + 1 == m.size()) {
        const double mu = std::sqrt(std::numbers::pi / static_cast<double>(w.cols()));
        w = init_matrix(rng, w.rows(), w.cols(), 1e-4).array() + static_cast<S>(mu);
        b.setConstant(static_cast<S>(-cfg_.init_radius));
      } else {
        const double std = std::sqrt(2.0 / static_cast<double>(w.rows()));
        Mat fresh = init_matrix(rng, w.rows(), w.cols(), std);
        if (l == 0) {
          fresh.rightCols(w.cols() - raw).setZero();
          if (m[l].wc >= 0) value(m[l].wc).setZero();
        }
        w = fresh;
      }
    }
  }

  Var run(const Bound<S>& p, const detail::Mlp& m, Var x, Var cond = Var{}, std::span<const int> sample = {}) const {
    const S beta = static_cast<S>(cfg_.softplus_beta);
    Var h;
    const auto& l0 = m.front();
    if (l0.wc >= 0) {
      auto c = ad::linear(cond, p[l0.wc], p[l0.b]);
      h = ad::add(ad::linear(x, p[l0.w]), ad::gather_rows(c, sample, x.jet()));
    } else {
      h = ad::linear(x, p[l0.w], p[l0.b]);
    }
    for (std::size_t l = 1; l < m.size(); ++l) h = ad::linear(ad::softplus(h, beta), p[m[l].w], p[m[l].b]);
    return h;
  }

  ModelConfig cfg_;
  RegionTopology topo_;
  ParameterSet<S> params_;
  int dec_w_ = -1, dec_b_ = -1;
  detail::Mlp landmark_;
  std::vector<detail::Mlp> local_;
  detail::Mlp fusion_;
  detail::Mlp deformer_;
};

// ---------------------------------------------------------------------------
// Closed-form fusion helpers

/// w_j = softmax_j(-|x - k_j| / sigma).
inline Eigen::VectorXd fusion_weights(const Vec3& x, const Points& anchors, double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("fusion_weights: sigma must be positive");
  if (anchors.rows() == 0) throw std::invalid_argument("fusion_weights: no anchors");
  Eigen::VectorXd l(anchors.rows());
  for (Eigen::Index j = 0; j < anchors.rows(); ++j) l(j) = -(x - anchors.row(j).transpose()).norm() / sigma;
  const Eigen::VectorXd e = (l.array() - l.maxCoeff()).exp();
  return e / e.sum();
}

/// Convex combination of feature rows.
inline Eigen::VectorXd fuse_features(const Eigen::VectorXd& w, const Eigen::MatrixXd& feats) {
  if (w.size() != feats.rows()) throw std::invalid_argument("fuse_features: weight/feature count mismatch");
  return feats.transpose() * w;
}

// ---------------------------------------------------------------------------
// Point-level API over a frozen model (evaluated with constants, no gradients
// with respect to parameters).

namespace detail {

template <typename S>
ad::Mat<S> row_matrix(const Eigen::VectorXd& v) {
  return v.transpose().template cast<S>();
}

template <typename S>
ad::Mat<S> to_mat(const Points& p) {
  return p.template cast<S>();
}

template <typename S>
void check_identity(const Model<S>& m, const EditedIdentity& id) {
  const auto& c = m.config();
  if (id.base.size() != c.identity_dim()) {
    throw std::invalid_argument("identity latent has " + std::to_string(id.base.size()) + " entries, expected " +
                                std::to_string(c.identity_dim()));
  }
  for (const auto& [j, v] : id.overrides) {
    if (j < 0 || j >= c.num_regions) throw std::invalid_argument("override region " + std::to_string(j) + " out of range");
    if (v.size() != c.region_dim()) throw std::invalid_argument("override embedding has wrong dimension");
  }
}

template <typename S>
std::optional<EmbeddingOverride<S>> make_override(const Model<S>& m, const EditedIdentity& id) {
  if (id.overrides.empty()) return std::nullopt;
  const int rd = m.config().region_dim();
  EmbeddingOverride<S> ov{ad::Mat<S>::Ones(1, m.num_regions() * rd), ad::Mat<S>::Zero(1, m.num_regions() * rd)};
  for (const auto& [j, v] : id.overrides) {
    ov.keep.middleCols(j * rd, rd).setZero();
    ov.value.middleCols(j * rd, rd) = v.transpose().template cast<S>();
  }
  return ov;
}

}  // namespace detail

/// Region embeddings K x region_dim for an identity latent.
template <typename S>
Eigen::MatrixXd decompose_identity(const Model<S>& m, const EditedIdentity& id) {
  detail::check_identity(m, id);
  ad::Tape<S> t;
  auto p = m.bind(t, false);
  auto ov = detail::make_override(m, id);
  auto e = m.apply_override(m.decompose(p, t.constant(detail::row_matrix<S>(id.base))), ov ? &*ov : nullptr);
  const int rd = m.config().region_dim();
  Eigen::MatrixXd out(m.num_regions(), rd);
  for (int j = 0; j < m.num_regions(); ++j) out.row(j) = e.value().middleCols(j * rd, rd).template cast<double>();
  return out;
}

/// Identity latent seen by the expression deformer. Without overrides this is
/// the base latent. With overrides the base moves toward the least-squares
/// latent of the effective embeddings, in proportion to the share of regions
/// overridden: a fully replaced identity deforms like its source, a single
/// region edit barely moves the deformation.
template <typename S>
Eigen::VectorXd deformer_identity(const Model<S>& m, const EditedIdentity& id) {
  detail::check_identity(m, id);
  if (id.overrides.empty()) return id.base;
  const auto& c = m.config();
  const int rd = c.region_dim();
  const Eigen::MatrixXd e = decompose_identity(m, id);
  Eigen::VectorXd flat(c.num_regions * rd);
  for (int j = 0; j < c.num_regions; ++j) flat.segment(j * rd, rd) = e.row(j).transpose();
  Eigen::VectorXd z = id.base;
  switch (c.ablation) {
    case Ablation::kLocalLatentOnly:
    case Ablation::kLocalPlusGlobal: {
      const double share = static_cast<double>(id.overrides.size()) / c.num_regions;
      z.head(flat.size()) += share * (flat - z.head(flat.size()));
      return z;
    }
    default: break;
  }
  const Eigen::MatrixXd w = m.decoder_weight();
  Eigen::VectorXd before(c.num_regions * rd);
  const Eigen::MatrixXd e0 = decompose_identity(m, EditedIdentity(id.base));
  for (int j = 0; j < c.num_regions; ++j) before.segment(j * rd, rd) = e0.row(j).transpose();
  const double share = static_cast<double>(id.overrides.size()) / c.num_regions;
  z += share * w.colPivHouseholderQr().solve(flat - before);
  return z;
}

namespace detail {

template <typename S>
Eigen::VectorXd evaluate_sdf_with(const Model<S>& m, const Points& x, const EditedIdentity& id,
                                  const Eigen::VectorXd& z_warp, const Eigen::VectorXd& z_exp, Points* gradient,
                                  Eigen::Index chunk) {
  ad::DenormalGuard ftz;
  Eigen::VectorXd out(x.rows());
  if (gradient) gradient->resize(x.rows(), 3);
  auto ov = make_override(m, id);
  for (Eigen::Index s = 0; s < x.rows(); s += chunk) {
    const Eigen::Index n = std::min(chunk, x.rows() - s);
    ad::Tape<S> t;
    auto p = m.bind(t, false);
    const std::vector<int> sample(static_cast<std::size_t>(n), 0);
    const ad::Mat<S> pts = x.middleRows(s, n).template cast<S>();
    auto xv = gradient ? ad::jet_points(t, pts) : t.constant(pts);
    auto f = m.forward(p, xv, t.constant(row_matrix<S>(id.base)), t.constant(row_matrix<S>(z_exp)), sample,
                       ov ? &*ov : nullptr, ov ? t.constant(row_matrix<S>(z_warp)) : ad::Var<S>{});
    const auto& v = f.sdf.value();
    out.segment(s, n) = v.topRows(n).col(0).template cast<double>();
    if (gradient) {
      for (int k = 0; k < 3; ++k) gradient->block(s, k, n, 1) = v.middleRows((k + 1) * n, n).template cast<double>();
    }
  }
  return out;
}

}  // namespace detail

/// LandmarkNet on a K x region_dim embedding stack -> K x 3 anchors.
template <typename S>
Points regress_landmarks(const Model<S>& m, const Eigen::MatrixXd& e) {
  const int rd = m.config().region_dim();
  if (e.rows() != m.num_regions() || e.cols() != rd) throw std::invalid_argument("regress_landmarks: expected K x d_l");
  ad::Tape<S> t;
  auto p = m.bind(t, false);
  ad::Mat<S> flat(1, m.num_regions() * rd);
  for (int j = 0; j < m.num_regions(); ++j) flat.middleCols(j * rd, rd) = e.row(j).template cast<S>();
  auto k = m.landmarks(p, t.constant(flat));
  Points out(m.num_regions(), 3);
  for (int j = 0; j < m.num_regions(); ++j) out.row(j) = k.value().middleCols(3 * j, 3).template cast<double>();
  return out;
}

/// Per-region features f^j(x_can) for given embeddings and anchors: K x local_output_dim.
template <typename S>
Eigen::MatrixXd local_part_features(const Model<S>& m, const Vec3& x_can, const Eigen::MatrixXd& e, const Points& anchors,
                                    const Eigen::VectorXd& z_global = {}) {
  const int rd = m.config().region_dim();
  const int k = m.num_regions();
  if (e.rows() != k || e.cols() != rd || anchors.rows() != k) throw std::invalid_argument("local_part_features: shapes");
  ad::Tape<S> t;
  auto p = m.bind(t, false);
  ad::Mat<S> ef(1, k * rd), af(1, 3 * k);
  for (int j = 0; j < k; ++j) {
    ef.middleCols(j * rd, rd) = e.row(j).template cast<S>();
    af.middleCols(3 * j, 3) = anchors.row(j).template cast<S>();
  }
  ad::Mat<S> z = ad::Mat<S>::Zero(1, m.config().identity_dim());
  if (m.config().ablation == Ablation::kLocalPlusGlobal && z_global.size() == m.config().d_g) {
    z.rightCols(m.config().d_g) = z_global.transpose().template cast<S>();
  }
  const std::vector<int> sample{0};
  auto x = t.constant(ad::Mat<S>(x_can.transpose().template cast<S>()));
  Eigen::MatrixXd out(k, m.config().local_output_dim());
  for (int j = 0; j < k; ++j) {
    out.row(j) = m.region_features(p, x, t.constant(ef), t.constant(af), t.constant(z), sample, j)
                     .value()
                     .template cast<double>();
  }
  return out;
}

/// Deformer output at one observed point.
template <typename S>
WarpResult expression_warp(const Model<S>& m, const Vec3& x_obs, const Eigen::VectorXd& z_id, const Eigen::VectorXd& z_exp) {
  ad::Tape<S> t;
  auto p = m.bind(t, false);
  const std::vector<int> sample{0};
  auto [d, w] = m.warp(p, t.constant(ad::Mat<S>(x_obs.transpose().template cast<S>())),
                       t.constant(detail::row_matrix<S>(z_id)), t.constant(detail::row_matrix<S>(z_exp)), sample);
  WarpResult r;
  r.delta = d.value().row(0).transpose().template cast<double>();
  r.ambient = w.value().row(0).transpose().template cast<double>();
  return r;
}

/// Canonical-space SDF y = F(gamma(x_can), w, f_hat).
template <typename S>
double identity_sdf(const Model<S>& m, const Vec3& x_can, const Eigen::Vector2d& ambient, const EditedIdentity& id) {
  detail::check_identity(m, id);
  ad::Tape<S> t;
  auto p = m.bind(t, false);
  const std::vector<int> sample{0};
  auto z = t.constant(detail::row_matrix<S>(id.base));
  auto ov = detail::make_override(m, id);
  auto e = m.apply_override(m.decompose(p, z), ov ? &*ov : nullptr);
  auto k = m.landmarks(p, e);
  auto y = m.canonical_sdf(p, t.constant(ad::Mat<S>(x_can.transpose().template cast<S>())),
                           t.constant(ad::Mat<S>(ambient.transpose().template cast<S>())), e, k, z, sample);
  return static_cast<double>(y.value()(0, 0));
}

/// Batched field values (and optionally spatial gradients) for one identity and expression.
template <typename S>
Eigen::VectorXd evaluate_sdf(const Model<S>& m, const Points& x, const EditedIdentity& id, const Eigen::VectorXd& z_exp,
                             Points* gradient = nullptr, Eigen::Index chunk = 4096) {
  detail::check_identity(m, id);
  if (z_exp.size() != m.config().d_e) throw std::invalid_argument("expression code has wrong dimension");
  return detail::evaluate_sdf_with(m, x, id, deformer_identity(m, id), z_exp, gradient, chunk);
}

template <typename S>
double evaluate_sdf(const Model<S>& m, const Vec3& x, const EditedIdentity& id, const Eigen::VectorXd& z_exp) {
  Points p(1, 3);
  p.row(0) = x.transpose();
  return evaluate_sdf(m, p, id, z_exp)(0);
}

/// Anchors regressed for an identity (after overrides): K x 3.
template <typename S>
Points identity_anchors(const Model<S>& m, const EditedIdentity& id) {
  return regress_landmarks(m, decompose_identity(m, id));
}

}  // namespace imhead
