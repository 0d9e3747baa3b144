#pragma once

// Training objectives on tape values. Field inputs are n x 1 jets, so the
// spatial gradient is read from their tangent rows.

#include "imhead/autodiff.hpp"
#include "imhead/model.hpp"

namespace imhead {

struct LossWeights {
  double eik = 0.1;
  double kpt = 1.0;
  double sym = 0.01;
  double reg = 1e-4;
  double def = 1e-3;

  void validate() const {
    if (eik < 0 || kpt < 0 || sym < 0 || reg < 0 || def < 0) throw std::invalid_argument("LossWeights must be non-negative");
  }
};

enum class NormalNorm { kL2, kL1 };

inline NormalNorm normal_norm_from_string(std::string_view s) {
  if (s == "l2") return NormalNorm::kL2;
  if (s == "l1") return NormalNorm::kL1;
  throw std::invalid_argument("normal_norm must be 'l2' or 'l1'");
}

namespace detail {

template <typename S>
ad::Var<S> row_norm(ad::Var<S> a) {
  return sqrt_safe(ad::row_sum(ad::square(a)));
}

}  // namespace detail

/// mean_i |M(x_i)| + |grad M(x_i) - n_i|. Without normals only the first term.
template <typename S>
ad::Var<S> reconstruction_loss(ad::Var<S> field, const std::optional<ad::Mat<S>>& normals,
                               NormalNorm norm = NormalNorm::kL2) {
  auto value_term = ad::mean(ad::abs(ad::jet_value(field)));
  if (!normals) return value_term;
  auto diff = ad::sub(ad::jet_gradient(field), field.tape->constant(*normals));
  auto per_point = norm == NormalNorm::kL2 ? detail::row_norm(diff) : ad::row_sum(ad::abs(diff));
  return ad::add(value_term, ad::mean(per_point));
}

/// mean (|grad M| - 1)^2.
template <typename S>
ad::Var<S> eikonal_loss(ad::Var<S> field) {
  return ad::mean(ad::square(ad::add_scalar(detail::row_norm(ad::jet_gradient(field)), S(-1))));
}

/// mean over samples and regions of |k_j - k_hat_j|; anchors are B x 3K.
template <typename S>
ad::Var<S> keypoint_loss(ad::Var<S> anchors, const ad::Mat<S>& truth) {
  ad::detail::check(anchors.rows() == truth.rows() && anchors.cols() == truth.cols(), "keypoint_loss: shape mismatch");
  auto diff = ad::sub(anchors, anchors.tape->constant(truth));
  const Eigen::Index k = truth.cols() / 3;
  std::vector<ad::Var<S>> norms;
  for (Eigen::Index j = 0; j < k; ++j) norms.push_back(detail::row_norm(ad::cols(diff, 3 * j, 3)));
  return ad::mean(ad::hcat<S>(std::span<const ad::Var<S>>(norms)));
}

/// mean over pairs (and samples) of |e_left - e_right|^2; zero without pairs.
template <typename S>
ad::Var<S> symmetry_loss(ad::Var<S> embeddings, const RegionTopology& topo, int region_dim) {
  auto& t = *embeddings.tape;
  if (topo.pairs.empty()) return t.constant(ad::Mat<S>::Zero(1, 1));
  std::vector<ad::Var<S>> terms;
  for (const auto& p : topo.pairs) {
    auto d = ad::sub(ad::cols(embeddings, p[0] * region_dim, region_dim), ad::cols(embeddings, p[1] * region_dim, region_dim));
    terms.push_back(ad::row_sum(ad::square(d)));
  }
  return ad::mean(ad::hcat<S>(std::span<const ad::Var<S>>(terms)));
}

/// mean over the batch of |z_id|^2 + |z_exp|^2, plus mean |w|^2 over points when given.
template <typename S>
ad::Var<S> latent_reg(ad::Var<S> z_id, ad::Var<S> z_exp, ad::Var<S> ambient = {}) {
  ad::detail::check(z_id.rows() == z_exp.rows(), "latent_reg: batch mismatch");
  auto r = ad::mean(ad::add(ad::row_sum(ad::square(z_id)), ad::row_sum(ad::square(z_exp))));
  if (ambient.valid()) {
    auto w = ambient.jet() ? ad::jet_value(ambient) : ambient;
    r = ad::add(r, ad::mean(ad::row_sum(ad::square(w))));
  }
  return r;
}

/// mean |dx|^2 over points.
template <typename S>
ad::Var<S> deformation_reg(ad::Var<S> delta) {
  auto d = delta.jet() ? ad::jet_value(delta) : delta;
  return ad::mean(ad::row_sum(ad::square(d)));
}

/// Loss terms of one batch, each a 1 x 1 tape value.
template <typename S>
struct LossTerms {
  ad::Var<S> rec, eik, kpt, sym, reg, def;
};

struct LossReport {
  double total = 0, rec = 0, eik = 0, kpt = 0, sym = 0, reg = 0, def = 0;

  [[nodiscard]] double resum(const LossWeights& w) const {
    return rec + w.eik * eik + w.kpt * kpt + w.sym * sym + w.reg * reg + w.def * def;
  }
};

/// L = L_rec + l_eik L_eik + l_kpt L_kpt + l_sym L_sym + l_reg L_reg + l_def L_def.
template <typename S>
std::pair<ad::Var<S>, LossReport> total_loss(const LossTerms<S>& c, const LossWeights& w) {
  w.validate();
  auto term = [](ad::Var<S> v, double weight) { return ad::scale(v, static_cast<S>(weight)); };
  auto total = ad::add(c.rec, term(c.eik, w.eik));
  total = ad::add(total, term(c.kpt, w.kpt));
  total = ad::add(total, term(c.sym, w.sym));
  total = ad::add(total, term(c.reg, w.reg));
  total = ad::add(total, term(c.def, w.def));
  auto v = [](ad::Var<S> x) { return static_cast<double>(x.value()(0, 0)); };
  LossReport r{v(total), v(c.rec), v(c.eik), v(c.kpt), v(c.sym), v(c.reg), v(c.def)};
  return {total, r};
}

}  // namespace imhead
