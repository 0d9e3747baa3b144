#include "imhead/autodiff.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <random>

namespace ad = imhead::ad;
using M = ad::Mat<double>;

namespace {

M random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// Builds a scalar from leaves; returns the root.
using Program = std::function<ad::Var<double>(ad::Tape<double>&, std::vector<ad::Var<double>>&)>;

// Compares tape gradients of every leaf against central differences.
void check_gradients(const Program& program, std::vector<M> leaves, double tol = 1e-6) {
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> vars;
  for (const auto& l : leaves) vars.push_back(tape.leaf(l));
  auto root = program(tape, vars);
  tape.backward(root);

  auto eval = [&](const std::vector<M>& ls) {
    ad::Tape<double> t;
    std::vector<ad::Var<double>> vs;
    for (const auto& l : ls) vs.push_back(t.constant(l));
    return program(t, vs).value()(0, 0);
  };
  const double h = 1e-6;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const M& g = vars[li].grad();
    for (Eigen::Index e = 0; e < leaves[li].size(); ++e) {
      auto plus = leaves;
      auto minus = leaves;
      plus[li].data()[e] += h;
      minus[li].data()[e] -= h;
      const double fd = (eval(plus) - eval(minus)) / (2 * h);
      const double an = g.size() ? g.data()[e] : 0.0;
      EXPECT_NEAR(an, fd, tol * std::max(1.0, std::abs(fd))) << "leaf " << li << " entry " << e;
    }
  }
}

// Spatial gradients carried by jets must match finite differences in x.
TEST(Autodiff, JetTangentsMatchSpatialFiniteDifferences) {
  std::mt19937_64 rng(3);
  const M w1 = random_matrix(8, 3, rng);
  const M b1 = random_matrix(1, 8, rng);
  const M w2 = random_matrix(1, 8, rng);
  auto field = [&](ad::Tape<double>& t, const M& pts) {
    auto x = ad::jet_points(t, pts);
    auto h = ad::softplus(ad::linear(x, t.constant(w1), t.constant(b1)), 10.0);
    auto s = ad::mul(ad::sin(h), ad::exp(ad::scale(h, -0.3)));
    return ad::linear(s, t.constant(w2));
  };
  M pts = random_matrix(5, 3, rng, 0.5);
  ad::Tape<double> tape;
  auto y = field(tape, pts);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    for (int k = 0; k < 3; ++k) {
      M p = pts.row(i);
      M q = p;
      p(0, k) += h;
      q(0, k) -= h;
      ad::Tape<double> t1, t2;
      const double fd = (field(t1, p).value()(0, 0) - field(t2, q).value()(0, 0)) / (2 * h);
      EXPECT_NEAR(y.value()((k + 1) * pts.rows() + i, 0), fd, 1e-6);
    }
  }
}

TEST(Autodiff, SecondOrderThroughJetsMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const M pts = random_matrix(6, 3, rng, 0.5);
  // Loss mixes the field value and its spatial gradient, differentiated w.r.t. weights.
  Program prog = [&](ad::Tape<double>& t, std::vector<ad::Var<double>>& v) {
    auto x = ad::jet_points(t, pts);
    auto h = ad::softplus(ad::linear(x, v[0], v[1]), 5.0);
    auto h2 = ad::softplus(ad::linear(h, v[2], v[3]), 5.0);
    auto y = ad::linear(h2, v[4]);
    auto grad = ad::jet_gradient(y);
    auto gn = ad::sqrt(ad::add_scalar(ad::row_sum(ad::square(grad)), 1e-12));
    auto eik = ad::mean(ad::square(ad::add_scalar(gn, -1.0)));
    auto val = ad::mean(ad::abs(ad::jet_value(y)));
    return ad::add(eik, val);
  };
  check_gradients(prog, {random_matrix(6, 3, rng), random_matrix(1, 6, rng), random_matrix(4, 6, rng),
                         random_matrix(1, 4, rng), random_matrix(1, 4, rng)},
                  1e-5);
}

TEST(Autodiff, StructuralOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  const std::vector<int> idx{0, 2, 1, 2};
  Program prog = [&](ad::Tape<double>& t, std::vector<ad::Var<double>>& v) {
    auto g = ad::gather_rows(v[0], idx, true);  // 4 samples -> jet
    auto x = ad::add(ad::jet_points(t, M(M::Zero(4, 3))), ad::lift(v[1]));
    auto c = ad::hcat<double>({g, x});
    auto d = ad::cols(c, 1, 3);
    auto w = ad::broadcast_cols(ad::row_sum(d), 2);
    auto z = ad::mul(w, ad::cols(c, 0, 2));
    auto r = ad::reciprocal(ad::add_scalar(ad::square(z), 1.0));
    auto s = ad::scale_cols(r, Eigen::Matrix<double, 1, Eigen::Dynamic>(Eigen::RowVector2d(2.0, -1.0)));
    auto tan = ad::jet_tangent(s, 1);
    return ad::add(ad::sum(ad::cos(ad::jet_value(s))), ad::mean(ad::sub(tan, ad::jet_value(s))));
  };
  check_gradients(prog, {random_matrix(3, 3, rng), random_matrix(4, 3, rng)}, 1e-6);
}

TEST(Autodiff, RowSlicesOfJetsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  const M pts = random_matrix(7, 3, rng, 0.5);
  Program prog = [&](ad::Tape<double>& t, std::vector<ad::Var<double>>& v) {
    auto y = ad::linear(ad::softplus(ad::linear(ad::jet_points(t, pts), v[0], v[1]), 4.0), v[2]);
    auto head = ad::rows(y, 0, 3);
    auto tail = ad::rows(y, 3, 4);
    auto a = ad::mean(ad::square(ad::jet_gradient(head)));
    auto b = ad::mean(ad::abs(ad::jet_value(tail)));
    auto c = ad::sum(ad::rows(v[0], 1, 2));
    return ad::add(ad::add(a, b), c);
  };
  check_gradients(prog, {random_matrix(5, 3, rng), random_matrix(1, 5, rng), random_matrix(1, 5, rng)}, 1e-6);
}

TEST(Autodiff, LiftAndGatherAccumulateRepeatedRows) {
  ad::Tape<double> t;
  auto table = t.leaf(M::Ones(2, 2));
  const std::vector<int> idx{1, 1, 1};
  auto g = ad::gather_rows(table, idx);
  auto l = ad::lift(g);
  auto s = ad::sum(ad::jet_value(l));
  t.backward(s);
  EXPECT_DOUBLE_EQ(table.grad()(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(table.grad()(1, 0), 3.0);
}

TEST(Autodiff, ConstantsCarryNoGradient) {
  ad::Tape<double> t;
  auto a = t.constant(M::Ones(1, 1));
  auto b = t.leaf(M::Constant(1, 1, 2.0));
  auto y = ad::mul(a, b);
  t.backward(y);
  EXPECT_EQ(a.grad().size(), 0);
  EXPECT_DOUBLE_EQ(b.grad()(0, 0), 1.0);
}

TEST(Autodiff, ShapeErrorsThrow) {
  ad::Tape<double> t;
  auto a = t.constant(M::Ones(2, 2));
  auto b = t.constant(M::Ones(3, 2));
  EXPECT_THROW(ad::add(a, b), std::invalid_argument);
  EXPECT_THROW(ad::jet_value(a), std::invalid_argument);
  EXPECT_THROW(t.backward(a), std::logic_error);
}

}  // namespace
