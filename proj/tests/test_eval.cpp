#include "imhead/eval.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

using namespace imhead;
using imhead::testing::small_checkpoint;

namespace {

// Two scans of one synthetic identity, kept small so fits stay fast.
std::vector<ScanRecord> tiny_split() {
  Dataset ds = make_synthetic_dataset(3, 1, 2, 600);
  return ds.scans;
}

EvalOptions quick() {
  EvalOptions o;
  o.fit.iters = 5;
  o.fit.points_per_iter = 128;
  o.resolution = 24;
  o.metric_samples = 1500;
  o.seed = 2;
  return o;
}

}  // namespace

TEST(Specificity, RowsAndZeroAtMean) {
  const auto ck = small_checkpoint();
  const TriMesh mean_mesh = extract_mesh(ck.model, ck.stats.id_mean, ck.neutral_expression(), 24);
  ASSERT_FALSE(mean_mesh.empty());
  const std::vector<PointCloud> refs{PointCloud(mean_mesh.vertices), imhead::testing::unit_sphere(500, 1, 3.0)};
  const auto rows = specificity(ck, refs, 1, {0.0}, 4, 24);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].error, 0.0);
  EXPECT_EQ(rows[0].empty_meshes, 0);
  EXPECT_EQ(specificity(ck, refs, 2, {0.0, 0.5, 1.0}, 4, 16).size(), 3u);
  EXPECT_THROW(specificity(ck, {}, 1, {0.0}, 0), std::invalid_argument);
}

TEST(Specificity, ErrorIsMinimumOverReferences) {
  TriMesh m;
  m.vertices.resize(2, 3);
  m.vertices << 0, 0, 0, 1, 0, 0;
  Points a(1, 3), b(2, 3);
  a << 0, 0, 1;
  b << 0, 0, 0.1, 1, 0, 0.3;
  const std::vector<KdTree> trees{KdTree(a), KdTree(b)};
  EXPECT_NEAR(closest_reference_distance(m, trees), 0.2, 1e-15);
}

TEST(EvaluateFit, ReportAggregatesAndExports) {
  const auto ck = small_checkpoint();
  const auto split = tiny_split();
  const MetricReport rep = evaluate_fit(ck, split, quick());
  ASSERT_EQ(rep.scans.size(), 2u);
  std::vector<double> cd;
  for (const auto& s : rep.scans) {
    ASSERT_TRUE(s.ok()) << s.error;
    EXPECT_GE(s.chamfer, 0.0);
    EXPECT_GE(s.normal_consistency, -1.0);
    EXPECT_LE(s.normal_consistency, 1.0);
    EXPECT_GE(s.f_score, 0.0);
    EXPECT_LE(s.f_score, 1.0);
    cd.push_back(s.chamfer);
  }
  const Aggregate a = rep.summary(&ScanMetrics::chamfer);
  EXPECT_DOUBLE_EQ(a.mean, 0.5 * (cd[0] + cd[1]));
  EXPECT_DOUBLE_EQ(a.median, a.mean);

  const json j = to_json(rep);
  EXPECT_EQ(j.at("config").at("resolution"), 24);
  EXPECT_EQ(j.at("scans").size(), 2u);
  EXPECT_DOUBLE_EQ(j.at("summary").at("chamfer").at("mean").get<double>(), a.mean);
  const std::string csv = to_csv(rep);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("CD,NC,F@0.01"), std::string::npos);
}

TEST(EvaluateFit, DeterministicPerSeed) {
  const auto ck = small_checkpoint();
  const auto split = tiny_split();
  const auto a = evaluate_fit(ck, split, quick());
  const auto b = evaluate_fit(ck, split, quick());
  for (std::size_t i = 0; i < a.scans.size(); ++i) {
    EXPECT_EQ(a.scans[i].chamfer, b.scans[i].chamfer);
    EXPECT_EQ(a.scans[i].f_score, b.scans[i].f_score);
  }
}

TEST(EvaluateFit, MaskRestrictsAndFailuresAreRecorded) {
  const auto ck = small_checkpoint();
  auto split = tiny_split();
  EvalOptions o = quick();
  o.mask = FaceMask{};
  const auto masked = evaluate_fit(ck, split, o);
  EXPECT_TRUE(masked.scans[0].ok()) << masked.scans[0].error;

  o.mask = FaceMask{5.0};
  EXPECT_FALSE(evaluate_fit(ck, split, o).scans[0].ok());

  split[1].cloud = PointCloud(Points(split[1].cloud.points.topRows(10)));
  const auto rep = evaluate_fit(ck, split, quick());
  EXPECT_TRUE(rep.scans[0].ok());
  EXPECT_FALSE(rep.scans[1].ok());
  EXPECT_EQ(rep.failures(), 1);
  EXPECT_EQ(rep.summary(&ScanMetrics::chamfer).count, 1);
  EXPECT_TRUE(to_json(rep).at("scans")[1].contains("error"));
  EXPECT_THROW(evaluate_fit(ck, {}, quick()), std::invalid_argument);
}

TEST(EvaluateFit, WarmStartUsesStoredLatents) {
  auto ck = small_checkpoint();
  auto split = tiny_split();
  split.resize(1);
  split[0].name = ck.samples[2].label;
  EvalOptions o = quick();
  o.fit.iters = 0;
  o.warm_start = true;
  const auto warm = evaluate_scan(ck, split[0], o, 0);
  FitOptions f = o.fit;
  f.init = FitInit::kGiven;
  f.init_id = ck.identity(ck.samples[2].identity);
  f.init_exp = ck.expression(2);
  f.seed = 0;
  EXPECT_DOUBLE_EQ(warm.fit_loss, fit(split[0].cloud, ck, f).best_loss());
}

TEST(Aggregate, MeanMedian) {
  const auto a = aggregate({3, 1, 2, 10});
  EXPECT_DOUBLE_EQ(a.mean, 4.0);
  EXPECT_DOUBLE_EQ(a.median, 2.5);
  EXPECT_EQ(a.count, 4);
  EXPECT_TRUE(std::isnan(aggregate({}).mean));
}
