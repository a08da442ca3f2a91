#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "brainmass/connectome.hpp"
#include "brainmass/errors.hpp"
#include "brainmass/synth.hpp"
#include "test_util.hpp"

using namespace brainmass;

namespace {

RealMatrix rows_of(std::initializer_list<std::initializer_list<double>> rows) {
  RealMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double x : r) m(i, j++) = x;
    ++i;
  }
  return m;
}

}  // namespace

TEST(Normalize, ConstantRowBecomesZerosAndIsFlagged) {
  const auto out = normalize_timeseries(rows_of({{1, 1, 1, 1}, {1, 2, 3, 4}}));
  EXPECT_TRUE(out.data.row(0).isZero());
  ASSERT_EQ(out.zero_variance_rows.size(), 1u);
  EXPECT_EQ(out.zero_variance_rows[0], 0u);
}

TEST(Normalize, TooFewTimepointsRejected) {
  EXPECT_THROW(normalize_timeseries(rows_of({{0, 2}})), ParameterError);
}

TEST(Normalize, MatchesTwoPassOracle) {
  const auto out = normalize_timeseries(rows_of({{1, 2, 3, 4, 5}}));
  // mean 3, population variance 2
  const double sd = std::sqrt(2.0);
  for (int k = 0; k < 5; ++k) EXPECT_NEAR(out.data(0, k), (k + 1 - 3.0) / sd, 1e-15);
  const auto r = testutil::random_matrix(6, 40, 5, 3.0);
  const auto n = normalize_timeseries((r.array() + 7.0).matrix());
  for (Eigen::Index i = 0; i < n.data.rows(); ++i) {
    EXPECT_LT(std::abs(n.data.row(i).mean()), 1e-9);
    EXPECT_NEAR(n.data.row(i).squaredNorm() / 40.0, 1.0, 1e-12);
  }
}

TEST(PearsonFc, CollinearAndAntiCollinear) {
  auto fc = pearson_fc(rows_of({{1, 2, 3, 4}, {2, 4, 6, 8}}));
  EXPECT_NEAR(fc.matrix(0, 1), 1.0, 1e-15);
  fc = pearson_fc(rows_of({{1, 2, 3, 4}, {4, 3, 2, 1}}));
  EXPECT_NEAR(fc.matrix(0, 1), -1.0, 1e-15);
  EXPECT_EQ(fc.matrix(0, 0), 1.0);
}

TEST(PearsonFc, MatchesOracleOnSmallRandomMatrix) {
  const auto data = testutil::random_matrix(3, 5, 99);
  const auto fc = pearson_fc(data);
  const auto oracle = oracle_pearson(data);
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index j = 0; j < 3; ++j) EXPECT_NEAR(fc.matrix(i, j), oracle(i, j), 1e-12);
}

TEST(PearsonFc, ZeroVarianceRowWarnsAndZeroes) {
  std::vector<std::string> warnings;
  auto prev = set_warning_handler([&](const std::string& m) { warnings.push_back(m); });
  const auto fc = pearson_fc(rows_of({{1, 1, 1, 1}, {1, 2, 3, 5}, {2, 1, 0, 4}}), "subj");
  set_warning_handler(prev);
  EXPECT_FALSE(warnings.empty());
  EXPECT_EQ(fc.matrix(0, 0), 1.0);
  EXPECT_EQ(fc.matrix(0, 1), 0.0);
  EXPECT_EQ(fc.matrix(2, 0), 0.0);
  EXPECT_EQ(fc.zero_variance_rows, std::vector<std::size_t>{0});
}

TEST(PearsonFc, InvariantsOverRandomMatrices) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const std::size_t v = 2 + s % 12;
    const std::size_t t = 3 + (s * 7) % 40;
    const auto fc = pearson_fc(testutil::random_matrix(v, t, s)).matrix;
    EXPECT_LE((fc - fc.transpose()).cwiseAbs().maxCoeff(), 1e-9);
    for (Eigen::Index i = 0; i < fc.rows(); ++i) EXPECT_EQ(fc(i, i), 1.0);
    EXPECT_LE(fc.cwiseAbs().maxCoeff(), 1.0);
    Eigen::SelfAdjointEigenSolver<RealMatrix> eig(fc);
    EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-8);
  }
}

TEST(PearsonFc, AffineInvariance) {
  const auto data = testutil::random_matrix(5, 30, 3);
  RealMatrix moved = data;
  for (Eigen::Index i = 0; i < moved.rows(); ++i) moved.row(i) = moved.row(i) * (0.5 + i) + RealMatrix::Constant(1, 30, 3.0 * i - 4);
  const auto a = pearson_fc(data).matrix;
  const auto b = pearson_fc(moved).matrix;
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(DropPlan, ZeroRateKeepsEverything) {
  const auto p = make_drop_plan(12, 0.0, 3);
  ASSERT_EQ(p.kept_columns.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(p.kept_columns[i], i);
  EXPECT_TRUE(p.dropped_columns().empty());
}

TEST(DropPlan, Deterministic) {
  const auto a = make_drop_plan(10, 0.2, 7);
  const auto b = make_drop_plan(10, 0.2, 7);
  EXPECT_EQ(a.kept_columns, b.kept_columns);
  EXPECT_EQ(a.kept_columns.size(), 8u);
  EXPECT_TRUE(std::is_sorted(a.kept_columns.begin(), a.kept_columns.end()));
}

TEST(DropPlan, CountRoundsTiesToEven) {
  EXPECT_EQ(drop_count(10, 0.25), 2u);  // 2.5 -> 2
  EXPECT_EQ(drop_count(14, 0.25), 4u);  // 3.5 -> 4
  EXPECT_EQ(drop_count(200, 0.15), 30u);
}

TEST(DropPlan, ParameterErrors) {
  EXPECT_THROW(make_drop_plan(10, 1.0, 1), ParameterError);
  EXPECT_THROW(make_drop_plan(10, -0.1, 1), ParameterError);
  EXPECT_THROW(make_drop_plan(4, 0.5, 1), ParameterError);
}

TEST(DropPlan, ColumnDropFrequencyIsUniform) {
  std::vector<int> dropped(10, 0);
  const int n = 10000;
  for (int s = 0; s < n; ++s)
    for (auto c : make_drop_plan(10, 0.2, static_cast<std::uint64_t>(s)).dropped_columns()) ++dropped[c];
  for (int c : dropped) EXPECT_NEAR(static_cast<double>(c) / n, 0.2, 0.02);
}

TEST(DropPlan, DifferentSeedsRarelyCollide) {
  std::set<std::vector<std::size_t>> plans;
  for (std::uint64_t s = 0; s < 100; ++s) plans.insert(make_drop_plan(60, 0.15, s).kept_columns);
  EXPECT_GE(plans.size(), 99u);
}

TEST(PfcAugment, ZeroDropIsBitwiseEqualToFc) {
  const auto data = testutil::random_matrix(7, 25, 4);
  const auto a = pfc_augment(data, make_drop_plan(25, 0.0, 1)).matrix;
  const auto b = pearson_fc(data).matrix;
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
}

TEST(PfcAugment, KeptColumnsSubsetMatchesOracle) {
  const auto data = testutil::random_matrix(2, 4, 21);
  DropPlan plan;
  plan.drop_rate = 0.25;
  plan.n_timepoints = 4;
  plan.kept_columns = {0, 2, 3};
  const auto fc = pfc_augment(data, plan);
  RealMatrix sub(2, 3);
  sub << data(0, 0), data(0, 2), data(0, 3), data(1, 0), data(1, 2), data(1, 3);
  const auto oracle = oracle_pearson(sub);
  EXPECT_NEAR(fc.matrix(0, 1), oracle(0, 1), 1e-12);
  EXPECT_EQ(fc.dropped_timepoints, std::vector<std::size_t>{1});
}

TEST(PfcAugment, DefaultRate) { EXPECT_DOUBLE_EQ(kDefaultDropRate, 0.15); }
