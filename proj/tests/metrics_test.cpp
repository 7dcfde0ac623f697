#include "densestream/metrics.hpp"

#include <gtest/gtest.h>

#include "densestream/rng.hpp"

using namespace densestream;

namespace {

// O(n^2) Mann-Whitney statistic: fraction of positive-negative pairs ordered
// correctly, ties counting 1/2. Independent of the swept-threshold route.
double pair_count_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::int64_t twice = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 0) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) twice += 2;
      else if (scores[i] == scores[j]) twice += 1;
    }
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pairs));
}

TEST(Confusion, SensitivitySpecificityArithmetic) {
  ConfusionCounts c{3, 0, 0, 1};
  EXPECT_DOUBLE_EQ(sensitivity(c).value(), 0.75);
  ConfusionCounts d{0, 9, 1, 0};
  EXPECT_DOUBLE_EQ(specificity(d).value(), 0.9);
  ConfusionCounts e{3, 9, 1, 1};
  EXPECT_DOUBLE_EQ(accuracy(e).value(), 12.0 / 14.0);
}

TEST(Confusion, AllPredictedPositiveBoundary) {
  std::vector<double> scores = {0.9, 0.8, 0.7};
  std::vector<int> labels = {1, 0, 1};
  ConfusionCounts c = confusion(scores, labels, 0.5);
  EXPECT_EQ(c.fn, 0);
  EXPECT_EQ(c.tn, 0);
  EXPECT_EQ(c.tp, 2);
  EXPECT_EQ(c.fp, 1);
}

TEST(Confusion, ZeroDenominatorReportsAbsent) {
  std::vector<double> scores = {0.1, 0.2};
  std::vector<int> labels = {0, 0};
  ConfusionCounts c = confusion(scores, labels, 0.5);
  EXPECT_FALSE(sensitivity(c).has_value());
  EXPECT_TRUE(specificity(c).has_value());
}

TEST(Confusion, PositiveAtExactThreshold) {
  ConfusionCounts c = confusion({0.5}, {1}, 0.5);
  EXPECT_EQ(c.tp, 1);
}

TEST(RocAuc, PerfectSeparation) {
  RocCurve c = roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
  EXPECT_DOUBLE_EQ(c.auc, 1.0);
}

TEST(RocAuc, AllTiedGivesHalf) {
  RocCurve c = roc_auc({0.4, 0.4, 0.4, 0.4}, {1, 0, 1, 0});
  EXPECT_DOUBLE_EQ(c.auc, 0.5);
}

TEST(RocAuc, SingleClassRejected) {
  EXPECT_THROW(roc_auc({0.3, 0.4}, {1, 1}), data_error);
}

TEST(RocAuc, EndpointsPresentAndFprMonotone) {
  RocCurve c = roc_auc({0.9, 0.5, 0.5, 0.1, 0.3}, {1, 0, 1, 0, 0});
  ASSERT_GE(c.points.size(), 2u);
  EXPECT_EQ(c.points.front().fpr, 0.0);
  EXPECT_EQ(c.points.front().sensitivity, 0.0);
  EXPECT_EQ(c.points.back().fpr, 1.0);
  EXPECT_EQ(c.points.back().sensitivity, 1.0);
  for (std::size_t i = 1; i < c.points.size(); ++i)
    EXPECT_GE(c.points[i].fpr, c.points[i - 1].fpr);
}

TEST(RocAuc, MatchesPairCountOracleOnRandomInstancesWithTies) {
  Rng rng(7u);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + rng.uniform_int(0, 49);
    std::vector<double> scores(static_cast<std::size_t>(n));
    std::vector<int> labels(static_cast<std::size_t>(n));
    // coarse score grid so ties actually occur
    for (int i = 0; i < n; ++i) {
      scores[static_cast<std::size_t>(i)] = rng.uniform_int(0, 8) / 7.0;
      labels[static_cast<std::size_t>(i)] = rng.uniform01() < 0.4 ? 1 : 0;
    }
    // ensure both classes
    labels[0] = 1;
    labels[static_cast<std::size_t>(n - 1)] = 0;
    RocCurve c = roc_auc(scores, labels);
    EXPECT_EQ(c.auc, pair_count_auc(scores, labels)) << "trial " << trial;
  }
}

TEST(RocAuc, ComplementScoresFlipAucForTieFreeInputs) {
  Rng rng(11u);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    scores.push_back(rng.uniform01());
    labels.push_back(i % 3 == 0 ? 1 : 0);
  }
  std::vector<double> neg(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) neg[i] = -scores[i];
  EXPECT_DOUBLE_EQ(roc_auc(scores, labels).auc + roc_auc(neg, labels).auc, 1.0);
}

TEST(RocAuc, InvariantUnderStrictlyIncreasingTransform) {
  Rng rng(13u);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) {
    scores.push_back(rng.uniform_int(0, 12) / 11.0);
    labels.push_back(rng.uniform01() < 0.3 ? 1 : 0);
  }
  labels[0] = 1;
  labels[1] = 0;
  std::vector<double> mapped(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    mapped[i] = std::exp(3.0 * scores[i]) + 2.0;  // strictly increasing
  EXPECT_EQ(roc_auc(scores, labels).auc, roc_auc(mapped, labels).auc);
}

TEST(RocSvg, AxesSpanUnitSquare) {
  RocCurve c = roc_auc({0.9, 0.1}, {1, 0});
  SvgSeries s;
  s.label = "fold0";
  for (const auto& p : c.points) s.xy.push_back({p.fpr, p.sensitivity});
  const std::string svg = roc_svg("roc", {s});
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("1.00"), std::string::npos);
  EXPECT_NE(svg.find("0.00"), std::string::npos);
  EXPECT_NE(svg.find("polyline"), std::string::npos);
}

}  // namespace
