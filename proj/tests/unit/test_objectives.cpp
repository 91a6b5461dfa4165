#include "cgdetr/objectives.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

using namespace cgdetr;
using ad::Matrix;

namespace {

ad::Var col(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return ad::constant(m);
}

Eigen::VectorXi levels(std::initializer_list<int> v) {
  Eigen::VectorXi s(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (int x : v) s[i++] = x;
  return s;
}

}  // namespace

TEST(RankLevels, FromSaliency) {
  const auto r = objectives::RankLevels::from_saliency(levels({0, 2, 4, 2}));
  EXPECT_EQ(r.levels, (std::vector<int>{2, 4}));
  EXPECT_EQ(r.positives[0], (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(r.positives[1], (std::vector<int>{2}));
  EXPECT_EQ(r.negatives[1], (std::vector<int>{0, 1, 3}));
}

TEST(MarginPair, ValidAndUniform) {
  std::mt19937_64 rng(1);
  EXPECT_FALSE(objectives::sample_margin_pair(levels({2, 2, 2}), rng).has_value());
  const auto sal = levels({0, 1, 3});
  std::map<objectives::ClipPair, int> counts;
  for (int i = 0; i < 3000; ++i) {
    const auto p = objectives::sample_margin_pair(sal, rng);
    ASSERT_TRUE(p.has_value());
    EXPECT_GT(sal[p->first], sal[p->second]);
    ++counts[*p];
  }
  EXPECT_EQ(counts.size(), 3u);
  for (const auto& [_, c] : counts) EXPECT_NEAR(c, 1000, 150);
}

TEST(LossMargin, HandValues) {
  EXPECT_NEAR(objectives::loss_margin(col({0.8, 0.3}), {{0, 1}}, 0.2).item(), 0.0, 1e-12);
  EXPECT_NEAR(objectives::loss_margin(col({0.4, 0.3}), {{0, 1}}, 0.2).item(), 0.1, 1e-12);
  EXPECT_EQ(objectives::loss_margin(col({0.4, 0.3}), std::nullopt, 0.2).item(), 0.0);
}

TEST(LossRankContrastive, HandValuesAndMonotonicity) {
  const auto all_pos = objectives::RankLevels::from_saliency(levels({2, 2}));
  EXPECT_NEAR(objectives::loss_rank_contrastive(col({0.3, -1.0}), all_pos, 0.5).item(), 0.0,
              1e-12);
  const auto one_each = objectives::RankLevels::from_saliency(levels({1, 0}));
  EXPECT_NEAR(objectives::loss_rank_contrastive(col({0.2, 0.2}), one_each, 0.5).item(),
              std::log(2.0), 1e-12);
  const auto r = objectives::RankLevels::from_saliency(levels({3, 1, 0, 2}));
  double prev = objectives::loss_rank_contrastive(col({0.0, 0.1, 0.2, 0.3}), r, 0.5).item();
  for (double s = 0.5; s < 3.0; s += 0.5) {
    const double cur = objectives::loss_rank_contrastive(col({s, 0.1, 0.2, 0.3}), r, 0.5).item();
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(LossNegativePair, HandValues) {
  EXPECT_NEAR(objectives::loss_negative_pair(col({0.0, 0.0})).item(), std::log(2.0), 1e-12);
  EXPECT_LT(objectives::loss_negative_pair(col({-40.0})).item(), 1e-15);
}

TEST(LossHighlight, NegativeTermOnlyWithPartner) {
  const auto sal = levels({0, 4});
  objectives::HighlightInputs in;
  in.scores = col({0.0, 1.0});
  in.saliency = &sal;
  in.pair = objectives::ClipPair{1, 0};
  std::vector<objectives::HighlightInputs> batch{in};
  const auto l = objectives::loss_highlight(batch, LossWeights{});
  EXPECT_EQ(l.negative.item(), 0.0);
  EXPECT_NEAR(l.margin.item(), 0.0, 1e-12);

  in.negative_scores = col({0.0, 0.0});
  std::vector<objectives::HighlightInputs> with{in, in};
  with[1].negative_scores = ad::Var{};
  EXPECT_NEAR(objectives::loss_highlight(with, LossWeights{}).negative.item(), std::log(2.0),
              1e-12);
}

TEST(LossAttn, SameObjectiveOnCorrespondence) {
  const auto sal = levels({0, 4});
  objectives::HighlightInputs in;
  in.scores = col({0.5, 0.5});  // constant correspondence
  in.saliency = &sal;
  in.pair = objectives::ClipPair{1, 0};
  std::vector<objectives::HighlightInputs> batch{in};
  const auto a = objectives::loss_attn(batch, LossWeights{});
  const auto h = objectives::loss_highlight(batch, LossWeights{});
  EXPECT_EQ(a.total.item(), h.total.item());
  EXPECT_NEAR(a.rank.item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(a.margin.item(), LossWeights{}.margin, 1e-12);
}

TEST(TotalLoss, Linearity) {
  LossWeights w;
  objectives::LossParts parts;
  parts.mr = ad::scalar(0.0);
  EXPECT_EQ(objectives::total_loss(parts, w).item(), 0.0);
  objectives::LossParts ortho;
  ortho.ortho = ad::scalar(1.0);
  w.ortho = 1.0;
  EXPECT_EQ(objectives::total_loss(ortho, w).item(), 1.0);
  objectives::LossParts d;
  d.distill = ad::scalar(0.7);
  w.distill = 1.0;
  const double once = objectives::total_loss(d, w).item();
  w.distill = 2.0;
  EXPECT_NEAR(objectives::total_loss(d, w).item(), 2.0 * once, 1e-12);
}
