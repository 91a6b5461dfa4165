#include "cgdetr/errors.hpp"
#include "cgdetr/heads.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace cgdetr;
using ad::Matrix;

namespace {

Matrix randn(std::mt19937_64& rng, int r, int c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

MomentSpan grid_span(oracle::GridSpan g, int cells) {
  return span_se_to_cw(static_cast<double>(g.start) / cells, static_cast<double>(g.end) / cells);
}

double assignment_cost(const Matrix& cost, const heads::Assignment& a) {
  double t = 0.0;
  for (auto [q, g] : a) t += cost(q, g);
  return t;
}

const nn::Context kEval{};

}  // namespace

TEST(Giou, HandValues) {
  EXPECT_DOUBLE_EQ(heads::giou_1d(MomentSpan{0.3, 0.2}, MomentSpan{0.3, 0.2}), 1.0);
  EXPECT_NEAR(heads::giou_1d(span_se_to_cw(0.0, 1.0 / 3.0), span_se_to_cw(2.0 / 3.0, 1.0)),
              -1.0 / 3.0, 1e-9);
  EXPECT_DOUBLE_EQ(heads::giou_1d(span_se_to_cw(0.0, 1.0), span_se_to_cw(0.25, 0.75)), 0.5);
}

TEST(Giou, MatchesCellCountingOracle) {
  constexpr int kCells = 64;
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> pt(0, kCells);
  for (int t = 0; t < 500; ++t) {
    oracle::GridSpan a{pt(rng), pt(rng)};
    oracle::GridSpan b{pt(rng), pt(rng)};
    if (a.start > a.end) std::swap(a.start, a.end);
    if (b.start > b.end) std::swap(b.start, b.end);
    if (a.start == a.end) ++a.end;
    if (b.start == b.end) ++b.end;
    if (a.end > kCells || b.end > kCells) continue;
    EXPECT_EQ(heads::giou_1d(grid_span(a, kCells), grid_span(b, kCells)),
              oracle::giou_by_cells(a, b));
  }
}

TEST(Giou, VectorizedAgreesWithScalar) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Matrix p(6, 2);
  Matrix g(6, 2);
  for (int i = 0; i < 6; ++i) {
    p.row(i) << u(rng), u(rng) * 0.5;
    g.row(i) << u(rng), u(rng) * 0.5;
  }
  const Matrix v = heads::giou_1d(ad::constant(p), g).value();
  for (int i = 0; i < 6; ++i) {
    EXPECT_NEAR(v(i, 0), heads::giou_1d(MomentSpan{p(i, 0), p(i, 1)}, MomentSpan{g(i, 0), g(i, 1)}),
                1e-12);
  }
}

TEST(Matching, TrivialCases) {
  Matrix one(1, 1);
  one << 3.0;
  EXPECT_EQ(heads::match(one), (heads::Assignment{{0, 0}}));
  Matrix two(2, 2);
  two << 0.0, 5.0, 5.0, 0.0;
  EXPECT_EQ(heads::match(two), (heads::Assignment{{0, 0}, {1, 1}}));
  EXPECT_THROW(heads::match(Matrix::Zero(1, 2)), ConfigError);
}

TEST(Matching, AgreesWithPermutationBruteForce) {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> dim(1, 6);
  for (int t = 0; t < 200; ++t) {
    const int gts = std::min(dim(rng), 5);
    const int queries = gts + dim(rng) % 3;
    const Matrix cost = randn(rng, queries, gts);
    const double best = oracle::min_assignment_cost(cost.transpose());
    EXPECT_NEAR(assignment_cost(cost, heads::match(cost)), best, 1e-12);
    // Both solvers work on rows <= cols.
    const Matrix ct = cost.transpose();
    const auto hung = heads::hungarian(ct);
    const auto exh = heads::exhaustive_assignment(ct);
    double h = 0.0;
    double e = 0.0;
    for (int r = 0; r < gts; ++r) {
      h += ct(r, hung[static_cast<std::size_t>(r)]);
      e += ct(r, exh[static_cast<std::size_t>(r)]);
    }
    EXPECT_NEAR(h, best, 1e-12);
    EXPECT_NEAR(e, best, 1e-12);
  }
}

TEST(Decoder, UntrainedSpansAndConfidenceBounds) {
  nn::ParameterStore ps(1);
  heads::Decoder dec(ps, "dec", 2, 8, 2, 16, 10);
  std::mt19937_64 rng(1);
  const auto out = dec(ad::constant(randn(rng, 6, 8)), nn::sinusoidal_positions(6, 8), kEval);
  EXPECT_EQ(out.spans.rows(), 10);
  EXPECT_TRUE(out.spans.value().isApprox(Matrix::Constant(10, 2, 0.5)));
  const Eigen::VectorXd c = out.confidences();
  EXPECT_TRUE((c.array() > 0.0).all() && (c.array() < 1.0).all());
}

TEST(Encoder, IdentityShapeAndEquivariance) {
  nn::ParameterStore ps(2);
  std::mt19937_64 rng(2);
  const Matrix x = randn(rng, 5, 8);
  heads::Encoder none(ps, "e0", 0, 8, 2, 16);
  EXPECT_EQ(none(ad::constant(x), heads::token_and_clip_positions(4, 8), kEval).value(), x);

  heads::Encoder enc(ps, "e", 2, 8, 2, 16);
  const Matrix pos = heads::token_and_clip_positions(4, 8);
  const Matrix y = enc(ad::constant(x), pos, kEval).value();
  EXPECT_EQ(y.rows(), 5);
  EXPECT_EQ(y.cols(), 8);
  // Permute the clip rows together with their positional codes.
  const std::vector<int> perm{0, 3, 1, 4, 2};
  Matrix xp(5, 8);
  Matrix pp(5, 8);
  for (int i = 0; i < 5; ++i) {
    xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    pp.row(i) = pos.row(perm[static_cast<std::size_t>(i)]);
  }
  const Matrix yp = enc(ad::constant(xp), pp, kEval).value();
  for (int i = 0; i < 5; ++i) {
    EXPECT_LT((yp.row(i) - y.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MomentLoss, PerfectPredictionIsNearZero) {
  heads::DecoderOutput out;
  Matrix spans(2, 2);
  spans << 0.5, 0.2, 0.1, 0.1;
  Matrix fg(2, 1);
  fg << 40.0, -40.0;
  out.spans = ad::constant(spans);
  out.fg_logits = ad::constant(fg);
  const std::vector<MomentSpan> gt{{0.5, 0.2}};
  const auto l = heads::loss_mr(out, gt, {{0, 0}}, LossWeights{});
  EXPECT_NEAR(l.total.item(), 0.0, 1e-12);
}

TEST(MomentLoss, L1ArithmeticAndGiouOrdering) {
  heads::DecoderOutput out;
  out.spans = ad::constant((Matrix(1, 2) << 0.4, 0.2).finished());
  out.fg_logits = ad::constant(Matrix::Zero(1, 1));
  const std::vector<MomentSpan> gt{{0.5, 0.2}};
  const auto l = heads::loss_mr(out, gt, {{0, 0}}, LossWeights{});
  EXPECT_NEAR(l.l1.item(), 0.1, 1e-12);

  heads::DecoderOutput far;
  far.spans = ad::constant((Matrix(1, 2) << 0.1, 0.1).finished());
  far.fg_logits = out.fg_logits;
  EXPECT_GT(heads::loss_mr(far, gt, {{0, 0}}, LossWeights{}).giou.item(), l.giou.item());
}

TEST(MatchingCost, FollowsTheWeightedFormula) {
  heads::DecoderOutput out;
  out.spans = ad::constant((Matrix(2, 2) << 0.4, 0.2, 0.7, 0.3).finished());
  out.fg_logits = ad::constant((Matrix(2, 1) << 0.0, 2.0).finished());
  const std::vector<MomentSpan> gt{{0.5, 0.2}};
  LossWeights w;
  const Matrix c = heads::matching_cost(out, gt, w);
  const double expected = w.l1 * 0.1 + w.giou * (1.0 - heads::giou_1d({0.4, 0.2}, gt[0])) +
                          w.ce * (1.0 - 0.5);
  EXPECT_NEAR(c(0, 0), expected, 1e-12);
}
