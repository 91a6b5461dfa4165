#include "cgdetr/attention.hpp"
#include "cgdetr/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace cgdetr;
using ad::Matrix;

namespace {

Matrix randn(std::mt19937_64& rng, int r, int c, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

const nn::Context kEval{};

}  // namespace

TEST(AttentionWeights, EqualLogitsSpreadEvenly) {
  const Matrix w =
      attention::attention_weights(ad::constant(Matrix::Zero(5, 4)), AttentionVariant::kAca, 3)
          .value();
  EXPECT_TRUE(w.isApprox(Matrix::Constant(5, 4, 0.25)));
  const Matrix a = attention::query_correspondence(ad::constant(w), 3).value();
  EXPECT_TRUE(a.isApprox(Matrix::Constant(5, 1, 0.75)));
}

TEST(AttentionWeights, HandSoftmaxExample) {
  Matrix l(1, 3);
  l << std::log(2.0), 0.0, 0.0;
  const Matrix w = attention::attention_weights(ad::constant(l), AttentionVariant::kAca, 2).value();
  EXPECT_NEAR(w(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(w(0, 1), 0.25, 1e-12);
  EXPECT_NEAR(w(0, 2), 0.25, 1e-12);
  EXPECT_NEAR(attention::query_correspondence(ad::constant(w), 2).item(), 0.75, 1e-12);
}

TEST(AttentionWeights, PlainSoftmaxIgnoresDummies) {
  std::mt19937_64 rng(4);
  const Matrix w = attention::attention_weights(ad::constant(randn(rng, 6, 7)),
                                                AttentionVariant::kPlainSoftmax, 3)
                       .value();
  EXPECT_TRUE((w.rightCols(4).array() == 0.0).all());
  const Matrix a = attention::query_correspondence(ad::constant(w), 3).value();
  EXPECT_TRUE(a.isApprox(Matrix::Ones(6, 1)));
}

TEST(AttentionWeights, BoundedVariants) {
  std::mt19937_64 rng(5);
  for (auto v : {AttentionVariant::kSigmoid, AttentionVariant::kSoftmaxOne}) {
    const Matrix w =
        attention::attention_weights(ad::constant(randn(rng, 8, 5, 3.0)), v, 3).value();
    EXPECT_TRUE((w.array() >= 0.0).all());
    EXPECT_TRUE((w.rowwise().sum().array() <= 1.0 + 1e-12).all());
    EXPECT_TRUE((w.rightCols(2).array() == 0.0).all());
  }
}

TEST(AttentionWeights, RejectsNonFiniteLogits) {
  Matrix l = Matrix::Zero(1, 3);
  l(0, 1) = std::nan("");
  EXPECT_THROW(attention::attention_weights(ad::constant(l), AttentionVariant::kAca, 2),
               NumericsError);
}

TEST(QueryCorrespondence, Extremes) {
  Matrix dummies_only(2, 3);
  dummies_only << 0, 0, 1, 0, 0, 1;
  EXPECT_TRUE(attention::query_correspondence(ad::constant(dummies_only), 2)
                  .value()
                  .isZero());
  Matrix words_only(2, 3);
  words_only << 0.3, 0.7, 0, 1, 0, 0;
  EXPECT_TRUE(attention::query_correspondence(ad::constant(words_only), 2)
                  .value()
                  .isApprox(Matrix::Ones(2, 1)));
}

TEST(LossBce, HandValues) {
  Eigen::VectorXi rel(2);
  rel << 1, 0;
  Matrix perfect(2, 1);
  perfect << 1.0 - 1e-9, 1e-9;
  EXPECT_NEAR(attention::loss_bce(ad::constant(perfect), rel).item(), 0.0, 1e-5);
  EXPECT_NEAR(attention::loss_bce(ad::constant(Matrix::Constant(2, 1, 0.5)), rel).item(),
              std::log(2.0), 1e-9);
  Eigen::VectorXi zero(1);
  zero << 0;
  EXPECT_NEAR(attention::loss_bce(ad::constant(Matrix::Constant(1, 1, 0.9)), zero).item(),
              -std::log(0.1), 1e-9);
}

TEST(LossOrtho, HandValues) {
  Matrix orth(2, 3);
  orth << 1, 0, 0, 0, 1, 0;
  EXPECT_NEAR(attention::loss_ortho(ad::constant(orth)).item(), 0.0, 1e-12);
  Matrix same(2, 3);
  same << 0, 1, 0, 0, 1, 0;
  EXPECT_NEAR(attention::loss_ortho(ad::constant(same)).item(), 1.0, 1e-12);
  EXPECT_NEAR(attention::loss_ortho(ad::constant(Matrix::Ones(1, 3))).item(), 0.0, 1e-12);
}

TEST(DummyEncoder, ZeroLayersIsIdentity) {
  nn::ParameterStore ps(1);
  attention::DummyEncoder enc(ps, "d", 0, 8, 2, 16);
  std::mt19937_64 rng(1);
  ad::Var d = ad::constant(randn(rng, 3, 8));
  EXPECT_EQ(enc(d, ad::constant(randn(rng, 2, 8)), kEval).value(), d.value());
  attention::DummyEncoder two(ps, "e", 2, 8, 2, 16);
  EXPECT_EQ(two(d, ad::constant(randn(rng, 2, 8)), kEval, false).value(), d.value());
  EXPECT_THROW(two(d, ad::constant(Matrix(0, 8)), kEval), EmptyQuery);
}

TEST(DummyEncoder, QueryConditioned) {
  nn::ParameterStore ps(2);
  attention::DummyEncoder enc(ps, "d", 1, 8, 2, 16);
  std::mt19937_64 rng(2);
  ad::Var d = ad::constant(randn(rng, 1, 8));
  const Matrix a = enc(d, ad::constant(randn(rng, 1, 8)), kEval).value();
  const Matrix b = enc(d, ad::constant(randn(rng, 1, 8)), kEval).value();
  EXPECT_EQ(a.rows(), 1);
  EXPECT_EQ(a.cols(), 8);
  EXPECT_GT((a - b).norm(), 1e-6);
}

TEST(AdaptiveCrossAttention, RecordInvariantsOnRandomInputs) {
  nn::ParameterStore ps(3);
  attention::AdaptiveCrossAttention aca(ps, "aca", 2, 8, 2, 16);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int lv = 1 + trial % 6;
    const int lq = 1 + trial % 4;
    auto rec = aca(ad::constant(randn(rng, lv, 8)), ad::constant(randn(rng, lq, 8)),
                   ad::constant(randn(rng, 3, 8)), AttentionVariant::kAca, kEval);
    EXPECT_EQ(rec.fused.rows(), lv);
    EXPECT_EQ(rec.weights.cols(), lq + 3);
    EXPECT_EQ(rec.head_weights.size(), 4u);
    for (const auto& hw : rec.head_weights) {
      EXPECT_LT((hw.value().rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
    }
    const Matrix& a = rec.a_bar.value();
    EXPECT_TRUE((a.array() >= 0.0).all() && (a.array() <= 1.0).all());
  }
}

TEST(AdaptiveCrossAttention, WithoutDummiesAllWeightOnWords) {
  nn::ParameterStore ps(4);
  attention::AdaptiveCrossAttention aca(ps, "aca", 1, 8, 2, 16);
  std::mt19937_64 rng(4);
  auto rec = aca(ad::constant(randn(rng, 4, 8)), ad::constant(randn(rng, 3, 8)), ad::Var{},
                 AttentionVariant::kAca, kEval);
  EXPECT_TRUE(rec.a_bar.value().isApprox(Matrix::Ones(4, 1)));
}

TEST(AdaptiveCrossAttention, SaliencyProjectionIsShared) {
  nn::ParameterStore ps(5);
  attention::AdaptiveCrossAttention aca(ps, "aca", 2, 8, 2, 16);
  const auto& q = aca.query_projection();
  EXPECT_EQ(q.weight.node(), ps.find("aca.1.attn.q.weight").node());
}
