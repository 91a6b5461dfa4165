#include "cgdetr/errors.hpp"
#include "cgdetr/saliency.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace cgdetr;
using ad::Matrix;

TEST(ContextToken, Means) {
  Matrix same(3, 2);
  same << 1, 2, 1, 2, 1, 2;
  EXPECT_TRUE(saliency::context_token(ad::constant(same)).value().isApprox(same.topRows(1)));
  Matrix opposite(2, 2);
  opposite << 1, -3, -1, 3;
  EXPECT_TRUE(saliency::context_token(ad::constant(opposite)).value().isZero());
  Matrix basis(2, 2);
  basis << 1, 0, 0, 1;
  EXPECT_TRUE(saliency::context_token(ad::constant(basis))
                  .value()
                  .isApprox((Matrix(1, 2) << 0.5, 0.5).finished()));
}

TEST(CandidateWeights, HandValues) {
  Matrix v(1, 2);
  v << 0.3, -0.7;
  Matrix pool = Matrix::Identity(2, 2);
  Matrix a(1, 1);
  a << 0.8;
  // The single clip equals the context: every candidate matches equally.
  const Matrix uniform = saliency::candidate_weights(ad::constant(v), ad::constant(v),
                                                     ad::constant(pool), ad::constant(a))
                             .value();
  EXPECT_NEAR(uniform(0, 0), 0.4, 1e-12);
  EXPECT_NEAR(uniform(0, 1), 0.4, 1e-12);

  const Matrix zero = saliency::candidate_weights(ad::constant(v), ad::constant(Matrix::Zero(1, 2)),
                                                  ad::constant(pool),
                                                  ad::constant(Matrix::Zero(1, 1)))
                          .value();
  EXPECT_TRUE(zero.isZero());

  Matrix shifted(1, 2);
  shifted << std::log(2.0), 0.0;
  const Matrix c = saliency::candidate_weights(ad::constant(shifted),
                                               ad::constant(Matrix::Zero(1, 2)),
                                               ad::constant(pool), ad::constant(Matrix::Ones(1, 1)))
                       .value();
  EXPECT_NEAR(c(0, 0), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(c(0, 1), 1.0 / 3.0, 1e-12);
}

TEST(CandidateWeights, MassEqualsQueryCorrespondence) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> u;
  Matrix v(5, 4);
  Matrix p(3, 4);
  Matrix a(5, 1);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
  auto fused = ad::constant(v);
  const Matrix c = saliency::candidate_weights(fused, saliency::context_token(fused),
                                               ad::constant(p), ad::constant(a))
                       .value();
  EXPECT_NEAR(c.sum(), a.sum(), 1e-12);
}

TEST(TopK, StableDescending) {
  Eigen::RowVectorXd w(4);
  w << 0.1, 0.5, 0.5, 0.2;
  EXPECT_EQ(saliency::top_k_indices(w, 2), (std::vector<int>{1, 2}));
  EXPECT_EQ(saliency::top_k_indices(w, 9).size(), 4u);
}

TEST(SaliencyToken, HandValues) {
  Matrix ctx(1, 2);
  ctx << 1.0, 2.0;
  Matrix pool(2, 2);
  pool << 10, 0, 0, 10;
  const std::vector<int> none;
  Matrix c0 = Matrix::Zero(1, 2);
  const std::vector<int> first{0};
  EXPECT_EQ(saliency::build_saliency_token(ad::constant(ctx), ad::constant(pool),
                                           ad::constant(c0), first)
                .value(),
            ctx);
  Matrix c(1, 2);
  c << 0.6, 0.4;
  EXPECT_TRUE(saliency::build_saliency_token(ad::constant(ctx), ad::constant(pool),
                                             ad::constant(c), first)
                  .value()
                  .isApprox((Matrix(1, 2) << 7.0, 2.0).finished()));
  const std::vector<int> all{0, 1};
  EXPECT_TRUE(saliency::build_saliency_token(ad::constant(ctx), ad::constant(pool),
                                             ad::constant(c), all)
                  .value()
                  .isApprox((Matrix(1, 2) << 7.0, 6.0).finished()));
  EXPECT_EQ(saliency::build_saliency_token(ad::constant(ctx), ad::constant(pool),
                                           ad::constant(c), none)
                .value(),
            ctx);
}

TEST(SaliencyScores, HandValuesAndSharing) {
  nn::ParameterStore ps(1);
  nn::Linear q(ps, "q", 4, 4);
  q.weight.mutable_value().setIdentity();
  Matrix t = Matrix::Zero(1, 4);
  t(0, 0) = 1.0;
  Matrix clips = Matrix::Zero(2, 4);
  clips(0, 0) = 1.0;
  clips(1, 2) = 1.0;
  const Matrix s = saliency::saliency_scores(ad::constant(t), ad::constant(clips), q).value();
  EXPECT_NEAR(s(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(s(1, 0), 0.0, 1e-12);

  // Mutating the projection through the store changes the scores.
  ps.find("q.weight").mutable_value()(0, 2) = 3.0;
  const Matrix s2 = saliency::saliency_scores(ad::constant(t), ad::constant(clips), q).value();
  EXPECT_NEAR(s2(1, 0), 1.5, 1e-12);
  EXPECT_THROW(saliency::saliency_scores(ad::constant(clips), ad::constant(clips), q), ShapeError);
}
