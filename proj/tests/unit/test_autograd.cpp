#include "cgdetr/autograd.hpp"
#include "cgdetr/errors.hpp"
#include "cgdetr/gradcheck.hpp"
#include "cgdetr/nn.hpp"
#include "cgdetr/optim.hpp"

#include <gtest/gtest.h>

#include <array>
#include <random>

using namespace cgdetr;
using ad::Matrix;
using ad::Var;

namespace {

Var random_param(std::mt19937_64& rng, int r, int c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return ad::parameter(m);
}

void expect_gradients_match(const std::string& name, const std::function<Var()>& f,
                            const std::vector<std::pair<std::string, Var>>& params) {
  const auto r = gradcheck::check_term(name, f, params);
  EXPECT_TRUE(r.passed) << name << " max rel error " << r.max_rel_error;
}

}  // namespace

TEST(Autograd, ElementwiseAndReductionGradients) {
  std::mt19937_64 rng(1);
  Var a = random_param(rng, 3, 4);
  Var b = random_param(rng, 3, 4);
  Var row = random_param(rng, 1, 4);
  Var col = random_param(rng, 3, 1);
  std::vector<std::pair<std::string, Var>> ps{{"a", a}, {"b", b}, {"row", row}, {"col", col}};
  expect_gradients_match("mul_div", [&] {
    return ad::sum(ad::div(ad::mul(a, b), ad::add_scalar(ad::exp(b), 1.0)));
  }, ps);
  expect_gradients_match("rows", [&] {
    return ad::sum(ad::mul_col(ad::sub_row(ad::add_row(a, row), row), col));
  }, ps);
  expect_gradients_match("nonlinear", [&] {
    return ad::sum(ad::add(ad::gelu(a), ad::add(ad::softplus(b), ad::sigmoid(a))));
  }, ps);
  expect_gradients_match("logsumexp_softmax", [&] {
    return ad::add(ad::logsumexp(a), ad::sum(ad::mul(ad::softmax_rows(a), b)));
  }, ps);
  expect_gradients_match("mean_rows_cols", [&] {
    return ad::sum(ad::mul(ad::mean_rows(a), ad::sum_rows(b)));
  }, ps);
}

TEST(Autograd, MatrixAndStructuralGradients) {
  std::mt19937_64 rng(2);
  Var a = random_param(rng, 3, 4);
  Var b = random_param(rng, 4, 2);
  Var c = random_param(rng, 5, 4);
  Var g = random_param(rng, 1, 4);
  Var be = random_param(rng, 1, 4);
  std::vector<std::pair<std::string, Var>> ps{{"a", a}, {"b", b}, {"c", c}, {"g", g}, {"be", be}};
  expect_gradients_match("matmul", [&] {
    return ad::sum(ad::mul(ad::matmul(a, b), ad::matmul(a, b)));
  }, ps);
  expect_gradients_match("matmul_nt", [&] { return ad::sum(ad::exp(ad::scale(ad::matmul_nt(a, c), 0.1))); }, ps);
  expect_gradients_match("transpose", [&] {
    return ad::sum(ad::mul(ad::transpose(b), ad::slice_rows(a, 0, 2)));
  }, ps);
  expect_gradients_match("layer_norm", [&] {
    return ad::sum(ad::mul(ad::layer_norm_rows(c, g, be), c));
  }, ps);
  expect_gradients_match("l2_normalize", [&] {
    return ad::sum(ad::mul(ad::l2_normalize_rows(a), ad::slice_rows(c, 1, 3)));
  }, ps);
  const std::array<int, 3> idx{2, 0, 2};
  expect_gradients_match("gather_concat", [&] {
    std::array<Var, 2> parts{ad::gather_rows(c, idx), ad::slice_cols(a, 0, 4)};
    std::array<Var, 2> cols{ad::gather_cols(a, idx), ad::slice_rows(b, 0, 3)};
    return ad::add(ad::sum(ad::exp(ad::scale(ad::concat_rows(parts), 0.3))),
                   ad::sum(ad::abs(ad::concat_cols(cols))));
  }, ps);
}

TEST(Autograd, ScalarBroadcastAndShapeErrors) {
  Var a = ad::parameter(Matrix::Constant(2, 2, 3.0));
  Var s = ad::parameter(Matrix::Constant(1, 1, 2.0));
  Var y = ad::sum(ad::mul(a, s));
  y.backward();
  EXPECT_DOUBLE_EQ(s.grad()(0, 0), 12.0);
  EXPECT_TRUE(a.grad().isApprox(Matrix::Constant(2, 2, 2.0)));
  EXPECT_THROW(ad::add(a, ad::constant(Matrix::Zero(3, 2))), ShapeError);
  EXPECT_THROW(ad::matmul(a, ad::constant(Matrix::Zero(3, 1))), ShapeError);
  EXPECT_THROW(a.backward(), ShapeError);
}

TEST(Autograd, SoftmaxHandValue) {
  Matrix l(1, 3);
  l << std::log(2.0), 0.0, 0.0;
  const Matrix w = ad::softmax_rows(ad::constant(l)).value();
  EXPECT_NEAR(w(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(w(0, 1), 0.25, 1e-12);
  EXPECT_NEAR(w(0, 2), 0.25, 1e-12);
}

TEST(Autograd, DropoutIsInvertedAndDeterministic) {
  Var x = ad::constant(Matrix::Ones(50, 40));
  std::mt19937_64 r1(5);
  std::mt19937_64 r2(5);
  const Matrix a = ad::dropout(x, 0.25, &r1).value();
  const Matrix b = ad::dropout(x, 0.25, &r2).value();
  EXPECT_EQ(a, b);
  EXPECT_NEAR(a.mean(), 1.0, 0.05);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a.data()[i] == 0.0 || std::abs(a.data()[i] - 4.0 / 3.0) < 1e-12);
  }
  EXPECT_EQ(ad::dropout(x, 0.25, nullptr).value(), x.value());
}

// Harness self-test: an op whose backward is off by a factor must fail.
TEST(GradcheckHarness, ReportsCorruptedGradient) {
  Var p = ad::parameter((Matrix(2, 2) << 0.3, -0.2, 0.7, 1.1).finished());
  auto corrupted_square = [&] {
    Matrix v = p.value().cwiseAbs2();
    Var sq = ad::make_op(v, {p}, [](const Matrix& g, auto parents) {
      parents[0]->accumulate(g.cwiseProduct(parents[0]->value) * 3.0);  // should be 2
    });
    return ad::sum(sq);
  };
  const auto bad = gradcheck::check_term("corrupted", corrupted_square, {{"p", p}});
  EXPECT_FALSE(bad.passed);
  EXPECT_GT(bad.max_rel_error, 0.1);

  const auto good = gradcheck::check_term(
      "square", [&] { return ad::sum(ad::mul(p, p)); }, {{"p", p}});
  EXPECT_TRUE(good.passed);
}

TEST(Optim, AdamMovesAgainstTheGradient) {
  nn::ParameterStore ps(1);
  Var w = ps.create("w", Matrix::Constant(1, 1, 1.0));
  optim::Adam::Options o;
  o.lr = 0.1;
  o.weight_decay = 0.0;
  optim::Adam adam(ps, o);
  for (int i = 0; i < 50; ++i) {
    ps.zero_grad();
    ad::mul(w, w).backward();
    adam.step();
  }
  EXPECT_LT(std::abs(w.value()(0, 0)), 0.2);
}

TEST(Optim, GradientClipping) {
  nn::ParameterStore ps(1);
  Var w = ps.create("w", Matrix::Constant(1, 2, 1.0));
  ad::sum(ad::scale(w, 10.0)).backward();
  const double before = optim::clip_grad_norm(ps, 1.0);
  EXPECT_NEAR(before, std::sqrt(200.0), 1e-9);
  EXPECT_NEAR(w.grad().norm(), 1.0, 1e-9);
}

TEST(ParameterStore, LayoutIsDeterministic) {
  nn::ParameterStore a(9);
  nn::ParameterStore b(9);
  nn::Linear la(a, "l", 3, 4);
  nn::Linear lb(b, "l", 3, 4);
  EXPECT_EQ(la.weight.value(), lb.weight.value());
  EXPECT_EQ(a.scalar_count(), 16u);
  EXPECT_THROW(a.create("l.weight", Matrix::Zero(1, 1)), ConfigError);
}
