#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Var is a shared handle to a node in a dynamically built graph. Leaf nodes
// created with `parameter()` persist across graphs and accumulate gradients;
// every other node lives as long as some Var (or downstream node) refers to it.
// Operations whose inputs do not require gradients produce constants and record
// nothing.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

namespace cgdetr::ad {

using Matrix = Eigen::MatrixXd;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  /// Gradient after backward(); zeros when nothing flowed into this node.
  Matrix grad() const;
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return node_ != nullptr; }

  /// Seeds d(this)/d(this) = 1 and propagates; this must be 1x1. Gradients of
  /// intermediate nodes are reset first, leaf gradients accumulate.
  void backward() const;

  /// Overwrites a leaf value in place (optimizer steps, finite differences).
  Matrix& mutable_value() { return node_->value; }
  void zero_grad() const { node_->grad.resize(0, 0); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Matrix value);
Var parameter(Matrix value);
Var scalar(double v);
/// Same value, cut from the graph.
Var detach(const Var& x);

/// Builds a node from parents and a backward rule. `rule` receives the output
/// gradient and the parent nodes; it must call accumulate() on parents that
/// require gradients. Exposed for custom ops and for harness self-tests.
Var make_op(Matrix value, std::vector<Var> parents,
            std::function<void(const Matrix& grad, std::span<const std::shared_ptr<Node>>)> rule);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

// Elementwise arithmetic on equal shapes; a 1x1 operand broadcasts.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);

/// Adds a 1 x C row to every row of an R x C matrix.
Var add_row(const Var& a, const Var& row);
/// Subtracts a 1 x C row from every row.
Var sub_row(const Var& a, const Var& row);
/// Multiplies row r of a by column entry c(r, 0).
Var mul_col(const Var& a, const Var& col);

// Pointwise nonlinearities.
Var exp(const Var& a);
/// log(max(a, floor)); the gradient is zero where the floor is active.
Var log(const Var& a, double floor = 0.0);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var gelu(const Var& a);
Var relu(const Var& a);
Var abs(const Var& a);
Var clamp(const Var& a, double lo, double hi);
/// Elementwise min/max against a constant; the gradient follows the winner
/// (the variable on ties).
Var minimum(const Var& a, const Matrix& b);
Var maximum(const Var& a, const Matrix& b);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
/// 1 x C column sums.
Var sum_rows(const Var& a);
/// 1 x C column means.
Var mean_rows(const Var& a);
/// R x 1 row sums.
Var sum_cols(const Var& a);
/// log(sum(exp(a))) over every entry, 1 x 1.
Var logsumexp(const Var& a);

// Row-wise normalizations.
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

// Structure.
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index begin, Eigen::Index count);
Var gather_rows(const Var& a, std::span<const int> idx);
Var gather_cols(const Var& a, std::span<const int> idx);

/// Inverted dropout; identity when p == 0 or rng is null.
Var dropout(const Var& a, double p, std::mt19937_64* rng);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace cgdetr::ad
