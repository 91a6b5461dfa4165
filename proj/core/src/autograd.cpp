#include "cgdetr/autograd.hpp"

#include "cgdetr/errors.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>

namespace cgdetr::ad {

namespace {

using Rule = std::function<void(const Matrix&, std::span<const std::shared_ptr<Node>>)>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}

bool is_scalar(const Var& v) { return v.rows() == 1 && v.cols() == 1; }

template <typename F>
Matrix unary_map(const Matrix& m, F f) {
  return m.unaryExpr(f);
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("item() on a non-scalar");
  return node_->value(0, 0);
}

void Var::backward() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("backward() needs a scalar output");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.contains(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward) n->grad.resize(0, 0);
  }
  node_->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var parameter(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

Var detach(const Var& x) { return constant(x.value()); }

Var make_op(Matrix value, std::vector<Var> parents, Rule rule) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return Var(std::move(n));
  n->requires_grad = true;
  n->parents.reserve(parents.size());
  for (const auto& p : parents) n->parents.push_back(p.node());
  n->backward = [rule = std::move(rule)](Node& self) {
    rule(self.grad, std::span<const std::shared_ptr<Node>>(self.parents));
  };
  return Var(std::move(n));
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix v = a.value() * b.value();
  return make_op(std::move(v), {a, b}, [](const Matrix& g, auto p) {
    if (p[0]->requires_grad) p[0]->accumulate(g * p[1]->value.transpose());
    if (p[1]->requires_grad) p[1]->accumulate(p[0]->value.transpose() * g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  Matrix v = a.value() * b.value().transpose();
  return make_op(std::move(v), {a, b}, [](const Matrix& g, auto p) {
    if (p[0]->requires_grad) p[0]->accumulate(g * p[1]->value);
    if (p[1]->requires_grad) p[1]->accumulate(g.transpose() * p[0]->value);
  });
}

Var transpose(const Var& a) {
  return make_op(a.value().transpose(), {a}, [](const Matrix& g, auto p) {
    p[0]->accumulate(g.transpose());
  });
}

namespace {

// Elementwise binary op with optional 1x1 broadcast on either side.
template <typename Fwd, typename DA, typename DB>
Var binary(const Var& a, const Var& b, const char* name, Fwd fwd, DA da, DB db) {
  const bool sa = is_scalar(a) && !is_scalar(b);
  const bool sb = is_scalar(b) && !is_scalar(a);
  if (!sa && !sb) require_same_shape(a, b, name);
  const Eigen::Index r = sa ? b.rows() : a.rows();
  const Eigen::Index c = sa ? b.cols() : a.cols();
  auto expand = [&](const Var& v, bool s) -> Matrix {
    return s ? Matrix::Constant(r, c, v.value()(0, 0)) : v.value();
  };
  Matrix av = expand(a, sa);
  Matrix bv = expand(b, sb);
  Matrix v = fwd(av, bv);
  return make_op(std::move(v), {a, b},
                 [av = std::move(av), bv = std::move(bv), sa, sb, da, db](const Matrix& g, auto p) {
                   if (p[0]->requires_grad) {
                     Matrix ga = da(g, av, bv);
                     if (sa) {
                       p[0]->accumulate(Matrix::Constant(1, 1, ga.sum()));
                     } else {
                       p[0]->accumulate(ga);
                     }
                   }
                   if (p[1]->requires_grad) {
                     Matrix gb = db(g, av, bv);
                     if (sb) {
                       p[1]->accumulate(Matrix::Constant(1, 1, gb.sum()));
                     } else {
                       p[1]->accumulate(gb);
                     }
                   }
                 });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](const Matrix& x, const Matrix& y) -> Matrix { return x + y; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](const Matrix& x, const Matrix& y) -> Matrix { return x - y; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul",
      [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseProduct(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix { return g.cwiseProduct(y); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix { return g.cwiseProduct(x); });
}

Var div(const Var& a, const Var& b) {
  return binary(
      a, b, "div",
      [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseQuotient(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix { return g.cwiseQuotient(y); },
      [](const Matrix& g, const Matrix& x, const Matrix& y) -> Matrix {
        return -g.cwiseProduct(x).cwiseQuotient(y.cwiseAbs2());
      });
}

Var scale(const Var& a, double s) {
  return make_op(a.value() * s, {a}, [s](const Matrix& g, auto p) { p[0]->accumulate(g * s); });
}

Var add_scalar(const Var& a, double s) {
  return make_op(a.value().array() + s, {a}, [](const Matrix& g, auto p) { p[0]->accumulate(g); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row shape");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return make_op(std::move(v), {a, row}, [](const Matrix& g, auto p) {
    if (p[0]->requires_grad) p[0]->accumulate(g);
    if (p[1]->requires_grad) p[1]->accumulate(g.colwise().sum());
  });
}

Var sub_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("sub_row: row shape");
  Matrix v = a.value().rowwise() - row.value().row(0);
  return make_op(std::move(v), {a, row}, [](const Matrix& g, auto p) {
    if (p[0]->requires_grad) p[0]->accumulate(g);
    if (p[1]->requires_grad) p[1]->accumulate(-g.colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("mul_col: column shape");
  Matrix v = col.value().col(0).asDiagonal() * a.value();
  return make_op(std::move(v), {a, col}, [](const Matrix& g, auto p) {
    if (p[0]->requires_grad) p[0]->accumulate(p[1]->value.col(0).asDiagonal() * g);
    if (p[1]->requires_grad) p[1]->accumulate(g.cwiseProduct(p[0]->value).rowwise().sum());
  });
}

Var exp(const Var& a) {
  Matrix v = a.value().array().exp();
  Matrix y = v;
  return make_op(std::move(v), {a}, [y = std::move(y)](const Matrix& g, auto p) {
    p[0]->accumulate(g.cwiseProduct(y));
  });
}

Var log(const Var& a, double floor) {
  const Matrix& x = a.value();
  if (floor <= 0.0 && (x.array() <= 0.0).any()) {
    throw NumericsError("log of a nonpositive value");
  }
  Matrix v = unary_map(x, [floor](double t) { return std::log(std::max(t, floor)); });
  return make_op(std::move(v), {a}, [floor](const Matrix& g, auto p) {
    const Matrix& xv = p[0]->value;
    Matrix d = xv.binaryExpr(g, [floor](double t, double gg) { return t > floor ? gg / t : 0.0; });
    p[0]->accumulate(d);
  });
}

Var sigmoid(const Var& a) {
  Matrix v = unary_map(a.value(), [](double t) {
    return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
  });
  Matrix y = v;
  return make_op(std::move(v), {a}, [y = std::move(y)](const Matrix& g, auto p) {
    p[0]->accumulate(g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

Var softplus(const Var& a) {
  Matrix v = unary_map(a.value(), [](double t) {
    return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t)));
  });
  return make_op(std::move(v), {a}, [](const Matrix& g, auto p) {
    Matrix s = unary_map(p[0]->value, [](double t) {
      return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
    });
    p[0]->accumulate(g.cwiseProduct(s));
  });
}

Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double c = 0.044715;
  Matrix v = unary_map(a.value(), [](double x) {
    return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x)));
  });
  return make_op(std::move(v), {a}, [](const Matrix& g, auto p) {
    Matrix d = unary_map(p[0]->value, [](double x) {
      double t = std::tanh(k * (x + c * x * x * x));
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
    });
    p[0]->accumulate(g.cwiseProduct(d));
  });
}

Var relu(const Var& a) {
  Matrix v = a.value().cwiseMax(0.0);
  return make_op(std::move(v), {a}, [](const Matrix& g, auto p) {
    p[0]->accumulate(p[0]->value.binaryExpr(g, [](double x, double gg) { return x > 0 ? gg : 0.0; }));
  });
}

Var abs(const Var& a) {
  Matrix v = a.value().cwiseAbs();
  return make_op(std::move(v), {a}, [](const Matrix& g, auto p) {
    p[0]->accumulate(p[0]->value.binaryExpr(g, [](double x, double gg) {
      return x > 0 ? gg : (x < 0 ? -gg : 0.0);
    }));
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Matrix v = a.value().cwiseMax(lo).cwiseMin(hi);
  return make_op(std::move(v), {a}, [lo, hi](const Matrix& g, auto p) {
    p[0]->accumulate(p[0]->value.binaryExpr(g, [lo, hi](double x, double gg) {
      return (x > lo && x < hi) ? gg : 0.0;
    }));
  });
}

Var minimum(const Var& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("minimum: shape mismatch");
  Matrix mask = a.value().binaryExpr(b, [](double x, double y) { return x <= y ? 1.0 : 0.0; });
  Matrix v = a.value().cwiseMin(b);
  return make_op(std::move(v), {a}, [mask = std::move(mask)](const Matrix& g, auto p) {
    p[0]->accumulate(g.cwiseProduct(mask));
  });
}

Var maximum(const Var& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("maximum: shape mismatch");
  Matrix mask = a.value().binaryExpr(b, [](double x, double y) { return x >= y ? 1.0 : 0.0; });
  Matrix v = a.value().cwiseMax(b);
  return make_op(std::move(v), {a}, [mask = std::move(mask)](const Matrix& g, auto p) {
    p[0]->accumulate(g.cwiseProduct(mask));
  });
}

Var sum(const Var& a) {
  Matrix v = Matrix::Constant(1, 1, a.value().sum());
  return make_op(std::move(v), {a}, [](const Matrix& g, auto p) {
    p[0]->accumulate(Matrix::Constant(p[0]->value.rows(), p[0]->value.cols(), g(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of an empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(const Var& a) {
  Matrix v = a.value().colwise().sum();
  return make_op(std::move(v), {a}, [](const Matrix& g, auto p) {
    p[0]->accumulate(g.replicate(p[0]->value.rows(), 1));
  });
}

Var mean_rows(const Var& a) {
  if (a.rows() == 0) throw ShapeError("mean_rows of an empty matrix");
  return scale(sum_rows(a), 1.0 / static_cast<double>(a.rows()));
}

Var sum_cols(const Var& a) {
  Matrix v = a.value().rowwise().sum();
  return make_op(std::move(v), {a}, [](const Matrix& g, auto p) {
    p[0]->accumulate(g.replicate(1, p[0]->value.cols()));
  });
}

Var logsumexp(const Var& a) {
  if (a.value().size() == 0) throw ShapeError("logsumexp of an empty matrix");
  const double m = a.value().maxCoeff();
  if (!std::isfinite(m)) throw NumericsError("logsumexp of non-finite input");
  const double s = m + std::log((a.value().array() - m).exp().sum());
  return make_op(Matrix::Constant(1, 1, s), {a}, [s](const Matrix& g, auto p) {
    p[0]->accumulate(((p[0]->value.array() - s).exp() * g(0, 0)).matrix());
  });
}

Var softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  if (!x.allFinite()) throw NumericsError("softmax of non-finite logits");
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  Matrix yc = y;
  return make_op(std::move(y), {a}, [yc = std::move(yc)](const Matrix& g, auto p) {
    Matrix gy = g.cwiseProduct(yc);
    Eigen::VectorXd dot = gy.rowwise().sum();
    p[0]->accumulate(gy - (yc.array().colwise() * dot.array()).matrix());
  });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  const Matrix& x = a.value();
  const Eigen::Index n = x.cols();
  if (gamma.cols() != n || beta.cols() != n) throw ShapeError("layer_norm: affine shape");
  Eigen::VectorXd mu = x.rowwise().mean();
  Matrix xc = x.colwise() - mu;
  Eigen::VectorXd inv = ((xc.array().square().rowwise().sum() / static_cast<double>(n)) + eps)
                            .rsqrt()
                            .matrix();
  Matrix xhat = inv.asDiagonal() * xc;
  Matrix y = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  y.rowwise() += beta.value().row(0);
  return make_op(std::move(y), {a, gamma, beta},
                 [xhat = std::move(xhat), inv = std::move(inv), n](const Matrix& g, auto p) {
                   if (p[2]->requires_grad) p[2]->accumulate(g.colwise().sum());
                   if (p[1]->requires_grad) {
                     p[1]->accumulate(g.cwiseProduct(xhat).colwise().sum());
                   }
                   if (p[0]->requires_grad) {
                     Matrix gx = (g.array().rowwise() * p[1]->value.row(0).array()).matrix();
                     Eigen::VectorXd m1 = gx.rowwise().mean();
                     Eigen::VectorXd m2 = gx.cwiseProduct(xhat).rowwise().mean();
                     Matrix d = gx.colwise() - m1;
                     d -= (xhat.array().colwise() * m2.array()).matrix();
                     p[0]->accumulate(inv.asDiagonal() * d);
                   }
                   (void)n;
                 });
}

Var l2_normalize_rows(const Var& a, double eps) {
  const Matrix& x = a.value();
  Eigen::VectorXd norm = x.rowwise().norm().cwiseMax(eps);
  Matrix y = norm.cwiseInverse().asDiagonal() * x;
  Matrix yc = y;
  return make_op(std::move(y), {a}, [yc = std::move(yc), norm = std::move(norm)](const Matrix& g, auto p) {
    Eigen::VectorXd dot = g.cwiseProduct(yc).rowwise().sum();
    Matrix d = g - (yc.array().colwise() * dot.array()).matrix();
    p[0]->accumulate(norm.cwiseInverse().asDiagonal() * d);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const Eigen::Index c = parts[0].cols();
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += p.rows();
  }
  Matrix v(r, c);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return make_op(std::move(v), std::move(ps), [offsets](const Matrix& g, auto p) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i]->requires_grad) p[i]->accumulate(g.middleRows(offsets[i], p[i]->value.rows()));
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const Eigen::Index r = parts[0].rows();
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    c += p.cols();
  }
  Matrix v(r, c);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return make_op(std::move(v), std::move(ps), [offsets](const Matrix& g, auto p) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i]->requires_grad) p[i]->accumulate(g.middleCols(offsets[i], p[i]->value.cols()));
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw ShapeError("slice_rows out of range");
  return make_op(a.value().middleRows(begin, count), {a}, [begin, count](const Matrix& g, auto p) {
    Matrix d = Matrix::Zero(p[0]->value.rows(), p[0]->value.cols());
    d.middleRows(begin, count) = g;
    p[0]->accumulate(d);
  });
}

Var slice_cols(const Var& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) throw ShapeError("slice_cols out of range");
  return make_op(a.value().middleCols(begin, count), {a}, [begin, count](const Matrix& g, auto p) {
    Matrix d = Matrix::Zero(p[0]->value.rows(), p[0]->value.cols());
    d.middleCols(begin, count) = g;
    p[0]->accumulate(d);
  });
}

Var gather_rows(const Var& a, std::span<const int> idx) {
  Matrix v(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw ShapeError("gather_rows index out of range");
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  std::vector<int> ix(idx.begin(), idx.end());
  return make_op(std::move(v), {a}, [ix = std::move(ix)](const Matrix& g, auto p) {
    Matrix d = Matrix::Zero(p[0]->value.rows(), p[0]->value.cols());
    for (std::size_t i = 0; i < ix.size(); ++i) d.row(ix[i]) += g.row(static_cast<Eigen::Index>(i));
    p[0]->accumulate(d);
  });
}

Var gather_cols(const Var& a, std::span<const int> idx) {
  Matrix v(a.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.cols()) throw ShapeError("gather_cols index out of range");
    v.col(static_cast<Eigen::Index>(i)) = a.value().col(idx[i]);
  }
  std::vector<int> ix(idx.begin(), idx.end());
  return make_op(std::move(v), {a}, [ix = std::move(ix)](const Matrix& g, auto p) {
    Matrix d = Matrix::Zero(p[0]->value.rows(), p[0]->value.cols());
    for (std::size_t i = 0; i < ix.size(); ++i) d.col(ix[i]) += g.col(static_cast<Eigen::Index>(i));
    p[0]->accumulate(d);
  });
}

Var dropout(const Var& a, double p, std::mt19937_64* rng) {
  if (p <= 0.0 || rng == nullptr) return a;
  // Keep an element when a raw 64-bit draw falls below (1 - p) * 2^64.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(1.0 - p, 64));
  Matrix mask(a.rows(), a.cols());
  const double s = 1.0 / (1.0 - p);
  double* m = mask.data();
  for (Eigen::Index i = 0; i < mask.size(); ++i) m[i] = (*rng)() < threshold ? s : 0.0;
  Matrix v = a.value().cwiseProduct(mask);
  return make_op(std::move(v), {a}, [mask = std::move(mask)](const Matrix& g, auto pp) {
    pp[0]->accumulate(g.cwiseProduct(mask));
  });
}

}  // namespace cgdetr::ad
