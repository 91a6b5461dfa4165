#include "cgdetr/heads.hpp"

#include "cgdetr/errors.hpp"

#include <algorithm>
#include <cmath>

namespace cgdetr::heads {

Encoder::Encoder(nn::ParameterStore& ps, const std::string& name, int layers, int dim, int heads,
                 int ffn_dim)
    : final_norm_(ps, name + ".final_norm", dim) {
  for (int l = 0; l < layers; ++l) {
    blocks_.emplace_back(ps, name + "." + std::to_string(l), dim, heads, ffn_dim);
  }
}

Var Encoder::operator()(const Var& sequence, const ad::Matrix& positions,
                        const nn::Context& ctx) const {
  if (blocks_.empty()) return sequence;
  Var pos = ad::constant(positions);
  Var x = sequence;
  for (const auto& b : blocks_) x = b(x, pos, ctx);
  return final_norm_(x);
}

ad::Matrix token_and_clip_positions(int num_clips, int dim) {
  ad::Matrix pos(num_clips + 1, dim);
  pos.row(0).setZero();
  pos.bottomRows(num_clips) = nn::sinusoidal_positions(num_clips, dim);
  return pos;
}

Eigen::VectorXd DecoderOutput::confidences() const {
  return fg_logits.value().col(0).unaryExpr([](double t) { return 1.0 / (1.0 + std::exp(-t)); });
}

MomentSpan DecoderOutput::span(Eigen::Index q) const {
  return MomentSpan{spans.value()(q, 0), spans.value()(q, 1)};
}

Decoder::Decoder(nn::ParameterStore& ps, const std::string& name, int layers, int dim, int heads,
                 int ffn_dim, int n_queries) {
  queries_ = ps.normal(name + ".queries", n_queries, dim, 1.0);
  for (int l = 0; l < layers; ++l) {
    const std::string p = name + "." + std::to_string(l);
    layers_.push_back(Layer{nn::LayerNorm(ps, p + ".norm1", dim),
                            nn::MultiHeadAttention(ps, p + ".self_attn", dim, heads),
                            nn::LayerNorm(ps, p + ".norm2", dim),
                            nn::MultiHeadAttention(ps, p + ".cross_attn", dim, heads),
                            nn::LayerNorm(ps, p + ".norm3", dim),
                            nn::FeedForward(ps, p + ".ffn", dim, ffn_dim)});
  }
  final_norm_ = nn::LayerNorm(ps, name + ".final_norm", dim);
  span_hidden_ = nn::Linear(ps, name + ".span_hidden", dim, dim);
  span_out_ = nn::Linear(ps, name + ".span_out", dim, 2);
  span_out_.weight.mutable_value().setZero();
  fg_ = nn::Linear(ps, name + ".fg", dim, 1);
}

DecoderOutput Decoder::operator()(const Var& memory, const ad::Matrix& positions,
                                  const nn::Context& ctx) const {
  Var keys = ad::add(memory, ad::constant(positions));
  Var x = queries_;
  for (const auto& l : layers_) {
    Var y = l.norm1(x);
    x = ad::add(x, ctx.drop(l.self_attn(y, y, y).out));
    x = ad::add(x, ctx.drop(l.cross_attn(l.norm2(x), keys, memory).out));
    x = ad::add(x, ctx.drop(l.ffn(l.norm3(x), ctx)));
  }
  x = final_norm_(x);
  DecoderOutput out;
  out.spans = ad::sigmoid(span_out_(ad::gelu(span_hidden_(x))));
  out.fg_logits = fg_(x);
  return out;
}

double giou_1d(const MomentSpan& a, const MomentSpan& b) {
  auto [s1, e1] = span_cw_to_se(a);
  auto [s2, e2] = span_cw_to_se(b);
  const double inter = std::max(0.0, std::min(e1, e2) - std::max(s1, s2));
  const double uni = (e1 - s1) + (e2 - s2) - inter;
  const double hull = std::max(e1, e2) - std::min(s1, s2);
  if (uni <= 0.0 || hull <= 0.0) return 0.0;
  return inter / uni - (hull - uni) / hull;
}

Var giou_1d(const Var& pred, const ad::Matrix& target) {
  if (pred.cols() != 2 || target.cols() != 2 || pred.rows() != target.rows()) {
    throw ShapeError("giou_1d: expected matching k x 2 inputs");
  }
  Var c = ad::slice_cols(pred, 0, 1);
  Var w = ad::slice_cols(pred, 1, 1);
  Var half = ad::scale(w, 0.5);
  Var s = ad::sub(c, half);
  Var e = ad::add(c, half);
  ad::Matrix ts = target.col(0) - 0.5 * target.col(1);
  ad::Matrix te = target.col(0) + 0.5 * target.col(1);
  Var inter = ad::relu(ad::sub(ad::minimum(e, te), ad::maximum(s, ts)));
  Var len_p = ad::sub(e, s);
  Var uni = ad::sub(ad::add(len_p, ad::constant(te - ts)), inter);
  Var hull = ad::sub(ad::maximum(e, te), ad::minimum(s, ts));
  // IoU - (hull - union) / hull = IoU - 1 + union / hull
  return ad::add_scalar(ad::add(ad::div(inter, uni), ad::div(uni, hull)), -1.0);
}

ad::Matrix matching_cost(const DecoderOutput& out, std::span<const MomentSpan> gts,
                         const LossWeights& w) {
  const Eigen::Index nq = out.spans.rows();
  ad::Matrix cost(nq, static_cast<Eigen::Index>(gts.size()));
  Eigen::VectorXd conf = out.confidences();
  for (Eigen::Index q = 0; q < nq; ++q) {
    MomentSpan p = out.span(q);
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double l1 = std::abs(p.center - gts[g].center) + std::abs(p.width - gts[g].width);
      cost(q, static_cast<Eigen::Index>(g)) =
          w.l1 * l1 + w.giou * (1.0 - giou_1d(p, gts[g])) + w.ce * (1.0 - conf[q]);
    }
  }
  return cost;
}

std::vector<int> hungarian(const ad::Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  if (n > m) throw ConfigError("hungarian: more rows than columns");
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is a virtual source.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] != 0) assign[static_cast<std::size_t>(p[j] - 1)] = j - 1;
  }
  return assign;
}

std::vector<int> exhaustive_assignment(const ad::Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  if (n > m) throw ConfigError("exhaustive_assignment: more rows than columns");
  std::vector<int> best(static_cast<std::size_t>(n), -1);
  std::vector<int> cur(static_cast<std::size_t>(n), -1);
  std::vector<char> used(static_cast<std::size_t>(m), 0);
  double best_cost = std::numeric_limits<double>::infinity();
  auto rec = [&](auto&& self, int row, double acc) -> void {
    // No pruning on partial sums: costs may be negative.
    if (row == n) {
      if (acc < best_cost) {
        best_cost = acc;
        best = cur;
      }
      return;
    }
    for (int j = 0; j < m; ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      used[static_cast<std::size_t>(j)] = 1;
      cur[static_cast<std::size_t>(row)] = j;
      self(self, row + 1, acc + cost(row, j));
      used[static_cast<std::size_t>(j)] = 0;
    }
  };
  rec(rec, 0, 0.0);
  return best;
}

Assignment match(const ad::Matrix& cost) {
  const auto nq = cost.rows();
  const auto ng = cost.cols();
  if (ng > nq) {
    throw ConfigError("more ground-truth spans (" + std::to_string(ng) + ") than queries (" +
                      std::to_string(nq) + ")");
  }
  ad::Matrix by_gt = cost.transpose();
  std::vector<int> q = ng <= 4 ? exhaustive_assignment(by_gt) : hungarian(by_gt);
  Assignment out;
  for (Eigen::Index g = 0; g < ng; ++g) out.emplace_back(q[static_cast<std::size_t>(g)], static_cast<int>(g));
  std::sort(out.begin(), out.end());
  return out;
}

MomentLoss loss_mr(const DecoderOutput& out, std::span<const MomentSpan> gts,
                   const Assignment& assignment, const LossWeights& w) {
  const Eigen::Index nq = out.spans.rows();
  ad::Matrix labels = ad::Matrix::Zero(nq, 1);
  MomentLoss loss;
  if (assignment.empty()) {
    loss.l1 = ad::scalar(0.0);
    loss.giou = ad::scalar(0.0);
  } else {
    std::vector<int> rows;
    ad::Matrix target(static_cast<Eigen::Index>(assignment.size()), 2);
    for (std::size_t k = 0; k < assignment.size(); ++k) {
      const auto [q, g] = assignment[k];
      if (g < 0 || static_cast<std::size_t>(g) >= gts.size()) throw ShapeError("bad assignment");
      rows.push_back(q);
      labels(q, 0) = 1.0;
      target(static_cast<Eigen::Index>(k), 0) = gts[static_cast<std::size_t>(g)].center;
      target(static_cast<Eigen::Index>(k), 1) = gts[static_cast<std::size_t>(g)].width;
    }
    const double inv_k = 1.0 / static_cast<double>(assignment.size());
    Var pred = ad::gather_rows(out.spans, rows);
    loss.l1 = ad::scale(ad::sum(ad::abs(ad::sub(pred, ad::constant(target)))), inv_k);
    Var g = giou_1d(pred, target);
    loss.giou = ad::scale(ad::sum(ad::add_scalar(ad::neg(g), 1.0)), inv_k);
  }
  // y * softplus(-x) + (1 - y) * softplus(x)
  Var x = out.fg_logits;
  Var ce = ad::add(ad::mul(ad::constant(labels), ad::softplus(ad::neg(x))),
                   ad::mul(ad::constant((1.0 - labels.array()).matrix()), ad::softplus(x)));
  loss.ce = ad::mean(ce);
  loss.total = ad::add(ad::add(ad::scale(loss.l1, w.l1), ad::scale(loss.giou, w.giou)),
                       ad::scale(loss.ce, w.ce));
  return loss;
}

}  // namespace cgdetr::heads
