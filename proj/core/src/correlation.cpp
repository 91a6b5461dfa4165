#include "cgdetr/correlation.hpp"

#include "cgdetr/errors.hpp"

#include <array>
#include <cmath>

namespace cgdetr::correlation {

PrototypeEncoder::PrototypeEncoder(nn::ParameterStore& ps, const std::string& name, int layers,
                                   int dim, int heads, int ffn_dim) {
  for (int l = 0; l < layers; ++l) {
    blocks_.emplace_back(ps, name + "." + std::to_string(l), dim, heads, ffn_dim);
  }
}

std::optional<PrototypeEncoder::Output> PrototypeEncoder::operator()(
    const Var& token, const Var& sequence, const nn::Context& ctx) const {
  if (!sequence.defined() || sequence.rows() == 0) return std::nullopt;
  std::array<Var, 2> parts{token, sequence};
  Var x = ad::concat_rows(parts);
  for (const auto& b : blocks_) x = b(x, Var{}, ctx);
  return Output{ad::slice_rows(x, 0, 1), ad::slice_rows(x, 1, sequence.rows())};
}

void build_visual_prototypes(const PrototypeEncoder& enc, const Var& moment_token,
                             const Var& clips, const Eigen::VectorXi& relevance,
                             const nn::Context& ctx, PrototypeSet& out) {
  if (relevance.size() != clips.rows()) throw ShapeError("relevance length != clip count");
  std::vector<int> pos;
  std::vector<int> neg;
  for (Eigen::Index i = 0; i < relevance.size(); ++i) {
    (relevance[i] == 1 ? pos : neg).push_back(static_cast<int>(i));
  }
  if (pos.empty() && neg.empty()) throw EmptyInstance("instance has no clips");
  out.m_pos.reset();
  out.v_hat_pos.reset();
  out.m_neg.reset();
  out.v_hat_neg.reset();
  if (!pos.empty()) {
    auto o = enc(moment_token, ad::gather_rows(clips, pos), ctx);
    out.m_pos = o->prototype;
    out.v_hat_pos = o->projected;
  }
  if (!neg.empty()) {
    auto o = enc(moment_token, ad::gather_rows(clips, neg), ctx);
    out.m_neg = o->prototype;
    out.v_hat_neg = o->projected;
  }
}

void build_textual_prototypes(const PrototypeEncoder& enc, const Var& sentence_token,
                              const Var& words, const Var& encoded_dummies,
                              const nn::Context& ctx, PrototypeSet& out) {
  auto q = enc(sentence_token, words, ctx);
  if (!q) throw EmptyQuery("sentence prototype needs at least one word");
  out.s_pos = q->prototype;
  out.q_hat = q->projected;
  auto d = enc(sentence_token, encoded_dummies, ctx);
  if (!d) throw ShapeError("sentence prototype needs at least one dummy");
  out.s_neg = d->prototype;
  out.d_hat = d->projected;
}

Var loss_align(std::span<const PrototypeSet> batch, double tau) {
  if (batch.empty()) return ad::scalar(0.0);
  if (!(tau > 0.0)) throw ConfigError("tau_align must be positive");

  // Stack every present moment prototype; remember where each instance's lie.
  std::vector<Var> moments;
  std::vector<int> pos_index(batch.size(), -1);
  std::vector<int> neg_index(batch.size(), -1);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].m_pos) {
      pos_index[b] = static_cast<int>(moments.size());
      moments.push_back(*batch[b].m_pos);
    }
    if (batch[b].m_neg) {
      neg_index[b] = static_cast<int>(moments.size());
      moments.push_back(*batch[b].m_neg);
    }
  }
  if (moments.empty()) return ad::scalar(0.0);
  Var m = ad::l2_normalize_rows(ad::concat_rows(moments));
  const double inv_tau = 1.0 / tau;

  std::vector<Var> terms;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (pos_index[b] >= 0) {
      Var logits = ad::scale(ad::matmul_nt(ad::l2_normalize_rows(batch[b].s_pos), m), inv_tau);
      Var own = ad::slice_cols(logits, pos_index[b], 1);
      terms.push_back(ad::sub(ad::logsumexp(logits), own));
    }
    if (neg_index[b] >= 0) {
      Var logits = ad::scale(ad::matmul_nt(ad::l2_normalize_rows(batch[b].s_neg), m), inv_tau);
      Var own = ad::slice_cols(logits, neg_index[b], 1);
      Var ratio = ad::exp(ad::sub(own, ad::logsumexp(logits)));
      ratio = ad::clamp(ratio, -1.0, kAlignRatioCeiling);
      terms.push_back(ad::neg(ad::log(ad::add_scalar(ad::neg(ratio), 1.0))));
    }
  }
  if (terms.empty()) return ad::scalar(0.0);
  Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

ad::Matrix guidance_map(const ad::Matrix& v_hat_pos, const ad::Matrix& q_hat,
                        const ad::Matrix& d_hat) {
  if (v_hat_pos.rows() == 0) return ad::Matrix(0, q_hat.rows() + d_hat.rows());
  ad::Matrix keys(q_hat.rows() + d_hat.rows(), q_hat.cols());
  keys << q_hat, d_hat;
  ad::Matrix logits = v_hat_pos * keys.transpose();
  if (!logits.allFinite()) throw NumericsError("guidance logits are not finite");
  ad::Matrix g(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    g.row(r) = (logits.row(r).array() - mx).exp();
    g.row(r) /= g.row(r).sum();
  }
  return g;
}

Var loss_distill(const Var& weights, const ad::Matrix& guidance,
                 const Eigen::VectorXi& relevance, std::optional<double> normalizer) {
  if (relevance.size() != weights.rows()) throw ShapeError("loss_distill: relevance length");
  std::vector<int> pos;
  for (Eigen::Index i = 0; i < relevance.size(); ++i) {
    if (relevance[i] == 1) pos.push_back(static_cast<int>(i));
  }
  if (guidance.rows() != static_cast<Eigen::Index>(pos.size()) ||
      (guidance.rows() > 0 && guidance.cols() != weights.cols())) {
    throw ShapeError("loss_distill: guidance is " + std::to_string(guidance.rows()) + "x" +
                     std::to_string(guidance.cols()) + ", expected " +
                     std::to_string(pos.size()) + "x" + std::to_string(weights.cols()));
  }
  if (pos.empty()) return ad::scalar(0.0);
  const double denom = normalizer.value_or(static_cast<double>(weights.rows()));
  Var w = ad::gather_rows(weights, pos);
  ad::Matrix log_g = guidance.cwiseMax(kDistillEps).array().log();
  Var kl = ad::mul(w, ad::sub(ad::log(w, kDistillEps), ad::constant(std::move(log_g))));
  return ad::scale(ad::sum(kl), 1.0 / denom);
}

std::pair<Var, ad::Matrix> restrict_to_text(const Var& weights, const ad::Matrix& guidance,
                                            int n_text) {
  Var w = ad::slice_cols(weights, 0, n_text);
  Var row_sum = ad::sum_cols(w);
  ad::Matrix inv = row_sum.value().cwiseMax(kDistillEps).cwiseInverse();
  // Renormalize with a differentiable division: w / rowsum(w).
  Var recip = ad::make_op(inv, {row_sum}, [](const ad::Matrix& g, auto p) {
    const ad::Matrix& s = p[0]->value;
    p[0]->accumulate(-g.cwiseQuotient(s.cwiseMax(kDistillEps).cwiseAbs2()));
  });
  Var wn = ad::mul_col(w, recip);
  ad::Matrix gn = guidance.leftCols(n_text);
  for (Eigen::Index r = 0; r < gn.rows(); ++r) gn.row(r) /= std::max(gn.row(r).sum(), kDistillEps);
  return {wn, gn};
}

}  // namespace cgdetr::correlation
