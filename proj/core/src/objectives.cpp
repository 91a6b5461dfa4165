#include "cgdetr/objectives.hpp"

#include "cgdetr/errors.hpp"

#include <algorithm>
#include <set>

namespace cgdetr::objectives {

RankLevels RankLevels::from_saliency(const Eigen::VectorXi& saliency) {
  std::set<int> distinct;
  for (Eigen::Index i = 0; i < saliency.size(); ++i) {
    if (saliency[i] >= 1) distinct.insert(saliency[i]);
  }
  RankLevels out;
  for (int level : distinct) {
    std::vector<int> pos;
    std::vector<int> neg;
    for (Eigen::Index i = 0; i < saliency.size(); ++i) {
      (saliency[i] >= level ? pos : neg).push_back(static_cast<int>(i));
    }
    out.levels.push_back(level);
    out.positives.push_back(std::move(pos));
    out.negatives.push_back(std::move(neg));
  }
  return out;
}

std::optional<ClipPair> sample_margin_pair(const Eigen::VectorXi& saliency, std::mt19937_64& rng) {
  std::vector<ClipPair> pairs;
  for (Eigen::Index i = 0; i < saliency.size(); ++i) {
    for (Eigen::Index j = 0; j < saliency.size(); ++j) {
      if (saliency[i] > saliency[j]) pairs.emplace_back(static_cast<int>(i), static_cast<int>(j));
    }
  }
  if (pairs.empty()) return std::nullopt;
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  return pairs[pick(rng)];
}

Var loss_margin(const Var& scores, const std::optional<ClipPair>& pair, double delta) {
  if (!pair) return ad::scalar(0.0);
  const auto [hi, lo] = *pair;
  if (hi < 0 || lo < 0 || hi >= scores.rows() || lo >= scores.rows()) {
    throw ShapeError("loss_margin: pair index out of range");
  }
  Var diff = ad::sub(ad::slice_rows(scores, lo, 1), ad::slice_rows(scores, hi, 1));
  return ad::relu(ad::add_scalar(diff, delta));
}

Var loss_rank_contrastive(const Var& scores, const RankLevels& levels, double tau) {
  if (levels.size() == 0) return ad::scalar(0.0);
  if (!(tau > 0.0)) throw ConfigError("tau_rank must be positive");
  Var z = ad::scale(scores, 1.0 / tau);
  Var all = ad::logsumexp(z);
  Var total;
  for (std::size_t r = 0; r < levels.size(); ++r) {
    Var term = ad::sub(all, ad::logsumexp(ad::gather_rows(z, levels.positives[r])));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

Var loss_negative_pair(const Var& negative_scores) {
  if (!negative_scores.defined() || negative_scores.rows() == 0) return ad::scalar(0.0);
  return ad::mean(ad::softplus(negative_scores));
}

namespace {

Var mean_of(const std::vector<Var>& terms) {
  if (terms.empty()) return ad::scalar(0.0);
  Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return ad::scale(total, 1.0 / static_cast<double>(terms.size()));
}

}  // namespace

HighlightLoss loss_highlight(std::span<const HighlightInputs> batch, const LossWeights& w) {
  std::vector<Var> margin;
  std::vector<Var> rank;
  std::vector<Var> negative;
  for (const auto& in : batch) {
    if (in.saliency == nullptr) throw ShapeError("loss_highlight: missing saliency");
    if (in.saliency->size() != in.scores.rows()) {
      throw ShapeError("loss_highlight: saliency length != score length");
    }
    margin.push_back(loss_margin(in.scores, in.pair, w.margin));
    rank.push_back(loss_rank_contrastive(in.scores, RankLevels::from_saliency(*in.saliency),
                                         w.tau_rank));
    if (in.negative_scores.defined()) negative.push_back(loss_negative_pair(in.negative_scores));
  }
  HighlightLoss out;
  out.margin = mean_of(margin);
  out.rank = mean_of(rank);
  out.negative = mean_of(negative);
  out.total = ad::add(ad::add(out.margin, out.rank), out.negative);
  return out;
}

Var total_loss(const LossParts& p, const LossWeights& w) {
  auto or_zero = [](const Var& v) { return v.defined() ? v : ad::scalar(0.0); };
  Var hl = ad::add(ad::add(or_zero(p.hl), or_zero(p.attn)), or_zero(p.bce));
  Var total = ad::add(or_zero(p.mr), ad::scale(hl, w.hl));
  total = ad::add(total, ad::scale(or_zero(p.ortho), w.ortho));
  total = ad::add(total, ad::scale(or_zero(p.align), w.align));
  total = ad::add(total, ad::scale(or_zero(p.distill), w.distill));
  return total;
}

}  // namespace cgdetr::objectives
