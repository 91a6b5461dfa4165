#pragma once

// Highlight-detection losses, their reuse on the clip-wise query
// correspondence, and the weighted total objective.

#include "cgdetr/autograd.hpp"
#include "cgdetr/types.hpp"

#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace cgdetr::objectives {

using ad::Var;

/// Distinct positive saliency levels of an instance, ascending. Level r has
/// positives {i : saliency_i >= levels[r]} and negatives the complement.
struct RankLevels {
  std::vector<int> levels;
  std::vector<std::vector<int>> positives;
  std::vector<std::vector<int>> negatives;

  static RankLevels from_saliency(const Eigen::VectorXi& saliency);
  std::size_t size() const { return levels.size(); }
};

/// (high, low) clip indices with saliency_high > saliency_low.
using ClipPair = std::pair<int, int>;

/// Uniformly random valid pair; nullopt for constant saliency.
std::optional<ClipPair> sample_margin_pair(const Eigen::VectorXi& saliency, std::mt19937_64& rng);

/// max(0, delta + s_low - s_high); zero without a pair. `scores` is L x 1.
Var loss_margin(const Var& scores, const std::optional<ClipPair>& pair, double delta);

/// -sum_r log(sum_{pos_r} e^{s/tau} / sum_all e^{s/tau}) for one instance.
Var loss_rank_contrastive(const Var& scores, const RankLevels& levels, double tau);

/// mean_i -log(1 - sigmoid(s_i)) = mean softplus(s_i).
Var loss_negative_pair(const Var& negative_scores);

struct HighlightInputs {
  Var scores;                          // L x 1 on the matched query
  Var negative_scores;                 // L x 1 on a foreign query; undefined if none
  const Eigen::VectorXi* saliency = nullptr;
  std::optional<ClipPair> pair;
};

struct HighlightLoss {
  Var margin;
  Var rank;
  Var negative;
  Var total;
};

/// Batch highlight loss: each term averaged over the instances, the negative
/// term over the instances that have a negative pair.
HighlightLoss loss_highlight(std::span<const HighlightInputs> batch, const LossWeights& w);

/// The same objective evaluated on the clip-wise query correspondence.
inline HighlightLoss loss_attn(std::span<const HighlightInputs> a_bar_batch, const LossWeights& w) {
  return loss_highlight(a_bar_batch, w);
}

struct LossParts {
  Var mr;
  Var hl;
  Var attn;
  Var bce;
  Var ortho;
  Var align;
  Var distill;
};

/// L_mr + hl * (L_hl + L_attn + L_bce) + ortho * L_ortho + align * L_align
///   + distill * L_distill. Undefined parts count as zero.
Var total_loss(const LossParts& parts, const LossWeights& w);

}  // namespace cgdetr::objectives
