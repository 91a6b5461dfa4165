#pragma once

// Moment-adaptive saliency detector: a per-instance saliency token built from
// the video context plus the top-K candidates of a learnable pool, weighted by
// clip-wise query correspondence.

#include "cgdetr/nn.hpp"

#include <span>
#include <vector>

namespace cgdetr::saliency {

using ad::Var;

/// Mean over clips, 1 x h.
Var context_token(const Var& fused);

/// C_j = sum_i a_i * softmax_j((v_i - ctx) . P_j); returns 1 x L_p.
Var candidate_weights(const Var& fused, const Var& context, const Var& pool, const Var& a_bar);

/// Indices of the k largest entries, descending; ties go to the lower index.
std::vector<int> top_k_indices(const Eigen::RowVectorXd& weights, int k);

/// T = ctx + sum over selected j of C_j * P_j.
Var build_saliency_token(const Var& context, const Var& pool, const Var& weights,
                         std::span<const int> selected);

/// s_i = <p_Q(t), v_i> / sqrt(h), L_v x 1. `query_projection` is the
/// cross-attention projector itself, not a copy.
Var saliency_scores(const Var& token, const Var& clips, const nn::Linear& query_projection);

}  // namespace cgdetr::saliency
