#include "cgdetr/saliency.hpp"

#include "cgdetr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cgdetr::saliency {

Var context_token(const Var& fused) {
  if (fused.rows() < 1) throw ShapeError("context token needs at least one clip");
  return ad::mean_rows(fused);
}

Var candidate_weights(const Var& fused, const Var& context, const Var& pool, const Var& a_bar) {
  if (a_bar.rows() != fused.rows() || a_bar.cols() != 1) {
    throw ShapeError("candidate_weights: a_bar must be L_v x 1");
  }
  Var centered = ad::sub_row(fused, context);
  Var match = ad::softmax_rows(ad::matmul_nt(centered, pool));  // L_v x L_p
  return ad::matmul(ad::transpose(a_bar), match);
}

std::vector<int> top_k_indices(const Eigen::RowVectorXd& weights, int k) {
  std::vector<int> idx(static_cast<std::size_t>(weights.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return weights[a] > weights[b]; });
  idx.resize(static_cast<std::size_t>(std::clamp<Eigen::Index>(k, 0, weights.size())));
  return idx;
}

Var build_saliency_token(const Var& context, const Var& pool, const Var& weights,
                         std::span<const int> selected) {
  if (selected.empty()) return context;
  Var c = ad::gather_cols(weights, selected);   // 1 x K
  Var p = ad::gather_rows(pool, selected);      // K x h
  return ad::add(context, ad::matmul(c, p));
}

Var saliency_scores(const Var& token, const Var& clips, const nn::Linear& query_projection) {
  if (token.rows() != 1) throw ShapeError("saliency token must be a single row");
  Var projected = query_projection(token);
  const double inv = 1.0 / std::sqrt(static_cast<double>(clips.cols()));
  return ad::scale(ad::matmul_nt(clips, projected), inv);
}

}  // namespace cgdetr::saliency
