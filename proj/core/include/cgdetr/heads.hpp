#pragma once

// Transformer encoder over [saliency token; clips], a set-prediction decoder
// with learnable moment queries, and the moment-retrieval objective.

#include "cgdetr/nn.hpp"
#include "cgdetr/types.hpp"

#include <span>
#include <utility>
#include <vector>

namespace cgdetr::heads {

using ad::Var;

/// Pre-norm encoder; positional codes are added to queries and keys in every
/// layer. With zero layers the encoder is the identity.
class Encoder {
 public:
  Encoder() = default;
  Encoder(nn::ParameterStore& ps, const std::string& name, int layers, int dim, int heads,
          int ffn_dim);

  Var operator()(const Var& sequence, const ad::Matrix& positions, const nn::Context& ctx) const;

 private:
  std::vector<nn::SelfAttentionBlock> blocks_;
  nn::LayerNorm final_norm_;
};

/// Positional codes for [T; clips]: a zero row, then sinusoids per clip.
ad::Matrix token_and_clip_positions(int num_clips, int dim);

struct DecoderOutput {
  Var spans;      // n_q x 2, (center, width) through a logistic; the final
                  // span layer starts at zero so untrained spans are (0.5, 0.5)
  Var fg_logits;  // n_q x 1

  /// Logistic of fg_logits.
  Eigen::VectorXd confidences() const;
  MomentSpan span(Eigen::Index q) const;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(nn::ParameterStore& ps, const std::string& name, int layers, int dim, int heads,
          int ffn_dim, int n_queries);

  /// `memory` are encoded clips, `positions` their positional codes (added to
  /// the cross-attention keys).
  DecoderOutput operator()(const Var& memory, const ad::Matrix& positions,
                           const nn::Context& ctx) const;

  Var queries() const { return queries_; }
  const nn::Linear& span_output() const { return span_out_; }
  const nn::Linear& fg_output() const { return fg_; }

 private:
  struct Layer {
    nn::LayerNorm norm1;
    nn::MultiHeadAttention self_attn;
    nn::LayerNorm norm2;
    nn::MultiHeadAttention cross_attn;
    nn::LayerNorm norm3;
    nn::FeedForward ffn;
  };
  Var queries_;
  std::vector<Layer> layers_;
  nn::LayerNorm final_norm_;
  nn::Linear span_hidden_;
  nn::Linear span_out_;
  nn::Linear fg_;
};

/// Generalized IoU on [start, end] intervals: IoU - |hull \ union| / |hull|.
double giou_1d(const MomentSpan& a, const MomentSpan& b);

/// Differentiable gIoU between rows of `pred` (k x 2, center/width, not
/// clamped) and the matching rows of `target`. Returns k x 1.
Var giou_1d(const Var& pred, const ad::Matrix& target);

/// (query, gt) pairs of a one-to-one assignment.
using Assignment = std::vector<std::pair<int, int>>;

/// Matching cost, n_q x n_gt:
///   l1 * (|dc| + |dw|) + giou * (1 - gIoU) + ce * (1 - fg_confidence).
ad::Matrix matching_cost(const DecoderOutput& out, std::span<const MomentSpan> gts,
                         const LossWeights& w);

/// Optimal assignment of every column (gt) to a distinct row (query).
/// Exhaustive search for up to four columns, Hungarian otherwise.
/// Throws ConfigError when there are more columns than rows.
Assignment match(const ad::Matrix& cost);

/// Minimizing assignment of each row to a distinct column (rows <= cols),
/// O(n^2 m) shortest augmenting path with potentials.
std::vector<int> hungarian(const ad::Matrix& cost);

/// Enumerates all injective maps of rows into columns (rows <= cols).
std::vector<int> exhaustive_assignment(const ad::Matrix& cost);

struct MomentLoss {
  Var l1;    // mean over matched pairs of |dc| + |dw|
  Var giou;  // mean over matched pairs of 1 - gIoU
  Var ce;    // mean binary cross-entropy of fg over all queries
  Var total; // weighted sum
};

MomentLoss loss_mr(const DecoderOutput& out, std::span<const MomentSpan> gts,
                   const Assignment& assignment, const LossWeights& w);

}  // namespace cgdetr::heads
