#pragma once

// Adaptive cross-attention: video clips attend to text tokens plus
// query-conditioned dummy tokens that soak up the attention mass of clips
// unrelated to the query.

#include "cgdetr/nn.hpp"
#include "cgdetr/types.hpp"

#include <vector>

namespace cgdetr::attention {

using ad::Var;

/// Turns per-head logits over [text keys; dummy keys] into weights of the same
/// width. Variants other than kAca give the dummy columns exactly zero weight.
///  - kAca:          softmax over all keys
///  - kPlainSoftmax: softmax over the text keys
///  - kSigmoid:      logistic of each text logit, divided by n_text
///  - kSoftmaxOne:   exp(z_j) / (1 + sum_k exp(z_k)) over the text keys
Var attention_weights(const Var& logits, AttentionVariant variant, int n_text);

/// Dummies attend to the word states through `layers` cross-attention blocks.
class DummyEncoder {
 public:
  DummyEncoder() = default;
  DummyEncoder(nn::ParameterStore& ps, const std::string& name, int layers, int dim, int heads,
               int ffn_dim);

  /// Returns D~ (L_d x h). With zero layers (or `enabled == false`) D~ = D.
  /// Throws EmptyQuery when there are no words.
  Var operator()(const Var& dummies, const Var& words, const nn::Context& ctx,
                 bool enabled = true) const;

  std::size_t num_layers() const { return blocks_.size(); }

 private:
  std::vector<nn::CrossAttentionBlock> blocks_;
};

/// Everything one stack of cross-attention layers produces.
struct AttentionRecord {
  Var weights;                    // L_v x (L_q + L_d), averaged over heads and layers
  Var a_bar;                      // L_v x 1
  Var fused;                      // L_v x h
  std::vector<Var> head_weights;  // per layer and head, L_v x (L_q + L_d)
  int num_text = 0;
};

/// One pre-norm cross-attention layer. Queries come from clips; keys from
/// [words; dummies]; values from words only.
struct AcaLayer {
  nn::LayerNorm norm1;
  nn::MultiHeadAttention attn;
  nn::LayerNorm norm2;
  nn::FeedForward ffn;

  AcaLayer() = default;
  AcaLayer(nn::ParameterStore& ps, const std::string& name, int dim, int heads, int ffn_dim);
};

class AdaptiveCrossAttention {
 public:
  AdaptiveCrossAttention() = default;
  AdaptiveCrossAttention(nn::ParameterStore& ps, const std::string& name, int layers, int dim,
                         int heads, int ffn_dim);

  /// `dummies` may be undefined (no dummy keys). Dummy columns appear in the
  /// record whenever dummies are given, with zero weight under variants that
  /// ignore them.
  AttentionRecord operator()(const Var& clips, const Var& words, const Var& dummies,
                             AttentionVariant variant, const nn::Context& ctx) const;

  /// Baseline fusion without cross-attention: the same layers run as
  /// self-attention over [clips; words]; the clip rows are kept.
  Var self_fusion(const Var& clips, const Var& words, const nn::Context& ctx) const;

  /// p_Q of the last layer; the saliency head scores through the same object.
  const nn::Linear& query_projection() const { return layers_.back().attn.q_proj; }
  std::size_t num_layers() const { return layers_.size(); }

 private:
  std::vector<AcaLayer> layers_;
};

/// a_bar_i = sum of the first n_text columns of W.
Var query_correspondence(const Var& weights, int n_text);

inline constexpr double kBceEps = 1e-6;

/// Mean binary cross-entropy between a_bar (clamped to [eps, 1 - eps]) and the
/// binary relevance labels. Throws ShapeError on a length mismatch.
Var loss_bce(const Var& a_bar, const Eigen::VectorXi& relevance);

/// Mean |<d_m, d_n>| over ordered pairs m != n of L2-normalized dummy rows.
/// Zero for a single dummy.
Var loss_ortho(const Var& encoded_dummies);

}  // namespace cgdetr::attention
