#pragma once

// Clip-word correlation learner: moment/sentence prototypes aligned by a
// batch-wise contrastive objective, a clip-word guidance map inferred in the
// aligned space, and its KL distillation into the cross-attention map.

#include "cgdetr/nn.hpp"
#include "cgdetr/types.hpp"

#include <optional>
#include <span>
#include <vector>

namespace cgdetr::correlation {

using ad::Var;

/// Self-attention stack run over [token; sequence]. No positional codes, so
/// the prototype slot is invariant to the order of the sequence rows.
class PrototypeEncoder {
 public:
  PrototypeEncoder() = default;
  PrototypeEncoder(nn::ParameterStore& ps, const std::string& name, int layers, int dim,
                   int heads, int ffn_dim);

  struct Output {
    Var prototype;  // 1 x h
    Var projected;  // n x h
  };

  /// Empty `sequence` yields no prototype.
  std::optional<Output> operator()(const Var& token, const Var& sequence,
                                   const nn::Context& ctx) const;

 private:
  std::vector<nn::SelfAttentionBlock> blocks_;
};

/// Learnable moment (M) and sentence (S) tokens, each 1 x h.
struct PrototypeTokens {
  Var moment;
  Var sentence;
};

struct PrototypeSet {
  std::optional<Var> m_pos;      // moment prototype of the positive clips
  std::optional<Var> m_neg;      // ... of the negative clips
  std::optional<Var> v_hat_pos;  // projected positive clips
  std::optional<Var> v_hat_neg;
  Var s_pos;  // sentence prototype from the words
  Var s_neg;  // sentence prototype from the encoded dummies
  Var q_hat;  // projected words
  Var d_hat;  // projected dummies
};

/// Splits clips by relevance and encodes [M; V+] and [M; V-]. A side without
/// clips has no prototype; throws EmptyInstance when both sides are empty.
void build_visual_prototypes(const PrototypeEncoder& enc, const Var& moment_token,
                             const Var& clips, const Eigen::VectorXi& relevance,
                             const nn::Context& ctx, PrototypeSet& out);

/// Encodes [S; words] and [S; D~].
void build_textual_prototypes(const PrototypeEncoder& enc, const Var& sentence_token,
                              const Var& words, const Var& encoded_dummies,
                              const nn::Context& ctx, PrototypeSet& out);

inline constexpr double kAlignRatioCeiling = 1.0 - 1e-6;

/// Batch contrastive alignment on L2-normalized prototypes. For instance b:
///   L+ = -log softmax(S+_b . M / tau)[M+_b]
///   L- = -log(1 - softmax(S-_b . M / tau)[M-_b])
/// where M ranges over every present moment prototype in the batch. Absent
/// prototypes drop out of numerators and denominators. Mean over instances.
Var loss_align(std::span<const PrototypeSet> batch, double tau);

/// Row-softmax of v_hat_pos . [q_hat; d_hat]^T. Plain values: the map is a
/// distillation target and carries no gradient.
ad::Matrix guidance_map(const ad::Matrix& v_hat_pos, const ad::Matrix& q_hat,
                        const ad::Matrix& d_hat);

inline constexpr double kDistillEps = 1e-9;

/// (1 / normalizer) sum over positive clips i and keys j of
/// W_ij log(W_ij / G_ij), with both arguments floored at kDistillEps inside
/// the log. `guidance` has one row per positive clip, in clip order.
/// `normalizer` defaults to L_v; pass the positive count for the alternative.
Var loss_distill(const Var& weights, const ad::Matrix& guidance,
                 const Eigen::VectorXi& relevance, std::optional<double> normalizer = {});

/// Keeps the first n_text columns of W and G and renormalizes every row to
/// sum to one. Used when the attention activation gives dummies no weight.
std::pair<Var, ad::Matrix> restrict_to_text(const Var& weights, const ad::Matrix& guidance,
                                            int n_text);

}  // namespace cgdetr::correlation
