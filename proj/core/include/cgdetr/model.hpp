#pragma once

// The full grounding model: input projections, dummy encoding, adaptive
// cross-attention, the correlation learner (training only), the saliency
// token, the encoder/decoder and all losses of a mini-batch.

#include "cgdetr/attention.hpp"
#include "cgdetr/correlation.hpp"
#include "cgdetr/data.hpp"
#include "cgdetr/heads.hpp"
#include "cgdetr/objectives.hpp"
#include "cgdetr/saliency.hpp"

#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cgdetr {

using ad::Var;

/// Everything a forward pass computes on one video/query pair.
struct Intermediates {
  Var clips;    // projected clips, L_v x h
  Var words;    // projected words, L_q x h
  Var dummies;  // D~, L_d x h; undefined without dummies
  attention::AttentionRecord attention;  // empty for self-attention fusion
  Var fused;                 // V', L_v x h
  Var candidate_weights;     // C, 1 x L_p; undefined without the adaptive token
  std::vector<int> top_k;
  Var token;                 // T before encoding, 1 x h
  Var encoded;               // (L_v + 1) x h
  Var scores;                // L_v x 1
  heads::DecoderOutput out;  // undefined when decoding was skipped
};

struct ForwardOptions {
  std::mt19937_64* dropout_rng = nullptr;  // null: no dropout
  bool decode = true;
  const std::vector<int>* frozen_top_k = nullptr;
};

class Model {
 public:
  /// Parameter layout depends on the sizes only, never on the toggles.
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore& parameters() { return ps_; }
  const nn::ParameterStore& parameters() const { return ps_; }

  /// Throws ShapeError when the feature dim does not match the config.
  Intermediates forward(const FeatureSequence& f, const ForwardOptions& opt = {}) const;

  /// Inference: no dropout, no correlation branch.
  Prediction predict(const data::DatasetRecord& r) const;

  const attention::AdaptiveCrossAttention& cross_attention() const { return aca_; }
  const correlation::PrototypeEncoder& moment_encoder() const { return moment_enc_; }
  const correlation::PrototypeEncoder& sentence_encoder() const { return sentence_enc_; }
  correlation::PrototypeTokens prototype_tokens() const { return {moment_token_, sentence_token_}; }

 private:
  ModelConfig cfg_;
  nn::ParameterStore ps_;
  nn::Linear video_in_;
  nn::Linear text_in_;
  Var video_modality_;
  Var text_modality_;
  Var dummies_;
  attention::DummyEncoder dummy_enc_;
  attention::AdaptiveCrossAttention aca_;
  correlation::PrototypeEncoder moment_enc_;
  correlation::PrototypeEncoder sentence_enc_;
  Var moment_token_;
  Var sentence_token_;
  Var pool_;
  Var plain_token_;
  heads::Encoder encoder_;
  heads::Decoder decoder_;
};

/// Asserts the probability contracts of a forward pass: per-head attention
/// rows sum to one (at most one for the sigmoid and softmax-one activations)
/// and a_bar lies in [0, 1]. Throws NumericsError on violation.
void check_intermediates(const Intermediates& im, AttentionVariant variant, double tol = 1e-6);

/// Sampled or searched structure of one training step. Reusing it freezes
/// matching, top-K selection, margin pairs and the guidance map
/// (finite-difference probes).
struct InstanceStructure {
  heads::Assignment assignment;
  std::vector<int> top_k;
  std::optional<objectives::ClipPair> score_pair;
  std::optional<objectives::ClipPair> attn_pair;
  int negative_partner = -1;  // batch index lending its query; -1 if none
  std::vector<int> negative_top_k;
  ad::Matrix guidance;  // distillation target; a constant of the step
};

struct StepOptions {
  std::mt19937_64* dropout_rng = nullptr;
  std::mt19937_64* pair_rng = nullptr;  // required unless `frozen` is given
  const std::vector<InstanceStructure>* frozen = nullptr;
};

struct BatchLoss {
  Var total;
  objectives::LossParts parts;
  heads::MomentLoss mr;
  objectives::HighlightLoss hl;
  objectives::HighlightLoss attn;
  std::vector<InstanceStructure> structure;

  /// Named scalar values of every defined term.
  std::map<std::string, double> breakdown() const;
};

/// Index of the first later instance (cyclically) with another video id, or
/// -1 when every instance shares one video.
int negative_partner(std::span<const data::DatasetRecord* const> batch, std::size_t b);

/// Forward passes and every enabled loss for a mini-batch.
BatchLoss batch_loss(const Model& model, std::span<const data::DatasetRecord* const> batch,
                     const LossWeights& w, const StepOptions& opt);

}  // namespace cgdetr
