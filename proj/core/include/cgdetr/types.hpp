#pragma once

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cgdetr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline constexpr int kMaxSaliencyLevel = 4;

/// Per-clip video features and per-token text features of one video/query pair.
struct FeatureSequence {
  Matrix clips;  // L_v x d_feat
  Matrix words;  // L_q x d_feat
  std::string video_id;
  std::string query_id;

  Eigen::Index num_clips() const { return clips.rows(); }
  Eigen::Index num_words() const { return words.rows(); }
  Eigen::Index feature_dim() const { return clips.cols(); }
};

/// Throws ShapeError / RangeError when the sequence is empty, ragged or non-finite.
void validate_features(const FeatureSequence& f);

/// A moment as fractions of the video duration.
struct MomentSpan {
  double center = 0.5;
  double width = 1.0;

  friend bool operator==(const MomentSpan&, const MomentSpan&) = default;
};

/// (center, width) -> (start, end), clamped to [0, 1].
std::pair<double, double> span_cw_to_se(const MomentSpan& span);

/// Inverse of span_cw_to_se. Throws InvalidSpan unless start < end.
MomentSpan span_se_to_cw(double start, double end);

/// Plain temporal IoU of two spans in normalized coordinates.
double temporal_iou(const MomentSpan& a, const MomentSpan& b);

struct GroundTruth {
  std::vector<MomentSpan> spans;
  Eigen::VectorXi saliency;  // levels 0..kMaxSaliencyLevel
  Eigen::VectorXi relevance; // a_i = 1 iff saliency_i >= 1

  Eigen::Index num_clips() const { return saliency.size(); }
  std::vector<int> positive_clips() const;
  std::vector<int> negative_clips() const;

  /// Builds the ground truth, deriving relevance from saliency. Clips whose
  /// center lies inside a span are lifted to saliency >= 1.
  static GroundTruth make(std::vector<MomentSpan> spans, Eigen::VectorXi saliency);
};

enum class AttentionVariant { kAca, kPlainSoftmax, kSigmoid, kSoftmaxOne };

std::string to_string(AttentionVariant v);
AttentionVariant attention_variant_from_string(const std::string& s);

enum class DistillNormalizer { kNumClips, kNumPositives };

struct ModelConfig {
  int feature_dim = 64;
  int hidden = 256;
  int n_heads = 8;
  int ffn_dim = 1024;
  int num_dummies = 45;
  int pool_size = 10;
  int top_k = 1;
  int n_moment_queries = 10;
  int enc_layers = 3;
  int dec_layers = 3;
  int aca_layers = 2;
  int dummy_enc_layers = 2;
  int moment_enc_layers = 1;
  int sentence_enc_layers = 1;
  double dropout = 0.1;
  AttentionVariant attention_variant = AttentionVariant::kAca;
  DistillNormalizer distill_normalizer = DistillNormalizer::kNumClips;

  // Component toggles; the defaults are the full model.
  bool use_cross_attention = true;  // off: self-attention fusion over [V; Q]
  bool use_dummies = true;          // learnable dummy keys
  bool use_dummy_encoder = true;    // query-conditioned dummies
  bool use_dummy_losses = true;     // L_bce, L_ortho, L_attn
  bool use_ccl = true;              // alignment + distillation
  bool use_msd = true;              // moment-adaptive saliency token
  bool use_modality_embedding = true;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Hyperparameters of the QVHighlights row of the implementation table.
ModelConfig qvhighlights_config();

/// Configures toggles for rows 'a'..'g' of the component ablation.
/// Throws ConfigError for any other row.
void apply_ablation_row(ModelConfig& cfg, char row);

/// Lists every violated invariant; empty when the config is valid.
std::vector<std::string> config_violations(const ModelConfig& cfg);

/// Returns cfg unchanged, or throws ConfigError listing every violation.
const ModelConfig& validate_config(const ModelConfig& cfg);

struct LossWeights {
  double hl = 1.0;
  double l1 = 10.0;
  double giou = 1.0;
  double ce = 4.0;
  double ortho = 1.0;
  double align = 1.0;
  double distill = 1.0;
  double tau_align = 0.07;
  double tau_rank = 0.5;
  double margin = 0.2;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

void validate_weights(const LossWeights& w);

struct TrainOptions {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int batch_size = 32;
  int epochs = 200;
  int eval_every = 10;
  int checkpoint_every = 50;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  int positive_threshold = 4;

  friend bool operator==(const TrainOptions&, const TrainOptions&) = default;
};

struct ScoredSpan {
  MomentSpan span;
  double confidence = 0.0;
};

struct Prediction {
  std::string query_id;
  std::string video_id;
  double duration_s = 0.0;
  std::vector<ScoredSpan> spans;  // descending confidence
  Vector saliency;
};

// JSON (de)serialization. Reading is strict: a missing field raises
// ConfigError naming it.
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);
void to_json(nlohmann::json& j, const TrainOptions& t);
void from_json(const nlohmann::json& j, TrainOptions& t);

}  // namespace cgdetr
