#include "cgdetr/types.hpp"

#include "cgdetr/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cgdetr {

void validate_features(const FeatureSequence& f) {
  if (f.clips.rows() < 1) throw ShapeError("feature sequence has no clips");
  if (f.words.rows() < 1) throw ShapeError("feature sequence has no words");
  if (f.clips.cols() != f.words.cols()) {
    throw ShapeError("clip and word feature dims differ");
  }
  if (!f.clips.allFinite() || !f.words.allFinite()) {
    throw RangeError("non-finite feature entries");
  }
}

std::pair<double, double> span_cw_to_se(const MomentSpan& span) {
  double start = std::clamp(span.center - span.width / 2.0, 0.0, 1.0);
  double end = std::clamp(span.center + span.width / 2.0, 0.0, 1.0);
  return {start, end};
}

MomentSpan span_se_to_cw(double start, double end) {
  if (!(start < end)) {
    throw InvalidSpan("span start " + std::to_string(start) + " not before end " +
                      std::to_string(end));
  }
  return MomentSpan{(start + end) / 2.0, end - start};
}

double temporal_iou(const MomentSpan& a, const MomentSpan& b) {
  auto [s1, e1] = span_cw_to_se(a);
  auto [s2, e2] = span_cw_to_se(b);
  double inter = std::max(0.0, std::min(e1, e2) - std::max(s1, s2));
  double uni = (e1 - s1) + (e2 - s2) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<int> GroundTruth::positive_clips() const {
  std::vector<int> out;
  for (Eigen::Index i = 0; i < relevance.size(); ++i) {
    if (relevance[i] == 1) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> GroundTruth::negative_clips() const {
  std::vector<int> out;
  for (Eigen::Index i = 0; i < relevance.size(); ++i) {
    if (relevance[i] != 1) out.push_back(static_cast<int>(i));
  }
  return out;
}

GroundTruth GroundTruth::make(std::vector<MomentSpan> spans, Eigen::VectorXi saliency) {
  const auto n = saliency.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (saliency[i] < 0 || saliency[i] > kMaxSaliencyLevel) {
      throw RangeError("saliency level " + std::to_string(saliency[i]) + " outside 0.." +
                       std::to_string(kMaxSaliencyLevel));
    }
  }
  for (const auto& s : spans) {
    auto [start, end] = span_cw_to_se(s);
    for (Eigen::Index i = 0; i < n; ++i) {
      double mid = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
      if (mid >= start && mid <= end && saliency[i] == 0) saliency[i] = 1;
    }
  }
  GroundTruth gt;
  gt.spans = std::move(spans);
  gt.relevance = (saliency.array() > 0).cast<int>();
  gt.saliency = std::move(saliency);
  return gt;
}

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::kAca: return "aca";
    case AttentionVariant::kPlainSoftmax: return "plain_softmax";
    case AttentionVariant::kSigmoid: return "sigmoid";
    case AttentionVariant::kSoftmaxOne: return "softmax_one";
  }
  return "aca";
}

AttentionVariant attention_variant_from_string(const std::string& s) {
  if (s == "aca") return AttentionVariant::kAca;
  if (s == "plain_softmax") return AttentionVariant::kPlainSoftmax;
  if (s == "sigmoid") return AttentionVariant::kSigmoid;
  if (s == "softmax_one") return AttentionVariant::kSoftmaxOne;
  throw ConfigError("unknown attention variant '" + s + "'");
}

ModelConfig qvhighlights_config() { return ModelConfig{}; }

void apply_ablation_row(ModelConfig& cfg, char row) {
  if (row < 'a' || row > 'g') {
    throw ConfigError(std::string("unknown ablation row '") + row + "'");
  }
  cfg.use_cross_attention = row >= 'b';
  cfg.use_dummies = row >= 'c';
  cfg.use_dummy_encoder = row >= 'd';
  cfg.use_dummy_losses = row >= 'e';
  cfg.use_ccl = row >= 'f';
  cfg.use_msd = row >= 'g';
}

std::vector<std::string> config_violations(const ModelConfig& c) {
  std::vector<std::string> v;
  auto positive = [&](int x, const char* name) {
    if (x <= 0) v.push_back(std::string(name) + " must be positive");
  };
  auto nonneg = [&](int x, const char* name) {
    if (x < 0) v.push_back(std::string(name) + " must be nonnegative");
  };
  positive(c.feature_dim, "feature_dim");
  positive(c.hidden, "hidden");
  positive(c.n_heads, "n_heads");
  positive(c.ffn_dim, "ffn_dim");
  positive(c.num_dummies, "num_dummies");
  positive(c.pool_size, "pool_size");
  positive(c.top_k, "top_k");
  positive(c.n_moment_queries, "n_moment_queries");
  nonneg(c.enc_layers, "enc_layers");
  nonneg(c.dec_layers, "dec_layers");
  nonneg(c.aca_layers, "aca_layers");
  nonneg(c.dummy_enc_layers, "dummy_enc_layers");
  nonneg(c.moment_enc_layers, "moment_enc_layers");
  nonneg(c.sentence_enc_layers, "sentence_enc_layers");
  if (c.hidden > 0 && c.n_heads > 0 && c.hidden % c.n_heads != 0) {
    v.push_back("hidden (" + std::to_string(c.hidden) + ") is not divisible by n_heads (" +
                std::to_string(c.n_heads) + ")");
  }
  if (c.top_k > c.pool_size) {
    v.push_back("top_k (" + std::to_string(c.top_k) + ") exceeds pool_size (" +
                std::to_string(c.pool_size) + ")");
  }
  // The saliency scorer shares the query projection of the last layer.
  if (c.aca_layers < 1) v.push_back("aca_layers must be >= 1");
  auto needs = [&](bool flag, bool dep, const char* name, const char* dep_name) {
    if (flag && !dep) v.push_back(std::string(name) + " requires " + dep_name);
  };
  needs(c.use_dummy_encoder, c.use_dummies, "use_dummy_encoder", "use_dummies");
  needs(c.use_dummy_losses, c.use_dummies, "use_dummy_losses", "use_dummies");
  needs(c.use_dummy_losses, c.use_cross_attention, "use_dummy_losses", "use_cross_attention");
  needs(c.use_ccl, c.use_dummies, "use_ccl", "use_dummies");
  needs(c.use_ccl, c.use_cross_attention, "use_ccl", "use_cross_attention");
  needs(c.use_msd, c.use_cross_attention, "use_msd", "use_cross_attention");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) v.push_back("dropout must lie in [0, 1)");
  return v;
}

const ModelConfig& validate_config(const ModelConfig& cfg) {
  auto v = config_violations(cfg);
  if (!v.empty()) {
    std::ostringstream os;
    os << "invalid model config:";
    for (const auto& s : v) os << "\n  - " << s;
    throw ConfigError(os.str());
  }
  return cfg;
}

void validate_weights(const LossWeights& w) {
  for (double x : {w.hl, w.l1, w.giou, w.ce, w.ortho, w.align, w.distill, w.margin}) {
    if (!std::isfinite(x) || x < 0.0) throw ConfigError("loss weights must be finite and >= 0");
  }
  if (!(w.tau_align > 0.0) || !(w.tau_rank > 0.0)) {
    throw ConfigError("temperatures must be positive");
  }
}

namespace {

template <typename T>
void read_field(const nlohmann::json& j, const char* section, const char* name, T& out) {
  if (!j.is_object()) throw ConfigError(std::string("config section '") + section + "' is not an object");
  auto it = j.find(name);
  if (it == j.end()) {
    throw ConfigError(std::string("missing config field '") + section + "." + name + "'");
  }
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config field '") + section + "." + name + "' has the wrong type");
  }
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"feature_dim", c.feature_dim},
      {"hidden", c.hidden},
      {"n_heads", c.n_heads},
      {"ffn_dim", c.ffn_dim},
      {"num_dummies", c.num_dummies},
      {"pool_size", c.pool_size},
      {"top_k", c.top_k},
      {"n_moment_queries", c.n_moment_queries},
      {"enc_layers", c.enc_layers},
      {"dec_layers", c.dec_layers},
      {"aca_layers", c.aca_layers},
      {"dummy_enc_layers", c.dummy_enc_layers},
      {"moment_enc_layers", c.moment_enc_layers},
      {"sentence_enc_layers", c.sentence_enc_layers},
      {"dropout", c.dropout},
      {"attention_variant", to_string(c.attention_variant)},
      {"distill_normalizer",
       c.distill_normalizer == DistillNormalizer::kNumClips ? "num_clips" : "num_positives"},
      {"use_cross_attention", c.use_cross_attention},
      {"use_dummies", c.use_dummies},
      {"use_dummy_encoder", c.use_dummy_encoder},
      {"use_dummy_losses", c.use_dummy_losses},
      {"use_ccl", c.use_ccl},
      {"use_msd", c.use_msd},
      {"use_modality_embedding", c.use_modality_embedding},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const char* s = "model";
  read_field(j, s, "feature_dim", c.feature_dim);
  read_field(j, s, "hidden", c.hidden);
  read_field(j, s, "n_heads", c.n_heads);
  read_field(j, s, "ffn_dim", c.ffn_dim);
  read_field(j, s, "num_dummies", c.num_dummies);
  read_field(j, s, "pool_size", c.pool_size);
  read_field(j, s, "top_k", c.top_k);
  read_field(j, s, "n_moment_queries", c.n_moment_queries);
  read_field(j, s, "enc_layers", c.enc_layers);
  read_field(j, s, "dec_layers", c.dec_layers);
  read_field(j, s, "aca_layers", c.aca_layers);
  read_field(j, s, "dummy_enc_layers", c.dummy_enc_layers);
  read_field(j, s, "moment_enc_layers", c.moment_enc_layers);
  read_field(j, s, "sentence_enc_layers", c.sentence_enc_layers);
  read_field(j, s, "dropout", c.dropout);
  std::string variant;
  read_field(j, s, "attention_variant", variant);
  c.attention_variant = attention_variant_from_string(variant);
  std::string norm;
  read_field(j, s, "distill_normalizer", norm);
  if (norm == "num_clips") {
    c.distill_normalizer = DistillNormalizer::kNumClips;
  } else if (norm == "num_positives") {
    c.distill_normalizer = DistillNormalizer::kNumPositives;
  } else {
    throw ConfigError("unknown distill_normalizer '" + norm + "'");
  }
  read_field(j, s, "use_cross_attention", c.use_cross_attention);
  read_field(j, s, "use_dummies", c.use_dummies);
  read_field(j, s, "use_dummy_encoder", c.use_dummy_encoder);
  read_field(j, s, "use_dummy_losses", c.use_dummy_losses);
  read_field(j, s, "use_ccl", c.use_ccl);
  read_field(j, s, "use_msd", c.use_msd);
  read_field(j, s, "use_modality_embedding", c.use_modality_embedding);
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"hl", w.hl},           {"l1", w.l1},
                     {"giou", w.giou},       {"ce", w.ce},
                     {"ortho", w.ortho},     {"align", w.align},
                     {"distill", w.distill}, {"tau_align", w.tau_align},
                     {"tau_rank", w.tau_rank}, {"margin", w.margin}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  const char* s = "loss";
  read_field(j, s, "hl", w.hl);
  read_field(j, s, "l1", w.l1);
  read_field(j, s, "giou", w.giou);
  read_field(j, s, "ce", w.ce);
  read_field(j, s, "ortho", w.ortho);
  read_field(j, s, "align", w.align);
  read_field(j, s, "distill", w.distill);
  read_field(j, s, "tau_align", w.tau_align);
  read_field(j, s, "tau_rank", w.tau_rank);
  read_field(j, s, "margin", w.margin);
}

void to_json(nlohmann::json& j, const TrainOptions& t) {
  j = nlohmann::json{{"lr", t.lr},
                     {"weight_decay", t.weight_decay},
                     {"batch_size", t.batch_size},
                     {"epochs", t.epochs},
                     {"eval_every", t.eval_every},
                     {"checkpoint_every", t.checkpoint_every},
                     {"grad_clip", t.grad_clip},
                     {"positive_threshold", t.positive_threshold}};
}

void from_json(const nlohmann::json& j, TrainOptions& t) {
  const char* s = "train";
  read_field(j, s, "lr", t.lr);
  read_field(j, s, "weight_decay", t.weight_decay);
  read_field(j, s, "batch_size", t.batch_size);
  read_field(j, s, "epochs", t.epochs);
  read_field(j, s, "eval_every", t.eval_every);
  read_field(j, s, "checkpoint_every", t.checkpoint_every);
  read_field(j, s, "grad_clip", t.grad_clip);
  read_field(j, s, "positive_threshold", t.positive_threshold);
}

}  // namespace cgdetr
