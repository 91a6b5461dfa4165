#include "cgdetr/attention.hpp"

#include "cgdetr/errors.hpp"

#include <array>
#include <cmath>

namespace cgdetr::attention {

namespace {

Var pad_dummy_columns(const Var& text_weights, Eigen::Index n_dummy) {
  if (n_dummy == 0) return text_weights;
  std::array<Var, 2> parts{text_weights,
                           ad::constant(ad::Matrix::Zero(text_weights.rows(), n_dummy))};
  return ad::concat_cols(parts);
}

}  // namespace

Var attention_weights(const Var& logits, AttentionVariant variant, int n_text) {
  if (n_text < 1 || n_text > logits.cols()) throw ShapeError("attention_weights: bad text width");
  if (!logits.value().allFinite()) throw NumericsError("attention logits are not finite");
  const Eigen::Index n_dummy = logits.cols() - n_text;
  switch (variant) {
    case AttentionVariant::kAca:
      return ad::softmax_rows(logits);
    case AttentionVariant::kPlainSoftmax: {
      Var text = n_dummy ? ad::slice_cols(logits, 0, n_text) : logits;
      return pad_dummy_columns(ad::softmax_rows(text), n_dummy);
    }
    case AttentionVariant::kSigmoid: {
      Var text = n_dummy ? ad::slice_cols(logits, 0, n_text) : logits;
      return pad_dummy_columns(ad::scale(ad::sigmoid(text), 1.0 / n_text), n_dummy);
    }
    case AttentionVariant::kSoftmaxOne: {
      Var text = n_dummy ? ad::slice_cols(logits, 0, n_text) : logits;
      std::array<Var, 2> parts{text, ad::constant(ad::Matrix::Zero(logits.rows(), 1))};
      Var w = ad::slice_cols(ad::softmax_rows(ad::concat_cols(parts)), 0, n_text);
      return pad_dummy_columns(w, n_dummy);
    }
  }
  throw ConfigError("unknown attention variant");
}

DummyEncoder::DummyEncoder(nn::ParameterStore& ps, const std::string& name, int layers, int dim,
                           int heads, int ffn_dim) {
  for (int l = 0; l < layers; ++l) {
    blocks_.emplace_back(ps, name + "." + std::to_string(l), dim, heads, ffn_dim);
  }
}

Var DummyEncoder::operator()(const Var& dummies, const Var& words, const nn::Context& ctx,
                             bool enabled) const {
  if (words.rows() == 0) throw EmptyQuery("dummy encoding needs at least one word");
  if (!enabled) return dummies;
  Var d = dummies;
  for (const auto& b : blocks_) d = b(d, words, words, ctx);
  return d;
}

AcaLayer::AcaLayer(nn::ParameterStore& ps, const std::string& name, int dim, int heads,
                   int ffn_dim)
    : norm1(ps, name + ".norm1", dim),
      attn(ps, name + ".attn", dim, heads),
      norm2(ps, name + ".norm2", dim),
      ffn(ps, name + ".ffn", dim, ffn_dim) {}

AdaptiveCrossAttention::AdaptiveCrossAttention(nn::ParameterStore& ps, const std::string& name,
                                               int layers, int dim, int heads, int ffn_dim) {
  for (int l = 0; l < layers; ++l) {
    layers_.emplace_back(ps, name + "." + std::to_string(l), dim, heads, ffn_dim);
  }
}

AttentionRecord AdaptiveCrossAttention::operator()(const Var& clips, const Var& words,
                                                   const Var& dummies, AttentionVariant variant,
                                                   const nn::Context& ctx) const {
  if (layers_.empty()) throw ConfigError("adaptive cross-attention needs at least one layer");
  const int n_text = static_cast<int>(words.rows());
  if (n_text == 0) throw EmptyQuery("cross-attention needs at least one word");
  const bool has_dummies = dummies.defined() && dummies.rows() > 0;
  // Dummies only act as keys under the aca activation.
  const bool dummy_keys = has_dummies && variant == AttentionVariant::kAca;
  const Eigen::Index n_dummy = has_dummies ? dummies.rows() : 0;

  Var keys = words;
  if (dummy_keys) {
    std::array<Var, 2> parts{words, dummies};
    keys = ad::concat_rows(parts);
  }
  const AttentionVariant effective = has_dummies ? variant
                                     : (variant == AttentionVariant::kAca
                                            ? AttentionVariant::kPlainSoftmax
                                            : variant);
  nn::WeightFn fn = [effective, n_text](const Var& logits) {
    return attention_weights(logits, effective, n_text);
  };

  AttentionRecord rec;
  rec.num_text = n_text;
  Var x = clips;
  std::vector<Var> layer_means;
  for (const auto& layer : layers_) {
    auto res = layer.attn(layer.norm1(x), keys, words, fn);
    x = ad::add(x, ctx.drop(res.out));
    x = ad::add(x, ctx.drop(layer.ffn(layer.norm2(x), ctx)));
    Var avg = res.head_weights[0];
    for (std::size_t h = 1; h < res.head_weights.size(); ++h) {
      avg = ad::add(avg, res.head_weights[h]);
    }
    avg = ad::scale(avg, 1.0 / static_cast<double>(res.head_weights.size()));
    for (auto& w : res.head_weights) {
      rec.head_weights.push_back(
          dummy_keys ? w : pad_dummy_columns(w, n_dummy));
    }
    layer_means.push_back(dummy_keys ? avg : pad_dummy_columns(avg, n_dummy));
  }
  Var w = layer_means[0];
  for (std::size_t l = 1; l < layer_means.size(); ++l) w = ad::add(w, layer_means[l]);
  rec.weights = ad::scale(w, 1.0 / static_cast<double>(layer_means.size()));
  rec.a_bar = query_correspondence(rec.weights, n_text);
  rec.fused = x;
  return rec;
}

Var AdaptiveCrossAttention::self_fusion(const Var& clips, const Var& words,
                                        const nn::Context& ctx) const {
  if (layers_.empty()) return clips;
  std::array<Var, 2> parts{clips, words};
  Var x = ad::concat_rows(parts);
  for (const auto& layer : layers_) {
    Var y = layer.norm1(x);
    x = ad::add(x, ctx.drop(layer.attn(y, y, y).out));
    x = ad::add(x, ctx.drop(layer.ffn(layer.norm2(x), ctx)));
  }
  return ad::slice_rows(x, 0, clips.rows());
}

Var query_correspondence(const Var& weights, int n_text) {
  if (n_text < 1 || n_text > weights.cols()) throw ShapeError("query_correspondence: bad width");
  Var text = n_text == weights.cols() ? weights : ad::slice_cols(weights, 0, n_text);
  return ad::sum_cols(text);
}

Var loss_bce(const Var& a_bar, const Eigen::VectorXi& relevance) {
  if (a_bar.cols() != 1 || a_bar.rows() != relevance.size()) {
    throw ShapeError("loss_bce: a_bar has " + std::to_string(a_bar.rows()) + " rows, labels " +
                     std::to_string(relevance.size()));
  }
  const Eigen::Index n = relevance.size();
  ad::Matrix pos(n, 1);
  ad::Matrix negw(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    pos(i, 0) = relevance[i] == 1 ? 1.0 : 0.0;
    negw(i, 0) = 1.0 - pos(i, 0);
  }
  Var a = ad::clamp(a_bar, kBceEps, 1.0 - kBceEps);
  Var log_a = ad::log(a);
  Var log_1ma = ad::log(ad::add_scalar(ad::neg(a), 1.0));
  Var ll = ad::add(ad::mul(ad::constant(pos), log_a), ad::mul(ad::constant(negw), log_1ma));
  return ad::neg(ad::mean(ll));
}

Var loss_ortho(const Var& encoded_dummies) {
  const Eigen::Index n = encoded_dummies.rows();
  if (n < 2) return ad::scalar(0.0);
  Var u = ad::l2_normalize_rows(encoded_dummies);
  Var gram = ad::abs(ad::matmul_nt(u, u));
  ad::Matrix off = ad::Matrix::Ones(n, n);
  off.diagonal().setZero();
  Var total = ad::sum(ad::mul(gram, ad::constant(off)));
  return ad::scale(total, 1.0 / static_cast<double>(n * (n - 1)));
}

}  // namespace cgdetr::attention
