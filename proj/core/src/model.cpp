#include "cgdetr/model.hpp"

#include "cgdetr/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace cgdetr {

namespace {

constexpr double kTokenInitStd = 0.1;
constexpr double kModalityInitStd = 0.02;

Var mean_of(const std::vector<Var>& terms) {
  if (terms.empty()) return Var{};
  Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return ad::scale(total, 1.0 / static_cast<double>(terms.size()));
}

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(validate_config(cfg)), ps_(seed) {
  const int h = cfg.hidden;
  const int heads = cfg.n_heads;
  const int ffn = cfg.ffn_dim;
  video_in_ = nn::Linear(ps_, "input.video", cfg.feature_dim, h);
  text_in_ = nn::Linear(ps_, "input.text", cfg.feature_dim, h);
  video_modality_ = ps_.normal("modality.video", 1, h, kModalityInitStd);
  text_modality_ = ps_.normal("modality.text", 1, h, kModalityInitStd);
  dummies_ = ps_.normal("dummies", cfg.num_dummies, h, kTokenInitStd);
  dummy_enc_ = attention::DummyEncoder(ps_, "dummy_encoder", cfg.dummy_enc_layers, h, heads, ffn);
  aca_ = attention::AdaptiveCrossAttention(ps_, "cross_attention", cfg.aca_layers, h, heads, ffn);
  moment_enc_ =
      correlation::PrototypeEncoder(ps_, "moment_encoder", cfg.moment_enc_layers, h, heads, ffn);
  sentence_enc_ = correlation::PrototypeEncoder(ps_, "sentence_encoder", cfg.sentence_enc_layers,
                                                h, heads, ffn);
  moment_token_ = ps_.normal("moment_token", 1, h, kTokenInitStd);
  sentence_token_ = ps_.normal("sentence_token", 1, h, kTokenInitStd);
  pool_ = ps_.normal("saliency_pool", cfg.pool_size, h, kTokenInitStd);
  plain_token_ = ps_.normal("plain_saliency_token", 1, h, kTokenInitStd);
  encoder_ = heads::Encoder(ps_, "encoder", cfg.enc_layers, h, heads, ffn);
  decoder_ = heads::Decoder(ps_, "decoder", cfg.dec_layers, h, heads, ffn, cfg.n_moment_queries);
}

Intermediates Model::forward(const FeatureSequence& f, const ForwardOptions& opt) const {
  if (f.clips.cols() != cfg_.feature_dim || f.words.cols() != cfg_.feature_dim) {
    throw ShapeError("feature dim " + std::to_string(f.clips.cols()) + " does not match config (" +
                     std::to_string(cfg_.feature_dim) + ")");
  }
  if (f.words.rows() == 0) throw EmptyQuery("query " + f.query_id + " has no words");
  if (f.clips.rows() == 0) throw EmptyInstance("video " + f.video_id + " has no clips");
  const nn::Context ctx{opt.dropout_rng, cfg_.dropout};
  const int n_clips = static_cast<int>(f.clips.rows());

  Intermediates im;
  Var v = video_in_(ad::constant(f.clips));
  Var t = text_in_(ad::constant(f.words));
  if (cfg_.use_modality_embedding) {
    v = ad::add_row(v, video_modality_);
    t = ad::add_row(t, text_modality_);
  }
  im.clips = ctx.drop(v);
  im.words = ctx.drop(t);

  if (cfg_.use_cross_attention) {
    if (cfg_.use_dummies) {
      im.dummies = dummy_enc_(dummies_, im.words, ctx, cfg_.use_dummy_encoder);
    }
    im.attention = aca_(im.clips, im.words, im.dummies, cfg_.attention_variant, ctx);
    im.fused = im.attention.fused;
  } else {
    im.fused = aca_.self_fusion(im.clips, im.words, ctx);
  }

  if (cfg_.use_msd) {
    Var context = saliency::context_token(im.fused);
    im.candidate_weights =
        saliency::candidate_weights(im.fused, context, pool_, im.attention.a_bar);
    im.top_k = opt.frozen_top_k ? *opt.frozen_top_k
                                : saliency::top_k_indices(im.candidate_weights.value().row(0),
                                                          cfg_.top_k);
    im.token = saliency::build_saliency_token(context, pool_, im.candidate_weights, im.top_k);
  } else {
    im.token = plain_token_;
  }

  std::array<Var, 2> seq{im.token, im.fused};
  im.encoded = encoder_(ad::concat_rows(seq), heads::token_and_clip_positions(n_clips, cfg_.hidden),
                        ctx);
  Var token_enc = ad::slice_rows(im.encoded, 0, 1);
  Var clips_enc = ad::slice_rows(im.encoded, 1, n_clips);
  im.scores = saliency::saliency_scores(token_enc, clips_enc, aca_.query_projection());
  if (opt.decode) {
    im.out = decoder_(clips_enc, nn::sinusoidal_positions(n_clips, cfg_.hidden), ctx);
  }
#ifndef NDEBUG
  check_intermediates(im, cfg_.attention_variant);
#endif
  return im;
}

Prediction Model::predict(const data::DatasetRecord& r) const {
  Intermediates im = forward(r.features);
  Prediction p;
  p.query_id = r.features.query_id;
  p.video_id = r.features.video_id;
  p.duration_s = r.duration_s;
  Eigen::VectorXd conf = im.out.confidences();
  std::vector<int> order(static_cast<std::size_t>(conf.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return conf[a] > conf[b]; });
  for (int q : order) p.spans.push_back(ScoredSpan{im.out.span(q), conf[q]});
  p.saliency = im.scores.value().col(0);
  return p;
}

void check_intermediates(const Intermediates& im, AttentionVariant variant, double tol) {
  const bool normalized =
      variant == AttentionVariant::kAca || variant == AttentionVariant::kPlainSoftmax;
  for (const auto& w : im.attention.head_weights) {
    const ad::Matrix& m = w.value();
    if ((m.array() < -tol).any()) throw NumericsError("negative attention weight");
    Eigen::VectorXd sums = m.rowwise().sum();
    for (Eigen::Index i = 0; i < sums.size(); ++i) {
      if (normalized ? std::abs(sums[i] - 1.0) > tol : sums[i] > 1.0 + tol) {
        throw NumericsError("attention row " + std::to_string(i) + " sums to " +
                            std::to_string(sums[i]));
      }
    }
  }
  if (im.attention.a_bar.defined()) {
    const ad::Matrix& a = im.attention.a_bar.value();
    if ((a.array() < -tol).any() || (a.array() > 1.0 + tol).any()) {
      throw NumericsError("a_bar outside [0, 1]");
    }
  }
}

std::map<std::string, double> BatchLoss::breakdown() const {
  std::map<std::string, double> out;
  auto put = [&](const char* name, const Var& v) {
    if (v.defined()) out[name] = v.item();
  };
  put("total", total);
  put("mr", parts.mr);
  put("mr_l1", mr.l1);
  put("mr_giou", mr.giou);
  put("mr_ce", mr.ce);
  put("hl", parts.hl);
  put("hl_margin", hl.margin);
  put("hl_rank", hl.rank);
  put("hl_negative", hl.negative);
  put("attn", parts.attn);
  put("attn_margin", attn.margin);
  put("attn_rank", attn.rank);
  put("attn_negative", attn.negative);
  put("bce", parts.bce);
  put("ortho", parts.ortho);
  put("align", parts.align);
  put("distill", parts.distill);
  return out;
}

int negative_partner(std::span<const data::DatasetRecord* const> batch, std::size_t b) {
  const std::size_t n = batch.size();
  for (std::size_t k = 1; k < n; ++k) {
    const std::size_t j = (b + k) % n;
    if (batch[j]->features.video_id != batch[b]->features.video_id) return static_cast<int>(j);
  }
  return -1;
}

BatchLoss batch_loss(const Model& model, std::span<const data::DatasetRecord* const> batch,
                     const LossWeights& w, const StepOptions& opt) {
  if (batch.empty()) throw ShapeError("empty batch");
  if (!opt.frozen && !opt.pair_rng) throw ConfigError("batch_loss needs a pair rng");
  if (opt.frozen && opt.frozen->size() != batch.size()) {
    throw ShapeError("frozen structure does not match the batch");
  }
  const ModelConfig& cfg = model.config();
  const bool dummy_losses = cfg.use_dummy_losses;
  const nn::Context ctx{opt.dropout_rng, cfg.dropout};

  BatchLoss out;
  out.structure.resize(batch.size());
  std::vector<Var> mr_total, mr_l1, mr_giou, mr_ce, bce, ortho, distill;
  std::vector<objectives::HighlightInputs> hl_in(batch.size());
  std::vector<objectives::HighlightInputs> attn_in;
  std::vector<correlation::PrototypeSet> protos;

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const data::DatasetRecord& rec = *batch[b];
    InstanceStructure& st = out.structure[b];
    const InstanceStructure* frozen = opt.frozen ? &(*opt.frozen)[b] : nullptr;
    if (rec.gt.saliency.size() != rec.features.clips.rows()) {
      throw ShapeError("saliency length does not match clip count for " + rec.features.query_id);
    }

    ForwardOptions fo;
    fo.dropout_rng = opt.dropout_rng;
    fo.frozen_top_k = frozen && cfg.use_msd ? &frozen->top_k : nullptr;
    Intermediates im = model.forward(rec.features, fo);
    st.top_k = im.top_k;

    const auto& spans = rec.gt.spans;
    st.assignment = frozen ? frozen->assignment
                           : heads::match(heads::matching_cost(im.out, spans, w));
    heads::MomentLoss mr = heads::loss_mr(im.out, spans, st.assignment, w);
    mr_total.push_back(mr.total);
    mr_l1.push_back(mr.l1);
    mr_giou.push_back(mr.giou);
    mr_ce.push_back(mr.ce);

    st.negative_partner = negative_partner(batch, b);
    Intermediates neg;
    if (st.negative_partner >= 0) {
      FeatureSequence nf;
      nf.clips = rec.features.clips;
      nf.words = batch[static_cast<std::size_t>(st.negative_partner)]->features.words;
      nf.video_id = rec.features.video_id;
      nf.query_id = batch[static_cast<std::size_t>(st.negative_partner)]->features.query_id;
      ForwardOptions nfo;
      nfo.dropout_rng = opt.dropout_rng;
      nfo.decode = false;
      nfo.frozen_top_k = frozen && cfg.use_msd ? &frozen->negative_top_k : nullptr;
      neg = model.forward(nf, nfo);
      st.negative_top_k = neg.top_k;
    }

    st.score_pair = frozen ? frozen->score_pair
                           : objectives::sample_margin_pair(rec.gt.saliency, *opt.pair_rng);
    hl_in[b] = objectives::HighlightInputs{im.scores, neg.scores, &rec.gt.saliency, st.score_pair};

    if (dummy_losses) {
      st.attn_pair = frozen ? frozen->attn_pair
                            : objectives::sample_margin_pair(rec.gt.saliency, *opt.pair_rng);
      attn_in.push_back(objectives::HighlightInputs{im.attention.a_bar, neg.attention.a_bar,
                                                    &rec.gt.saliency, st.attn_pair});
      bce.push_back(attention::loss_bce(im.attention.a_bar, rec.gt.relevance));
      ortho.push_back(attention::loss_ortho(im.dummies));
    }

    if (cfg.use_ccl) {
      correlation::PrototypeSet set;
      const auto tokens = model.prototype_tokens();
      correlation::build_visual_prototypes(model.moment_encoder(), tokens.moment, im.clips,
                                           rec.gt.relevance, ctx, set);
      correlation::build_textual_prototypes(model.sentence_encoder(), tokens.sentence, im.words,
                                            im.dummies, ctx, set);
      const int n_text = im.attention.num_text;
      const Eigen::Index n_keys = im.attention.weights.cols();
      ad::Matrix g = frozen ? frozen->guidance
                     : set.v_hat_pos
                         ? correlation::guidance_map(set.v_hat_pos->value(), set.q_hat.value(),
                                                     set.d_hat.value())
                         : ad::Matrix(0, n_keys);
      st.guidance = g;
      Var weights = im.attention.weights;
      if (cfg.attention_variant != AttentionVariant::kAca) {
        auto [wn, gn] = correlation::restrict_to_text(weights, g, n_text);
        weights = wn;
        g = gn;
      }
      std::optional<double> normalizer;
      if (cfg.distill_normalizer == DistillNormalizer::kNumPositives) {
        normalizer = std::max(1.0, static_cast<double>(rec.gt.relevance.sum()));
      }
      distill.push_back(correlation::loss_distill(weights, g, rec.gt.relevance, normalizer));
      protos.push_back(std::move(set));
    }
  }

  out.mr.total = mean_of(mr_total);
  out.mr.l1 = mean_of(mr_l1);
  out.mr.giou = mean_of(mr_giou);
  out.mr.ce = mean_of(mr_ce);
  out.hl = objectives::loss_highlight(hl_in, w);
  out.parts.mr = out.mr.total;
  out.parts.hl = out.hl.total;
  if (dummy_losses) {
    out.attn = objectives::loss_attn(attn_in, w);
    out.parts.attn = out.attn.total;
    out.parts.bce = mean_of(bce);
    out.parts.ortho = mean_of(ortho);
  }
  if (cfg.use_ccl) {
    out.parts.align = correlation::loss_align(protos, w.tau_align);
    out.parts.distill = mean_of(distill);
  }
  out.total = objectives::total_loss(out.parts, w);
  return out;
}

}  // namespace cgdetr
