#include "cgdetr/gradcheck.hpp"

#include "cgdetr/errors.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <random>

namespace cgdetr::gradcheck {

bool Report::passed() const {
  return std::all_of(terms.begin(), terms.end(), [](const TermResult& t) { return t.passed; });
}

std::vector<std::string> Report::failures() const {
  std::vector<std::string> out;
  for (const auto& t : terms) {
    for (const auto& g : t.groups) {
      if (!(g.rel_error <= tolerance)) out.push_back(t.term + ":" + g.name);
    }
  }
  return out;
}

TermResult check_term(const std::string& name, const std::function<ad::Var()>& f,
                      const std::vector<std::pair<std::string, ad::Var>>& params, double step,
                      double tol) {
  for (const auto& [_, p] : params) p.zero_grad();
  ad::Var loss = f();
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("check_term: loss is not a scalar");
  loss.backward();

  TermResult out;
  out.term = name;
  for (const auto& [pname, param] : params) {
    ad::Var p = param;
    const ad::Matrix analytic = p.grad();
    ad::Matrix numeric(p.rows(), p.cols());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const double orig = p.value()(r, c);
        p.mutable_value()(r, c) = orig + step;
        const double up = f().item();
        p.mutable_value()(r, c) = orig - step;
        const double down = f().item();
        p.mutable_value()(r, c) = orig;
        numeric(r, c) = (up - down) / (2.0 * step);
      }
    }
    GroupResult g;
    g.name = pname;
    g.analytic_norm = analytic.norm();
    g.numeric_norm = numeric.norm();
    const double denom = std::max({g.analytic_norm, g.numeric_norm, kNormFloor});
    g.rel_error = (analytic - numeric).norm() / denom;
    out.max_rel_error = std::max(out.max_rel_error, g.rel_error);
    out.groups.push_back(g);
  }
  out.passed = std::all_of(out.groups.begin(), out.groups.end(),
                           [&](const GroupResult& g) { return g.rel_error <= tol; });
  return out;
}

ModelConfig probe_config() {
  ModelConfig c;
  c.feature_dim = 6;
  c.hidden = 8;
  c.n_heads = 2;
  c.ffn_dim = 16;
  c.num_dummies = 2;
  c.pool_size = 3;
  c.top_k = 1;
  c.n_moment_queries = 3;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.aca_layers = 2;
  c.dummy_enc_layers = 1;
  c.moment_enc_layers = 1;
  c.sentence_enc_layers = 1;
  c.dropout = 0.0;
  return c;
}

std::vector<data::DatasetRecord> probe_batch(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto random = [&](int r, int c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
  };
  const int d = probe_config().feature_dim;
  std::vector<data::DatasetRecord> batch(2);
  const std::array<Eigen::VectorXi, 2> saliency{(Eigen::VectorXi(4) << 0, 3, 4, 0).finished(),
                                                (Eigen::VectorXi(4) << 2, 4, 0, 0).finished()};
  const std::array<MomentSpan, 2> spans{MomentSpan{0.5, 0.5}, MomentSpan{0.25, 0.5}};
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto& r = batch[b];
    r.features.clips = random(4, d);
    r.features.words = random(3, d);
    r.features.video_id = "probe_video" + std::to_string(b);
    r.features.query_id = "probe_query" + std::to_string(b);
    r.duration_s = 8.0;
    r.gt = GroundTruth::make({spans[b]}, saliency[b]);
  }
  return batch;
}

const std::vector<std::string>& term_names() {
  static const std::vector<std::string> names{"bce",  "ortho",  "align", "distill",
                                              "mr",   "margin", "rank_contrastive",
                                              "negative_pair"};
  return names;
}

namespace {

ad::Var pick_term(const BatchLoss& l, const std::string& name) {
  auto sum = [](const ad::Var& a, const ad::Var& b) { return ad::add(a, b); };
  if (name == "bce") return l.parts.bce;
  if (name == "ortho") return l.parts.ortho;
  if (name == "align") return l.parts.align;
  if (name == "distill") return l.parts.distill;
  if (name == "mr") return l.parts.mr;
  if (name == "margin") return sum(l.hl.margin, l.attn.margin);
  if (name == "rank_contrastive") return sum(l.hl.rank, l.attn.rank);
  if (name == "negative_pair") return sum(l.hl.negative, l.attn.negative);
  throw ConfigError("unknown loss term '" + name + "'");
}

}  // namespace

Report run(std::uint64_t seed, double step, double tol) {
  const auto t0 = std::chrono::steady_clock::now();
  Model model(probe_config(), seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> nd(0.0, 0.1);
  std::vector<std::pair<std::string, ad::Var>> params;
  for (const auto& [name, v] : model.parameters().entries()) {
    ad::Var p = v;
    for (Eigen::Index i = 0; i < p.mutable_value().size(); ++i) p.mutable_value().data()[i] += nd(rng);
    params.emplace_back(name, v);
  }

  const auto records = probe_batch(seed);
  std::vector<const data::DatasetRecord*> batch;
  for (const auto& r : records) batch.push_back(&r);
  LossWeights w;
  std::mt19937_64 pair_rng(seed);
  StepOptions first;
  first.pair_rng = &pair_rng;
  const std::vector<InstanceStructure> frozen = batch_loss(model, batch, w, first).structure;
  StepOptions so;
  so.frozen = &frozen;

  Report rep;
  rep.tolerance = tol;
  for (const auto& term : term_names()) {
    auto f = [&]() { return pick_term(batch_loss(model, batch, w, so), term); };
    rep.terms.push_back(check_term(term, f, params, step, tol));
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace cgdetr::gradcheck
