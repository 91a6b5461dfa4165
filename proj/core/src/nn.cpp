#include "cgdetr/nn.hpp"

#include "cgdetr/errors.hpp"

#include <cmath>

namespace cgdetr::nn {

Var ParameterStore::create(const std::string& name, Matrix init) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  Var v = ad::parameter(std::move(init));
  index_[name] = entries_.size();
  entries_.emplace_back(name, v);
  return v;
}

Var ParameterStore::xavier(const std::string& name, int fan_in, int fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Matrix m(fan_in, fan_out);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng_);
  }
  return create(name, std::move(m));
}

Var ParameterStore::normal(const std::string& name, int rows, int cols, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = n(rng_);
  }
  return create(name, std::move(m));
}

Var ParameterStore::zeros(const std::string& name, int rows, int cols) {
  return create(name, Matrix::Zero(rows, cols));
}

Var ParameterStore::ones(const std::string& name, int rows, int cols) {
  return create(name, Matrix::Ones(rows, cols));
}

Var ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : entries_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

void ParameterStore::zero_grad() const {
  for (const auto& [_, v] : entries_) v.zero_grad();
}

Linear::Linear(ParameterStore& ps, const std::string& name, int in, int out)
    : weight(ps.xavier(name + ".weight", in, out)), bias(ps.zeros(name + ".bias", 1, out)) {}

LayerNorm::LayerNorm(ParameterStore& ps, const std::string& name, int dim)
    : gamma(ps.ones(name + ".gamma", 1, dim)), beta(ps.zeros(name + ".beta", 1, dim)) {}

FeedForward::FeedForward(ParameterStore& ps, const std::string& name, int dim, int hidden)
    : in(ps, name + ".in", dim, hidden), out(ps, name + ".out", hidden, dim) {}

Var FeedForward::operator()(const Var& x, const Context& ctx) const {
  return out(ctx.drop(ad::gelu(in(x))));
}

MultiHeadAttention::MultiHeadAttention(ParameterStore& ps, const std::string& name, int dim_,
                                       int heads_)
    : q_proj(ps, name + ".q", dim_, dim_),
      k_proj(ps, name + ".k", dim_, dim_),
      v_proj(ps, name + ".v", dim_, dim_),
      out_proj(ps, name + ".out", dim_, dim_),
      heads(heads_),
      dim(dim_) {
  if (heads <= 0 || dim % heads != 0) throw ConfigError(name + ": dim not divisible by heads");
}

AttentionResult MultiHeadAttention::operator()(const Var& queries, const Var& keys,
                                               const Var& values, const WeightFn& weights) const {
  if (values.rows() > keys.rows()) throw ShapeError("attention: more values than keys");
  const int dh = dim / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = q_proj(queries);
  Var k = k_proj(keys);
  Var v = v_proj(values);
  const Eigen::Index n_values = values.rows();
  const bool partial = n_values < keys.rows();

  AttentionResult res;
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    Var kh = heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    Var vh = heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    Var logits = ad::scale(ad::matmul_nt(qh, kh), inv);
    if (!logits.value().allFinite()) throw NumericsError("attention logits are not finite");
    Var w = weights ? weights(logits) : ad::softmax_rows(logits);
    Var used = partial ? ad::slice_cols(w, 0, n_values) : w;
    outs.push_back(ad::matmul(used, vh));
    res.head_weights.push_back(w);
  }
  Var cat = heads == 1 ? outs[0] : ad::concat_cols(outs);
  res.out = out_proj(cat);
  return res;
}

SelfAttentionBlock::SelfAttentionBlock(ParameterStore& ps, const std::string& name, int dim,
                                       int heads, int ffn_dim)
    : norm1(ps, name + ".norm1", dim),
      attn(ps, name + ".attn", dim, heads),
      norm2(ps, name + ".norm2", dim),
      ffn(ps, name + ".ffn", dim, ffn_dim) {}

Var SelfAttentionBlock::operator()(const Var& x, const Var& pos, const Context& ctx) const {
  Var y = norm1(x);
  Var qk = pos.defined() ? ad::add(y, pos) : y;
  Var h = ad::add(x, ctx.drop(attn(qk, qk, y).out));
  return ad::add(h, ctx.drop(ffn(norm2(h), ctx)));
}

CrossAttentionBlock::CrossAttentionBlock(ParameterStore& ps, const std::string& name, int dim,
                                         int heads, int ffn_dim)
    : norm1(ps, name + ".norm1", dim),
      attn(ps, name + ".attn", dim, heads),
      norm2(ps, name + ".norm2", dim),
      ffn(ps, name + ".ffn", dim, ffn_dim) {}

Var CrossAttentionBlock::operator()(const Var& x, const Var& memory_keys,
                                    const Var& memory_values, const Context& ctx) const {
  Var h = ad::add(x, ctx.drop(attn(norm1(x), memory_keys, memory_values).out));
  return ad::add(h, ctx.drop(ffn(norm2(h), ctx)));
}

Matrix sinusoidal_positions(int rows, int dim) {
  Matrix pe(rows, dim);
  for (int p = 0; p < rows; ++p) {
    for (int i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      pe(p, i) = (i % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
    }
  }
  return pe;
}

}  // namespace cgdetr::nn
