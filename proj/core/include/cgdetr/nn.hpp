#pragma once

// Transformer building blocks on top of the autodiff engine.

#include "cgdetr/autograd.hpp"

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace cgdetr::nn {

using ad::Matrix;
using ad::Var;

/// Ordered registry of named trainable tensors. Creation order is stable, so
/// the parameter layout is a pure function of the model configuration.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : rng_(seed) {}

  Var create(const std::string& name, Matrix init);
  /// Glorot-uniform fan_in x fan_out matrix.
  Var xavier(const std::string& name, int fan_in, int fan_out);
  Var normal(const std::string& name, int rows, int cols, double stddev);
  Var zeros(const std::string& name, int rows, int cols);
  Var ones(const std::string& name, int rows, int cols);

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  Var find(const std::string& name) const;
  std::size_t scalar_count() const;
  void zero_grad() const;

 private:
  std::mt19937_64 rng_;
  std::vector<std::pair<std::string, Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Per-forward state: dropout is active only when rng is set.
struct Context {
  std::mt19937_64* rng = nullptr;
  double dropout = 0.0;

  bool training() const { return rng != nullptr; }
  Var drop(const Var& x) const { return ad::dropout(x, dropout, rng); }
};

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  Linear() = default;
  Linear(ParameterStore& ps, const std::string& name, int in, int out);
  Var operator()(const Var& x) const { return ad::add_row(ad::matmul(x, weight), bias); }
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore& ps, const std::string& name, int dim);
  Var operator()(const Var& x) const { return ad::layer_norm_rows(x, gamma, beta); }
};

struct FeedForward {
  Linear in;
  Linear out;

  FeedForward() = default;
  FeedForward(ParameterStore& ps, const std::string& name, int dim, int hidden);
  Var operator()(const Var& x, const Context& ctx) const;
};

/// Maps per-head logits (L x Lk) to attention weights.
using WeightFn = std::function<Var(const Var& logits)>;

struct AttentionResult {
  Var out;                        // L x dim after the output projection
  std::vector<Var> head_weights;  // per head, L x Lk
};

struct MultiHeadAttention {
  Linear q_proj;
  Linear k_proj;
  Linear v_proj;
  Linear out_proj;
  int heads = 1;
  int dim = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& ps, const std::string& name, int dim, int heads);

  /// Scaled dot-product attention per head with logits / sqrt(dim / heads).
  /// `values` may have fewer rows than `keys`: only the leading weight
  /// columns aggregate values, the remaining keys only absorb weight.
  AttentionResult operator()(const Var& queries, const Var& keys, const Var& values,
                             const WeightFn& weights = {}) const;
};

/// Pre-norm self-attention + feed-forward block.
struct SelfAttentionBlock {
  LayerNorm norm1;
  MultiHeadAttention attn;
  LayerNorm norm2;
  FeedForward ffn;

  SelfAttentionBlock() = default;
  SelfAttentionBlock(ParameterStore& ps, const std::string& name, int dim, int heads, int ffn_dim);
  /// `pos` (same shape as x or undefined) is added to queries and keys.
  Var operator()(const Var& x, const Var& pos, const Context& ctx) const;
};

/// Pre-norm cross-attention + feed-forward block; queries attend to memory.
struct CrossAttentionBlock {
  LayerNorm norm1;
  MultiHeadAttention attn;
  LayerNorm norm2;
  FeedForward ffn;

  CrossAttentionBlock() = default;
  CrossAttentionBlock(ParameterStore& ps, const std::string& name, int dim, int heads, int ffn_dim);
  Var operator()(const Var& x, const Var& memory_keys, const Var& memory_values,
                 const Context& ctx) const;
};

/// Sinusoidal positional codes, rows x dim.
Matrix sinusoidal_positions(int rows, int dim);

}  // namespace cgdetr::nn
