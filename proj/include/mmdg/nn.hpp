// Reusable network blocks: linear layers, multi-head attention, pre-norm
// transformer encoder layers. Initialization is truncated normal (std 0.02,
// clipped at 2 std) with zero biases; every block enumerates its parameters
// in a stable path order for checkpointing.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmdg/tensor.hpp"

namespace mmdg {

struct ParamEntry {
  std::string path;
  Tensor tensor;
  bool decay;  // weight-decay eligible (matrices yes; biases/norms/queries no)
};
using ParamList = std::vector<ParamEntry>;

double trunc_normal(std::mt19937_64& rng, double stddev);
Tensor trunc_normal_tensor(Shape shape, double stddev, std::mt19937_64& rng);

struct LinearLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // {out}

  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out, std::mt19937_64& rng);

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }

  // x [n, in] -> x W^T + b, [n, out]
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
  Tensor gamma;  // {dim}, init 1
  Tensor beta;   // {dim}, init 0

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct MultiHeadAttention {
  std::size_t dim = 0;
  std::size_t heads = 0;
  LinearLayer wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads, std::mt19937_64& rng);

  // q_in [a, D], kv_in [b, D] -> [a, D]; self-attention when q_in == kv_in.
  Tensor forward(const Tensor& q_in, const Tensor& kv_in) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct FeedForward {
  LinearLayer fc1, fc2;

  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t hidden, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;  // fc2(gelu(fc1 x))
  void collect(const std::string& prefix, ParamList& out) const;
};

// Pre-norm residual block: x + SA(LN(x)), then + FFN(LN(.)).
struct TransformerLayer {
  LayerNorm norm_attn;
  MultiHeadAttention attn;
  LayerNorm norm_ffn;
  FeedForward ffn;

  TransformerLayer() = default;
  TransformerLayer(std::size_t dim, std::size_t heads, std::size_t ffn_mult,
                   std::mt19937_64& rng);

  Tensor forward(const Tensor& x, double dropout_p = 0.0,
                 std::uint64_t drop_seed = 0) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Closed-form parameter counts, asserted against enumeration in tests.
std::size_t linear_param_count(std::size_t in, std::size_t out);
std::size_t mha_param_count(std::size_t dim);
std::size_t transformer_layer_param_count(std::size_t dim, std::size_t ffn_mult);

}  // namespace mmdg
