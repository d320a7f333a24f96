#include "mmdg/nn.hpp"

#include <cmath>

namespace mmdg {

double trunc_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  double v = dist(rng);
  while (std::fabs(v) > 2.0 * stddev) v = dist(rng);
  return v;
}

Tensor trunc_normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = trunc_normal(rng, stddev);
  return Tensor::param(std::move(shape), std::move(values));
}

// ---- LinearLayer ---------------------------------------------------------

LinearLayer::LinearLayer(std::size_t in, std::size_t out, std::mt19937_64& rng)
    : weight(trunc_normal_tensor({out, in}, 0.02, rng)),
      bias(Tensor::param({out}, std::vector<double>(out, 0.0))) {}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.cols() != in_dim()) {
    throw ShapeError("linear: input width mismatch " + shape_str(x.shape()) +
                     " vs weight " + shape_str(weight.shape()));
  }
  return add_rowvec(matmul_nt(x, weight), bias);
}

void LinearLayer::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, false});
}

// ---- LayerNorm -----------------------------------------------------------

LayerNorm::LayerNorm(std::size_t dim)
    : gamma(Tensor::param({dim}, std::vector<double>(dim, 1.0))),
      beta(Tensor::param({dim}, std::vector<double>(dim, 0.0))) {}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layernorm_rows(x, gamma, beta);
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".gamma", gamma, false});
  out.push_back({prefix + ".beta", beta, false});
}

// ---- MultiHeadAttention ----------------------------------------------------

MultiHeadAttention::MultiHeadAttention(std::size_t dim_, std::size_t heads_,
                                       std::mt19937_64& rng)
    : dim(dim_), heads(heads_) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention width " + std::to_string(dim) +
                      " not divisible by head count " + std::to_string(heads));
  }
  wq = LinearLayer(dim, dim, rng);
  wk = LinearLayer(dim, dim, rng);
  wv = LinearLayer(dim, dim, rng);
  wo = LinearLayer(dim, dim, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& q_in, const Tensor& kv_in) const {
  if (q_in.cols() != dim || kv_in.cols() != dim) {
    throw ShapeError("mha: width mismatch " + shape_str(q_in.shape()) + " / " +
                     shape_str(kv_in.shape()) + " vs dim " + std::to_string(dim));
  }
  const Tensor q = wq.forward(q_in);
  const Tensor k = wk.forward(kv_in);
  const Tensor v = wv.forward(kv_in);
  const std::size_t dh = dim / heads;
  std::vector<Tensor> head_outs;
  head_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh, c1 = (h + 1) * dh;
    head_outs.push_back(attention(slice_cols(q, c0, c1), slice_cols(k, c0, c1),
                                  slice_cols(v, c0, c1)));
  }
  const Tensor merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
  return wo.forward(merged);
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
}

// ---- FeedForward -------------------------------------------------------------

FeedForward::FeedForward(std::size_t dim, std::size_t hidden, std::mt19937_64& rng)
    : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

Tensor FeedForward::forward(const Tensor& x) const {
  return fc2.forward(gelu(fc1.forward(x)));
}

void FeedForward::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

// ---- TransformerLayer ----------------------------------------------------------

TransformerLayer::TransformerLayer(std::size_t dim, std::size_t heads,
                                   std::size_t ffn_mult, std::mt19937_64& rng)
    : norm_attn(dim),
      attn(dim, heads, rng),
      norm_ffn(dim),
      ffn(dim, dim * ffn_mult, rng) {}

Tensor TransformerLayer::forward(const Tensor& x, double dropout_p,
                                 std::uint64_t drop_seed) const {
  const Tensor normed = norm_attn.forward(x);
  Tensor sa = attn.forward(normed, normed);
  if (dropout_p > 0.0) sa = dropout(sa, dropout_p, drop_seed);
  Tensor h = add(x, sa);
  Tensor ff = ffn.forward(norm_ffn.forward(h));
  if (dropout_p > 0.0) ff = dropout(ff, dropout_p, drop_seed ^ 0x9e3779b97f4a7c15ULL);
  return add(h, ff);
}

void TransformerLayer::collect(const std::string& prefix, ParamList& out) const {
  norm_attn.collect(prefix + ".norm_attn", out);
  attn.collect(prefix + ".attn", out);
  norm_ffn.collect(prefix + ".norm_ffn", out);
  ffn.collect(prefix + ".ffn", out);
}

// ---- parameter counts ------------------------------------------------------------

std::size_t linear_param_count(std::size_t in, std::size_t out) {
  return in * out + out;
}

std::size_t mha_param_count(std::size_t dim) {
  return 4 * linear_param_count(dim, dim);
}

std::size_t transformer_layer_param_count(std::size_t dim, std::size_t ffn_mult) {
  return 2 * (2 * dim)  // two layernorms
         + mha_param_count(dim) + linear_param_count(dim, dim * ffn_mult) +
         linear_param_count(dim * ffn_mult, dim);
}

}  // namespace mmdg
