#include "mmdg/interaction.hpp"

namespace mmdg {

InteractionBranch::InteractionBranch(std::size_t dim, std::size_t heads,
                                     std::size_t ffn_mult, bool with_cross,
                                     std::mt19937_64& rng)
    : norm_sa(dim),
      self_attn(dim, heads, rng),
      norm_ca_q(dim),
      norm_ca_kv(dim),
      norm_ffn(dim),
      ffn(dim, dim * ffn_mult, rng) {
  if (with_cross) cross_attn.emplace(dim, heads, rng);
}

void InteractionBranch::collect(const std::string& prefix, ParamList& out) const {
  norm_sa.collect(prefix + ".norm_sa", out);
  self_attn.collect(prefix + ".self_attn", out);
  if (cross_attn) {
    norm_ca_q.collect(prefix + ".norm_ca_q", out);
    norm_ca_kv.collect(prefix + ".norm_ca_kv", out);
    cross_attn->collect(prefix + ".cross_attn", out);
  }
  norm_ffn.collect(prefix + ".norm_ffn", out);
  ffn.collect(prefix + ".ffn", out);
}

InteractionLayer::InteractionLayer(std::size_t dim, std::size_t heads,
                                   std::size_t ffn_mult, bool text_cross,
                                   std::mt19937_64& rng)
    : image_branch(dim, heads, ffn_mult, true, rng),
      text_branch(dim, heads, ffn_mult, text_cross, rng) {}

void InteractionLayer::collect(const std::string& prefix, ParamList& out) const {
  image_branch.collect(prefix + ".image", out);
  text_branch.collect(prefix + ".text", out);
}

InteractionStack::InteractionStack(const InteractionStackConfig& cfg,
                                   std::mt19937_64& rng)
    : cfg_(cfg) {
  if (cfg.depth == 0) throw ConfigError("interaction stack depth must be >= 1");
  layers_.reserve(cfg.depth);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    layers_.emplace_back(cfg.dim, cfg.heads, cfg.ffn_mult, cfg.text_cross, rng);
  }
  final_norm_image_ = LayerNorm(cfg.dim);
  final_norm_text_ = LayerNorm(cfg.dim);
}

namespace {

Tensor branch_self(const InteractionBranch& b, const Tensor& x, double p,
                   std::uint64_t seed) {
  const Tensor normed = b.norm_sa.forward(x);
  Tensor sa = b.self_attn.forward(normed, normed);
  if (p > 0.0) sa = dropout(sa, p, seed);
  return add(x, sa);
}

Tensor branch_cross(const InteractionBranch& b, const Tensor& x, const Tensor& other,
                    double p, std::uint64_t seed) {
  Tensor ca = b.cross_attn->forward(b.norm_ca_q.forward(x), b.norm_ca_kv.forward(other));
  if (p > 0.0) ca = dropout(ca, p, seed);
  return add(x, ca);
}

Tensor branch_ffn(const InteractionBranch& b, const Tensor& x, double p,
                  std::uint64_t seed) {
  Tensor ff = b.ffn.forward(b.norm_ffn.forward(x));
  if (p > 0.0) ff = dropout(ff, p, seed);
  return add(x, ff);
}

}  // namespace

FusedFeatures InteractionStack::interact_ablated(const Tensor& f_i, const Tensor& f_t,
                                                 bool image_cross, bool text_cross,
                                                 double dropout_p,
                                                 std::uint64_t drop_seed) const {
  if (f_i.cols() != cfg_.dim || f_t.cols() != cfg_.dim) {
    throw ShapeError("interaction: width mismatch " + shape_str(f_i.shape()) + " / " +
                     shape_str(f_t.shape()) + " vs dim " + std::to_string(cfg_.dim));
  }
  if (text_cross && !cfg_.text_cross) {
    throw ConfigError("interaction stack built without text cross-attention weights");
  }
  Tensor xi = f_i;
  Tensor xt = f_t;
  std::uint64_t s = drop_seed;
  for (const auto& layer : layers_) {
    // Self-attention on both branches first; cross-attention then reads
    // the other branch's post-self-attention state, symmetrically.
    const Tensor si = branch_self(layer.image_branch, xi, dropout_p, ++s);
    const Tensor st = branch_self(layer.text_branch, xt, dropout_p, ++s);
    Tensor ci = image_cross ? branch_cross(layer.image_branch, si, st, dropout_p, ++s) : si;
    Tensor ct = text_cross ? branch_cross(layer.text_branch, st, si, dropout_p, ++s) : st;
    xi = branch_ffn(layer.image_branch, ci, dropout_p, ++s);
    xt = branch_ffn(layer.text_branch, ct, dropout_p, ++s);
  }
  xi = final_norm_image_.forward(xi);
  xt = final_norm_text_.forward(xt);
  FusedFeatures out;
  out.i_cls = slice_rows(xi, 0, 1);
  out.i_pat = slice_rows(xi, 1, xi.rows());
  out.t_cls = slice_rows(xt, 0, 1);
  out.t_tok = slice_rows(xt, 1, xt.rows());
  return out;
}

FusedFeatures InteractionStack::interact(const Tensor& f_i, const Tensor& f_t,
                                         double dropout_p,
                                         std::uint64_t drop_seed) const {
  return interact_ablated(f_i, f_t, true, true, dropout_p, drop_seed);
}

FusedFeatures InteractionStack::interact_single_stream(const Tensor& f_i,
                                                       const Tensor& f_t,
                                                       double dropout_p,
                                                       std::uint64_t drop_seed) const {
  return interact_ablated(f_i, f_t, true, false, dropout_p, drop_seed);
}

void InteractionStack::collect(const std::string& prefix, ParamList& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].collect(prefix + ".layer" + std::to_string(i), out);
  }
  final_norm_image_.collect(prefix + ".final_norm_image", out);
  final_norm_text_.collect(prefix + ".final_norm_text", out);
}

}  // namespace mmdg
