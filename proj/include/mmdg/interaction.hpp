// Dual-branch cross-attention interaction stack. Each layer updates both
// branches: self-attention per branch, then cross-attention where each
// branch queries the other's post-self-attention state, then a feed-forward
// block. Branches never share weights.

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "mmdg/nn.hpp"
#include "mmdg/tensor.hpp"

namespace mmdg {

struct FusedFeatures {
  Tensor i_cls;  // [1, D]
  Tensor i_pat;  // [N, D]
  Tensor t_cls;  // [1, D]
  Tensor t_tok;  // [M, D]
};

struct InteractionBranch {
  LayerNorm norm_sa;
  MultiHeadAttention self_attn;
  LayerNorm norm_ca_q;
  LayerNorm norm_ca_kv;
  std::optional<MultiHeadAttention> cross_attn;  // absent when branch never crosses
  LayerNorm norm_ffn;
  FeedForward ffn;

  InteractionBranch() = default;
  InteractionBranch(std::size_t dim, std::size_t heads, std::size_t ffn_mult,
                    bool with_cross, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

struct InteractionLayer {
  InteractionBranch image_branch;
  InteractionBranch text_branch;

  InteractionLayer() = default;
  InteractionLayer(std::size_t dim, std::size_t heads, std::size_t ffn_mult,
                   bool text_cross, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

struct InteractionStackConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t depth = 6;
  std::size_t ffn_mult = 4;
  bool text_cross = true;  // false drops the text-branch cross-attention params
};

class InteractionStack {
 public:
  InteractionStack() = default;
  InteractionStack(const InteractionStackConfig& cfg, std::mt19937_64& rng);

  // Full dual-branch fusion: both branches cross-attend every layer.
  FusedFeatures interact(const Tensor& f_i, const Tensor& f_t, double dropout_p = 0.0,
                         std::uint64_t drop_seed = 0) const;

  // Ablation: the text branch runs self-attention + FFN only; the image
  // branch still queries the text stream.
  FusedFeatures interact_single_stream(const Tensor& f_i, const Tensor& f_t,
                                       double dropout_p = 0.0,
                                       std::uint64_t drop_seed = 0) const;

  // Test hook: per-branch cross-attention switches.
  FusedFeatures interact_ablated(const Tensor& f_i, const Tensor& f_t, bool image_cross,
                                 bool text_cross, double dropout_p = 0.0,
                                 std::uint64_t drop_seed = 0) const;

  const InteractionStackConfig& config() const { return cfg_; }
  std::vector<InteractionLayer>& layers() { return layers_; }
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  InteractionStackConfig cfg_;
  std::vector<InteractionLayer> layers_;
  LayerNorm final_norm_image_;
  LayerNorm final_norm_text_;
};

}  // namespace mmdg
