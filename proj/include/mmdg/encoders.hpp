// Modality-specific feature extractors. Both prepend a learned [CLS] row,
// add learned absolute positions, and run a small pre-norm transformer
// stack ending in a final norm.

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mmdg/nn.hpp"
#include "mmdg/tensor.hpp"

namespace mmdg {

// [H,W,C] image -> [N, p*p*C] patch matrix, patches in row-major order,
// pixels within a patch row-major with channel fastest.
Tensor patchify(const Tensor& image, std::size_t patch);

struct ImageEncoderConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t ffn_mult = 4;

  std::size_t patch_count() const { return (height / patch) * (width / patch); }
};

class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ImageEncoderConfig& cfg, std::mt19937_64& rng);

  // Patch projection + [CLS] + positions, before the transformer stack.
  Tensor embed(const Tensor& image) const;
  // Full pass: [H,W,C] -> [(N+1), D], row 0 is the [CLS] pathway.
  Tensor forward(const Tensor& image, double dropout_p = 0.0,
                 std::uint64_t drop_seed = 0) const;

  const ImageEncoderConfig& config() const { return cfg_; }
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  ImageEncoderConfig cfg_;
  LinearLayer patch_proj_;
  Tensor cls_;  // [1, D]
  Tensor pos_;  // [N+1, D]
  std::vector<TransformerLayer> layers_;
  LayerNorm final_norm_;
};

struct TextEncoderConfig {
  std::size_t vocab = 64;
  std::size_t seq_len = 16;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t ffn_mult = 4;
};

class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const TextEncoderConfig& cfg, std::mt19937_64& rng);

  Tensor embed(const std::vector<std::size_t>& tokens) const;
  // Token ids (length == seq_len, ids < vocab) -> [(M+1), D].
  Tensor forward(const std::vector<std::size_t>& tokens, double dropout_p = 0.0,
                 std::uint64_t drop_seed = 0) const;

  const TextEncoderConfig& config() const { return cfg_; }
  const Tensor& embedding_table() const { return embed_table_; }
  void collect(const std::string& prefix, ParamList& out) const;

 private:
  TextEncoderConfig cfg_;
  Tensor embed_table_;  // [V, D]
  Tensor cls_;          // [1, D]
  Tensor pos_;          // [M+1, D]
  std::vector<TransformerLayer> layers_;
  LayerNorm final_norm_;
};

}  // namespace mmdg
