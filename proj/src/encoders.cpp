#include "mmdg/encoders.hpp"

namespace mmdg {

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3) {
    throw ShapeError("patchify: expected [H,W,C] image, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.shape()[0], w = image.shape()[1], c = image.shape()[2];
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("patchify: image " + shape_str(image.shape()) +
                      " not divisible by patch size " + std::to_string(patch));
  }
  const std::size_t ph = h / patch, pw = w / patch;
  const std::size_t flat = patch * patch * c;
  std::vector<double> out(ph * pw * flat);
  const auto& img = image.values();
  std::size_t row = 0;
  for (std::size_t py = 0; py < ph; ++py) {
    for (std::size_t px = 0; px < pw; ++px, ++row) {
      double* dst = out.data() + row * flat;
      for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) {
          const std::size_t src = ((py * patch + y) * w + (px * patch + x)) * c;
          for (std::size_t ch = 0; ch < c; ++ch) *dst++ = img[src + ch];
        }
      }
    }
  }
  return Tensor::from({ph * pw, flat}, std::move(out));
}

// ---- ImageEncoder ----------------------------------------------------------

ImageEncoder::ImageEncoder(const ImageEncoderConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  if (cfg.patch == 0 || cfg.height % cfg.patch != 0 || cfg.width % cfg.patch != 0) {
    throw ConfigError("image encoder: " + std::to_string(cfg.height) + "x" +
                      std::to_string(cfg.width) + " not divisible by patch " +
                      std::to_string(cfg.patch));
  }
  patch_proj_ = LinearLayer(cfg.patch * cfg.patch * cfg.channels, cfg.dim, rng);
  cls_ = trunc_normal_tensor({1, cfg.dim}, 0.02, rng);
  pos_ = trunc_normal_tensor({cfg.patch_count() + 1, cfg.dim}, 0.02, rng);
  layers_.reserve(cfg.depth);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    layers_.emplace_back(cfg.dim, cfg.heads, cfg.ffn_mult, rng);
  }
  final_norm_ = LayerNorm(cfg.dim);
}

Tensor ImageEncoder::embed(const Tensor& image) const {
  if (image.rank() != 3 || image.shape()[0] != cfg_.height ||
      image.shape()[1] != cfg_.width || image.shape()[2] != cfg_.channels) {
    throw ShapeError("image encoder: got " + shape_str(image.shape()) + ", expected [" +
                     std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width) +
                     "x" + std::to_string(cfg_.channels) + "]");
  }
  const Tensor patches = patch_proj_.forward(patchify(image, cfg_.patch));
  return add(concat_rows({cls_, patches}), pos_);
}

Tensor ImageEncoder::forward(const Tensor& image, double dropout_p,
                             std::uint64_t drop_seed) const {
  Tensor x = embed(image);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(x, dropout_p, drop_seed + i);
  }
  return final_norm_.forward(x);
}

void ImageEncoder::collect(const std::string& prefix, ParamList& out) const {
  patch_proj_.collect(prefix + ".patch_proj", out);
  out.push_back({prefix + ".cls", cls_, false});
  out.push_back({prefix + ".pos", pos_, false});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].collect(prefix + ".layer" + std::to_string(i), out);
  }
  final_norm_.collect(prefix + ".final_norm", out);
}

// ---- TextEncoder -------------------------------------------------------------

TextEncoder::TextEncoder(const TextEncoderConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  if (cfg.vocab == 0 || cfg.seq_len == 0) {
    throw ConfigError("text encoder: vocab and sequence length must be positive");
  }
  embed_table_ = trunc_normal_tensor({cfg.vocab, cfg.dim}, 0.02, rng);
  cls_ = trunc_normal_tensor({1, cfg.dim}, 0.02, rng);
  pos_ = trunc_normal_tensor({cfg.seq_len + 1, cfg.dim}, 0.02, rng);
  layers_.reserve(cfg.depth);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    layers_.emplace_back(cfg.dim, cfg.heads, cfg.ffn_mult, rng);
  }
  final_norm_ = LayerNorm(cfg.dim);
}

Tensor TextEncoder::embed(const std::vector<std::size_t>& tokens) const {
  if (tokens.size() != cfg_.seq_len) {
    throw InputError("text encoder: got " + std::to_string(tokens.size()) +
                     " tokens, configured length is " + std::to_string(cfg_.seq_len));
  }
  const Tensor tok = gather_rows(embed_table_, tokens);
  return add(concat_rows({cls_, tok}), pos_);
}

Tensor TextEncoder::forward(const std::vector<std::size_t>& tokens, double dropout_p,
                            std::uint64_t drop_seed) const {
  Tensor x = embed(tokens);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(x, dropout_p, drop_seed + 101 + i);
  }
  return final_norm_.forward(x);
}

void TextEncoder::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".embed", embed_table_, true});
  out.push_back({prefix + ".cls", cls_, false});
  out.push_back({prefix + ".pos", pos_, false});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].collect(prefix + ".layer" + std::to_string(i), out);
  }
  final_norm_.collect(prefix + ".final_norm", out);
}

}  // namespace mmdg
