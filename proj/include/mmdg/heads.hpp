// Classification heads over the fused [CLS] embeddings. The fine-grained
// heads are structurally decoupled: the image head never sees t_cls and
// vice versa; only the binary head reads the concatenation. The coupled
// multi-label head exists for the ablation harness.

#pragma once

#include <random>
#include <string>

#include "mmdg/nn.hpp"
#include "mmdg/tensor.hpp"

namespace mmdg {

// Fine-grained class indices.
inline constexpr std::size_t kImageReal = 0, kImageFaceSwap = 1, kImageFaceAttr = 2;
inline constexpr std::size_t kTextReal = 0, kTextSwap = 1, kTextAttr = 2;
// Binary classes: 0 = real pair, 1 = manipulated.
inline constexpr std::size_t kPairReal = 0, kPairManipulated = 1;

struct Mlp2 {
  LinearLayer fc1, fc2;

  Mlp2() = default;
  Mlp2(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;  // fc2(gelu(fc1 x))
  void collect(const std::string& prefix, ParamList& out) const;
};

struct DetectionLogits {
  Tensor binary;      // [1, 2]
  Tensor image_fine;  // [1, 3]
  Tensor text_fine;   // [1, 3]
};

struct FineGrainedHeads {
  Mlp2 image_head;  // D -> D -> 3 over {Real, FS, FA}
  Mlp2 text_head;   // D -> D -> 3 over {Real, TS, TA}

  FineGrainedHeads() = default;
  FineGrainedHeads(std::size_t dim, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

struct BinaryHead {
  Mlp2 net;  // 2D -> D -> 2 over concatenated {i_cls, t_cls}

  BinaryHead() = default;
  BinaryHead(std::size_t dim, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

DetectionLogits classify(const FineGrainedHeads& heads, const BinaryHead& binary,
                         const Tensor& i_cls, const Tensor& t_cls);

// Ablation head: one perceptron 2D -> D -> 4 emitting independent logits
// for {FS, FA, TS, TA}, trained with per-class sigmoid BCE.
struct CoupledHead {
  Mlp2 net;

  CoupledHead() = default;
  CoupledHead(std::size_t dim, std::mt19937_64& rng);
  Tensor forward(const Tensor& i_cls, const Tensor& t_cls) const;  // [1, 4]
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace mmdg
