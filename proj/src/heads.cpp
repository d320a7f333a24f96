#include "mmdg/heads.hpp"

namespace mmdg {

Mlp2::Mlp2(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng)
    : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

Tensor Mlp2::forward(const Tensor& x) const {
  return fc2.forward(gelu(fc1.forward(x)));
}

void Mlp2::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

FineGrainedHeads::FineGrainedHeads(std::size_t dim, std::mt19937_64& rng)
    : image_head(dim, dim, 3, rng), text_head(dim, dim, 3, rng) {}

void FineGrainedHeads::collect(const std::string& prefix, ParamList& out) const {
  image_head.collect(prefix + ".image_head", out);
  text_head.collect(prefix + ".text_head", out);
}

BinaryHead::BinaryHead(std::size_t dim, std::mt19937_64& rng)
    : net(2 * dim, dim, 2, rng) {}

void BinaryHead::collect(const std::string& prefix, ParamList& out) const {
  net.collect(prefix + ".net", out);
}

DetectionLogits classify(const FineGrainedHeads& heads, const BinaryHead& binary,
                         const Tensor& i_cls, const Tensor& t_cls) {
  DetectionLogits out;
  out.image_fine = heads.image_head.forward(i_cls);
  out.text_fine = heads.text_head.forward(t_cls);
  out.binary = binary.net.forward(concat_cols({i_cls, t_cls}));
  return out;
}

CoupledHead::CoupledHead(std::size_t dim, std::mt19937_64& rng)
    : net(2 * dim, dim, 4, rng) {}

Tensor CoupledHead::forward(const Tensor& i_cls, const Tensor& t_cls) const {
  return net.forward(concat_cols({i_cls, t_cls}));
}

void CoupledHead::collect(const std::string& prefix, ParamList& out) const {
  net.collect(prefix + ".net", out);
}

}  // namespace mmdg
