// Implicit manipulation queries and the grounding heads. Learnable query
// rows aggregate patch/token embeddings through a single attention
// application; a 3-layer perceptron regresses the normalized box and a
// shared reduction + inner product scores each token.

#pragma once

#include <optional>
#include <random>

#include "mmdg/nn.hpp"
#include "mmdg/tensor.hpp"

namespace mmdg {

struct ManipulationQueries {
  Tensor q_im;  // [Q_i, D] learnable
  Tensor q_tm;  // [Q_t, D] learnable

  ManipulationQueries() = default;
  ManipulationQueries(std::size_t dim, std::size_t image_queries,
                      std::size_t text_queries, std::mt19937_64& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

// f_im = Attention(q_im, i_pat, i_pat); single application, no projections.
Tensor aggregate_image(const Tensor& q_im, const Tensor& i_pat);
// f_tm = Attention(q_tm, t_tok, t_tok).
Tensor aggregate_text(const Tensor& q_tm, const Tensor& t_tok);

// 3-layer perceptron, sigmoid-bounded (cx, cy, w, h) in [0,1]^4.
struct BboxDetector {
  LinearLayer fc1, fc2, fc3;

  BboxDetector() = default;
  BboxDetector(std::size_t dim, std::mt19937_64& rng);
  Tensor forward(const Tensor& f_im) const;  // [1, 4]
  void collect(const std::string& prefix, ParamList& out) const;
};

// Shared linear reduction D -> reduce_dim applied to both token embeddings
// and aggregated queries; logits are the reduced inner products. With the
// default two text queries the [M, 2] product is read directly as
// (real, manipulated) logits; other query counts require the optional
// projection to two classes.
struct TokenScorer {
  LinearLayer reduce;
  std::optional<LinearLayer> to_classes;  // Q_t -> 2 escape hatch
  std::size_t text_queries = 2;

  TokenScorer() = default;
  TokenScorer(std::size_t dim, std::size_t reduce_dim, std::size_t text_queries,
              bool project_to_classes, std::mt19937_64& rng);
  Tensor score(const Tensor& t_tok, const Tensor& f_tm) const;  // [M, 2]
  void collect(const std::string& prefix, ParamList& out) const;
};

// Ablation replacement for T-IMQ: a per-token 2-way perceptron.
struct TokenMlpScorer {
  LinearLayer fc1, fc2;

  TokenMlpScorer() = default;
  TokenMlpScorer(std::size_t dim, std::mt19937_64& rng);
  Tensor score(const Tensor& t_tok) const;  // [M, 2]
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace mmdg
