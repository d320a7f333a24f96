#include "mmdg/grounding.hpp"

namespace mmdg {

ManipulationQueries::ManipulationQueries(std::size_t dim, std::size_t image_queries,
                                         std::size_t text_queries,
                                         std::mt19937_64& rng) {
  if (image_queries == 0 || text_queries == 0) {
    throw ConfigError("manipulation query counts must be positive");
  }
  q_im = trunc_normal_tensor({image_queries, dim}, 0.02, rng);
  q_tm = trunc_normal_tensor({text_queries, dim}, 0.02, rng);
}

void ManipulationQueries::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".q_im", q_im, false});
  out.push_back({prefix + ".q_tm", q_tm, false});
}

Tensor aggregate_image(const Tensor& q_im, const Tensor& i_pat) {
  return attention(q_im, i_pat, i_pat);
}

Tensor aggregate_text(const Tensor& q_tm, const Tensor& t_tok) {
  return attention(q_tm, t_tok, t_tok);
}

BboxDetector::BboxDetector(std::size_t dim, std::mt19937_64& rng)
    : fc1(dim, dim, rng), fc2(dim, dim, rng), fc3(dim, 4, rng) {}

Tensor BboxDetector::forward(const Tensor& f_im) const {
  return sigmoid(fc3.forward(gelu(fc2.forward(gelu(fc1.forward(f_im))))));
}

void BboxDetector::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
  fc3.collect(prefix + ".fc3", out);
}

TokenScorer::TokenScorer(std::size_t dim, std::size_t reduce_dim,
                         std::size_t text_queries_, bool project_to_classes,
                         std::mt19937_64& rng)
    : reduce(dim, reduce_dim, rng), text_queries(text_queries_) {
  if (text_queries != 2 && !project_to_classes) {
    throw ConfigError("token scorer: " + std::to_string(text_queries) +
                      " text queries require the projection-to-2 layer");
  }
  if (project_to_classes) to_classes.emplace(text_queries, 2, rng);
}

Tensor TokenScorer::score(const Tensor& t_tok, const Tensor& f_tm) const {
  if (f_tm.rows() != text_queries) {
    throw ShapeError("token scorer: expected " + std::to_string(text_queries) +
                     " aggregated query rows, got " + shape_str(f_tm.shape()));
  }
  const Tensor logits = matmul_nt(reduce.forward(t_tok), reduce.forward(f_tm));
  return to_classes ? to_classes->forward(logits) : logits;
}

void TokenScorer::collect(const std::string& prefix, ParamList& out) const {
  reduce.collect(prefix + ".reduce", out);
  if (to_classes) to_classes->collect(prefix + ".to_classes", out);
}

TokenMlpScorer::TokenMlpScorer(std::size_t dim, std::mt19937_64& rng)
    : fc1(dim, dim, rng), fc2(dim, 2, rng) {}

Tensor TokenMlpScorer::score(const Tensor& t_tok) const {
  return fc2.forward(gelu(fc1.forward(t_tok)));
}

void TokenMlpScorer::collect(const std::string& prefix, ParamList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

}  // namespace mmdg
