// Dense 64-bit tensor with tape-based reverse-mode autodiff.
//
// Values are row-major doubles. Ops record adjoint closures onto the
// innermost active GradTape; replaying the tape in reverse of recording
// order is a valid topological order, so backward() is a single reverse
// sweep. A tape and the tensors recorded on it belong to one worker;
// detached values may be moved freely.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmdg {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Graph;

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation / participation
  std::weak_ptr<Graph> graph;

  std::size_t numel() const { return values.size(); }
  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);  // shape {1}
  static Tensor param(Shape shape, std::vector<double> values);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rank() const;
  // Matrix view: rank-1 tensors are row vectors, rank-2 as stored.
  std::size_t rows() const;
  std::size_t cols() const;

  double value() const;  // numel()==1 only
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;
  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);
  bool has_grad() const;
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();  // allocates zeros if absent
  void zero_grad();

  // Deep copy of values; no graph linkage, no grad, requires_grad=false.
  Tensor detach() const;

  // Reverse sweep from a scalar root recorded on a live tape.
  void backward() const;

  detail::NodePtr node() const { return n_; }
  static Tensor wrap(detail::NodePtr n);

 private:
  detail::NodePtr n_;
};

// Ordered record of primitive ops. Reverse of recording order is the
// adjoint replay order. A graph may run backward once; a fresh forward
// pass records a fresh tape.
class Graph {
 public:
  void backward_from(const detail::NodePtr& root);
  std::size_t op_count() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  void record(detail::NodePtr out, std::function<void()> apply);

 private:
  struct Entry {
    detail::NodePtr out;
    std::function<void()> apply;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

// RAII activation of a recording tape (innermost wins; nesting restores).
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  std::shared_ptr<Graph> graph() const { return graph_; }

 private:
  std::shared_ptr<Graph> graph_;
  std::shared_ptr<Graph> prev_;
};

namespace detail {
std::shared_ptr<Graph> active_tape();
bool tracked(const Tensor& t);
}  // namespace detail

// ---- primitive ops ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n] -> [m,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T -> [m,n]

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

// Row-vector broadcast: v has numel == cols(x), applied to every row.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);

Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor clamp_min(const Tensor& x, double c);

Tensor softmax_rows(const Tensor& x);
Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps = 1e-5);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);

Tensor sum(const Tensor& x);        // -> {1}
Tensor mean(const Tensor& x);       // -> {1}
Tensor mean_rows(const Tensor& x);  // [m,n] -> [1,n]

// Differentiable row gather; grads scatter-add into the table.
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);

// Mean over rows of -log softmax(logits)[label], stable log-sum-exp form.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& labels);

// Per-element sigmoid BCE against constant 0/1 targets, mean-reduced.
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets);

// Inverted-dropout with keep-prob scaling; p==0 is the identity.
Tensor dropout(const Tensor& x, double p, std::uint64_t mask_seed);

// Softmax(q k^T / sqrt(D)) v, composed from the primitives above.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Custom differentiable unary op; used by tests to inject adjoints.
Tensor custom_unary(
    const Tensor& x, Shape out_shape, std::vector<double> out_values,
    std::function<void(const std::vector<double>& out_grad, std::vector<double>& x_grad)>
        backward_fn);

}  // namespace mmdg
