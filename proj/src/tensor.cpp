#include "mmdg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace mmdg {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double v) {
  auto n = std::make_shared<detail::TensorNode>();
  n->values.assign(shape_numel(shape), v);
  n->shape = std::move(shape);
  return wrap(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("zero dimension in shape " + shape_str(shape));
  }
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  return wrap(std::move(n));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::param(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

Tensor Tensor::wrap(detail::NodePtr n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

static const detail::NodePtr& checked(const detail::NodePtr& n) {
  if (!n) throw InputError("operation on undefined tensor");
  return n;
}

const Shape& Tensor::shape() const { return checked(n_)->shape; }
std::size_t Tensor::numel() const { return checked(n_)->values.size(); }
std::size_t Tensor::rank() const { return checked(n_)->shape.size(); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() == 1) return 1;
  if (s.size() == 2) return s[0];
  throw ShapeError("matrix view requires rank 1 or 2, got " + shape_str(s));
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.size() == 1) return s[0];
  if (s.size() == 2) return s[1];
  throw ShapeError("matrix view requires rank 1 or 2, got " + shape_str(s));
}

double Tensor::value() const {
  if (numel() != 1) {
    throw ShapeError("value() requires a scalar tensor, got " + shape_str(shape()));
  }
  return n_->values[0];
}

double Tensor::at(std::size_t i) const { return checked(n_)->values.at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
  return checked(n_)->values.at(r * cols() + c);
}

const std::vector<double>& Tensor::values() const { return checked(n_)->values; }
std::vector<double>& Tensor::mutable_values() { return checked(n_)->values; }

bool Tensor::requires_grad() const { return checked(n_)->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  checked(n_)->requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const { return !checked(n_)->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) {
    throw InputError("tensor has no gradient (no backward pass reached it)");
  }
  return n_->grad;
}

std::vector<double>& Tensor::mutable_grad() { return checked(n_)->ensure_grad(); }

void Tensor::zero_grad() {
  auto& g = checked(n_)->grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const {
  checked(n_);
  auto m = std::make_shared<detail::TensorNode>();
  m->shape = n_->shape;
  m->values = n_->values;
  return wrap(std::move(m));
}

void Tensor::backward() const {
  checked(n_);
  if (numel() != 1) {
    throw InputError("backward root must be scalar, got shape " + shape_str(shape()));
  }
  auto g = n_->graph.lock();
  if (!g) throw InputError("backward on detached tensor (no recorded graph)");
  g->backward_from(n_);
}

// ---- Graph / tape -------------------------------------------------------

namespace {
thread_local std::shared_ptr<Graph> t_active_tape;
}

GradTape::GradTape() : graph_(std::make_shared<Graph>()), prev_(t_active_tape) {
  t_active_tape = graph_;
}

GradTape::~GradTape() { t_active_tape = prev_; }

namespace detail {

std::shared_ptr<Graph> active_tape() { return t_active_tape; }

bool tracked(const Tensor& t) {
  if (!t_active_tape || !t.defined()) return false;
  const auto& n = t.node();
  return n->requires_grad || n->graph.lock() == t_active_tape;
}

}  // namespace detail

void Graph::record(detail::NodePtr out, std::function<void()> apply) {
  entries_.push_back({std::move(out), std::move(apply)});
}

void Graph::backward_from(const detail::NodePtr& root) {
  if (consumed_) {
    throw InputError("backward already run on this tape; record a fresh pass first");
  }
  if (root->graph.lock().get() != this) {
    throw InputError("backward root was not recorded on this graph");
  }
  consumed_ = true;
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->grad.empty()) continue;  // unreachable from root
    it->apply();
  }
}

// ---- op plumbing ---------------------------------------------------------

namespace {

using detail::NodePtr;

// Record only when a tape is live and some input is on the grad path.
// Participating requires_grad leaves get their grad buffer allocated here
// so "used in the graph" implies a populated (possibly zero) grad.
void record_if_tracked(std::initializer_list<Tensor> inputs, Tensor& out,
                       std::function<void()> apply) {
  bool track = false;
  for (const Tensor& in : inputs) track = track || detail::tracked(in);
  if (!track) return;
  auto tape = detail::active_tape();
  out.node()->graph = tape;
  for (const Tensor& in : inputs) {
    if (in.defined() && in.node()->requires_grad) in.node()->ensure_grad();
  }
  tape->record(out.node(), std::move(apply));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

void check_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " +
                     shape_str(t.shape()));
  }
}

// C[m,n] += A[m,k] * B[k,n]
void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ai[l];
      if (av == 0.0) continue;
      const double* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ai[l];
      if (av == 0.0) continue;
      double* cl = c + l * n;
      for (std::size_t j = 0; j < n; ++j) cl[j] += av * bi[j];
    }
  }
}

Tensor unary_elementwise(const Tensor& x, const char* /*op*/,
                         double (*f)(double), double (*dfdx)(double)) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node();
  auto yn = y.node();
  record_if_tracked({x}, y, [xn, yn, dfdx] {
    auto& gx = xn->ensure_grad();
    const auto& gy = yn->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * dfdx(xn->values[i]);
  });
  return y;
}

}  // namespace

// ---- matmul --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_matrix(a, "matmul");
  check_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  mm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  Tensor c = Tensor::from({m, n}, std::move(out));
  auto an = a.node(), bn = b.node(), cn = c.node();
  record_if_tracked({a, b}, c, [an, bn, cn, m, k, n] {
    const double* gc = cn->grad.data();
    // dA += dC * B^T ; dB += A^T * dC
    mm_nt_acc(gc, bn->values.data(), an->ensure_grad().data(), m, n, k);
    mm_tn_acc(an->values.data(), gc, bn->ensure_grad().data(), m, k, n);
  });
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_matrix(a, "matmul_nt");
  check_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: widths disagree, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n, 0.0);
  mm_nt_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  Tensor c = Tensor::from({m, n}, std::move(out));
  auto an = a.node(), bn = b.node(), cn = c.node();
  record_if_tracked({a, b}, c, [an, bn, cn, m, k, n] {
    const double* gc = cn->grad.data();
    // dA += dC * B ; dB += dC^T * A
    mm_acc(gc, bn->values.data(), an->ensure_grad().data(), m, n, k);
    mm_tn_acc(gc, an->values.data(), bn->ensure_grad().data(), m, n, k);
  });
  return c;
}

// ---- elementwise binaries --------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  Tensor c = Tensor::from(a.shape(), std::move(out));
  auto an = a.node(), bn = b.node(), cn = c.node();
  record_if_tracked({a, b}, c, [an, bn, cn] {
    const auto& g = cn->grad;
    auto& ga = an->ensure_grad();
    auto& gb = bn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  Tensor c = Tensor::from(a.shape(), std::move(out));
  auto an = a.node(), bn = b.node(), cn = c.node();
  record_if_tracked({a, b}, c, [an, bn, cn] {
    const auto& g = cn->grad;
    auto& ga = an->ensure_grad();
    auto& gb = bn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Tensor c = Tensor::from(a.shape(), std::move(out));
  auto an = a.node(), bn = b.node(), cn = c.node();
  record_if_tracked({a, b}, c, [an, bn, cn] {
    const auto& g = cn->grad;
    auto& ga = an->ensure_grad();
    auto& gb = bn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * bn->values[i];
      gb[i] += g[i] * an->values[i];
    }
  });
  return c;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  Tensor c = Tensor::from(a.shape(), std::move(out));
  auto an = a.node(), bn = b.node(), cn = c.node();
  record_if_tracked({a, b}, c, [an, bn, cn] {
    const auto& g = cn->grad;
    auto& ga = an->ensure_grad();
    auto& gb = bn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double inv = 1.0 / bn->values[i];
      ga[i] += g[i] * inv;
      gb[i] -= g[i] * an->values[i] * inv * inv;
    }
  });
  return c;
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "minimum");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::min(av[i], bv[i]);
  Tensor c = Tensor::from(a.shape(), std::move(out));
  auto an = a.node(), bn = b.node(), cn = c.node();
  record_if_tracked({a, b}, c, [an, bn, cn] {
    const auto& g = cn->grad;
    auto& ga = an->ensure_grad();
    auto& gb = bn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (an->values[i] <= bn->values[i]) {
        ga[i] += g[i];
      } else {
        gb[i] += g[i];
      }
    }
  });
  return c;
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "maximum");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::max(av[i], bv[i]);
  Tensor c = Tensor::from(a.shape(), std::move(out));
  auto an = a.node(), bn = b.node(), cn = c.node();
  record_if_tracked({a, b}, c, [an, bn, cn] {
    const auto& g = cn->grad;
    auto& ga = an->ensure_grad();
    auto& gb = bn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (an->values[i] >= bn->values[i]) {
        ga[i] += g[i];
      } else {
        gb[i] += g[i];
      }
    }
  });
  return c;
}

// ---- row-vector broadcasts -------------------------------------------------

static void check_rowvec(const Tensor& x, const Tensor& v, const char* op) {
  if (x.rank() != 2 && x.rank() != 1) {
    throw ShapeError(std::string(op) + ": expected matrix, got " + shape_str(x.shape()));
  }
  if (v.numel() != x.cols()) {
    throw ShapeError(std::string(op) + ": row vector length " + shape_str(v.shape()) +
                     " does not match width of " + shape_str(x.shape()));
  }
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  check_rowvec(x, v, "add_rowvec");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += v.values()[j];
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node(), vn = v.node(), yn = y.node();
  record_if_tracked({x, v}, y, [xn, vn, yn, m, n] {
    const auto& g = yn->grad;
    auto& gx = xn->ensure_grad();
    auto& gv = vn->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        gx[i * n + j] += g[i * n + j];
        gv[j] += g[i * n + j];
      }
    }
  });
  return y;
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  check_rowvec(x, v, "mul_rowvec");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= v.values()[j];
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node(), vn = v.node(), yn = y.node();
  record_if_tracked({x, v}, y, [xn, vn, yn, m, n] {
    const auto& g = yn->grad;
    auto& gx = xn->ensure_grad();
    auto& gv = vn->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        gx[i * n + j] += g[i * n + j] * vn->values[j];
        gv[j] += g[i * n + j] * xn->values[i * n + j];
      }
    }
  });
  return y;
}

// ---- scalar-parameter unaries ----------------------------------------------

Tensor scale(const Tensor& x, double c) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * c;
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn, c] {
    auto& gx = xn->ensure_grad();
    const auto& g = yn->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * c;
  });
  return y;
}

Tensor add_scalar(const Tensor& x, double c) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + c;
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn] {
    auto& gx = xn->ensure_grad();
    const auto& g = yn->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
  return y;
}

Tensor clamp_min(const Tensor& x, double c) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::max(xv[i], c);
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn, c] {
    auto& gx = xn->ensure_grad();
    const auto& g = yn->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xn->values[i] >= c) gx[i] += g[i];
    }
  });
  return y;
}

Tensor relu(const Tensor& x) { return clamp_min(x, 0.0); }

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu_f(double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); }
double gelu_df(double v) {
  return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
         v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
}
double sigmoid_f(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}
double sigmoid_df(double v) {
  const double s = sigmoid_f(v);
  return s * (1.0 - s);
}
double abs_f(double v) { return std::fabs(v); }
double abs_df(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }
}  // namespace

Tensor gelu(const Tensor& x) { return unary_elementwise(x, "gelu", gelu_f, gelu_df); }
Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(x, "sigmoid", sigmoid_f, sigmoid_df);
}
Tensor abs(const Tensor& x) { return unary_elementwise(x, "abs", abs_f, abs_df); }

// ---- row-structured ops ------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  check_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      s += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn, m, n] {
    auto& gx = xn->ensure_grad();
    const auto& g = yn->grad;
    const auto& yv = yn->values;
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * yv[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        gx[i * n + j] += yv[i * n + j] * (g[i * n + j] - dot);
      }
    }
  });
  return y;
}

Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps) {
  check_matrix(x, "layernorm_rows");
  check_rowvec(x, gamma, "layernorm_rows");
  check_rowvec(x, beta, "layernorm_rows");
  const std::size_t m = x.rows(), n = x.cols();
  const auto& xv = x.values();
  std::vector<double> out(m * n);
  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double s = 1.0 / std::sqrt(var + eps);
    inv_std[i] = s;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * s;
      xhat[i * n + j] = h;
      out[i * n + j] = h * gamma.values()[j] + beta.values()[j];
    }
  }
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node();
  auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
  auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
  record_if_tracked({x, gamma, beta}, y, [xn, gn, bn, yn, xh, is, m, n] {
    const auto& g = yn->grad;
    auto& gx = xn->ensure_grad();
    auto& gg = gn->ensure_grad();
    auto& gb = bn->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      double mean_dz = 0.0, mean_dz_xhat = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double dz = g[i * n + j] * gn->values[j];
        mean_dz += dz;
        mean_dz_xhat += dz * (*xh)[i * n + j];
      }
      mean_dz /= static_cast<double>(n);
      mean_dz_xhat /= static_cast<double>(n);
      const double s = (*is)[i];
      for (std::size_t j = 0; j < n; ++j) {
        const double dz = g[i * n + j] * gn->values[j];
        gx[i * n + j] += s * (dz - mean_dz - (*xh)[i * n + j] * mean_dz_xhat);
        gg[j] += g[i * n + j] * (*xh)[i * n + j];
        gb[j] += g[i * n + j];
      }
    }
  });
  return y;
}

// ---- concat / slice ------------------------------------------------------------

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InputError("concat_rows: empty part list");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    check_matrix(p, "concat_rows");
    if (p.cols() != n) {
      throw ShapeError("concat_rows: width mismatch " + shape_str(parts[0].shape()) +
                       " vs " + shape_str(p.shape()));
    }
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  Tensor y = Tensor::from({m, n}, std::move(out));
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracked(p);
  if (track) {
    std::vector<detail::NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto yn = y.node();
    auto tape = detail::active_tape();
    y.node()->graph = tape;
    for (const auto& in : ins) {
      if (in->requires_grad) in->ensure_grad();
    }
    tape->record(yn, [ins, yn, n] {
      const auto& g = yn->grad;
      std::size_t row = 0;
      for (const auto& in : ins) {
        auto& gi = in->ensure_grad();
        const std::size_t r = in->values.size() / n;
        for (std::size_t i = 0; i < r * n; ++i) gi[i] += g[row * n + i];
        row += r;
      }
    });
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InputError("concat_cols: empty part list");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    check_matrix(p, "concat_cols");
    if (p.rows() != m) {
      throw ShapeError("concat_cols: height mismatch " + shape_str(parts[0].shape()) +
                       " vs " + shape_str(p.shape()));
    }
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < pc; ++j)
        out[i * n + col + j] = p.values()[i * pc + j];
    col += pc;
  }
  Tensor y = Tensor::from({m, n}, std::move(out));
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracked(p);
  if (track) {
    std::vector<detail::NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    auto yn = y.node();
    auto tape = detail::active_tape();
    y.node()->graph = tape;
    for (const auto& in : ins) {
      if (in->requires_grad) in->ensure_grad();
    }
    tape->record(yn, [ins, yn, m, n] {
      const auto& g = yn->grad;
      std::size_t col0 = 0;
      for (const auto& in : ins) {
        auto& gi = in->ensure_grad();
        const std::size_t pc = in->values.size() / m;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < pc; ++j)
            gi[i * pc + j] += g[i * n + col0 + j];
        col0 += pc;
      }
    });
  }
  return y;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  check_matrix(x, "slice_rows");
  if (begin >= end || end > x.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t n = x.cols(), m = end - begin;
  std::vector<double> out(x.values().begin() + begin * n, x.values().begin() + end * n);
  Tensor y = Tensor::from({m, n}, std::move(out));
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn, begin, m, n] {
    auto& gx = xn->ensure_grad();
    const auto& g = yn->grad;
    for (std::size_t i = 0; i < m * n; ++i) gx[begin * n + i] += g[i];
  });
  return y;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  check_matrix(x, "slice_cols");
  if (begin >= end || end > x.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.values()[i * n + begin + j];
  Tensor y = Tensor::from({m, w}, std::move(out));
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn, begin, m, n, w] {
    auto& gx = xn->ensure_grad();
    const auto& g = yn->grad;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
  });
  return y;
}

// ---- reductions ------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor y = Tensor::scalar(s);
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn] {
    auto& gx = xn->ensure_grad();
    const double g = yn->grad[0];
    for (double& v : gx) v += g;
  });
  return y;
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor y = Tensor::scalar(s * inv);
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn, inv] {
    auto& gx = xn->ensure_grad();
    const double g = yn->grad[0] * inv;
    for (double& v : gx) v += g;
  });
  return y;
}

Tensor mean_rows(const Tensor& x) {
  check_matrix(x, "mean_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x.values()[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out) v *= inv;
  Tensor y = Tensor::from({1, n}, std::move(out));
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn, m, n, inv] {
    auto& gx = xn->ensure_grad();
    const auto& g = yn->grad;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j] * inv;
  });
  return y;
}

// ---- lookup / losses ----------------------------------------------------------------

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  check_matrix(table, "gather_rows");
  if (ids.empty()) throw InputError("gather_rows: empty id list");
  const std::size_t v = table.rows(), n = table.cols();
  for (std::size_t id : ids) {
    if (id >= v) {
      throw InputError("gather_rows: id " + std::to_string(id) +
                       " out of vocabulary (size " + std::to_string(v) + ")");
    }
  }
  std::vector<double> out(ids.size() * n);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = table.values()[ids[i] * n + j];
  Tensor y = Tensor::from({ids.size(), n}, std::move(out));
  auto tn = table.node(), yn = y.node();
  record_if_tracked({table}, y, [tn, yn, ids, n] {
    auto& gt = tn->ensure_grad();
    const auto& g = yn->grad;
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gt[ids[i] * n + j] += g[i * n + j];
  });
  return y;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& labels) {
  check_matrix(logits, "cross_entropy");
  const std::size_t m = logits.rows(), c = logits.cols();
  if (labels.size() != m) {
    throw InputError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(m) + " logit rows");
  }
  for (std::size_t l : labels) {
    if (l >= c) {
      throw InputError("cross_entropy: label " + std::to_string(l) + " out of range (" +
                       std::to_string(c) + " classes)");
    }
  }
  const auto& lv = logits.values();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = lv.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    total += std::log(s) + mx - row[labels[i]];
  }
  Tensor y = Tensor::scalar(total / static_cast<double>(m));
  auto ln = logits.node(), yn = y.node();
  record_if_tracked({logits}, y, [ln, yn, labels, m, c] {
    auto& gl = ln->ensure_grad();
    const double g = yn->grad[0] / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = ln->values.data() + i * c;
      double mx = row[0];
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
      for (std::size_t j = 0; j < c; ++j) {
        const double p = std::exp(row[j] - mx) / s;
        gl[i * c + j] += g * (p - (j == labels[i] ? 1.0 : 0.0));
      }
    }
  });
  return y;
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
  if (logits.numel() != targets.size()) {
    throw InputError("bce_with_logits: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(logits.numel()) + " logits");
  }
  const auto& lv = logits.values();
  double total = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double l = lv[i];
    // max(l,0) - l*t + log(1 + exp(-|l|))
    total += std::max(l, 0.0) - l * targets[i] + std::log1p(std::exp(-std::fabs(l)));
  }
  const double inv = 1.0 / static_cast<double>(lv.size());
  Tensor y = Tensor::scalar(total * inv);
  auto ln = logits.node(), yn = y.node();
  record_if_tracked({logits}, y, [ln, yn, targets, inv] {
    auto& gl = ln->ensure_grad();
    const double g = yn->grad[0] * inv;
    for (std::size_t i = 0; i < gl.size(); ++i) {
      gl[i] += g * (sigmoid_f(ln->values[i]) - targets[i]);
    }
  });
  return y;
}

Tensor dropout(const Tensor& x, double p, std::uint64_t mask_seed) {
  if (p < 0.0 || p >= 1.0) {
    throw InputError("dropout: probability " + std::to_string(p) + " outside [0,1)");
  }
  if (p == 0.0) return x;
  // splitmix64 stream keyed by mask_seed; self-contained so replay is exact
  auto next = [state = mask_seed]() mutable {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  const double keep = 1.0 - p;
  const double inv_keep = 1.0 / keep;
  const auto& xv = x.values();
  auto mask = std::make_shared<std::vector<double>>(xv.size());
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double u = static_cast<double>(next() >> 11) * 0x1.0p-53;
    (*mask)[i] = (u < keep) ? inv_keep : 0.0;
    out[i] = xv[i] * (*mask)[i];
  }
  Tensor y = Tensor::from(x.shape(), std::move(out));
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn, mask] {
    auto& gx = xn->ensure_grad();
    const auto& g = yn->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
  return y;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_matrix(q, "attention");
  check_matrix(k, "attention");
  check_matrix(v, "attention");
  if (q.cols() != k.cols()) {
    throw ShapeError("attention: query/key width mismatch " + shape_str(q.shape()) +
                     " vs " + shape_str(k.shape()));
  }
  if (k.rows() != v.rows()) {
    throw ShapeError("attention: key/value row mismatch " + shape_str(k.shape()) +
                     " vs " + shape_str(v.shape()));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor scores = scale(matmul_nt(q, k), inv_sqrt_d);
  return matmul(softmax_rows(scores), v);
}

Tensor custom_unary(
    const Tensor& x, Shape out_shape, std::vector<double> out_values,
    std::function<void(const std::vector<double>&, std::vector<double>&)> backward_fn) {
  Tensor y = Tensor::from(std::move(out_shape), std::move(out_values));
  auto xn = x.node(), yn = y.node();
  record_if_tracked({x}, y, [xn, yn, backward_fn] {
    backward_fn(yn->grad, xn->ensure_grad());
  });
  return y;
}

}  // namespace mmdg
