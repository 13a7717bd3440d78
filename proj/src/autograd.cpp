#include "srnet/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace srnet {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

const Tensor& Var::value() const {
  if (!tape) throw TapeError("Var is not attached to a tape");
  return tape->value(id);
}

void Tape::check(Var v) const {
  if (v.tape != this) throw TapeError("variable belongs to a different tape");
  if (v.id >= nodes_.size()) throw TapeError("dangling variable id");
}

Var Tape::watch(Tensor& param) {
  Node n;
  n.external = &param;
  n.requires_grad = true;
  n.watched = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(const Tensor& external) {
  Node n;
  n.external = const_cast<Tensor*>(&external);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor&& owned) {
  Node n;
  n.owned = std::move(owned);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (Var v : inputs) {
    check(v);
    needs = needs || nodes_[v.id].requires_grad;
  }
  Node n;
  n.owned = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return n.external ? *n.external : n.owned;
}

std::span<float> Tape::grad(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.watched) return n.external->grad();
  if (n.grad.empty()) n.grad.assign(value(id).numel(), 0.0f);
  return n.grad;
}

std::span<const float> Tape::grad_view(std::size_t id) const {
  const Node& n = nodes_.at(id);
  if (n.watched) return n.external->grad();
  return n.grad;
}

void Tape::backward(Var loss) {
  check(loss);
  if (backward_done_) throw TapeError("backward already ran on this tape");
  if (value(loss.id).numel() != 1)
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(value(loss.id).shape()));
  backward_done_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id)[0] += 1.0f;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, i);
  }
}

namespace ops {
namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

void require_finite(const Tensor& t, const char* op) {
  for (float x : t.data())
    if (std::isnan(x)) throw NumericError(std::string(op) + ": NaN input");
}

struct AxisView {
  std::size_t outer, len, inner;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out({m, n});
  MapMat(out.ptr(), m, n).noalias() = CMapMat(A.ptr(), m, k) * CMapMat(B.ptr(), k, n);
  return a.tape->push(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, std::size_t o) {
    CMapMat g(t.grad_view(o).data(), m, n);
    if (t.requires_grad(a.id))
      MapMat(t.grad(a.id).data(), m, k).noalias() += g * CMapMat(t.value(b.id).ptr(), k, n).transpose();
    if (t.requires_grad(b.id))
      MapMat(t.grad(b.id).data(), k, n).noalias() += CMapMat(t.value(a.id).ptr(), m, k).transpose() * g;
  });
}

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape(A, B, "add");
  Tensor out = A.detached();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[i];
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    for (Var in : {a, b}) {
      if (!t.requires_grad(in.id)) continue;
      auto gi = t.grad(in.id);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
    }
  });
}

Var add_row(Var a, Var bias) {
  const Tensor& A = a.value();
  const Tensor& B = bias.value();
  if (B.numel() != A.cols())
    throw ShapeError("add_row: bias " + shape_str(B.shape()) + " does not match " + shape_str(A.shape()));
  Tensor out = A.detached();
  const std::size_t rows = A.rows(), cols = A.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += B[c];
  return a.tape->push(std::move(out), {a, bias}, [a, bias, rows, cols](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    if (t.requires_grad(a.id)) {
      auto ga = t.grad(a.id);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(bias.id)) {
      auto gb = t.grad(bias.id);
      for (std::size_t c = 0; c < cols; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) s += g[r * cols + c];
        gb[c] += static_cast<float>(s);
      }
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape(A, B, "mul");
  Tensor out = A.detached();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    if (t.requires_grad(a.id)) {
      auto ga = t.grad(a.id);
      const Tensor& Bv = t.value(b.id);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * Bv[i];
    }
    if (t.requires_grad(b.id)) {
      auto gb = t.grad(b.id);
      const Tensor& Av = t.value(a.id);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * Av[i];
    }
  });
}

Var scale(Var a, float factor) {
  Tensor out = a.value().detached();
  for (float& x : out.data()) x *= factor;
  return a.tape->push(std::move(out), {a}, [a, factor](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    auto ga = t.grad(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * g[i];
  });
}

Var relu(Var a) {
  Tensor out = a.value().detached();
  for (float& x : out.data()) x = x > 0.0f ? x : 0.0f;
  return a.tape->push(std::move(out), {a}, [a](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    auto ga = t.grad(a.id);
    const Tensor& x = t.value(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (x[i] > 0.0f) ga[i] += g[i];
  });
}

Var gelu(Var a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  Tensor out = a.value().detached();
  for (float& x : out.data()) x = static_cast<float>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  return a.tape->push(std::move(out), {a}, [a](Tape& t, std::size_t o) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    auto g = t.grad_view(o);
    auto ga = t.grad(a.id);
    const Tensor& x = t.value(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double xi = x[i];
      const double cdf = 0.5 * (1.0 + std::erf(xi * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
      ga[i] += static_cast<float>(g[i] * (cdf + xi * pdf));
    }
  });
}

Var softmax(Var a, std::size_t axis) {
  const Tensor& A = a.value();
  require_finite(A, "softmax");
  const AxisView v = axis_view(A.shape(), axis);
  Tensor out(A.shape());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t j = 0; j < v.len; ++j) mx = std::max(mx, A[base + j * v.inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < v.len; ++j) s += std::exp(static_cast<double>(A[base + j * v.inner]) - mx);
      for (std::size_t j = 0; j < v.len; ++j)
        out[base + j * v.inner] = static_cast<float>(std::exp(static_cast<double>(A[base + j * v.inner]) - mx) / s);
    }
  return a.tape->push(std::move(out), {a}, [a, v](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    auto ga = t.grad(a.id);
    const Tensor& y = t.value(o);
    for (std::size_t oo = 0; oo < v.outer; ++oo)
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = oo * v.len * v.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < v.len; ++j) dot += static_cast<double>(g[base + j * v.inner]) * y[base + j * v.inner];
        for (std::size_t j = 0; j < v.len; ++j) {
          const std::size_t idx = base + j * v.inner;
          ga[idx] += static_cast<float>(y[idx] * (g[idx] - dot));
        }
      }
  });
}

Var log_softmax(Var a, std::size_t axis) {
  const Tensor& A = a.value();
  require_finite(A, "log_softmax");
  const AxisView v = axis_view(A.shape(), axis);
  Tensor out(A.shape());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t j = 0; j < v.len; ++j) mx = std::max(mx, A[base + j * v.inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < v.len; ++j) s += std::exp(static_cast<double>(A[base + j * v.inner]) - mx);
      const double lse = mx + std::log(s);
      for (std::size_t j = 0; j < v.len; ++j)
        out[base + j * v.inner] = static_cast<float>(A[base + j * v.inner] - lse);
    }
  return a.tape->push(std::move(out), {a}, [a, v](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    auto ga = t.grad(a.id);
    const Tensor& y = t.value(o);
    for (std::size_t oo = 0; oo < v.outer; ++oo)
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = oo * v.len * v.inner + in;
        double gs = 0.0;
        for (std::size_t j = 0; j < v.len; ++j) gs += g[base + j * v.inner];
        for (std::size_t j = 0; j < v.len; ++j) {
          const std::size_t idx = base + j * v.inner;
          ga[idx] += static_cast<float>(g[idx] - std::exp(static_cast<double>(y[idx])) * gs);
        }
      }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, float eps) {
  const Tensor& X = x.value();
  require_finite(X, "layer_norm");
  const std::size_t rows = X.rows(), cols = X.cols();
  if (gamma.value().numel() != cols || beta.value().numel() != cols)
    throw ShapeError("layer_norm: affine parameters do not match width " + std::to_string(cols));
  Tensor out(X.shape());
  // normalized values and inverse std, kept for backward
  auto xhat = std::make_shared<std::vector<float>>(X.numel());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  const Tensor& G = gamma.value();
  const Tensor& Bt = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = X.ptr() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = static_cast<float>(is);
    for (std::size_t c = 0; c < cols; ++c) {
      const float xh = static_cast<float>((row[c] - mu) * is);
      (*xhat)[r * cols + c] = xh;
      out[r * cols + c] = xh * G[c] + Bt[c];
    }
  }
  return x.tape->push(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, rows, cols, xhat, inv_std](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    const Tensor& G = t.value(gamma.id);
    if (t.requires_grad(gamma.id) || t.requires_grad(beta.id)) {
      for (std::size_t c = 0; c < cols; ++c) {
        double sg = 0.0, sb = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          sg += static_cast<double>(g[r * cols + c]) * (*xhat)[r * cols + c];
          sb += g[r * cols + c];
        }
        if (t.requires_grad(gamma.id)) t.grad(gamma.id)[c] += static_cast<float>(sg);
        if (t.requires_grad(beta.id)) t.grad(beta.id)[c] += static_cast<float>(sb);
      }
    }
    if (!t.requires_grad(x.id)) return;
    auto gx = t.grad(x.id);
    for (std::size_t r = 0; r < rows; ++r) {
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double dxh = static_cast<double>(g[r * cols + c]) * G[c];
        m1 += dxh;
        m2 += dxh * (*xhat)[r * cols + c];
      }
      m1 /= static_cast<double>(cols);
      m2 /= static_cast<double>(cols);
      for (std::size_t c = 0; c < cols; ++c) {
        const double dxh = static_cast<double>(g[r * cols + c]) * G[c];
        gx[r * cols + c] += static_cast<float>((*inv_std)[r] * (dxh - m1 - (*xhat)[r * cols + c] * m2));
      }
    }
  });
}

Var embedding_lookup(Var table, std::span<const int> ids) {
  const Tensor& T = table.value();
  if (T.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2");
  const std::size_t vocab = T.dim(0), width = T.dim(1);
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  Tensor out({ids.size(), width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(vocab));
    std::copy_n(T.ptr() + ids[i] * width, width, out.ptr() + i * width);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.tape->push(std::move(out), {table}, [table, idv = std::move(idv), width](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    auto gt = t.grad(table.id);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t c = 0; c < width; ++c) gt[idv[i] * width + c] += g[i * width + c];
  });
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& X = x.value();
  const std::size_t cols = X.cols();
  if (rows.empty()) throw ShapeError("select_rows: empty row list");
  Tensor out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= X.rows()) throw ShapeError("select_rows: row index out of range");
    std::copy_n(X.ptr() + rows[i] * cols, cols, out.ptr() + i * cols);
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  return x.tape->push(std::move(out), {x}, [x, rv = std::move(rv), cols](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    auto gx = t.grad(x.id);
    for (std::size_t i = 0; i < rv.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) gx[rv[i] * cols + c] += g[i * cols + c];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (float x : a.value().data()) s += x;
  return a.tape->push(Tensor::scalar(static_cast<float>(s)), {a}, [a](Tape& t, std::size_t o) {
    const float g = t.grad_view(o)[0];
    for (float& gi : t.grad(a.id)) gi += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().numel());
  double s = 0.0;
  for (float x : a.value().data()) s += x;
  return a.tape->push(Tensor::scalar(static_cast<float>(s / n)), {a}, [a, n](Tape& t, std::size_t o) {
    const float g = static_cast<float>(t.grad_view(o)[0] / n);
    for (float& gi : t.grad(a.id)) gi += g;
  });
}

Var cross_entropy_from_logits(Var logits, std::span<const int> targets) {
  const Tensor& L = logits.value();
  require_finite(L, "cross_entropy_from_logits");
  const std::size_t rows = L.rows(), k = L.cols();
  if (targets.size() != rows) throw ShapeError("cross_entropy_from_logits: target count mismatch");
  auto probs = std::make_shared<std::vector<double>>(L.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= k)
      throw std::out_of_range("cross_entropy_from_logits: target outside class range");
    const float* row = L.ptr() + r * k;
    const float mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(static_cast<double>(row[c]) - mx);
    for (std::size_t c = 0; c < k; ++c) (*probs)[r * k + c] = std::exp(static_cast<double>(row[c]) - mx) / s;
    total += -(static_cast<double>(row[targets[r]]) - mx - std::log(s));
  }
  std::vector<int> tv(targets.begin(), targets.end());
  return logits.tape->push(Tensor::scalar(static_cast<float>(total / rows)), {logits},
                           [logits, probs, tv = std::move(tv), rows, k](Tape& t, std::size_t o) {
    const double g = t.grad_view(o)[0] / static_cast<double>(rows);
    auto gl = t.grad(logits.id);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < k; ++c) {
        const double y = static_cast<int>(c) == tv[r] ? 1.0 : 0.0;
        gl[r * k + c] += static_cast<float>(g * ((*probs)[r * k + c] - y));
      }
  });
}

Var weighted_nll(Var log_probs, const Tensor& weights) {
  const Tensor& L = log_probs.value();
  require_same_shape(L, weights, "weighted_nll");
  const std::size_t rows = L.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < L.numel(); ++i) total -= static_cast<double>(weights[i]) * L[i];
  return log_probs.tape->push(Tensor::scalar(static_cast<float>(total / rows)), {log_probs},
                              [log_probs, w = weights.detached(), rows](Tape& t, std::size_t o) {
    const double g = t.grad_view(o)[0] / static_cast<double>(rows);
    auto gl = t.grad(log_probs.id);
    for (std::size_t i = 0; i < gl.size(); ++i) gl[i] -= static_cast<float>(g * w[i]);
  });
}

Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads,
              std::span<const std::size_t> lengths) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  require_same_shape(Q, K, "attention");
  require_same_shape(Q, V, "attention");
  if (Q.rank() != 2 || Q.rows() != batch * seq) throw ShapeError("attention: expected [batch*seq x d] inputs");
  const std::size_t d = Q.cols();
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by head count");
  if (lengths.size() != batch) throw ShapeError("attention: one length per sequence required");
  for (std::size_t len : lengths)
    if (len == 0 || len > seq) throw ShapeError("attention: sequence length out of range");
  const std::size_t dh = d / heads;
  const float inv = 1.0f / std::sqrt(static_cast<float>(dh));
  // attention probabilities per (batch, head), [seq x seq] each
  auto probs = std::make_shared<std::vector<float>>(batch * heads * seq * seq, 0.0f);
  Tensor out({batch * seq, d});
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = lengths[b];
    for (std::size_t h = 0; h < heads; ++h) {
      float* P = probs->data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const float* qi = Q.ptr() + (b * seq + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          const float* kj = K.ptr() + (b * seq + j) * d + h * dh;
          float s = 0.0f;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        float* oi = out.ptr() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          const float p = static_cast<float>(scores[j] / z);
          P[i * seq + j] = p;
          const float* vj = V.ptr() + (b * seq + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  return q.tape->push(std::move(out), {q, k, v},
                      [q, k, v, batch, seq, heads, d, dh, inv, probs, lens = std::move(lens)](Tape& t, std::size_t o) {
    auto g = t.grad_view(o);
    const Tensor& Q = t.value(q.id);
    const Tensor& K = t.value(k.id);
    const Tensor& V = t.value(v.id);
    const bool need_q = t.requires_grad(q.id), need_k = t.requires_grad(k.id), need_v = t.requires_grad(v.id);
    float* gq = need_q ? t.grad(q.id).data() : nullptr;
    float* gk = need_k ? t.grad(k.id).data() : nullptr;
    float* gv = need_v ? t.grad(v.id).data() : nullptr;
    std::vector<float> dp(seq);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t len = lens[b];
      for (std::size_t h = 0; h < heads; ++h) {
        const float* P = probs->data() + (b * heads + h) * seq * seq;
        for (std::size_t i = 0; i < seq; ++i) {
          const float* gi = g.data() + (b * seq + i) * d + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            const float* vj = V.ptr() + (b * seq + j) * d + h * dh;
            float s = 0.0f;
            for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
            dp[j] = s;
            dot += static_cast<double>(s) * P[i * seq + j];
            if (need_v) {
              float* gvj = gv + (b * seq + j) * d + h * dh;
              const float p = P[i * seq + j];
              for (std::size_t c = 0; c < dh; ++c) gvj[c] += p * gi[c];
            }
          }
          if (!need_q && !need_k) continue;
          const float* qi = Q.ptr() + (b * seq + i) * d + h * dh;
          for (std::size_t j = 0; j < len; ++j) {
            const float ds = static_cast<float>(P[i * seq + j] * (dp[j] - dot)) * inv;
            const float* kj = K.ptr() + (b * seq + j) * d + h * dh;
            if (need_q) {
              float* gqi = gq + (b * seq + i) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
            }
            if (need_k) {
              float* gkj = gk + (b * seq + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
            }
          }
        }
      }
    }
  });
}

}  // namespace ops
}  // namespace srnet
