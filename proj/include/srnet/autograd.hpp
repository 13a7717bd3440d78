#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "srnet/tensor.hpp"

namespace srnet {

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Records primitive operations in execution order. Leaves are either
/// watched (external tensors whose grad buffer receives gradients) or
/// constants. Backward replays the record in reverse, once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var watch(Tensor& param);
  Var constant(const Tensor& external);
  Var constant(Tensor&& owned);

  /// Records an op output. `fn` runs during backward only when some input
  /// requires a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  void backward(Var loss);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer for a node, allocated on first use.
  std::span<float> grad(std::size_t id);
  std::span<const float> grad_view(std::size_t id) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor* external = nullptr;  // watched tensor or borrowed constant
    Tensor owned;
    std::vector<float> grad;     // for non-external nodes
    bool requires_grad = false;
    bool watched = false;
    BackwardFn backward;
  };

  void check(Var v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Differentiable primitives. All tensors are treated as row-major; ops
/// that speak of rows view a tensor as [rows x cols] with cols the last
/// dimension.
namespace ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
/// a[m x n] + bias[n] broadcast over rows.
Var add_row(Var a, Var bias);
Var mul(Var a, Var b);
Var scale(Var a, float factor);
Var relu(Var a);
Var gelu(Var a);
Var softmax(Var a, std::size_t axis);
Var log_softmax(Var a, std::size_t axis);
/// Row-wise normalization over the last dimension followed by gamma/beta.
Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f);
Var embedding_lookup(Var table, std::span<const int> ids);
Var select_rows(Var x, std::span<const std::size_t> rows);
Var sum(Var a);
Var mean(Var a);
/// Mean over rows of -log_softmax(logits)[row, target].
Var cross_entropy_from_logits(Var logits, std::span<const int> targets);
/// Mean over rows of -sum_k weights[row,k] * log_probs[row,k]; weights are
/// constants.
Var weighted_nll(Var log_probs, const Tensor& weights);

/// Multi-head scaled dot-product self-attention over a packed batch.
/// q, k, v are [batch*seq x d]; keys at positions >= lengths[b] are masked.
Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads,
              std::span<const std::size_t> lengths);

}  // namespace ops
}  // namespace srnet
