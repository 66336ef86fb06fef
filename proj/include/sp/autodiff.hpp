#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "sp/tensor.hpp"

namespace sp {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
};

/// Reverse-mode tape. Every op appends a node holding its output and a
/// closure that pushes the output gradient to its inputs. Gradients of
/// parameter leaves are accumulated into Parameter::grad by backward().
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var param(Parameter& p);

  // Records an op output. `backward` is dropped when no input needs grad.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient slot of a node, zero-initialised on first access.
  Tensor& grad(Var v);

  // Seeds d(loss)/d(loss) = 1 and runs every closure in reverse order.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    Backward backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

enum class Activation { identity, relu, sigmoid, gelu_tanh, gelu_erf };

std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view name);

double activate(Activation a, double x);
double activate_derivative(Activation a, double x);

// Differentiable primitives. Matrices are (rows, cols); rank-1 tensors are
// row vectors. Token sequences of a batch are stacked as (B*S, C) with each
// image occupying a contiguous segment of `seq_len` rows.
namespace ops {

// x W^T (+ b); W is (out, in), b is (out).
Var linear(Var x, Var w, std::optional<Var> b = std::nullopt);
Var add(Var a, Var b);
Var scale(Var x, double s);
// Adds `tile` (T, C) to every consecutive T-row block of x (R, C), R % T == 0.
Var add_tiled(Var x, Var tile);
Var layer_norm(Var x, Var gamma, Var beta, double eps);
Var activation(Var x, Activation a);
Var softmax_rows(Var x);
// Scaled dot-product attention over a fused (B*S, 3C) qkv matrix; the
// divisor is head_dim^scale_exponent. Returns the concatenated per-head
// outputs (B*S, C) before the output projection. If `probs` is non-null it
// receives the attention weights with shape (B, heads, S, S).
Var attention(Var qkv, std::size_t seq_len, std::size_t heads,
              double scale_exponent, Tensor* probs = nullptr);
// Mean over rows [begin, end) of each segment: (B*S, C) -> (B, C).
Var segment_mean(Var x, std::size_t seq_len, std::size_t begin,
                 std::size_t end);
// Inserts token row b of `tokens` (B, C) before segment b of x (B*S, C).
Var prepend_token(Var x, Var tokens, std::size_t seq_len);
// Adds row b of `shift` (B, C) to every row of segment b of x.
Var add_segment_shift(Var x, Var shift, std::size_t seq_len);
Var concat_cols(Var a, Var b);
// Mean of the rows listed in each group: (R, C) -> (G, C).
Var group_mean(Var x, const std::vector<std::vector<std::size_t>>& groups);
// Pairwise cosine similarity times `scale`: (n, C) x (m, C) -> (n, m).
Var cosine_logits(Var a, Var b, double scale);
// Mean softmax cross-entropy of integer labels; returns a (1) tensor.
Var cross_entropy(Var logits, const std::vector<std::size_t>& labels);
Var sum_squares(Var x);

}  // namespace ops

}  // namespace sp
