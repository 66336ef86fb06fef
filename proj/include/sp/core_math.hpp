#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sp/autodiff.hpp"
#include "sp/rng.hpp"
#include "sp/tensor.hpp"

namespace sp {

// Parameters enter a tape as differentiable leaves when mutable and as
// constants when const, so the same forward code serves training and
// read-only inference.
inline Var bind(Tape& tape, Parameter& p) { return tape.param(p); }
inline Var bind(Tape& tape, const Parameter& p) { return tape.constant(p.value); }

struct AttentionConfig {
  std::size_t num_heads = 1;
  std::size_t head_dim = 1;
  // Logits are divided by head_dim^scale_exponent.
  double scale_exponent = 0.25;

  std::size_t width() const { return num_heads * head_dim; }
  void validate(std::size_t width) const;
};

struct AttentionParams {
  Parameter w_qkv;  // (3*C, C): rows [q; k; v], head h owns columns h*Ch..
  Parameter w_out;  // (C, C)
};

struct MlpParams {
  Parameter w1, b1, w2, b2;
};

// Softmax along `axis` with max subtraction.
Tensor softmax(const Tensor& v, std::size_t axis);

Tensor layer_norm(const Tensor& x, const Parameter& gamma, const Parameter& beta,
                  double eps = 1e-5);

// Z is (S, C); returns (S, C). `probs`, if given, receives (1, heads, S, S).
Tensor multihead_self_attention(const Tensor& z, const AttentionParams& params,
                                const AttentionConfig& cfg, Tensor* probs = nullptr);
Var multihead_self_attention(Var z, Var w_qkv, Var w_out, const AttentionConfig& cfg,
                             std::size_t seq_len, Tensor* probs = nullptr);

// act2(W2 act1(W1 x + b1) + b2), applied row-wise.
Tensor mlp_block(const Tensor& x, const MlpParams& params, Activation inner,
                 Activation outer);
Var mlp_block(Var x, Var w1, Var b1, Var w2, Var b2, Activation inner,
              Activation outer);

double cosine_similarity(const Tensor& a, const Tensor& b);

// Initialisers.
Tensor normal_tensor(Shape shape, double stddev, Rng& rng);
MlpParams make_mlp(const std::string& prefix, std::size_t in, std::size_t hidden,
                   std::size_t out, double stddev, Rng& rng);

struct GradCheckEntry {
  std::string name;
  double max_error = 0.0;
};

struct GradCheckReport {
  double max_error = 0.0;
  std::vector<GradCheckEntry> per_parameter;  // worst first
};

// Evaluates the loss. With `with_grad` set it must also accumulate the
// analytic gradient into every Parameter::grad (which are zeroed first).
using LossFn = std::function<double(bool with_grad)>;

// Compares analytic gradients with central differences
// (f(t+eps) - f(t-eps)) / 2eps entry by entry. The error of an entry is
// |a - n| / max(|a|, |n|), or |a - n| when both magnitudes are below 1e-8.
GradCheckReport check_gradients(const LossFn& loss, std::span<Parameter* const> params,
                                double epsilon = 1e-4);

}  // namespace sp
