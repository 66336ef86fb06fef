#include "sp/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sp {

void AttentionConfig::validate(std::size_t width_) const {
  if (num_heads == 0 || head_dim == 0 || num_heads * head_dim != width_) {
    throw ConfigError("attention: " + std::to_string(num_heads) + " heads x " +
                      std::to_string(head_dim) + " channels != width " +
                      std::to_string(width_));
  }
}

Tensor softmax(const Tensor& v, std::size_t axis) {
  require_finite(v, "softmax");
  const std::size_t n = v.dim(axis);
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < v.rank(); ++a) inner *= v.shape()[a];
  const std::size_t outer = v.size() / (n * inner);
  Tensor out(v.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = v[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, v[base + k * inner]);
      double sum = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        out[base + k * inner] = std::exp(v[base + k * inner] - mx);
        sum += out[base + k * inner];
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= sum;
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Parameter& gamma, const Parameter& beta,
                  double eps) {
  Tape tape(false);
  return ops::layer_norm(tape.constant(x), bind(tape, gamma), bind(tape, beta), eps)
      .value();
}

Var multihead_self_attention(Var z, Var w_qkv, Var w_out, const AttentionConfig& cfg,
                             std::size_t seq_len, Tensor* probs) {
  cfg.validate(z.value().cols());
  Var qkv = ops::linear(z, w_qkv);
  Var heads = ops::attention(qkv, seq_len, cfg.num_heads, cfg.scale_exponent, probs);
  return ops::linear(heads, w_out);
}

Tensor multihead_self_attention(const Tensor& z, const AttentionParams& params,
                                const AttentionConfig& cfg, Tensor* probs) {
  if (z.rank() != 2) throw ShapeError("MSA expects (S, C), got " + shape_str(z.shape()));
  Tape tape(false);
  return multihead_self_attention(tape.constant(z), bind(tape, params.w_qkv),
                                  bind(tape, params.w_out), cfg, z.rows(), probs)
      .value();
}

Var mlp_block(Var x, Var w1, Var b1, Var w2, Var b2, Activation inner,
              Activation outer) {
  Var h = ops::activation(ops::linear(x, w1, b1), inner);
  return ops::activation(ops::linear(h, w2, b2), outer);
}

Tensor mlp_block(const Tensor& x, const MlpParams& p, Activation inner,
                 Activation outer) {
  Tape tape(false);
  return mlp_block(tape.constant(x), bind(tape, p.w1), bind(tape, p.b1),
                   bind(tape, p.w2), bind(tape, p.b2), inner, outer)
      .value();
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine similarity of a zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = stddev * rng.normal();
  return t;
}

MlpParams make_mlp(const std::string& prefix, std::size_t in, std::size_t hidden,
                   std::size_t out, double stddev, Rng& rng) {
  return MlpParams{
      Parameter(prefix + ".w1", normal_tensor({hidden, in}, stddev, rng)),
      Parameter(prefix + ".b1", Tensor({hidden})),
      Parameter(prefix + ".w2", normal_tensor({out, hidden}, stddev, rng)),
      Parameter(prefix + ".b2", Tensor({out})),
  };
}

GradCheckReport check_gradients(const LossFn& loss, std::span<Parameter* const> params,
                                double epsilon) {
  for (Parameter* p : params) p->zero_grad();
  loss(true);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    double worst = 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + epsilon;
      const double up = loss(false);
      p.value[i] = saved - epsilon;
      const double down = loss(false);
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[pi][i];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double err = scale < 1e-8 ? std::abs(a - numeric)
                                      : std::abs(a - numeric) / scale;
      worst = std::max(worst, err);
    }
    report.per_parameter.push_back({p.name, worst});
    report.max_error = std::max(report.max_error, worst);
  }
  std::stable_sort(report.per_parameter.begin(), report.per_parameter.end(),
                   [](const auto& a, const auto& b) { return a.max_error > b.max_error; });
  return report;
}

}  // namespace sp
