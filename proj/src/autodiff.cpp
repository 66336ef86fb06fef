#include "sp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace sp {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), std::nullopt, {}, nullptr, false});
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  nodes_.push_back(Node{p.value, std::nullopt, {}, &p, grad_enabled_});
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs,
                 Backward backward) {
  bool needs = false;
  if (grad_enabled_) {
    for (const Var& in : inputs) needs = needs || nodes_[in.id].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), std::nullopt,
                        needs ? std::move(backward) : Backward{}, nullptr,
                        needs});
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad(Var v) {
  auto& node = nodes_[v.id];
  if (!node.grad) node.grad.emplace(node.value.shape(), 0.0);
  return *node.grad;
}

void Tape::backward(Var loss) {
  if (!grad_enabled_) throw StateError("backward() on a tape without gradients");
  if (value(loss).size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     shape_str(value(loss).shape()));
  }
  grad(loss).fill(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.needs_grad || !node.grad) continue;
    if (node.param != nullptr) {
      node.param->grad.mat() += node.grad->mat();
    } else if (node.backward) {
      node.backward(*this, *node.grad);
    }
  }
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::gelu_tanh: return "gelu_tanh";
    case Activation::gelu_erf: return "gelu_erf";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  for (auto a : {Activation::identity, Activation::relu, Activation::sigmoid,
                 Activation::gelu_tanh, Activation::gelu_erf}) {
    if (activation_name(a) == name) return a;
  }
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0 ? x : 0.0;
    case Activation::sigmoid: return sigmoid(x);
    case Activation::gelu_tanh:
      return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
    case Activation::gelu_erf:
      return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  }
  return x;
}

double activate_derivative(Activation a, double x) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return x > 0 ? 1.0 : 0.0;
    case Activation::sigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case Activation::gelu_tanh: {
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      return 0.5 * (1.0 + t) +
             0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    }
    case Activation::gelu_erf: {
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi /
                         std::numbers::sqrt2;
      return cdf + x * pdf;
    }
  }
  return 1.0;
}

namespace ops {

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw StateError("vars recorded on different tapes");
}

Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

void softmax_rows_inplace(RowMatrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

}  // namespace

Var linear(Var x, Var w, std::optional<Var> b) {
  require_same_tape(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.cols() != wv.cols()) {
    throw ShapeError("linear: input " + shape_str(xv.shape()) +
                     " incompatible with weight " + shape_str(wv.shape()));
  }
  Tensor out(matrix_shape(xv.rows(), wv.rows()));
  out.mat().noalias() = xv.mat() * wv.mat().transpose();
  if (b) {
    const Tensor& bv = b->value();
    if (bv.size() != wv.rows()) {
      throw ShapeError("linear: bias " + shape_str(bv.shape()) +
                       " does not match weight " + shape_str(wv.shape()));
    }
    out.mat().rowwise() += bv.mat().row(0);
  }
  Tape& tape = *x.tape;
  if (b) {
    Var bias = *b;
    return tape.record(std::move(out), {x, w, bias},
                       [x, w, bias](Tape& t, const Tensor& g) {
                         if (t.needs_grad(x)) t.grad(x).mat().noalias() += g.mat() * w.value().mat();
                         if (t.needs_grad(w)) t.grad(w).mat().noalias() += g.mat().transpose() * x.value().mat();
                         if (t.needs_grad(bias)) t.grad(bias).mat().row(0) += g.mat().colwise().sum();
                       });
  }
  return tape.record(std::move(out), {x, w}, [x, w](Tape& t, const Tensor& g) {
    if (t.needs_grad(x)) t.grad(x).mat().noalias() += g.mat() * w.value().mat();
    if (t.needs_grad(w)) t.grad(w).mat().noalias() += g.mat().transpose() * x.value().mat();
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  if (a.value().shape() != b.value().shape()) {
    throw ShapeError("add: shapes " + shape_str(a.value().shape()) + " and " +
                     shape_str(b.value().shape()));
  }
  Tensor out = a.value();
  out.mat() += b.value().mat();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) t.grad(a).mat() += g.mat();
    if (t.needs_grad(b)) t.grad(b).mat() += g.mat();
  });
}

Var scale(Var x, double s) {
  Tensor out = x.value();
  out.mat() *= s;
  return x.tape->record(std::move(out), {x}, [x, s](Tape& t, const Tensor& g) {
    t.grad(x).mat() += s * g.mat();
  });
}

Var add_tiled(Var x, Var tile) {
  require_same_tape(x, tile);
  const Tensor& xv = x.value();
  const Tensor& tv = tile.value();
  const std::size_t period = tv.rows();
  if (tv.cols() != xv.cols() || xv.rows() % period != 0) {
    throw ShapeError("add_tiled: " + shape_str(tv.shape()) + " does not tile " +
                     shape_str(xv.shape()));
  }
  Tensor out = xv;
  auto om = out.mat();
  for (std::size_t r0 = 0; r0 < xv.rows(); r0 += period) {
    om.middleRows(Eigen::Index(r0), Eigen::Index(period)) += tv.mat();
  }
  return x.tape->record(std::move(out), {x, tile},
                        [x, tile, period](Tape& t, const Tensor& g) {
                          if (t.needs_grad(x)) t.grad(x).mat() += g.mat();
                          if (t.needs_grad(tile)) {
                            auto tg = t.grad(tile).mat();
                            for (std::size_t r0 = 0; r0 < g.rows(); r0 += period) {
                              tg += g.mat().middleRows(Eigen::Index(r0), Eigen::Index(period));
                            }
                          }
                        });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_tape(x, gamma);
  const Tensor& xv = x.value();
  const std::size_t c = xv.cols();
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("layer_norm: last axis " + std::to_string(c) +
                     " vs gamma " + shape_str(gamma.value().shape()) +
                     " / beta " + shape_str(beta.value().shape()));
  }
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  require_finite(xv, "layer_norm");
  const std::size_t n = xv.rows();
  RowMatrix xhat(n, c);
  Eigen::VectorXd inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = xv.mat().row(Eigen::Index(r));
    const double mean = row.mean();
    const double var = (row.array() - mean).square().mean();
    inv_std(Eigen::Index(r)) = 1.0 / std::sqrt(var + eps);
    xhat.row(Eigen::Index(r)) = (row.array() - mean) * inv_std(Eigen::Index(r));
  }
  Tensor out(xv.shape());
  out.mat() = (xhat.array().rowwise() * gamma.value().mat().row(0).array())
                  .rowwise() +
              beta.value().mat().row(0).array();
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& t, const Tensor& g) {
        const auto gm = g.mat();
        if (t.needs_grad(gamma)) {
          t.grad(gamma).mat().row(0) += (gm.array() * xhat.array()).colwise().sum().matrix();
        }
        if (t.needs_grad(beta)) t.grad(beta).mat().row(0) += gm.colwise().sum();
        if (t.needs_grad(x)) {
          RowMatrix dxhat = gm.array().rowwise() * gamma.value().mat().row(0).array();
          auto xg = t.grad(x).mat();
          for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
            const double m1 = dxhat.row(r).mean();
            const double m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
            xg.row(r).array() +=
                inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
          }
        }
      });
}

Var activation(Var x, Activation a) {
  if (a == Activation::identity) return x;
  Tensor out = x.value();
  for (double& v : out.storage()) v = activate(a, v);
  return x.tape->record(std::move(out), {x}, [x, a](Tape& t, const Tensor& g) {
    const auto& in = x.value().storage();
    auto& xg = t.grad(x).storage();
    for (std::size_t i = 0; i < in.size(); ++i) {
      xg[i] += g[i] * activate_derivative(a, in[i]);
    }
  });
}

Var softmax_rows(Var x) {
  require_finite(x.value(), "softmax");
  RowMatrix m = x.value().mat();
  softmax_rows_inplace(m);
  Tensor out(x.value().shape());
  out.mat() = m;
  return x.tape->record(std::move(out), {x},
                        [x, p = std::move(m)](Tape& t, const Tensor& g) {
                          const auto gm = g.mat();
                          Eigen::VectorXd dots = (gm.array() * p.array()).rowwise().sum();
                          t.grad(x).mat().array() +=
                              p.array() * (gm.array().colwise() - dots.array());
                        });
}

Var attention(Var qkv, std::size_t seq_len, std::size_t heads,
              double scale_exponent, Tensor* probs) {
  const Tensor& in = qkv.value();
  if (seq_len == 0 || heads == 0 || in.rows() % seq_len != 0 ||
      in.cols() % (3 * heads) != 0) {
    throw ConfigError("attention: qkv " + shape_str(in.shape()) +
                      " incompatible with seq_len " + std::to_string(seq_len) +
                      " and " + std::to_string(heads) + " heads");
  }
  require_finite(in, "attention");
  const auto S = Eigen::Index(seq_len);
  const auto B = Eigen::Index(in.rows() / seq_len);
  const auto H = Eigen::Index(heads);
  const auto C = Eigen::Index(in.cols() / 3);
  const auto Ch = C / H;
  const double inv_div = 1.0 / std::pow(double(Ch), scale_exponent);

  const auto qm = in.mat();
  std::vector<RowMatrix> p_cache(std::size_t(B * H));
  Tensor out({std::size_t(B * S), std::size_t(C)});
  auto om = out.mat();
  for (Eigen::Index b = 0; b < B; ++b) {
    for (Eigen::Index h = 0; h < H; ++h) {
      const auto q = qm.block(b * S, h * Ch, S, Ch);
      const auto k = qm.block(b * S, C + h * Ch, S, Ch);
      const auto v = qm.block(b * S, 2 * C + h * Ch, S, Ch);
      RowMatrix p = (q * k.transpose()) * inv_div;
      softmax_rows_inplace(p);
      om.block(b * S, h * Ch, S, Ch).noalias() = p * v;
      p_cache[std::size_t(b * H + h)] = std::move(p);
    }
  }
  if (probs != nullptr) {
    *probs = Tensor({std::size_t(B), std::size_t(H), std::size_t(S), std::size_t(S)});
    for (std::size_t i = 0; i < p_cache.size(); ++i) {
      std::copy(p_cache[i].data(), p_cache[i].data() + S * S,
                probs->data() + i * std::size_t(S * S));
    }
  }
  return qkv.tape->record(
      std::move(out), {qkv},
      [qkv, S, B, H, C, Ch, inv_div, p_cache = std::move(p_cache)](
          Tape& t, const Tensor& g) {
        const auto qm = qkv.value().mat();
        const auto gm = g.mat();
        auto dm = t.grad(qkv).mat();
        for (Eigen::Index b = 0; b < B; ++b) {
          for (Eigen::Index h = 0; h < H; ++h) {
            const RowMatrix& p = p_cache[std::size_t(b * H + h)];
            const auto q = qm.block(b * S, h * Ch, S, Ch);
            const auto k = qm.block(b * S, C + h * Ch, S, Ch);
            const auto v = qm.block(b * S, 2 * C + h * Ch, S, Ch);
            const auto dout = gm.block(b * S, h * Ch, S, Ch);
            dm.block(b * S, 2 * C + h * Ch, S, Ch).noalias() += p.transpose() * dout;
            RowMatrix dp = dout * v.transpose();
            Eigen::VectorXd dots = (dp.array() * p.array()).rowwise().sum();
            RowMatrix dlogits = p.array() * (dp.array().colwise() - dots.array());
            dlogits *= inv_div;
            dm.block(b * S, h * Ch, S, Ch).noalias() += dlogits * k;
            dm.block(b * S, C + h * Ch, S, Ch).noalias() += dlogits.transpose() * q;
          }
        }
      });
}

Var segment_mean(Var x, std::size_t seq_len, std::size_t begin,
                 std::size_t end) {
  const Tensor& xv = x.value();
  if (seq_len == 0 || xv.rows() % seq_len != 0 || begin >= end || end > seq_len) {
    throw ShapeError("segment_mean: rows " + std::to_string(xv.rows()) +
                     ", seq_len " + std::to_string(seq_len) + ", range [" +
                     std::to_string(begin) + ", " + std::to_string(end) + ")");
  }
  const std::size_t batch = xv.rows() / seq_len;
  const double inv = 1.0 / double(end - begin);
  Tensor out({batch, xv.cols()});
  for (std::size_t b = 0; b < batch; ++b) {
    out.mat().row(Eigen::Index(b)) =
        xv.mat().middleRows(Eigen::Index(b * seq_len + begin), Eigen::Index(end - begin))
            .colwise().sum() * inv;
  }
  return x.tape->record(std::move(out), {x},
                        [x, seq_len, begin, end, batch, inv](Tape& t, const Tensor& g) {
                          auto xg = t.grad(x).mat();
                          for (std::size_t b = 0; b < batch; ++b) {
                            xg.middleRows(Eigen::Index(b * seq_len + begin), Eigen::Index(end - begin))
                                .rowwise() += g.mat().row(Eigen::Index(b)) * inv;
                          }
                        });
}

Var prepend_token(Var x, Var tokens, std::size_t seq_len) {
  require_same_tape(x, tokens);
  const Tensor& xv = x.value();
  const Tensor& tv = tokens.value();
  if (seq_len == 0 || xv.rows() % seq_len != 0 || tv.cols() != xv.cols() ||
      tv.rows() != xv.rows() / seq_len) {
    throw ShapeError("prepend_token: tokens " + shape_str(tv.shape()) +
                     " vs sequence " + shape_str(xv.shape()));
  }
  const std::size_t batch = tv.rows();
  const auto S = Eigen::Index(seq_len);
  Tensor out({batch * (seq_len + 1), xv.cols()});
  auto om = out.mat();
  for (std::size_t b = 0; b < batch; ++b) {
    const auto base = Eigen::Index(b) * (S + 1);
    om.row(base) = tv.mat().row(Eigen::Index(b));
    om.middleRows(base + 1, S) = xv.mat().middleRows(Eigen::Index(b) * S, S);
  }
  return x.tape->record(std::move(out), {x, tokens},
                        [x, tokens, batch, S](Tape& t, const Tensor& g) {
                          const auto gm = g.mat();
                          for (std::size_t bi = 0; bi < batch; ++bi) {
                            const auto b = Eigen::Index(bi);
                            if (t.needs_grad(tokens)) t.grad(tokens).mat().row(b) += gm.row(b * (S + 1));
                            if (t.needs_grad(x)) t.grad(x).mat().middleRows(b * S, S) += gm.middleRows(b * (S + 1) + 1, S);
                          }
                        });
}

Var add_segment_shift(Var x, Var shift, std::size_t seq_len) {
  require_same_tape(x, shift);
  const Tensor& xv = x.value();
  const Tensor& sv = shift.value();
  if (seq_len == 0 || xv.rows() % seq_len != 0 || sv.cols() != xv.cols() ||
      sv.rows() != xv.rows() / seq_len) {
    throw ShapeError("add_segment_shift: shift " + shape_str(sv.shape()) +
                     " vs sequence " + shape_str(xv.shape()));
  }
  const auto S = Eigen::Index(seq_len);
  const auto batch = Eigen::Index(sv.rows());
  Tensor out = xv;
  for (Eigen::Index b = 0; b < batch; ++b) {
    out.mat().middleRows(b * S, S).rowwise() += sv.mat().row(b);
  }
  return x.tape->record(std::move(out), {x, shift},
                        [x, shift, S, batch](Tape& t, const Tensor& g) {
                          if (t.needs_grad(x)) t.grad(x).mat() += g.mat();
                          if (t.needs_grad(shift)) {
                            for (Eigen::Index b = 0; b < batch; ++b) {
                              t.grad(shift).mat().row(b) += g.mat().middleRows(b * S, S).colwise().sum();
                            }
                          }
                        });
}

Var concat_cols(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw ShapeError("concat_cols: " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  const auto ca = Eigen::Index(av.cols());
  const auto cb = Eigen::Index(bv.cols());
  Tensor out({av.rows(), av.cols() + bv.cols()});
  out.mat().leftCols(ca) = av.mat();
  out.mat().rightCols(cb) = bv.mat();
  return a.tape->record(std::move(out), {a, b}, [a, b, ca, cb](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) t.grad(a).mat() += g.mat().leftCols(ca);
    if (t.needs_grad(b)) t.grad(b).mat() += g.mat().rightCols(cb);
  });
}

Var group_mean(Var x, const std::vector<std::vector<std::size_t>>& groups) {
  const Tensor& xv = x.value();
  Tensor out({groups.size(), xv.cols()});
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (groups[gi].empty()) {
      throw InputError("group_mean: group " + std::to_string(gi) + " is empty");
    }
    auto row = out.mat().row(Eigen::Index(gi));
    for (std::size_t r : groups[gi]) {
      if (r >= xv.rows()) throw ShapeError("group_mean: row index out of range");
      row += xv.mat().row(Eigen::Index(r));
    }
    row /= double(groups[gi].size());
  }
  return x.tape->record(std::move(out), {x}, [x, groups](Tape& t, const Tensor& g) {
    auto xg = t.grad(x).mat();
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const double inv = 1.0 / double(groups[gi].size());
      for (std::size_t r : groups[gi]) {
        xg.row(Eigen::Index(r)) += g.mat().row(Eigen::Index(gi)) * inv;
      }
    }
  });
}

Var cosine_logits(Var a, Var b, double scale) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw ShapeError("cosine_logits: " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  }
  Eigen::VectorXd an = av.mat().rowwise().norm();
  Eigen::VectorXd bn = bv.mat().rowwise().norm();
  if ((an.array() == 0.0).any() || (bn.array() == 0.0).any()) {
    throw NumericError("cosine similarity of a zero-norm vector");
  }
  RowMatrix u = av.mat().array().colwise() / an.array();
  RowMatrix w = bv.mat().array().colwise() / bn.array();
  RowMatrix sim = u * w.transpose();
  Tensor out({av.rows(), bv.rows()});
  out.mat() = sim * scale;
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, scale, an = std::move(an), bn = std::move(bn), u = std::move(u),
       w = std::move(w), sim = std::move(sim)](Tape& t, const Tensor& g) {
        // d s_ij / d a_i = (w_j - s_ij u_i) / |a_i|, symmetric for b.
        RowMatrix gs = g.mat() * scale;
        if (t.needs_grad(a)) {
          RowMatrix du = gs * w;
          Eigen::VectorXd coef = (gs.array() * sim.array()).rowwise().sum();
          du -= (u.array().colwise() * coef.array()).matrix();
          t.grad(a).mat() += (du.array().colwise() / an.array()).matrix();
        }
        if (t.needs_grad(b)) {
          RowMatrix dw = gs.transpose() * u;
          Eigen::VectorXd coef = (gs.array() * sim.array()).colwise().sum().transpose();
          dw -= (w.array().colwise() * coef.array()).matrix();
          t.grad(b).mat() += (dw.array().colwise() / bn.array()).matrix();
        }
      });
}

Var cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  const Tensor& lv = logits.value();
  const std::size_t n = lv.rows();
  const std::size_t classes = lv.cols();
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  }
  require_finite(lv, "cross_entropy");
  RowMatrix p = lv.mat();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= classes) {
      throw InputError("label " + std::to_string(labels[i]) +
                       " out of range for " + std::to_string(classes) + " classes");
    }
    auto row = p.row(Eigen::Index(i));
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    loss += lse - row(Eigen::Index(labels[i]));
    row = (row.array() - lse).exp().matrix();
  }
  loss /= double(n);
  return logits.tape->record(
      Tensor({1}, std::vector<double>{loss}), {logits},
      [logits, labels, p = std::move(p), n](Tape& t, const Tensor& g) {
        RowMatrix d = p;
        for (std::size_t i = 0; i < n; ++i) d(Eigen::Index(i), Eigen::Index(labels[i])) -= 1.0;
        t.grad(logits).mat() += d * (g[0] / double(n));
      });
}

Var sum_squares(Var x) {
  const double s = x.value().mat().squaredNorm();
  return x.tape->record(Tensor({1}, std::vector<double>{s}), {x},
                        [x](Tape& t, const Tensor& g) {
                          t.grad(x).mat() += 2.0 * g[0] * x.value().mat();
                        });
}

}  // namespace ops
}  // namespace sp
