#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "sp/autodiff.hpp"
#include "sp/core_math.hpp"
#include "sp/rng.hpp"
#include "sp/tensor.hpp"

using namespace sp;

TEST_CASE("tensor construction validates shape and data") {
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 6);
  CHECK(t.row(1).to_vector() == std::vector<double>{4, 5, 6});
  CHECK(t.reshaped({3, 2}).at(2, 1) == 6);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("require_finite names the offending location") {
  Tensor t = Tensor::vector({1.0, std::nan("")});
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_WITH_AS(require_finite(t, "probe"), doctest::Contains("probe"), NumericError);
}

TEST_CASE("derived seeds are stable and distinct") {
  CHECK(derive_seed(7, 1) == derive_seed(7, 1));
  CHECK(derive_seed(7, 1) != derive_seed(7, 2));
  CHECK(derive_seed(7, 1, 2) != derive_seed(7, 2, 1));
  CHECK(hash_name("abc") != hash_name("abd"));
}

TEST_CASE("rng draws are reproducible and in range") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  Rng r(3);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(r.below(7) < 7);
  }
  const auto pick = r.choose(10, 4);
  CHECK(pick.size() == 4);
  CHECK(std::set<std::size_t>(pick.begin(), pick.end()).size() == 4);
  CHECK_THROWS(r.choose(3, 4));
}

TEST_CASE("rng normal has unit moments") {
  Rng r(11);
  double s = 0, ss = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    ss += x * x;
  }
  CHECK(std::abs(s / n) < 0.03);
  CHECK(std::abs(ss / n - 1.0) < 0.05);
}

TEST_CASE("softmax matches the oracle along either axis") {
  Rng r(5);
  for (int inst = 0; inst < 3; ++inst) {
    Tensor x = normal_tensor({3, 5}, 3.0, r);
    const Tensor rows = softmax(x, 1);
    const oracle::Mat xm = oracle::to_mat(x);
    for (std::size_t i = 0; i < 3; ++i) {
      const oracle::Vec want = oracle::softmax(xm[i]);
      for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(rows.at(i, j) - double(want[j])) < 1e-14);
    }
    const Tensor cols = softmax(x, 0);
    for (std::size_t j = 0; j < 5; ++j) {
      const oracle::Vec want = oracle::softmax({xm[0][j], xm[1][j], xm[2][j]});
      for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(cols.at(i, j) - double(want[i])) < 1e-14);
    }
  }
}

TEST_CASE("softmax is shift invariant and survives large logits") {
  Tensor x = Tensor::matrix(1, 3, {1000.0, 1001.0, 999.0});
  Tensor y = Tensor::matrix(1, 3, {0.0, 1.0, -1.0});
  const Tensor a = softmax(x, 1), b = softmax(y, 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-15));
  CHECK(a.all_finite());
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  Rng r(8);
  Tensor x = normal_tensor({4, 16}, 5.0, r);
  Parameter gamma("g", Tensor({16}, 1.0)), beta("b", Tensor({16}));
  const Tensor y = layer_norm(x, gamma, beta, 1e-5);
  for (std::size_t i = 0; i < 4; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += y.at(i, j) / 16;
    for (std::size_t j = 0; j < 16; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m) / 16;
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("layer norm rejects non-finite input") {
  Tensor x = Tensor::matrix(1, 2, {1.0, INFINITY});
  Parameter gamma("g", Tensor({2}, 1.0)), beta("b", Tensor({2}));
  CHECK_THROWS_AS(layer_norm(x, gamma, beta), NumericError);
}

TEST_CASE("attention probabilities are row-stochastic") {
  Rng r(9);
  AttentionConfig cfg{2, 4, 0.25};
  AttentionParams p{Parameter("qkv", normal_tensor({24, 8}, 0.5, r)),
                    Parameter("out", normal_tensor({8, 8}, 0.5, r))};
  Tensor z = normal_tensor({5, 8}, 1.0, r);
  Tensor probs;
  multihead_self_attention(z, p, cfg, &probs);
  REQUIRE(probs.shape() == Shape{1, 2, 5, 5});
  for (std::size_t row = 0; row < 10; ++row) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += probs[row * 5 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("attention config rejects width mismatch") {
  AttentionConfig cfg{3, 4, 0.25};
  CHECK_THROWS_AS(cfg.validate(8), ConfigError);
  CHECK_NOTHROW(cfg.validate(12));
}

TEST_CASE("gelu variants and derivatives") {
  CHECK(activate(Activation::gelu_erf, 0.0) == 0.0);
  CHECK(activate(Activation::gelu_erf, 1.0) == doctest::Approx(double(oracle::gelu(1.0L))).epsilon(1e-15));
  CHECK(activate(Activation::sigmoid, 0.0) == 0.5);
  CHECK(activate(Activation::relu, -2.0) == 0.0);
  for (Activation a : {Activation::relu, Activation::sigmoid, Activation::gelu_tanh,
                       Activation::gelu_erf, Activation::identity}) {
    for (double x : {-1.3, -0.2, 0.4, 2.1}) {
      const double h = 1e-6;
      const double fd = (activate(a, x + h) - activate(a, x - h)) / (2 * h);
      CHECK(activate_derivative(a, x) == doctest::Approx(fd).epsilon(1e-7));
    }
  }
  CHECK(parse_activation(activation_name(Activation::gelu_tanh)) == Activation::gelu_tanh);
}

TEST_CASE("tape backward accumulates into parameters") {
  Parameter w("w", Tensor::matrix(1, 2, {2.0, -1.0}));
  Tape tape;
  Var x = tape.constant(Tensor::matrix(1, 2, {3.0, 4.0}));
  Var y = ops::sum_squares(ops::linear(x, tape.param(w)));
  tape.backward(y);
  // y = (2*3 - 4)^2 = 4, dy/dw = 2 * 2 * x
  CHECK(y.value()[0] == 4.0);
  CHECK(w.grad[0] == 12.0);
  CHECK(w.grad[1] == 16.0);
}

TEST_CASE("cross entropy rejects labels outside the class range") {
  Tape tape(false);
  Var logits = tape.constant(Tensor::matrix(1, 3, {0, 0, 0}));
  CHECK_THROWS_AS(ops::cross_entropy(logits, {3}), InputError);
  CHECK(ops::cross_entropy(logits, {1}).value()[0] == doctest::Approx(std::log(3.0)));
}

TEST_CASE("cosine logits reject zero vectors") {
  Tape tape(false);
  Var a = tape.constant(Tensor::matrix(1, 2, {0, 0}));
  Var b = tape.constant(Tensor::matrix(1, 2, {1, 0}));
  CHECK_THROWS_AS(ops::cosine_logits(a, b, 1.0), NumericError);
  CHECK(cosine_similarity(Tensor::vector({1, 1}), Tensor::vector({2, 2})) ==
        doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("gradient checker flags a wrong gradient") {
  Parameter p("p", Tensor::vector({0.3, -0.7}));
  auto good = [&](bool with_grad) {
    Tape tape(with_grad);
    Var v = with_grad ? tape.param(p) : tape.constant(p.value);
    Var l = ops::sum_squares(v);
    if (with_grad) tape.backward(l);
    return l.value()[0];
  };
  Parameter* params[] = {&p};
  CHECK(check_gradients(good, params).max_error < 1e-9);
  auto bad = [&](bool with_grad) {
    const double v = good(with_grad);
    if (with_grad) p.grad[1] *= 1.5;
    return v;
  };
  const GradCheckReport r = check_gradients(bad, params);
  CHECK(r.max_error == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  CHECK(r.per_parameter.front().name == "p");
}
