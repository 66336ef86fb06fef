#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "sp/encoder.hpp"
#include "sp/gradcheck.hpp"
#include "sp/prompt.hpp"

using namespace sp;

namespace {

ModelConfig small_model() {
  ModelConfig c = toy_model_config();
  c.init_std = 0.4;
  return c;
}

Tensor ramp_image(const ModelConfig& mc, double offset = 0.0) {
  Tensor img({mc.image_size, mc.image_size, mc.channels});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::sin(0.37 * double(i) + offset);
  return img;
}

oracle::Mat oracle_layer(const oracle::Mat& z, const TransformerLayerParams& p,
                         const ModelConfig& mc) {
  using namespace oracle;
  Mat normed;
  for (const auto& row : z) {
    normed.push_back(layer_norm(row, to_vec(p.ln1_gamma.value), to_vec(p.ln1_beta.value),
                                mc.ln_eps));
  }
  const Mat att = attention(normed, to_mat(p.attn.w_qkv.value), to_mat(p.attn.w_out.value),
                            mc.heads, mc.scale_exponent);
  Mat mid = z;
  for (std::size_t i = 0; i < z.size(); ++i) {
    for (std::size_t j = 0; j < z[i].size(); ++j) mid[i][j] += att[i][j];
  }
  Mat out = mid;
  const Vec b1 = to_vec(p.mlp.b1.value), b2 = to_vec(p.mlp.b2.value);
  for (std::size_t i = 0; i < mid.size(); ++i) {
    Vec h = affine(to_mat(p.mlp.w1.value),
                   layer_norm(mid[i], to_vec(p.ln2_gamma.value), to_vec(p.ln2_beta.value),
                              mc.ln_eps),
                   &b1);
    for (Real& v : h) v = gelu(v);
    const Vec y = affine(to_mat(p.mlp.w2.value), h, &b2);
    for (std::size_t j = 0; j < y.size(); ++j) out[i][j] += y[j];
  }
  return out;
}

oracle::Mat oracle_tokens(const Tensor& image, const Encoder& enc) {
  const ModelConfig& mc = enc.config();
  const oracle::Mat patches = oracle::to_mat(patchify(image, mc.patch_size));
  const oracle::Mat w = oracle::to_mat(enc.patch_embed.value);
  const oracle::Mat pos = oracle::to_mat(enc.pos_embed.value);
  oracle::Mat z;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    oracle::Vec t = oracle::affine(w, patches[i]);
    for (std::size_t j = 0; j < t.size(); ++j) t[j] += pos[i][j];
    z.push_back(t);
  }
  for (const auto& layer : enc.layers) z = oracle_layer(z, layer, mc);
  return z;
}

}  // namespace

TEST_CASE("patchify walks patches row-major and flattens each as (dy, dx, c)") {
  Tensor img({4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) img[i] = double(i);
  const Tensor p = patchify(img, 2);
  REQUIRE(p.shape() == Shape{4, 4});
  CHECK(p.row(0).to_vector() == std::vector<double>{0, 1, 4, 5});
  CHECK(p.row(1).to_vector() == std::vector<double>{2, 3, 6, 7});
  CHECK(p.row(3).to_vector() == std::vector<double>{10, 11, 14, 15});
}

TEST_CASE("model config validation and key-value round trip") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.num_patches() == 16);
  ModelConfig bad = c;
  bad.patch_size = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  const ModelConfig back = ModelConfig::from_key_values(c.to_key_values());
  CHECK(back.to_key_values() == c.to_key_values());
}

TEST_CASE("encoder output matches a step-by-step oracle") {
  const ModelConfig mc = small_model();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Encoder enc(mc, seed);
    for (auto& layer : enc.layers) {
      // Non-trivial norm parameters so the affine part is exercised.
      for (std::size_t i = 0; i < mc.width; ++i) {
        layer.ln1_gamma.value[i] = 1.0 + 0.1 * double(i);
        layer.ln2_beta.value[i] = 0.05 * double(i);
      }
    }
    const Tensor img = ramp_image(mc, double(seed));
    const oracle::Mat tokens = oracle_tokens(img, enc);
    const oracle::Vec feature = oracle::mean_rows(tokens);
    CHECK(double(oracle::max_abs_diff(encode(img, enc), feature)) < 1e-12);
  }
}

TEST_CASE("encoder rejects images of the wrong shape") {
  const ModelConfig mc = small_model();
  Encoder enc(mc, 1);
  CHECK_THROWS_AS(encode(Tensor({5, 5, 1}), enc), ShapeError);
  CHECK_THROWS_AS(encode(Tensor({4, 4, 2}), enc), ShapeError);
}

TEST_CASE("encoder is deterministic in its seed") {
  const ModelConfig mc = small_model();
  const Tensor img = ramp_image(mc);
  CHECK(encode(img, Encoder(mc, 5)) == encode(img, Encoder(mc, 5)));
  CHECK_FALSE(encode(img, Encoder(mc, 5)) == encode(img, Encoder(mc, 6)));
}

TEST_CASE("batched encoding equals per-image encoding") {
  const ModelConfig mc = small_model();
  Encoder enc(mc, 4);
  const Tensor a = ramp_image(mc, 0.0), b = ramp_image(mc, 1.0);
  Tape tape(false);
  EncoderVars ev = bind_encoder(tape, enc);
  const Tensor* batch[] = {&a, &b};
  const Tensor both = encode_batch(tape, ev, batch).value();
  const Tensor fa = encode(a, enc), fb = encode(b, enc);
  for (std::size_t j = 0; j < mc.width; ++j) {
    CHECK(both.at(0, j) == doctest::Approx(fa[j]).epsilon(1e-14));
    CHECK(both.at(1, j) == doctest::Approx(fb[j]).epsilon(1e-14));
  }
}

TEST_CASE("default injection layer lands in the final third") {
  CHECK(default_inject_layer(4) == 4);
  CHECK(default_inject_layer(12) == 9);
  CHECK(default_inject_layer(2) == 2);
  CHECK(default_inject_layer(1) == 1);
  CHECK(default_inject_layer(6) == 5);
}

TEST_CASE("prompt config validation") {
  const ModelConfig mc = small_model();
  PromptConfig pc = PromptConfig::defaults_for(mc);
  CHECK_NOTHROW(pc.validate(mc));
  pc.inject_layer = mc.depth + 1;
  CHECK_THROWS_AS(pc.validate(mc), ConfigError);
  pc.inject_layer = 0;
  CHECK_THROWS_AS(pc.validate(mc), ConfigError);
  pc = PromptConfig::defaults_for(mc);
  pc.mechanism = Mechanism::channel;
  pc.pooling = Pooling::head;
  CHECK_THROWS_AS(pc.validate(mc), ConfigError);
  pc.mechanism = Mechanism::spatial;
  CHECK_NOTHROW(pc.validate(mc));
  const PromptConfig back = PromptConfig::from_key_values(pc.to_key_values(), mc);
  CHECK(back.to_key_values() == pc.to_key_values());
  CHECK_THROWS_AS(parse_mechanism("film"), ConfigError);
  CHECK(parse_mechanism("si") == Mechanism::spatial);
  CHECK(parse_pooling("patches") == Pooling::patches);
  CHECK(parse_projector("mlp") == ProjectorKind::mlp);
}

TEST_CASE("mechanism none reproduces the plain encoder bitwise") {
  const ModelConfig mc = small_model();
  Encoder enc(mc, 9);
  PromptConfig pc = PromptConfig::defaults_for(mc);
  pc.mechanism = Mechanism::none;
  pc.semantic_dim = 6;
  PromptModule prompt(pc, mc, 3);
  const Tensor img = ramp_image(mc);
  const Tensor g = Tensor::vector({1, 2, 3, 4, 5, 6});
  CHECK(encode_with_prompt(img, g, enc, prompt) == encode(img, enc));
}

TEST_CASE("zero channel-interaction weights give beta = 0.5") {
  const ModelConfig mc = small_model();
  PromptConfig pc = PromptConfig::defaults_for(mc);
  pc.mechanism = Mechanism::channel;
  pc.semantic_dim = 6;
  PromptModule prompt(pc, mc, 3);
  prompt.ci_mlp.w2.value.fill(0.0);
  prompt.ci_mlp.b2.value.fill(0.0);
  Rng r(1);
  const Tensor z = normal_tensor({4, mc.width}, 1.0, r);
  Tensor beta;
  const Tensor out = channel_modulate(z, normal_tensor({6}, 1.0, r), prompt, &beta);
  for (std::size_t j = 0; j < mc.width; ++j) CHECK(beta[j] == 0.5);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(out[i] == z[i] + 0.5);
}

TEST_CASE("channel modulation matches the oracle") {
  const ModelConfig mc = small_model();
  PromptConfig pc = PromptConfig::defaults_for(mc);
  pc.mechanism = Mechanism::channel;
  pc.semantic_dim = 6;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    PromptModule prompt(pc, mc, seed);
    Rng r(seed);
    for (Parameter* p : prompt.parameters()) {
      for (double& v : p->value.storage()) v = 0.7 * r.normal();
    }
    const Tensor z = normal_tensor({4, mc.width}, 1.0, r);
    const Tensor g = normal_tensor({6}, 1.0, r);
    Tensor beta;
    const Tensor got = channel_modulate(z, g, prompt, &beta);
    using oracle::to_mat;
    using oracle::to_vec;
    oracle::Vec want_beta;
    const oracle::Mat want = oracle::channel_modulation(
        to_mat(z), to_vec(g), to_mat(prompt.h_c.params[0].value),
        to_vec(prompt.h_c.params[1].value), to_mat(prompt.ci_mlp.w1.value),
        to_vec(prompt.ci_mlp.b1.value), to_mat(prompt.ci_mlp.w2.value),
        to_vec(prompt.ci_mlp.b2.value), &want_beta);
    CHECK(double(oracle::max_abs_diff(got, want)) < 1e-12);
    CHECK(double(oracle::max_abs_diff(beta, want_beta)) < 1e-12);
  }
}

TEST_CASE("spatial prompt token extends the sequence once") {
  const ModelConfig mc = small_model();
  Rng r(2);
  const Tensor z = normal_tensor({mc.num_patches(), mc.width}, 1.0, r);
  const Tensor token = normal_tensor({mc.width}, 1.0, r);
  const Tensor ext = extend_sequence(z, token, mc.num_patches());
  REQUIRE(ext.rows() == mc.num_patches() + 1);
  for (std::size_t j = 0; j < mc.width; ++j) CHECK(ext.at(0, j) == token[j]);
  for (std::size_t j = 0; j < mc.width; ++j) CHECK(ext.at(1, j) == z.at(0, j));
  CHECK_THROWS_AS(extend_sequence(ext, token, mc.num_patches()), StateError);
}

TEST_CASE("spatial prompt at the first layer equals a prepended-token oracle") {
  const ModelConfig mc = small_model();
  Encoder enc(mc, 12);
  PromptConfig pc = PromptConfig::defaults_for(mc);
  pc.mechanism = Mechanism::spatial;
  pc.inject_layer = 1;
  pc.semantic_dim = 6;
  PromptModule prompt(pc, mc, 4);
  Rng r(4);
  for (Parameter* p : prompt.parameters()) {
    for (double& v : p->value.storage()) v = 0.5 * r.normal();
  }
  const Tensor img = ramp_image(mc, 0.3);
  const Tensor g = normal_tensor({6}, 1.0, r);

  const oracle::Vec bias = oracle::to_vec(prompt.h_s.params[1].value);
  const oracle::Vec z0 =
      oracle::affine(oracle::to_mat(prompt.h_s.params[0].value), oracle::to_vec(g), &bias);
  const oracle::Mat patches = oracle::to_mat(patchify(img, mc.patch_size));
  oracle::Mat z{z0};
  for (std::size_t i = 0; i < patches.size(); ++i) {
    oracle::Vec t = oracle::affine(oracle::to_mat(enc.patch_embed.value), patches[i]);
    for (std::size_t j = 0; j < t.size(); ++j) t[j] += enc.pos_embed.value.at(i, j);
    z.push_back(t);
  }
  for (const auto& layer : enc.layers) z = oracle_layer(z, layer, mc);
  CHECK(double(oracle::max_abs_diff(encode_with_prompt(img, g, enc, prompt),
                                    oracle::mean_rows(z))) < 1e-12);
}

TEST_CASE("prompted features depend on the class embedding") {
  const ModelConfig mc = small_model();
  Encoder enc(mc, 1);
  for (Mechanism m : {Mechanism::spatial, Mechanism::channel, Mechanism::both}) {
    PromptConfig pc = PromptConfig::defaults_for(mc);
    pc.mechanism = m;
    pc.semantic_dim = 6;
    PromptModule prompt(pc, mc, 2);
    const Tensor img = ramp_image(mc);
    const Tensor a = encode_with_prompt(img, Tensor::vector({1, 0, 0, 0, 0, 0}), enc, prompt);
    const Tensor b = encode_with_prompt(img, Tensor::vector({0, 0, 0, 0, 0, 1}), enc, prompt);
    CHECK_FALSE(a == b);
    CHECK_FALSE(a == encode(img, enc));
  }
}

TEST_CASE("pooling choices read the intended tokens") {
  const ModelConfig mc = small_model();
  Encoder enc(mc, 1);
  PromptConfig pc = PromptConfig::defaults_for(mc);
  pc.mechanism = Mechanism::spatial;
  pc.semantic_dim = 6;
  const Tensor img = ramp_image(mc);
  const Tensor g = Tensor::vector({0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  ForwardTrace trace;
  Tensor feats[3];
  const Pooling kinds[] = {Pooling::head, Pooling::patches, Pooling::all};
  for (int k = 0; k < 3; ++k) {
    pc.pooling = kinds[k];
    PromptModule prompt(pc, mc, 2);
    feats[k] = encode_with_prompt(img, g, enc, prompt);
  }
  const double s = double(mc.num_patches());
  for (std::size_t j = 0; j < mc.width; ++j) {
    CHECK(feats[2][j] == doctest::Approx((feats[0][j] + s * feats[1][j]) / (s + 1)).epsilon(1e-12));
  }
}

TEST_CASE("forward trace records each layer") {
  const ModelConfig mc = small_model();
  Encoder enc(mc, 1);
  PromptConfig pc = PromptConfig::defaults_for(mc);
  pc.mechanism = Mechanism::both;
  pc.semantic_dim = 6;
  PromptModule prompt(pc, mc, 2);
  ForwardTrace trace;
  encode_with_prompt(ramp_image(mc), Tensor({6}, 0.3), enc, prompt, &trace);
  REQUIRE(trace.attention.size() == mc.depth);
  // The prompt enters at the last layer, whose sequence is one longer.
  const std::size_t m = mc.num_patches();
  CHECK(trace.attention.front().shape() == Shape{1, mc.heads, m, m});
  CHECK(trace.attention.back().shape() == Shape{1, mc.heads, m + 1, m + 1});
}
