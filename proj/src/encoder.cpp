#include "sp/encoder.hpp"

#include <cmath>
#include <string>

namespace sp {

void ModelConfig::validate() const {
  if (image_size == 0 || channels == 0 || patch_size == 0) {
    throw ConfigError("image_size, channels and patch_size must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw ConfigError("width " + std::to_string(width) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  if (!(ln_eps > 0)) throw ConfigError("ln_eps must be positive");
}

KeyValues ModelConfig::to_key_values() const {
  return {
      {"model.image_size", std::to_string(image_size)},
      {"model.channels", std::to_string(channels)},
      {"model.patch_size", std::to_string(patch_size)},
      {"model.depth", std::to_string(depth)},
      {"model.width", std::to_string(width)},
      {"model.heads", std::to_string(heads)},
      {"model.mlp_ratio", std::to_string(mlp_ratio)},
      {"model.mlp_activation", std::string(activation_name(mlp_activation))},
      {"model.scale_exponent", format_double(scale_exponent)},
      {"model.ln_eps", format_double(ln_eps)},
      {"model.init_std", format_double(init_std)},
  };
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig c;
  c.image_size = kv_size(kv, "model.image_size", c.image_size);
  c.channels = kv_size(kv, "model.channels", c.channels);
  c.patch_size = kv_size(kv, "model.patch_size", c.patch_size);
  c.depth = kv_size(kv, "model.depth", c.depth);
  c.width = kv_size(kv, "model.width", c.width);
  c.heads = kv_size(kv, "model.heads", c.heads);
  c.mlp_ratio = kv_size(kv, "model.mlp_ratio", c.mlp_ratio);
  c.mlp_activation = parse_activation(
      kv_string(kv, "model.mlp_activation", std::string(activation_name(c.mlp_activation))));
  c.scale_exponent = kv_double(kv, "model.scale_exponent", c.scale_exponent);
  c.ln_eps = kv_double(kv, "model.ln_eps", c.ln_eps);
  c.init_std = kv_double(kv, "model.init_std", c.init_std);
  c.validate();
  return c;
}

Encoder::Encoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0xe5c0de));
  const std::size_t c = cfg_.width;
  const double s = cfg_.init_std;
  patch_embed = Parameter("patch_embed",
                          normal_tensor({c, cfg_.patch_dim()},
                                        1.0 / std::sqrt(double(cfg_.patch_dim())), rng));
  pos_embed = Parameter("pos_embed", normal_tensor({cfg_.num_patches(), c}, s, rng));
  for (std::size_t l = 0; l < cfg_.depth; ++l) {
    const std::string p = "layers." + std::to_string(l);
    TransformerLayerParams layer{
        Parameter(p + ".ln1.gamma", Tensor({c}, 1.0)),
        Parameter(p + ".ln1.beta", Tensor({c})),
        AttentionParams{Parameter(p + ".attn.w_qkv", normal_tensor({3 * c, c}, s, rng)),
                        Parameter(p + ".attn.w_out", normal_tensor({c, c}, s, rng))},
        Parameter(p + ".ln2.gamma", Tensor({c}, 1.0)),
        Parameter(p + ".ln2.beta", Tensor({c})),
        make_mlp(p + ".mlp", c, c * cfg_.mlp_ratio, c, s, rng),
    };
    layers.push_back(std::move(layer));
  }
}

namespace {

template <typename E, typename P>
std::vector<P*> collect(E& enc) {
  std::vector<P*> out{&enc.patch_embed, &enc.pos_embed};
  for (auto& l : enc.layers) {
    for (P* p : {&l.ln1_gamma, &l.ln1_beta, &l.attn.w_qkv, &l.attn.w_out, &l.ln2_gamma,
                 &l.ln2_beta, &l.mlp.w1, &l.mlp.b1, &l.mlp.w2, &l.mlp.b2}) {
      out.push_back(p);
    }
  }
  return out;
}

template <typename E>
EncoderVars bind_impl(Tape& tape, E& enc) {
  EncoderVars v;
  v.cfg = &enc.config();
  v.patch_embed = bind(tape, enc.patch_embed);
  v.pos_embed = bind(tape, enc.pos_embed);
  for (auto& l : enc.layers) {
    v.layers.push_back(LayerVars{
        bind(tape, l.ln1_gamma), bind(tape, l.ln1_beta), bind(tape, l.attn.w_qkv),
        bind(tape, l.attn.w_out), bind(tape, l.ln2_gamma), bind(tape, l.ln2_beta),
        bind(tape, l.mlp.w1), bind(tape, l.mlp.b1), bind(tape, l.mlp.w2),
        bind(tape, l.mlp.b2)});
  }
  return v;
}

}  // namespace

std::vector<Parameter*> Encoder::parameters() { return collect<Encoder, Parameter>(*this); }

std::vector<const Parameter*> Encoder::parameters() const {
  return collect<const Encoder, const Parameter>(*this);
}

EncoderVars bind_encoder(Tape& tape, Encoder& enc) { return bind_impl(tape, enc); }
EncoderVars bind_encoder(Tape& tape, const Encoder& enc) { return bind_impl(tape, enc); }

void check_image(const Tensor& image, const ModelConfig& cfg) {
  if (image.shape() != Shape{cfg.image_size, cfg.image_size, cfg.channels}) {
    throw ShapeError("image " + shape_str(image.shape()) + " does not match model input (" +
                     std::to_string(cfg.image_size) + ", " + std::to_string(cfg.image_size) +
                     ", " + std::to_string(cfg.channels) + ")");
  }
}

Tensor patchify(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3) throw ShapeError("patchify expects (H, W, C), got " + shape_str(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const std::size_t p = patch_size;
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ConfigError("image " + shape_str(image.shape()) + " is not divisible into " +
                      std::to_string(p) + "x" + std::to_string(p) + " patches");
  }
  const std::size_t gh = h / p, gw = w / p;
  Tensor out({gh * gw, p * p * c});
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      double* dst = out.data() + (py * gw + px) * p * p * c;
      for (std::size_t dy = 0; dy < p; ++dy) {
        const double* src = image.data() + ((py * p + dy) * w + px * p) * c;
        std::copy(src, src + p * c, dst + dy * p * c);
      }
    }
  }
  return out;
}

Tensor patchify_batch(std::span<const Tensor* const> images, std::size_t patch_size) {
  if (images.empty()) throw InputError("empty image batch");
  Tensor first = patchify(*images[0], patch_size);
  const std::size_t m = first.rows(), d = first.cols();
  Tensor out({images.size() * m, d});
  std::copy(first.data(), first.data() + first.size(), out.data());
  for (std::size_t i = 1; i < images.size(); ++i) {
    if (images[i]->shape() != images[0]->shape()) {
      throw ShapeError("image batch mixes shapes " + shape_str(images[0]->shape()) +
                       " and " + shape_str(images[i]->shape()));
    }
    Tensor p = patchify(*images[i], patch_size);
    std::copy(p.data(), p.data() + p.size(), out.data() + i * m * d);
  }
  return out;
}

Var embed_patches(Var patches, Var w_embed, Var pos_embed) {
  return ops::add_tiled(ops::linear(patches, w_embed), pos_embed);
}

Var transformer_layer(Var z, const LayerVars& l, const ModelConfig& cfg,
                      std::size_t seq_len, Tensor* probs) {
  Var h = ops::layer_norm(z, l.ln1_gamma, l.ln1_beta, cfg.ln_eps);
  Var attn = multihead_self_attention(h, l.w_qkv, l.w_out, cfg.attention(), seq_len, probs);
  Var z1 = ops::add(z, attn);
  Var h2 = ops::layer_norm(z1, l.ln2_gamma, l.ln2_beta, cfg.ln_eps);
  Var mlp = mlp_block(h2, l.w1, l.b1, l.w2, l.b2, cfg.mlp_activation, Activation::identity);
  return ops::add(z1, mlp);
}

Var run_layers(const EncoderVars& enc, Var z, std::size_t first, std::size_t last,
               std::size_t seq_len, ForwardTrace* trace) {
  for (std::size_t l = first; l < last; ++l) {
    if (trace == nullptr) {
      z = transformer_layer(z, enc.layers[l], *enc.cfg, seq_len);
      continue;
    }
    trace->layer_inputs.push_back(z.value());
    Tensor probs;
    z = transformer_layer(z, enc.layers[l], *enc.cfg, seq_len, &probs);
    trace->attention.push_back(std::move(probs));
  }
  return z;
}

Var embed_images(Tape& tape, const EncoderVars& enc,
                 std::span<const Tensor* const> images) {
  for (const Tensor* img : images) check_image(*img, *enc.cfg);
  Var patches = tape.constant(patchify_batch(images, enc.cfg->patch_size));
  return embed_patches(patches, enc.patch_embed, enc.pos_embed);
}

Var encode_batch(Tape& tape, const EncoderVars& enc,
                 std::span<const Tensor* const> images) {
  const std::size_t m = enc.cfg->num_patches();
  Var z = embed_images(tape, enc, images);
  z = run_layers(enc, z, 0, enc.layers.size(), m);
  return ops::segment_mean(z, m, 0, m);
}

Tensor encode(const Tensor& image, const Encoder& enc) {
  Tape tape(false);
  EncoderVars vars = bind_encoder(tape, enc);
  const Tensor* batch[] = {&image};
  return encode_batch(tape, vars, batch).value().reshaped({enc.config().width});
}

}  // namespace sp
