#include "sp/prompt.hpp"

#include <string>

namespace sp {

std::string_view mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::none: return "none";
    case Mechanism::spatial: return "si";
    case Mechanism::channel: return "ci";
    case Mechanism::both: return "both";
  }
  return "?";
}

Mechanism parse_mechanism(std::string_view s) {
  for (auto m : {Mechanism::none, Mechanism::spatial, Mechanism::channel, Mechanism::both}) {
    if (mechanism_name(m) == s) return m;
  }
  throw ConfigError("unknown mechanism '" + std::string(s) + "' (none|si|ci|both)");
}

std::string_view projector_name(ProjectorKind k) {
  return k == ProjectorKind::linear ? "linear" : "mlp";
}

ProjectorKind parse_projector(std::string_view s) {
  if (s == "linear") return ProjectorKind::linear;
  if (s == "mlp") return ProjectorKind::mlp;
  throw ConfigError("unknown projector '" + std::string(s) + "' (linear|mlp)");
}

std::string_view pooling_name(Pooling p) {
  switch (p) {
    case Pooling::head: return "head";
    case Pooling::patches: return "patches";
    case Pooling::all: return "all";
  }
  return "?";
}

Pooling parse_pooling(std::string_view s) {
  for (auto p : {Pooling::head, Pooling::patches, Pooling::all}) {
    if (pooling_name(p) == s) return p;
  }
  throw ConfigError("unknown pooling '" + std::string(s) + "' (head|patches|all)");
}

std::size_t default_inject_layer(std::size_t depth) {
  if (depth == 0) return 0;
  const std::size_t layer = (2 * depth + 2) / 3 + 1;
  return layer > depth ? depth : layer;
}

PromptConfig PromptConfig::defaults_for(const ModelConfig& model) {
  PromptConfig c;
  c.inject_layer = default_inject_layer(model.depth);
  return c;
}

void PromptConfig::validate(const ModelConfig& model) const {
  if (mechanism != Mechanism::none &&
      (inject_layer < 1 || inject_layer > model.depth)) {
    throw ConfigError("inject_layer " + std::to_string(inject_layer) +
                      " outside [1, " + std::to_string(model.depth) + "]");
  }
  if (semantic_dim == 0) throw ConfigError("semantic_dim must be positive");
  if (pooling == Pooling::head && mechanism != Mechanism::none && !uses_spatial(mechanism)) {
    throw ConfigError("pooling 'head' needs a spatial prompt token (mechanism si or both)");
  }
}

KeyValues PromptConfig::to_key_values() const {
  return {
      {"prompt.inject_layer", std::to_string(inject_layer)},
      {"prompt.mechanism", std::string(mechanism_name(mechanism))},
      {"prompt.projector", std::string(projector_name(projector))},
      {"prompt.pooling", std::string(pooling_name(pooling))},
      {"prompt.semantic_dim", std::to_string(semantic_dim)},
      {"prompt.ci_inner", std::string(activation_name(ci_inner))},
      {"prompt.ci_hidden", std::to_string(ci_hidden)},
      {"prompt.projector_hidden", std::to_string(projector_hidden)},
  };
}

PromptConfig PromptConfig::from_key_values(const KeyValues& kv, const ModelConfig& model) {
  PromptConfig c = defaults_for(model);
  c.inject_layer = kv_size(kv, "prompt.inject_layer", c.inject_layer);
  c.mechanism = parse_mechanism(kv_string(kv, "prompt.mechanism", "both"));
  c.projector = parse_projector(kv_string(kv, "prompt.projector", "linear"));
  c.pooling = parse_pooling(kv_string(kv, "prompt.pooling", "all"));
  c.semantic_dim = kv_size(kv, "prompt.semantic_dim", c.semantic_dim);
  c.ci_inner = parse_activation(kv_string(kv, "prompt.ci_inner", "sigmoid"));
  c.ci_hidden = kv_size(kv, "prompt.ci_hidden", c.ci_hidden);
  c.projector_hidden = kv_size(kv, "prompt.projector_hidden", c.projector_hidden);
  c.validate(model);
  return c;
}

namespace {

Projector make_projector(const std::string& name, ProjectorKind kind, std::size_t in,
                         std::size_t hidden, std::size_t out, double stddev, Rng& rng) {
  Projector p{kind, {}};
  if (kind == ProjectorKind::linear) {
    p.params.emplace_back(name + ".w", normal_tensor({out, in}, stddev, rng));
    p.params.emplace_back(name + ".b", Tensor({out}));
  } else {
    MlpParams m = make_mlp(name, in, hidden, out, stddev, rng);
    p.params = {std::move(m.w1), std::move(m.b1), std::move(m.w2), std::move(m.b2)};
  }
  return p;
}

template <typename M, typename P>
std::vector<P*> collect(M& m) {
  std::vector<P*> out;
  for (auto& p : m.h_s.params) out.push_back(&p);
  for (auto& p : m.h_c.params) out.push_back(&p);
  for (P* p : {&m.ci_mlp.w1, &m.ci_mlp.b1, &m.ci_mlp.w2, &m.ci_mlp.b2}) out.push_back(p);
  return out;
}

template <typename M>
PromptVars bind_impl(Tape& tape, M& m) {
  PromptVars v;
  v.cfg = &m.config();
  v.projector = m.config().projector;
  for (auto& p : m.h_s.params) v.h_s.push_back(bind(tape, p));
  for (auto& p : m.h_c.params) v.h_c.push_back(bind(tape, p));
  v.ci_w1 = bind(tape, m.ci_mlp.w1);
  v.ci_b1 = bind(tape, m.ci_mlp.b1);
  v.ci_w2 = bind(tape, m.ci_mlp.w2);
  v.ci_b2 = bind(tape, m.ci_mlp.b2);
  return v;
}

}  // namespace

PromptModule::PromptModule(const PromptConfig& cfg, const ModelConfig& model,
                           std::uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate(model);
  Rng rng(derive_seed(seed, 0x9a0e7));
  const std::size_t c = model.width;
  const std::size_t ph = cfg_.projector_hidden ? cfg_.projector_hidden : c;
  const std::size_t ch = cfg_.ci_hidden ? cfg_.ci_hidden : c;
  const double s = model.init_std;
  h_s = make_projector("prompt.h_s", cfg_.projector, cfg_.semantic_dim, ph, c, s, rng);
  h_c = make_projector("prompt.h_c", cfg_.projector, cfg_.semantic_dim, ph, c, s, rng);
  ci_mlp = make_mlp("prompt.ci_mlp", 2 * c, ch, c, s, rng);
}

std::vector<Parameter*> PromptModule::parameters() {
  return collect<PromptModule, Parameter>(*this);
}

std::vector<const Parameter*> PromptModule::parameters() const {
  return collect<const PromptModule, const Parameter>(*this);
}

PromptVars bind_prompt(Tape& tape, PromptModule& prompt) { return bind_impl(tape, prompt); }
PromptVars bind_prompt(Tape& tape, const PromptModule& prompt) {
  return bind_impl(tape, prompt);
}

Var project(const std::vector<Var>& p, ProjectorKind kind, Var semantic) {
  if (kind == ProjectorKind::linear) return ops::linear(semantic, p.at(0), p.at(1));
  return mlp_block(semantic, p.at(0), p.at(1), p.at(2), p.at(3), Activation::gelu_erf,
                   Activation::identity);
}

Tensor project_spatial(const Tensor& semantic, const PromptModule& prompt) {
  if (semantic.size() != prompt.config().semantic_dim) {
    throw ShapeError("semantic embedding has " + std::to_string(semantic.size()) +
                     " dims, projector expects " +
                     std::to_string(prompt.config().semantic_dim));
  }
  Tape tape(false);
  PromptVars vars = bind_prompt(tape, prompt);
  Var g = tape.constant(semantic.reshaped({1, semantic.size()}));
  const Tensor& out = project(vars.h_s, vars.projector, g).value();
  return out.reshaped({out.size()});
}

Tensor extend_sequence(const Tensor& tokens, const Tensor& prompt_token,
                       std::size_t expected_patches) {
  if (tokens.rank() != 2) throw ShapeError("extend_sequence expects (M, C) tokens");
  if (tokens.rows() == expected_patches + 1) {
    throw StateError("sequence already carries a prompt token");
  }
  if (tokens.rows() != expected_patches) {
    throw ShapeError("sequence has " + std::to_string(tokens.rows()) + " tokens, expected " +
                     std::to_string(expected_patches));
  }
  Tape tape(false);
  Var z = tape.constant(tokens);
  Var p = tape.constant(prompt_token.reshaped({1, prompt_token.size()}));
  return ops::prepend_token(z, p, tokens.rows()).value();
}

Var channel_modulate(Var tokens, Var semantic, const PromptVars& prompt,
                     std::size_t seq_len, Var* beta_out) {
  Var context = ops::segment_mean(tokens, seq_len, 0, seq_len);
  Var z0 = project(prompt.h_c, prompt.projector, semantic);
  Var joint = ops::concat_cols(z0, context);
  Var beta = mlp_block(joint, prompt.ci_w1, prompt.ci_b1, prompt.ci_w2, prompt.ci_b2,
                       prompt.cfg->ci_inner, Activation::sigmoid);
  if (beta_out != nullptr) *beta_out = beta;
  return ops::add_segment_shift(tokens, beta, seq_len);
}

Tensor channel_modulate(const Tensor& tokens, const Tensor& semantic,
                        const PromptModule& prompt, Tensor* beta_out) {
  if (tokens.rank() != 2) throw ShapeError("channel_modulate expects (M, C) tokens");
  if (semantic.size() != prompt.config().semantic_dim) {
    throw ShapeError("semantic embedding has " + std::to_string(semantic.size()) +
                     " dims, projector expects " +
                     std::to_string(prompt.config().semantic_dim));
  }
  Tape tape(false);
  PromptVars vars = bind_prompt(tape, prompt);
  Var beta;
  Var out = channel_modulate(tape.constant(tokens),
                             tape.constant(semantic.reshaped({1, semantic.size()})), vars,
                             tokens.rows(), &beta);
  if (beta_out != nullptr) *beta_out = beta.value().reshaped({beta.value().size()});
  return out.value();
}

PromptedOutput prompted_forward(Tape& tape, const EncoderVars& enc,
                                const PromptVars& prompt,
                                std::span<const Tensor* const> images, Var semantic,
                                ForwardTrace* trace) {
  const ModelConfig& mc = *enc.cfg;
  const PromptConfig& pc = *prompt.cfg;
  pc.validate(mc);
  const std::size_t m = mc.num_patches();
  const std::size_t depth = enc.layers.size();
  const Mechanism mech = pc.mechanism;

  Var z = embed_images(tape, enc, images);
  if (mech == Mechanism::none) {
    z = run_layers(enc, z, 0, depth, m, trace);
    return {ops::segment_mean(z, m, 0, m), z, m, false};
  }
  const Tensor& g = semantic.value();
  if (g.rows() != images.size() || g.cols() != pc.semantic_dim) {
    throw ShapeError("semantic batch " + shape_str(g.shape()) + " for " +
                     std::to_string(images.size()) + " images of dim " +
                     std::to_string(pc.semantic_dim));
  }

  const std::size_t split = pc.inject_layer - 1;
  z = run_layers(enc, z, 0, split, m, trace);
  std::size_t seq = m;
  if (uses_channel(mech)) z = channel_modulate(z, semantic, prompt, m);
  if (uses_spatial(mech)) {
    z = ops::prepend_token(z, project(prompt.h_s, prompt.projector, semantic), m);
    seq = m + 1;
  }
  z = run_layers(enc, z, split, depth, seq, trace);

  const bool has_token = uses_spatial(mech);
  const std::size_t first_patch = has_token ? 1 : 0;
  Var feature;
  switch (pc.pooling) {
    case Pooling::head: feature = ops::segment_mean(z, seq, 0, 1); break;
    case Pooling::patches: feature = ops::segment_mean(z, seq, first_patch, seq); break;
    case Pooling::all: feature = ops::segment_mean(z, seq, 0, seq); break;
  }
  return {feature, z, seq, has_token};
}

Tensor encode_with_prompt(const Tensor& image, const Tensor& semantic,
                          const Encoder& enc, const PromptModule& prompt,
                          ForwardTrace* trace) {
  Tape tape(false);
  EncoderVars ev = bind_encoder(tape, enc);
  PromptVars pv = bind_prompt(tape, prompt);
  const Tensor* batch[] = {&image};
  Var g = tape.constant(semantic.reshaped({1, semantic.size()}));
  const Tensor& f = prompted_forward(tape, ev, pv, batch, g, trace).feature.value();
  return f.reshaped({f.size()});
}

}  // namespace sp
