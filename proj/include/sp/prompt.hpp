#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sp/encoder.hpp"

namespace sp {

enum class Mechanism { none, spatial, channel, both };
enum class ProjectorKind { linear, mlp };
enum class Pooling { head, patches, all };

std::string_view mechanism_name(Mechanism m);  // none|si|ci|both
Mechanism parse_mechanism(std::string_view s);
std::string_view projector_name(ProjectorKind k);
ProjectorKind parse_projector(std::string_view s);
std::string_view pooling_name(Pooling p);
Pooling parse_pooling(std::string_view s);

inline bool uses_spatial(Mechanism m) { return m == Mechanism::spatial || m == Mechanism::both; }
inline bool uses_channel(Mechanism m) { return m == Mechanism::channel || m == Mechanism::both; }

// ceil(2L/3) + 1 clamped to L: a layer in the final third of the stack.
std::size_t default_inject_layer(std::size_t depth);

struct PromptConfig {
  std::size_t inject_layer = 4;  // 1-based
  Mechanism mechanism = Mechanism::both;
  ProjectorKind projector = ProjectorKind::linear;
  Pooling pooling = Pooling::all;
  std::size_t semantic_dim = 32;
  // Inner activation of the channel-interaction MLP; the outer one is
  // always a sigmoid.
  Activation ci_inner = Activation::sigmoid;
  std::size_t ci_hidden = 0;         // 0: same as encoder width
  std::size_t projector_hidden = 0;  // 0: same as encoder width

  static PromptConfig defaults_for(const ModelConfig& model);
  void validate(const ModelConfig& model) const;
  KeyValues to_key_values() const;
  static PromptConfig from_key_values(const KeyValues& kv, const ModelConfig& model);
};

/// Maps a semantic embedding (D_g) to the encoder width, either with one
/// affine map or a two-layer GELU MLP.
struct Projector {
  ProjectorKind kind = ProjectorKind::linear;
  std::vector<Parameter> params;  // linear: w, b; mlp: w1, b1, w2, b2
};

/// Trainable parameters of the semantic prompt: spatial projector h_s,
/// channel projector h_c and the channel-interaction MLP.
class PromptModule {
 public:
  PromptModule(const PromptConfig& cfg, const ModelConfig& model, std::uint64_t seed);

  const PromptConfig& config() const { return cfg_; }
  PromptConfig& mutable_config() { return cfg_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  Projector h_s;
  Projector h_c;
  MlpParams ci_mlp;  // (2*width -> hidden -> width)

 private:
  PromptConfig cfg_;
};

struct PromptVars {
  const PromptConfig* cfg = nullptr;
  ProjectorKind projector = ProjectorKind::linear;
  std::vector<Var> h_s, h_c;
  Var ci_w1, ci_b1, ci_w2, ci_b2;
};

PromptVars bind_prompt(Tape& tape, PromptModule& prompt);
PromptVars bind_prompt(Tape& tape, const PromptModule& prompt);

// Projects a batch of semantic embeddings (B, D_g) to (B, width).
Var project(const std::vector<Var>& params, ProjectorKind kind, Var semantic);

// Spatial prompt token z0 = h_s(g).
Tensor project_spatial(const Tensor& semantic, const PromptModule& prompt);

// [z0; Z]: prepends one token to a prompt-free (M, C) sequence.
Tensor extend_sequence(const Tensor& tokens, const Tensor& prompt_token,
                       std::size_t expected_patches);

// z^i + beta with beta = sigmoid(W2 act(W1 [h_c(g); mean_i z^i] + b1) + b2).
// Batched form over (B*M, C) tokens and (B, D_g) embeddings.
Var channel_modulate(Var tokens, Var semantic, const PromptVars& prompt,
                     std::size_t seq_len, Var* beta_out = nullptr);
Tensor channel_modulate(const Tensor& tokens, const Tensor& semantic,
                        const PromptModule& prompt, Tensor* beta_out = nullptr);

struct PromptedOutput {
  Var feature;          // (B, width)
  Var tokens;           // final token sequence (B*S, width)
  std::size_t seq_len;  // S: M, or M + 1 with a spatial prompt
  bool has_prompt_token;
};

// Conditional feature extraction. Layers before inject_layer run as in the
// plain encoder; at inject_layer the patch tokens are first channel
// modulated (CI), then extended with the prompt token (SI); the remaining
// layers run on the result and the output is pooled per config.
PromptedOutput prompted_forward(Tape& tape, const EncoderVars& enc,
                                const PromptVars& prompt,
                                std::span<const Tensor* const> images, Var semantic,
                                ForwardTrace* trace = nullptr);

Tensor encode_with_prompt(const Tensor& image, const Tensor& semantic,
                          const Encoder& enc, const PromptModule& prompt,
                          ForwardTrace* trace = nullptr);

}  // namespace sp
