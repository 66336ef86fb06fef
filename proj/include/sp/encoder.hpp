#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sp/autodiff.hpp"
#include "sp/core_math.hpp"
#include "sp/serialize.hpp"
#include "sp/tensor.hpp"

namespace sp {

struct ModelConfig {
  std::size_t image_size = 16;  // H == W
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t depth = 4;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  Activation mlp_activation = Activation::gelu_erf;
  double scale_exponent = 0.25;
  double ln_eps = 1e-5;
  double init_std = 0.02;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  AttentionConfig attention() const {
    return {heads, heads ? width / heads : 0, scale_exponent};
  }

  void validate() const;
  KeyValues to_key_values() const;
  static ModelConfig from_key_values(const KeyValues& kv);
};

struct TransformerLayerParams {
  Parameter ln1_gamma, ln1_beta;
  AttentionParams attn;
  Parameter ln2_gamma, ln2_beta;
  MlpParams mlp;
};

/// Patch-transformer feature extractor: patch embedding plus learned
/// positions, `depth` pre-norm transformer layers, mean pooling.
class Encoder {
 public:
  Encoder(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  Parameter patch_embed;  // (width, patch_dim)
  Parameter pos_embed;    // (num_patches, width)
  std::vector<TransformerLayerParams> layers;

 private:
  ModelConfig cfg_;
};

struct LayerVars {
  Var ln1_gamma, ln1_beta, w_qkv, w_out, ln2_gamma, ln2_beta, w1, b1, w2, b2;
};

struct EncoderVars {
  const ModelConfig* cfg = nullptr;
  Var patch_embed, pos_embed;
  std::vector<LayerVars> layers;
};

EncoderVars bind_encoder(Tape& tape, Encoder& enc);
EncoderVars bind_encoder(Tape& tape, const Encoder& enc);

// (H, W, C) image -> (M, P*P*C) rows in row-major patch order; each row is
// the patch flattened as (dy, dx, c).
Tensor patchify(const Tensor& image, std::size_t patch_size);
// Stacks the patches of several images into (B*M, P*P*C).
Tensor patchify_batch(std::span<const Tensor* const> images, std::size_t patch_size);

// W_embed * patch_i + pos_i for every patch of every image in the batch.
Var embed_patches(Var patches, Var w_embed, Var pos_embed);

// z + MSA(LN(z)), then + MLP(LN(.)). `probs` receives attention weights.
Var transformer_layer(Var z, const LayerVars& layer, const ModelConfig& cfg,
                      std::size_t seq_len, Tensor* probs = nullptr);

// Per-layer record of a forward pass: the token sequence entering each
// layer and that layer's attention weights (B, heads, S, S).
struct ForwardTrace {
  std::vector<Tensor> layer_inputs;
  std::vector<Tensor> attention;
};

// Runs layers [first, last) (0-based) over a batch of sequences.
Var run_layers(const EncoderVars& enc, Var z, std::size_t first, std::size_t last,
               std::size_t seq_len, ForwardTrace* trace = nullptr);

// Embedded patch tokens of a batch: (B*M, width).
Var embed_images(Tape& tape, const EncoderVars& enc,
                 std::span<const Tensor* const> images);

// Mean-pooled features (B, width) of a batch of images.
Var encode_batch(Tape& tape, const EncoderVars& enc,
                 std::span<const Tensor* const> images);

// Single-image feature vector (width).
Tensor encode(const Tensor& image, const Encoder& enc);

void check_image(const Tensor& image, const ModelConfig& cfg);

}  // namespace sp
