#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "sp/data.hpp"
#include "sp/embeddings.hpp"
#include "sp/encoder.hpp"
#include "sp/optim.hpp"
#include "sp/prompt.hpp"

namespace sp {

struct TrainConfig {
  double tau = 0.2;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double lr_pretrain = 1e-3;
  double lr_encoder = 1e-4;
  double lr_projectors = 1e-3;
  double weight_decay = 0.05;
  std::size_t pretrain_epochs = 50;
  std::size_t batch_size = 32;
  std::size_t meta_epochs = 10;
  std::size_t episodes_per_epoch = 100;
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t queries = 15;
  std::uint64_t seed = 0;
  PromptConfig prompt;

  void validate() const;
  KeyValues to_key_values() const;
  static TrainConfig from_key_values(const KeyValues& kv, const ModelConfig& model);
};

/// Linear classifier over base classes used during pre-training only.
struct ClassifierHead {
  ClassifierHead(std::size_t num_classes, std::size_t width, std::uint64_t seed);

  Parameter w;  // (num_classes, width)
  Parameter b;  // (num_classes)

  std::size_t num_classes() const { return w.value.dim(0); }
  std::vector<Parameter*> parameters() { return {&w, &b}; }
};

// Mean cross-entropy of softmax(W f + b) against `labels`.
double pretrain_loss(const Tensor& features, const std::vector<std::size_t>& labels,
                     const ClassifierHead& head);
Var pretrain_loss(Var features, const std::vector<std::size_t>& labels, Var w, Var b);

// Mean cross-entropy of cosine(query, prototype) / tau.
double meta_loss(const Tensor& query_features, const Tensor& prototypes,
                 const std::vector<std::size_t>& labels, double tau);
Var meta_loss(Var query_features, Var prototypes, const std::vector<std::size_t>& labels,
              double tau);

// Full episode objective: support through the prompted encoder (each item
// prompted with its own class name), queries through the plain encoder,
// prototypes as class means, cosine cross-entropy at temperature tau.
Var episode_meta_loss(Tape& tape, const EncoderVars& enc, const PromptVars& prompt,
                      const Split& split, const Episode& episode,
                      const ClassEmbeddingTable& table, double tau);

struct PretrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  // running training accuracy per epoch
};

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

PretrainResult pretrain(Encoder& encoder, ClassifierHead& head, const Split& base,
                        const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Accuracy of head(encoder(x)) on every record of a split, with labels
// indexed by split.class_ids().
double classification_accuracy(const Encoder& encoder, const ClassifierHead& head,
                               const Split& split, std::size_t batch_size = 64);

struct MetaTrainResult {
  std::vector<double> epoch_loss;
};

// Episodic fine-tuning of encoder and prompt. Encoder and prompt
// parameters form two optimizer groups with their own learning rates.
MetaTrainResult meta_train(Encoder& encoder, PromptModule& prompt, const Split& base,
                           const ClassEmbeddingTable& table, const TrainConfig& cfg,
                           const EpochCallback& on_epoch = {});

}  // namespace sp
