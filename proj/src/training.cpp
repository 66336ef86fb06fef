#include "sp/training.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "sp/rng.hpp"

namespace sp {

void TrainConfig::validate() const {
  if (!(tau > 0) || !std::isfinite(tau)) throw ConfigError("tau must be positive");
  if (lr_pretrain < 0 || lr_encoder < 0 || lr_projectors < 0) {
    throw ConfigError("learning rates must be non-negative");
  }
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (way < 1 || shot < 1 || queries < 1) throw ConfigError("way, shot and queries must be >= 1");
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv{
      {"train.tau", format_double(tau)},
      {"train.optimizer", std::string(optimizer_name(optimizer))},
      {"train.lr_pretrain", format_double(lr_pretrain)},
      {"train.lr_encoder", format_double(lr_encoder)},
      {"train.lr_projectors", format_double(lr_projectors)},
      {"train.weight_decay", format_double(weight_decay)},
      {"train.pretrain_epochs", std::to_string(pretrain_epochs)},
      {"train.batch_size", std::to_string(batch_size)},
      {"train.meta_epochs", std::to_string(meta_epochs)},
      {"train.episodes_per_epoch", std::to_string(episodes_per_epoch)},
      {"train.way", std::to_string(way)},
      {"train.shot", std::to_string(shot)},
      {"train.queries", std::to_string(queries)},
      {"train.seed", std::to_string(seed)},
  };
  kv.merge(prompt.to_key_values());
  return kv;
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv, const ModelConfig& model) {
  TrainConfig c;
  c.tau = kv_double(kv, "train.tau", c.tau);
  c.optimizer = parse_optimizer(kv_string(kv, "train.optimizer", "adamw"));
  c.lr_pretrain = kv_double(kv, "train.lr_pretrain", c.lr_pretrain);
  c.lr_encoder = kv_double(kv, "train.lr_encoder", c.lr_encoder);
  c.lr_projectors = kv_double(kv, "train.lr_projectors", c.lr_projectors);
  c.weight_decay = kv_double(kv, "train.weight_decay", c.weight_decay);
  c.pretrain_epochs = kv_size(kv, "train.pretrain_epochs", c.pretrain_epochs);
  c.batch_size = kv_size(kv, "train.batch_size", c.batch_size);
  c.meta_epochs = kv_size(kv, "train.meta_epochs", c.meta_epochs);
  c.episodes_per_epoch = kv_size(kv, "train.episodes_per_epoch", c.episodes_per_epoch);
  c.way = kv_size(kv, "train.way", c.way);
  c.shot = kv_size(kv, "train.shot", c.shot);
  c.queries = kv_size(kv, "train.queries", c.queries);
  c.seed = kv_size(kv, "train.seed", c.seed);
  c.prompt = PromptConfig::from_key_values(kv, model);
  c.validate();
  return c;
}

ClassifierHead::ClassifierHead(std::size_t num_classes, std::size_t width,
                               std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x4ead));
  w = Parameter("head.w", normal_tensor({num_classes, width}, 0.02, rng));
  b = Parameter("head.b", Tensor({num_classes}));
}

Var pretrain_loss(Var features, const std::vector<std::size_t>& labels, Var w, Var b) {
  return ops::cross_entropy(ops::linear(features, w, b), labels);
}

double pretrain_loss(const Tensor& features, const std::vector<std::size_t>& labels,
                     const ClassifierHead& head) {
  Tape tape(false);
  return pretrain_loss(tape.constant(features), labels, bind(tape, head.w),
                       bind(tape, head.b))
      .value()[0];
}

Var meta_loss(Var query_features, Var prototypes, const std::vector<std::size_t>& labels,
              double tau) {
  if (!(tau > 0)) throw ConfigError("tau must be positive");
  return ops::cross_entropy(ops::cosine_logits(query_features, prototypes, 1.0 / tau), labels);
}

double meta_loss(const Tensor& query_features, const Tensor& prototypes,
                 const std::vector<std::size_t>& labels, double tau) {
  Tape tape(false);
  return meta_loss(tape.constant(query_features), tape.constant(prototypes), labels, tau)
      .value()[0];
}

Var episode_meta_loss(Tape& tape, const EncoderVars& enc, const PromptVars& prompt,
                      const Split& split, const Episode& episode,
                      const ClassEmbeddingTable& table, double tau) {
  std::vector<const Tensor*> support_images, query_images;
  std::vector<std::string> support_names;
  for (const auto& item : episode.support) {
    support_images.push_back(&split[item.record].image);
    support_names.push_back(split[item.record].class_name);
  }
  for (const auto& item : episode.query) query_images.push_back(&split[item.record].image);

  Var semantic = prompt.cfg->mechanism == Mechanism::none
                     ? tape.constant(Tensor({support_names.size(), table.dim()}))
                     : tape.constant(table.lookup(support_names));
  Var support = prompted_forward(tape, enc, prompt, support_images, semantic).feature;
  Var queries = encode_batch(tape, enc, query_images);
  Var prototypes = ops::group_mean(support, episode.support_groups());
  return meta_loss(queries, prototypes, episode.query_labels(), tau);
}

namespace {

void require_finite_loss(double loss, const char* stage, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw TrainingError(std::string(stage) + " diverged: non-finite loss at step " +
                        std::to_string(step));
  }
}

// Runs one optimisation step, reporting numeric blow-ups inside the forward
// or backward pass as divergence at that step.
template <class Fn>
auto guarded_step(const char* stage, std::size_t step, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw TrainingError(std::string(stage) + " diverged at step " + std::to_string(step) +
                        ": " + e.what());
  }
}

std::vector<std::size_t> head_labels(const Split& split) {
  const auto& ids = split.class_ids();
  std::vector<std::size_t> labels;
  labels.reserve(split.size());
  for (const auto& r : split.records()) {
    labels.push_back(std::size_t(std::lower_bound(ids.begin(), ids.end(), r.class_id) -
                                 ids.begin()));
  }
  return labels;
}

}  // namespace

PretrainResult pretrain(Encoder& encoder, ClassifierHead& head, const Split& base,
                        const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (base.empty()) throw InputError("pre-training needs a non-empty base split");
  if (head.num_classes() != base.class_ids().size()) {
    throw ShapeError("head has " + std::to_string(head.num_classes()) +
                     " outputs for " + std::to_string(base.class_ids().size()) +
                     " base classes");
  }
  const std::vector<std::size_t> labels = head_labels(base);
  std::vector<Parameter*> params = encoder.parameters();
  for (Parameter* p : head.parameters()) params.push_back(p);
  auto opt = make_optimizer(cfg.optimizer, {{params, cfg.lr_pretrain, cfg.weight_decay}});

  PretrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    std::vector<std::size_t> order(base.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, 0x93e7, epoch));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Tensor*> images;
      std::vector<std::size_t> batch_labels;
      for (std::size_t i = start; i < end; ++i) {
        images.push_back(&base[order[i]].image);
        batch_labels.push_back(labels[order[i]]);
      }
      opt->zero_grad();
      const auto [lv, lg] = guarded_step("pre-training", step, [&] {
        Tape tape;
        EncoderVars ev = bind_encoder(tape, encoder);
        Var logits = ops::linear(encode_batch(tape, ev, images), tape.param(head.w),
                                 tape.param(head.b));
        Var loss = ops::cross_entropy(logits, batch_labels);
        const double value = loss.value()[0];
        require_finite_loss(value, "pre-training", step);
        tape.backward(loss);
        return std::make_pair(value, logits.value());
      });
      opt->step();
      ++step;
      loss_sum += lv * double(end - start);
      for (std::size_t r = 0; r < lg.rows(); ++r) {
        Eigen::Index arg = 0;
        lg.mat().row(Eigen::Index(r)).maxCoeff(&arg);
        correct += std::size_t(arg) == batch_labels[r];
      }
    }
    result.epoch_loss.push_back(loss_sum / double(base.size()));
    result.epoch_accuracy.push_back(double(correct) / double(base.size()));
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }
  return result;
}

double classification_accuracy(const Encoder& encoder, const ClassifierHead& head,
                               const Split& split, std::size_t batch_size) {
  if (split.empty()) throw InputError("empty split");
  const std::vector<std::size_t> labels = head_labels(split);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t end = std::min(split.size(), start + batch_size);
    std::vector<const Tensor*> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(&split[i].image);
    Tape tape(false);
    EncoderVars ev = bind_encoder(tape, encoder);
    Var logits = ops::linear(encode_batch(tape, ev, images), tape.constant(head.w.value),
                             tape.constant(head.b.value));
    for (std::size_t r = 0; r < end - start; ++r) {
      Eigen::Index arg = 0;
      logits.value().mat().row(Eigen::Index(r)).maxCoeff(&arg);
      correct += std::size_t(arg) == labels[start + r];
    }
  }
  return double(correct) / double(split.size());
}

MetaTrainResult meta_train(Encoder& encoder, PromptModule& prompt, const Split& base,
                           const ClassEmbeddingTable& table, const TrainConfig& cfg,
                           const EpochCallback& on_epoch) {
  cfg.validate();
  prompt.config().validate(encoder.config());
  if (prompt.config().mechanism != Mechanism::none) {
    if (table.dim() != prompt.config().semantic_dim) {
      throw ShapeError("embedding table dim " + std::to_string(table.dim()) +
                       " != prompt semantic_dim " +
                       std::to_string(prompt.config().semantic_dim));
    }
    for (const auto& name : base.class_names()) {
      if (!table.contains(name)) {
        throw InputError("missing embedding for base class '" + name + "'");
      }
    }
  }
  auto opt = make_optimizer(cfg.optimizer,
                            {{encoder.parameters(), cfg.lr_encoder, cfg.weight_decay},
                             {prompt.parameters(), cfg.lr_projectors, cfg.weight_decay}});
  MetaTrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.meta_epochs; ++epoch) {
    double loss_sum = 0.0;
    for (std::size_t e = 0; e < cfg.episodes_per_epoch; ++e) {
      const Episode ep = sample_episode(base, cfg.way, cfg.shot, cfg.queries,
                                        derive_seed(cfg.seed, 0x3e7a, epoch, e));
      opt->zero_grad();
      const double lv = guarded_step("meta-training", step, [&] {
        Tape tape;
        EncoderVars ev = bind_encoder(tape, encoder);
        PromptVars pv = bind_prompt(tape, prompt);
        Var loss = episode_meta_loss(tape, ev, pv, base, ep, table, cfg.tau);
        const double value = loss.value()[0];
        require_finite_loss(value, "meta-training", step);
        tape.backward(loss);
        return value;
      });
      opt->step();
      ++step;
      loss_sum += lv;
    }
    result.epoch_loss.push_back(cfg.episodes_per_epoch ? loss_sum / double(cfg.episodes_per_epoch)
                                                       : 0.0);
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }
  return result;
}

}  // namespace sp
