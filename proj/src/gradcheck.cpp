#include "sp/gradcheck.hpp"

#include <algorithm>

#include "sp/prompt.hpp"
#include "sp/rng.hpp"
#include "sp/training.hpp"

namespace sp {

ModelConfig toy_model_config() {
  ModelConfig c;
  c.image_size = 4;
  c.channels = 1;
  c.patch_size = 2;
  c.depth = 2;
  c.width = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.init_std = 0.3;
  return c;
}

namespace {

constexpr std::size_t kSemanticDim = 6;

std::vector<Tensor> random_images(std::size_t n, const ModelConfig& mc, Rng& rng) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img({mc.image_size, mc.image_size, mc.channels});
    for (double& v : img.storage()) v = rng.uniform();
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<const Tensor*> pointers(const std::vector<Tensor>& v) {
  std::vector<const Tensor*> out;
  for (const auto& t : v) out.push_back(&t);
  return out;
}

LossFn corrupted(LossFn loss, Parameter* target, bool enabled) {
  if (!enabled) return loss;
  return [loss = std::move(loss), target](bool with_grad) {
    const double v = loss(with_grad);
    if (with_grad) target->grad[0] += 1e-2 * (1.0 + std::abs(target->grad[0]));
    return v;
  };
}

GradCheckCase pretrain_case(const GradCheckOptions& opts) {
  const ModelConfig mc = toy_model_config();
  Encoder enc(mc, derive_seed(opts.seed, 1));
  ClassifierHead head(3, mc.width, derive_seed(opts.seed, 2));
  Rng rng(derive_seed(opts.seed, 3));
  for (double& v : head.w.value.storage()) v = 0.5 * rng.normal();
  for (double& v : head.b.value.storage()) v = 0.1 * rng.normal();
  const std::vector<Tensor> images = random_images(4, mc, rng);
  const std::vector<std::size_t> labels{0, 2, 1, 2};

  std::vector<Parameter*> params = enc.parameters();
  params.push_back(&head.w);
  params.push_back(&head.b);
  LossFn loss = [&](bool with_grad) {
    Tape tape(with_grad);
    EncoderVars ev = with_grad ? bind_encoder(tape, enc)
                               : bind_encoder(tape, static_cast<const Encoder&>(enc));
    const auto ptrs = pointers(images);
    Var w = with_grad ? tape.param(head.w) : tape.constant(head.w.value);
    Var b = with_grad ? tape.param(head.b) : tape.constant(head.b.value);
    Var l = pretrain_loss(encode_batch(tape, ev, ptrs), labels, w, b);
    if (with_grad) tape.backward(l);
    return l.value()[0];
  };
  return {"pretrain",
          check_gradients(corrupted(loss, params.front(), opts.corrupt_gradient), params,
                          opts.epsilon)};
}

struct MetaVariant {
  std::string name;
  Mechanism mechanism;
  ProjectorKind projector;
  Pooling pooling;
  std::size_t inject_layer;
};

GradCheckCase meta_case(const MetaVariant& variant, const GradCheckOptions& opts) {
  const ModelConfig mc = toy_model_config();
  Encoder enc(mc, derive_seed(opts.seed, 4));
  PromptConfig pc = PromptConfig::defaults_for(mc);
  pc.mechanism = variant.mechanism;
  pc.projector = variant.projector;
  pc.pooling = variant.pooling;
  pc.inject_layer = variant.inject_layer;
  pc.semantic_dim = kSemanticDim;
  PromptModule prompt(pc, mc, derive_seed(opts.seed, 5));
  Rng rng(derive_seed(opts.seed, 6));
  for (Parameter* p : prompt.parameters()) {
    for (double& v : p->value.storage()) v = 0.3 * rng.normal();
  }

  // 3-way 2-shot support with two queries per class.
  const std::vector<Tensor> support = random_images(6, mc, rng);
  const std::vector<Tensor> queries = random_images(6, mc, rng);
  const Tensor semantic = normal_tensor({6, kSemanticDim}, 1.0, rng);
  const std::vector<std::vector<std::size_t>> groups{{0, 1}, {2, 3}, {4, 5}};
  const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2};

  std::vector<Parameter*> params = enc.parameters();
  std::vector<Parameter*> prompt_params;
  if (uses_spatial(pc.mechanism)) {
    for (auto& p : prompt.h_s.params) prompt_params.push_back(&p);
  }
  if (uses_channel(pc.mechanism)) {
    for (auto& p : prompt.h_c.params) prompt_params.push_back(&p);
    for (Parameter* p : {&prompt.ci_mlp.w1, &prompt.ci_mlp.b1, &prompt.ci_mlp.w2,
                         &prompt.ci_mlp.b2}) {
      prompt_params.push_back(p);
    }
  }
  params.insert(params.end(), prompt_params.begin(), prompt_params.end());

  LossFn loss = [&](bool with_grad) {
    Tape tape(with_grad);
    const EncoderVars ev = with_grad ? bind_encoder(tape, enc)
                                     : bind_encoder(tape, static_cast<const Encoder&>(enc));
    const PromptVars pv =
        with_grad ? bind_prompt(tape, prompt)
                  : bind_prompt(tape, static_cast<const PromptModule&>(prompt));
    const auto sp_ptrs = pointers(support);
    const auto q_ptrs = pointers(queries);
    Var s = prompted_forward(tape, ev, pv, sp_ptrs, tape.constant(semantic)).feature;
    Var q = encode_batch(tape, ev, q_ptrs);
    Var l = meta_loss(q, ops::group_mean(s, groups), labels, 0.2);
    if (with_grad) tape.backward(l);
    return l.value()[0];
  };
  Parameter* target = prompt_params.empty() ? params.front() : prompt_params.front();
  return {"meta/" + variant.name,
          check_gradients(corrupted(loss, target, opts.corrupt_gradient), params,
                          opts.epsilon)};
}

}  // namespace

GradCheckSuiteReport run_gradient_checks(const GradCheckOptions& opts) {
  GradCheckSuiteReport suite;
  suite.cases.push_back(pretrain_case(opts));
  const std::vector<MetaVariant> variants{
      {"none", Mechanism::none, ProjectorKind::linear, Pooling::all, 2},
      {"si", Mechanism::spatial, ProjectorKind::linear, Pooling::all, 2},
      {"si-head", Mechanism::spatial, ProjectorKind::linear, Pooling::head, 1},
      {"si-patches", Mechanism::spatial, ProjectorKind::mlp, Pooling::patches, 2},
      {"ci", Mechanism::channel, ProjectorKind::linear, Pooling::all, 1},
      {"both", Mechanism::both, ProjectorKind::linear, Pooling::all, 2},
      {"both-mlp", Mechanism::both, ProjectorKind::mlp, Pooling::all, 1},
  };
  for (const auto& v : variants) suite.cases.push_back(meta_case(v, opts));
  for (const auto& c : suite.cases) {
    for (const auto& e : c.report.per_parameter) {
      suite.per_parameter.push_back({c.name + "/" + e.name, e.max_error});
    }
    suite.max_error = std::max(suite.max_error, c.report.max_error);
  }
  std::stable_sort(suite.per_parameter.begin(), suite.per_parameter.end(),
                   [](const auto& a, const auto& b) { return a.max_error > b.max_error; });
  suite.passed = suite.max_error <= opts.tolerance;
  return suite;
}

}  // namespace sp
