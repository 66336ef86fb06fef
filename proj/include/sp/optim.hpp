#pragma once

#include <memory>
#include <string_view>
#include <vector>

#include "sp/tensor.hpp"

namespace sp {

enum class OptimizerKind { adamw, sgd };

std::string_view optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view s);

struct ParamGroup {
  std::vector<Parameter*> params;
  double lr = 1e-3;
  double weight_decay = 0.0;  // applied to matrices only, never to vectors
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step() = 0;
  void zero_grad();

 protected:
  explicit Optimizer(std::vector<ParamGroup> groups) : groups_(std::move(groups)) {}
  std::vector<ParamGroup> groups_;
};

// theta -= lr * (grad + wd * theta)
class Sgd final : public Optimizer {
 public:
  explicit Sgd(std::vector<ParamGroup> groups) : Optimizer(std::move(groups)) {}
  void step() override;
};

// Adam with decoupled weight decay.
class AdamW final : public Optimizer {
 public:
  explicit AdamW(std::vector<ParamGroup> groups, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);
  void step() override;

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<Tensor>> m_, v_;
};

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, std::vector<ParamGroup> groups);

}  // namespace sp
