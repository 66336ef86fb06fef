#include "sp/optim.hpp"

#include <cmath>
#include <string>

namespace sp {

std::string_view optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::adamw ? "adamw" : "sgd";
}

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adamw") return OptimizerKind::adamw;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (adamw|sgd)");
}

void Optimizer::zero_grad() {
  for (auto& g : groups_) {
    for (Parameter* p : g.params) p->zero_grad();
  }
}

void Sgd::step() {
  for (auto& g : groups_) {
    if (g.lr == 0.0) continue;
    for (Parameter* p : g.params) {
      const double wd = p->value.rank() >= 2 ? g.weight_decay : 0.0;
      auto& v = p->value.storage();
      const auto& grad = p->grad.storage();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= g.lr * (grad[i] + wd * v[i]);
    }
  }
}

AdamW::AdamW(std::vector<ParamGroup> groups, double beta1, double beta2, double eps)
    : Optimizer(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto& g : groups_) {
    m_.emplace_back();
    v_.emplace_back();
    for (Parameter* p : g.params) {
      m_.back().emplace_back(p->value.shape(), 0.0);
      v_.back().emplace_back(p->value.shape(), 0.0);
    }
  }
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    const auto& g = groups_[gi];
    if (g.lr == 0.0) continue;
    for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
      Parameter& p = *g.params[pi];
      const double wd = p.value.rank() >= 2 ? g.weight_decay : 0.0;
      auto& theta = p.value.storage();
      const auto& grad = p.grad.storage();
      auto& m = m_[gi][pi].storage();
      auto& v = v_[gi][pi].storage();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
        const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        theta[i] -= g.lr * (update + wd * theta[i]);
      }
    }
  }
}

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, std::vector<ParamGroup> groups) {
  if (kind == OptimizerKind::sgd) return std::make_unique<Sgd>(std::move(groups));
  return std::make_unique<AdamW>(std::move(groups));
}

}  // namespace sp
