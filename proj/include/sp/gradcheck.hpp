#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sp/core_math.hpp"
#include "sp/encoder.hpp"

namespace sp {

struct GradCheckOptions {
  double epsilon = 1e-4;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  // Test hook: perturbs one analytic gradient entry so the check must fail.
  bool corrupt_gradient = false;
};

struct GradCheckCase {
  std::string name;  // e.g. "pretrain", "meta/both-mlp"
  GradCheckReport report;
};

struct GradCheckSuiteReport {
  std::vector<GradCheckCase> cases;
  std::vector<GradCheckEntry> per_parameter;  // "case/param", worst first
  double max_error = 0.0;
  bool passed = false;
};

// Tiny encoder used for finite-difference checks: 4x4 images, 2x2 patches,
// two layers of width 8 with two heads.
ModelConfig toy_model_config();

// Checks every trainable parameter through the pre-training loss and the
// episodic loss under each prompt mechanism, projector and pooling choice.
GradCheckSuiteReport run_gradient_checks(const GradCheckOptions& opts = {});

}  // namespace sp
