#pragma once

#include <string>
#include <variant>
#include <vector>

#include "ppks/tensor.hpp"

namespace ppks {

struct SgdSpec {
  float lr = 0.01f;
  float momentum = 0.0f;
};

struct AdamSpec {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

using OptimizerSpec = std::variant<SgdSpec, AdamSpec>;

/// In-place first-order updater over a fixed parameter list. Parameters whose
/// gradient buffer was never allocated are left untouched.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerSpec spec);

  /// Applies one update. Throws DivergenceError naming the offending
  /// parameter if any gradient is non-finite.
  void step();
  void zero_grad();

  const std::vector<Tensor>& params() const { return params_; }
  long steps() const { return steps_; }

 private:
  std::vector<Tensor> params_;
  OptimizerSpec spec_;
  std::vector<std::vector<float>> first_;
  std::vector<std::vector<float>> second_;
  long steps_ = 0;
};

}  // namespace ppks
