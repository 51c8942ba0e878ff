#pragma once

#include "bipars/tensor.hpp"

#include <string_view>

namespace bipars {

enum class OptimizerKind { adam, sgd };

OptimizerKind parse_optimizer(std::string_view name);
std::string_view to_string(OptimizerKind k);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

/// First-order optimizer over a flat parameter vector. `descend` minimizes,
/// `ascend` maximizes.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(Index n, OptimizerConfig cfg);

  void descend(Vec& params, Vec grad) { apply(params, std::move(grad), -1.0); }
  void ascend(Vec& params, Vec grad) { apply(params, std::move(grad), 1.0); }

  const OptimizerConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long steps() const { return t_; }
  void reset();

 private:
  void apply(Vec& params, Vec grad, double sign);

  OptimizerConfig cfg_;
  Vec m_, v_;
  long t_ = 0;
};

}  // namespace bipars
