#include "bipars/optim.hpp"

#include <cmath>

namespace bipars {

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer: " + std::string(name));
}

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

Optimizer::Optimizer(Index n, OptimizerConfig cfg) : cfg_(cfg), m_(Vec::Zero(n)), v_(Vec::Zero(n)) {}

void Optimizer::reset() {
  m_.setZero();
  v_.setZero();
  t_ = 0;
}

void Optimizer::apply(Vec& params, Vec grad, double sign) {
  if (grad.size() != params.size() || grad.size() != m_.size()) throw ShapeError("optimizer: size mismatch");
  if (!grad.allFinite()) throw NumericError("optimizer received a non-finite gradient");
  if (cfg_.clip_norm > 0.0) {
    const double norm = grad.norm();
    if (norm > cfg_.clip_norm) grad *= cfg_.clip_norm / norm;
  }
  ++t_;
  if (cfg_.kind == OptimizerKind::sgd) {
    params += sign * cfg_.lr * grad;
    return;
  }
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double step = cfg_.lr * std::sqrt(bc2) / bc1;
  params.array() += sign * step * m_.array() / (v_.array().sqrt() + cfg_.eps * std::sqrt(bc2));
}

}  // namespace bipars
