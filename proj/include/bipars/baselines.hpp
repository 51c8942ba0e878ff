#pragma once

#include "bipars/metagrad.hpp"
#include "bipars/mlp.hpp"
#include "bipars/optim.hpp"

namespace bipars {

/// Naive shaping: r + f.
inline double ns_shaped_reward(double r, double f_val) { return r + f_val; }

struct PotentialSpec {
  std::vector<Index> hidden{16, 8};
  Activation activation = Activation::tanh;
  double lr = 5e-4;
  double clip_norm = 0.0;
};

struct DpbaStep {
  /// gamma * Phi(s', a') - Phi(s, a), evaluated before the TD update.
  double shaping = 0.0;
  double td_error = 0.0;
};

/// State-action potential Phi(s, a) learned online by SARSA-style TD on the
/// negated shaping reward; the delivered shaping is the potential
/// difference.
class PotentialNet {
 public:
  PotentialNet() = default;
  PotentialNet(Index input_dim, PotentialSpec spec = {});

  void init(Rng& rng);
  double value(const Vec& x) const;

  /// x = encoded (s, a); x_next = encoded (s', a'), or nullptr when s' is a
  /// failure terminal (Phi = 0 there). One Adam step toward -f + gamma Phi(s', a').
  DpbaStep step(const Vec& x, const Vec* x_next, double f_val, double gamma);
  /// Shaping value only; no learning.
  double shaping(const Vec& x, const Vec* x_next, double gamma) const;

  const MlpNet& net() const { return net_; }
  MlpNet& net() { return net_; }

 private:
  PotentialSpec spec_;
  MlpNet net_;
  Optimizer opt_;
};

/// Upper-level gradient for a single scalar weight (dz/dphi = 1 wherever the
/// weight is not clamped). `state` is required for imgl and holds the n x 1
/// meta-gradient.
double single_weight_upper_grad(MetaMethod method, const Batch& upper, const Vec& adv, const Batch& lower,
                                const Policy& policy_new, const Policy& policy_old, const WeightFn& wf, double alpha,
                                double gamma, LossReduction reduction = LossReduction::mean,
                                const MetaGradState* state = nullptr);

}  // namespace bipars
