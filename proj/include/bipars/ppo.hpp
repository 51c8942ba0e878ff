#pragma once

#include "bipars/mlp.hpp"
#include "bipars/optim.hpp"
#include "bipars/policy.hpp"

#include <string_view>
#include <vector>

namespace bipars {

struct IncompleteTrajectoryError : std::logic_error {
  using std::logic_error::logic_error;
};

struct Transition {
  Vec obs;
  /// Policy input; obs ⧺ z-vector for hyper-mode policies.
  Vec input;
  /// Policy-space action (index for discrete).
  Vec action;
  /// Action as applied by the environment.
  Vec applied;
  Vec next_obs;
  /// Weight-function input for (obs, action); empty when unused.
  Vec weight_input;
  double log_prob = 0.0;
  double r_true = 0.0;
  double f_val = 0.0;
  double z_val = 0.0;
  double r_mod = 0.0;
  bool done = false;
  bool failed = false;
  bool truncated = false;
};

/// Transitions of consecutive episodes in collection order.
struct Batch {
  std::vector<Transition> steps;

  Index size() const { return static_cast<Index>(steps.size()); }
  bool empty() const { return steps.empty(); }
  /// Every episode in the batch ends with a done transition.
  bool complete() const { return !steps.empty() && steps.back().done; }
  /// [begin, end) index ranges of episodes (the last may be open).
  std::vector<std::pair<Index, Index>> episodes() const;
  Index num_episodes() const;

  Mat inputs() const;
  Mat actions() const;
  Mat observations() const;
  Mat next_observations() const;
  Mat weight_inputs() const;
  Vec rewards_true() const;
  Vec rewards_mod() const;
  Vec log_probs() const;
  /// Gathers the given indices into a new batch (keeps order).
  Batch subset(const std::vector<Index>& idx) const;
  void append(const Batch& other);
};

enum class RewardChannel { true_reward, modified };

struct GaeResult {
  Vec advantages;
  Vec returns;
};

/// GAE(gamma, lambda) over the chosen channel. `values[t]` = V(obs_t),
/// `next_values[t]` = V(next_obs_t). Failures do not bootstrap; time-limit
/// ends do. A batch ending mid-episode bootstraps from the last next value.
GaeResult compute_gae(const Batch& batch, const Vec& values, const Vec& next_values, double gamma, double lambda,
                      RewardChannel channel);
GaeResult compute_gae(const Batch& batch, const MlpNet& value_fn, double gamma, double lambda, RewardChannel channel);

/// sum_t gamma^t r_mod from `start` to the end of its episode.
double mc_return(const Batch& batch, Index start, double gamma);
/// mc_return at every index, by one backward pass.
Vec mc_returns(const Batch& batch, double gamma, RewardChannel channel = RewardChannel::modified);

/// Zero mean, unit (population) variance. Batches of one are returned as is.
Vec normalize_advantages(const Vec& adv);

/// Value network: obs -> scalar.
MlpNet make_value_net(Index obs_dim, const std::vector<Index>& hidden, Activation act);
Vec value_predict(const MlpNet& value_fn, const Mat& obs);

enum class LossReduction { mean, sum };
LossReduction parse_reduction(std::string_view name);

struct PpoConfig {
  double clip_eps = 0.5;
  int epochs = 50;
  Index minibatch = 1024;
  double policy_lr = 1e-4;
  double value_lr = 2e-4;
  double value_coef = 1.0;
  double policy_clip_norm = 0.0;
  double value_clip_norm = 0.0;
  bool normalize_advantages = true;
  OptimizerKind optimizer = OptimizerKind::adam;
  LossReduction reduction = LossReduction::mean;
};

struct PpoStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double clip_fraction = 0.0;
  long minibatches = 0;
};

/// Clipped-surrogate loss on one minibatch, its gradient in policy
/// parameters, and the probability ratios.
struct SurrogateResult {
  double loss = 0.0;
  ParamVector grad;
  double clip_fraction = 0.0;
  Vec ratio;
};
SurrogateResult clipped_surrogate(const Policy& policy, const Mat& inputs, const Mat& actions, const Vec& old_log_prob,
                                  const Vec& adv, double clip_eps, LossReduction reduction);

/// Mean (or summed) squared error 0.5 * (V - target)^2 and its gradient.
std::pair<double, ParamVector> value_loss(const MlpNet& value_fn, const Mat& obs, const Vec& targets,
                                          LossReduction reduction);

/// Owns the optimizer state for the policy and value network.
class PpoLearner {
 public:
  PpoLearner() = default;
  PpoLearner(const Policy& policy, const MlpNet& value_fn, PpoConfig cfg);

  PpoStats update(Policy& policy, MlpNet& value_fn, const Batch& batch, const Vec& advantages, const Vec& returns,
                  Rng& shuffle_rng);

  const PpoConfig& config() const { return cfg_; }

 private:
  PpoConfig cfg_;
  Optimizer policy_opt_;
  Optimizer value_opt_;
};

/// Fits a value network to `targets` by shuffled minibatch regression.
void fit_value(MlpNet& value_fn, Optimizer& opt, const Mat& obs, const Vec& targets, int epochs, Index minibatch,
               Rng& shuffle_rng);

/// Shuffled index chunks of size `minibatch`; the trailing remainder is
/// dropped unless the whole batch is smaller than one minibatch.
std::vector<std::vector<Index>> minibatch_indices(Index n, Index minibatch, Rng& rng);

}  // namespace bipars
