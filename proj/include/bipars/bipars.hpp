#pragma once

#include "bipars/baselines.hpp"
#include "bipars/envs.hpp"
#include "bipars/metagrad.hpp"
#include "bipars/policy.hpp"
#include "bipars/ppo.hpp"
#include "bipars/shaping.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace bipars {

enum class Method { ppo, ns, dpba, em, mgl, imgl, single_em, single_mgl, single_imgl };

Method parse_method(std::string_view name);
std::string_view to_string(Method m);
std::vector<std::string> method_names();

bool uses_weight_fn(Method m);
bool is_single_weight(Method m);
/// The upper-level gradient family of a weight-learning method.
MetaMethod meta_method(Method m);

struct TrainConfig {
  std::string env = "cartpole-discrete";
  Index torque_joints = 3;
  std::string shaping = "cartpole-beneficial";
  std::uint64_t table_seed = 0;
  double task_weight = 20.0;
  Method method = Method::mgl;

  long total_steps = 400'000;
  long eval_every = 4'000;
  int eval_episodes = 20;
  long update_period = 20'000;

  PolicySpec policy;
  std::vector<Index> value_hidden{32, 32};
  Activation value_activation = Activation::relu;
  PpoConfig ppo;
  double gamma = 0.999;
  double lambda = 0.95;

  WeightFnSpec weight;
  PotentialSpec potential;

  /// Upper level.
  double phi_lr = 1e-5;
  double phi_clip_norm = 0.0;
  int upper_epochs = 50;
  Index upper_minibatch = 1024;
  long upper_steps = 20'000;
  bool reuse_rollouts = false;
  int true_value_epochs = 10;
  HessianMode hessian = HessianMode::exact;
  HvpMode hvp_mode = HvpMode::reverse;

  /// Pre-trained weight-function parameters, and whether to keep them fixed.
  std::optional<Vec> initial_phi;
  bool freeze_phi = false;

  /// Abort cleanly after this many seconds (0 = unlimited).
  double time_limit_s = 0.0;
};

struct EvalRecord {
  long step = 0;
  /// ASPE for cart-pole, ARPE otherwise.
  double metric = 0.0;
  double mean_weight = 0.0;
  std::optional<double> mean_torque;
  std::uint64_t seed = 0;
};

enum class RunStatus { ok, numeric_failure, time_limit };
std::string_view to_string(RunStatus s);

struct RunArtifacts {
  std::vector<EvalRecord> records;
  Policy policy;
  MlpNet value;
  std::optional<WeightFn> weight_fn;
  RunStatus status = RunStatus::ok;
  std::string message;
  /// Serialized state of the training environment stream at the end.
  std::string rng_state;
  long steps = 0;
};

/// One seed of the alternating bi-level loop:
///   collect shaped rollouts with theta, accumulate the meta-gradient at
///   theta, PPO-update theta -> theta', collect original-MDP rollouts with
///   theta', and ascend phi along the upper gradient.
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::uint64_t seed);

  RunArtifacts run();

  /// One lower + upper iteration on an already collected shaped batch.
  void update(const Batch& lower);
  /// Episodes under the current policy in the original MDP, at least
  /// `min_steps` transitions.
  Batch collect_upper(long min_steps);
  /// Evaluation episodes with the stochastic policy and true rewards only.
  EvalRecord evaluate(long step, double mean_weight);

  const TrainConfig& config() const { return cfg_; }
  const Policy& policy() const { return policy_; }
  Policy& policy() { return policy_; }
  const MlpNet& value() const { return value_; }
  const std::optional<WeightFn>& weight_fn() const { return wf_; }
  std::optional<WeightFn>& weight_fn() { return wf_; }
  const MetaGradState& meta_state() const { return meta_; }
  bool upper_enabled() const;

 private:
  Vec policy_input(const Vec& obs) const;
  void upper_update(const Batch& upper, const Vec& adv);

  TrainConfig cfg_;
  std::uint64_t seed_;
  std::unique_ptr<Env> env_, upper_env_, eval_env_;
  ShapingSpec shaping_;
  Policy policy_;
  MlpNet value_;
  MlpNet true_value_;
  std::optional<WeightFn> wf_;
  std::optional<PotentialNet> potential_;
  PpoLearner ppo_;
  Optimizer true_value_opt_;
  Optimizer phi_opt_;
  MetaGradState meta_;

  Rng env_rng_, policy_rng_, shuffle_rng_, upper_env_rng_, upper_policy_rng_, upper_shuffle_rng_, eval_rng_;
};

RunArtifacts bipars_train(const TrainConfig& cfg, std::uint64_t seed);

bool is_cartpole(const std::string& env_id);

}  // namespace bipars
