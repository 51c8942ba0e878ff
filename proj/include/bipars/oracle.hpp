#pragma once

#include "bipars/envs.hpp"
#include "bipars/metagrad.hpp"
#include "bipars/policy.hpp"
#include "bipars/shaping.hpp"

#include <string>
#include <vector>

namespace bipars {

/// Exact quantities of a stationary policy on a tabular MDP.
/// rho(s) = sum_{t >= 1} gamma^(t-1) Pr(s_t = s), so rho sums to 1 / (1 - gamma).
struct ExactPolicyEval {
  Vec rho;
  Vec V;
  /// num_states x num_actions
  Mat Q;
};

/// `policy_probs` is num_states x num_actions with rows summing to 1.
ExactPolicyEval exact_eval(const TabularMdp& mdp, const Mat& policy_probs);
double exact_J(const TabularMdp& mdp, const Mat& policy_probs);

/// Action probabilities of a hyper-mode policy over one-hot states, with the
/// z-vector of each state taken from `wf`.
Mat hyper_policy_probs(const TabularMdp& mdp, const Policy& policy, const WeightFn& wf);

/// sum_s rho(s) sum_a pi(a|s) [g_z(s, a) dz(s)/dphi] Q(s, a), enumerated
/// exactly. `policy` must be in hyper mode with z_dim == wf.z_dim().
ParamVector exact_upper_grad(const TabularMdp& mdp, const Policy& policy, const WeightFn& wf);

struct OracleReport {
  std::string test_id;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  /// Weight-function coordinates dropped because a perturbed replay
  /// changed a discrete action.
  std::vector<Index> excluded;
  std::string detail;

  std::string to_json() const;
};

/// Deterministic 1-d control task for the frozen-randomness harness:
///   s' = 0.9 s + 0.1 a,  r = -s'^2,
/// reset s ~ U[-1, 1], fixed horizon, no failure terminals.
class ToyControlEnv final : public Env {
 public:
  explicit ToyControlEnv(int horizon = 5);

  std::string id() const override { return "toy-control"; }
  Index state_dim() const override { return 1; }
  ActionSpace action_space() const override { return {ActionKind::continuous, 1, -1.0, 1.0}; }
  int max_steps() const override { return horizon_; }
  Vec reset(Rng& rng) override;
  StepResult step(const Vec& action, Rng& rng) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<ToyControlEnv>(*this); }

 private:
  int horizon_;
};

/// f(s, a, s') = -s * a on the toy task.
ShapingSpec toy_shaping();

struct FrozenCheckConfig {
  std::string test_id = "frozen-mgl";
  double alpha = 0.05;
  double gamma = 0.95;
  int episodes = 3;
  double fd_eps = 1e-6;
  double tolerance = 1e-4;
  /// 1 checks the single-step meta-gradient; 2 checks the accumulated IMGL
  /// matrix after two updates, with the second batch held fixed.
  int iterations = 1;
  HessianMode hessian = HessianMode::exact;
};

/// Frozen-randomness check of d theta' / d phi.
///
/// Rollouts draw every random number from `seed` and are replayed with the
/// same draws when phi is perturbed. theta' follows the plain update
///   theta' = theta + alpha * sum_i g_theta(s_i, a_i) Q~_i
/// with Q~ the Monte Carlo return of the modified reward. The analytic side
/// is the meta-gradient state built by the training code (MGL for one
/// iteration, IMGL for two); the numeric side is the central-difference
/// Jacobian of theta'(phi).
OracleReport frozen_meta_grad_check(const Env& env, const ShapingSpec& shaping, const Policy& policy,
                                    const WeightFn& wf, const FrozenCheckConfig& cfg, std::uint64_t seed);

/// The full oracle suite; every report must pass.
std::vector<OracleReport> run_oracle_suite(std::uint64_t seed = 7);

}  // namespace bipars
