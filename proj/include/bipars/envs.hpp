#pragma once

#include "bipars/rng.hpp"
#include "bipars/tensor.hpp"

#include <memory>
#include <string>
#include <vector>

namespace bipars {

struct EpisodeFinishedError : std::logic_error {
  using std::logic_error::logic_error;
};

enum class ActionKind { discrete, continuous };

/// Discrete: `size` actions, encoded as a length-1 vector holding the index.
/// Continuous: a `size`-dimensional vector, clipped by the env to [low, high].
struct ActionSpace {
  ActionKind kind = ActionKind::discrete;
  Index size = 2;
  double low = -1.0;
  double high = 1.0;

  bool discrete() const { return kind == ActionKind::discrete; }
};

struct StepResult {
  Vec next_state;
  double true_reward = 0.0;
  bool done = false;
  /// Episode ended by failure (no value bootstrap).
  bool failed = false;
  /// Episode ended by the time limit (value bootstrap from next_state).
  bool truncated = false;
  int steps_elapsed = 0;
  /// The physical action after clipping/decoding (force in newtons for
  /// cartpole, clipped torques for torque-line).
  Vec applied_action;
};

class Env {
 public:
  virtual ~Env() = default;

  virtual std::string id() const = 0;
  virtual Index state_dim() const = 0;
  virtual ActionSpace action_space() const = 0;
  virtual int max_steps() const = 0;

  virtual Vec reset(Rng& rng) = 0;
  virtual StepResult step(const Vec& action, Rng& rng) = 0;
  virtual std::unique_ptr<Env> clone() const = 0;

  const Vec& state() const { return state_; }
  bool done() const { return done_; }
  int steps() const { return steps_; }

 protected:
  void require_live() const;

  Vec state_;
  bool done_ = true;
  int steps_ = 0;
};

// ---------------------------------------------------------------------------
// Cartpole

struct CartpoleParams {
  double gravity = 9.8;
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double half_length = 0.5;
  double force_mag = 10.0;
  double dt = 0.02;
  double x_threshold = 2.4;
  double theta_threshold = 12.0 * 3.14159265358979323846 / 180.0;
  double reset_range = 0.05;
  int max_steps = 200;
};

struct CartpoleState {
  double cart_position = 0.0;
  double cart_velocity = 0.0;
  double pole_angle = 0.0;
  double pole_angular_velocity = 0.0;

  Vec to_vec() const;
  static CartpoleState from_vec(const Vec& v);
};

/// One semi-implicit Euler step of the classic cart-pole equations of motion
/// (velocities are updated first and the new velocities move the positions).
CartpoleState cartpole_dynamics(const CartpoleState& s, double force, const CartpoleParams& p = {});

bool cartpole_out_of_bounds(const CartpoleState& s, const CartpoleParams& p = {});

/// Sparse-reward cart-pole: reward -1 on the failing step, 0 otherwise.
/// Discrete actions {0: -F, 1: +F}; continuous action a in [-1, 1] applies
/// force F * clip(a).
class CartpoleEnv final : public Env {
 public:
  explicit CartpoleEnv(bool continuous, CartpoleParams params = {});

  std::string id() const override { return continuous_ ? "cartpole-continuous" : "cartpole-discrete"; }
  Index state_dim() const override { return 4; }
  ActionSpace action_space() const override;
  int max_steps() const override { return params_.max_steps; }
  Vec reset(Rng& rng) override;
  StepResult step(const Vec& action, Rng& rng) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<CartpoleEnv>(*this); }

  /// Sets the state directly (tests and grid exports).
  void set_state(const CartpoleState& s);
  const CartpoleParams& params() const { return params_; }
  double force_for(const Vec& action) const;

 private:
  bool continuous_;
  CartpoleParams params_;
};

// ---------------------------------------------------------------------------
// Torque line

/// L independent unit point masses on a line, one per joint. Each joint's
/// velocity follows a first-order lag toward the applied torque:
///   v_i' = beta * v_i + (1 - beta) * clip(a_i, -1, 1)
/// and the true reward is the forward progress of the step, mean_i v_i'.
/// Starting from rest under a_i = 1 every step, v_t = 1 - beta^t and the
/// per-step reward approaches 1. Episodes end only by the time limit.
class TorqueLineEnv final : public Env {
 public:
  explicit TorqueLineEnv(Index joints = 3, double beta = 0.9, int max_steps = 200);

  std::string id() const override { return "torque-line"; }
  Index state_dim() const override { return joints_; }
  ActionSpace action_space() const override;
  int max_steps() const override { return max_steps_; }
  Vec reset(Rng& rng) override;
  StepResult step(const Vec& action, Rng& rng) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<TorqueLineEnv>(*this); }

  void set_state(const Vec& velocities);
  double beta() const { return beta_; }

  /// Reward of step t (1-based) under maximal torque from velocity v0.
  static double max_action_reward(int t, double beta, double v0 = 0.0);

 private:
  Index joints_;
  double beta_;
  int max_steps_;
};

// ---------------------------------------------------------------------------
// Tabular MDP

struct TabularMdp {
  int num_states = 0;
  int num_actions = 0;
  /// P[(s * num_actions + a) * num_states + s2]
  std::vector<double> P;
  /// r(s, a), num_states x num_actions
  Mat r;
  Vec p0;
  double gamma = 0.9;
  int horizon = 100;

  double prob(int s, int a, int s2) const { return P[(static_cast<std::size_t>(s) * num_actions + a) * num_states + s2]; }
  double& prob(int s, int a, int s2) { return P[(static_cast<std::size_t>(s) * num_actions + a) * num_states + s2]; }

  /// Checks shapes, bounds, and normalization. Rows within 1e-9 of 1 are
  /// renormalized exactly; anything further off is rejected.
  void validate();

  static TabularMdp from_json_text(const std::string& text);
  static TabularMdp load(const std::string& path);
  std::string to_json_text() const;

  /// Random MDP with Dirichlet-like rows, for tests.
  static TabularMdp random(int states, int actions, double gamma, Rng& rng, int horizon = 100);
};

struct TabularStep {
  int next_state = 0;
  double reward = 0.0;
};

/// Samples s' ~ P(s, a, .) by inverse CDF and returns r(s, a).
TabularStep tabular_step(const TabularMdp& mdp, int state, int action, Rng& rng);

/// Observations are one-hot state vectors; the episode ends at the horizon.
class TabularEnv final : public Env {
 public:
  explicit TabularEnv(TabularMdp mdp, std::string source = "inline");

  std::string id() const override { return "tabular:" + source_; }
  Index state_dim() const override { return mdp_.num_states; }
  ActionSpace action_space() const override { return {ActionKind::discrete, mdp_.num_actions, 0.0, 0.0}; }
  int max_steps() const override { return mdp_.horizon; }
  Vec reset(Rng& rng) override;
  StepResult step(const Vec& action, Rng& rng) override;
  std::unique_ptr<Env> clone() const override { return std::make_unique<TabularEnv>(*this); }

  const TabularMdp& mdp() const { return mdp_; }
  int state_index() const { return index_; }

 private:
  TabularMdp mdp_;
  std::string source_;
  int index_ = 0;
};

/// `cartpole-discrete`, `cartpole-continuous`, `torque-line`, `tabular:<file>`.
std::unique_ptr<Env> make_env(const std::string& id, Index torque_joints = 3);

}  // namespace bipars
