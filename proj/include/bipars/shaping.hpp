#pragma once

#include "bipars/envs.hpp"
#include "bipars/mlp.hpp"
#include "bipars/rng.hpp"

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace bipars {

struct UnknownShapingError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// f(s, a, s') where `a` is the action as applied by the environment
/// (force in newtons for cart-pole, clipped torques for torque-line).
using ShapingFn = std::function<double(const Vec& s, const Vec& applied, const Vec& next_s)>;

struct ShapingSpec {
  std::string id;
  std::string description;
  double task_weight = 1.0;
  ShapingFn f;

  double operator()(const Vec& s, const Vec& applied, const Vec& next_s) const { return f(s, applied, next_s); }
};

/// r + z * f
inline double modified_reward(double r, double z, double f_val) { return r + z * f_val; }

/// Ids: cartpole-beneficial, cartpole-harmful, cartpole-random,
/// cartpole-half, torque-constraint, none.
/// `table_seed` keys the cartpole-random table, `task_weight` scales
/// torque-constraint.
ShapingSpec builtin_shaping(const std::string& id, std::uint64_t table_seed = 0, double task_weight = 20.0);

std::vector<std::string> builtin_shaping_ids();

/// Cell index of the 10^4 state grid used by cartpole-random.
Index cartpole_random_cell(const Vec& s);

/// s ⧺ one-hot(a) for discrete spaces, s ⧺ a for continuous ones.
Vec encode_state_action(const ActionSpace& space, const Vec& s, const Vec& a);

inline constexpr double kClipInitMargin = 0.01;

struct WeightFnSpec {
  std::vector<Index> hidden{16, 8};
  Activation activation = Activation::tanh;
  std::optional<std::pair<double, double>> clip;
  /// A single scalar weight instead of a state-action network.
  bool single = false;
};

/// z_phi(s, a). Network input is s ⧺ one-hot(a) for discrete actions and
/// s ⧺ a for continuous actions. The single-weight variant is a network with
/// no inputs, so z is its output bias.
///
/// With a clip range, z is clamped and the gradient vanishes wherever the
/// raw output lies outside the range.
class WeightFn {
 public:
  WeightFn() = default;
  WeightFn(Index state_dim, ActionSpace space, WeightFnSpec spec = {});

  /// Hidden layers U[-0.125, 0.125], output layer U[-1e-3, 1e-3], then the
  /// output bias is raised by initial_weight(). The single weight starts at
  /// exactly initial_weight().
  void init(Rng& rng);
  /// 1, or kClipInitMargin below the upper clip bound when that bound is
  /// within the margin of 1 (a clamped start has no gradient).
  double initial_weight() const;

  bool single() const { return spec_.single; }
  const WeightFnSpec& spec() const { return spec_; }
  Index state_dim() const { return state_dim_; }
  const ActionSpace& action_space() const { return space_; }
  Index input_dim() const { return net_.input_size(); }

  const MlpNet& net() const { return net_; }
  Index num_params() const { return net_.num_params(); }
  const ParamVector& params() const { return net_.params(); }
  void set_params(const ParamVector& p) { net_.set_params(p); }
  void set_params(const Vec& p) { net_.set_params(p); }

  /// Network input for (s, a); `a` is the policy-space action.
  Vec encode(const Vec& s, const Vec& a) const;

  double value(const Vec& s, const Vec& a) const { return value_encoded(encode(s, a)); }
  double value_encoded(const Vec& x) const;
  /// z for each column of encoded inputs.
  Vec values(const Mat& x) const;

  /// (z, dz/dphi); zero gradient inside the clamped region.
  std::pair<double, ParamVector> weight_and_grad(const Vec& s, const Vec& a) const;
  /// Column j holds dz/dphi at encoded input j (num_params x batch).
  Mat per_sample_grads(const Mat& x) const;
  /// sum_j w_j dz/dphi at encoded input j.
  ParamVector weighted_grad(const Mat& x, const Vec& w) const;

  /// Reference actions that define the z-vector fed to hyper-mode policies:
  /// every action for discrete spaces, the two extremes for continuous ones.
  /// A single weight has one z regardless of the action.
  const std::vector<Vec>& reference_actions() const { return refs_; }
  Index z_dim() const { return static_cast<Index>(refs_.size()); }
  Vec z_vector(const Vec& s) const;
  /// Rows of encoded inputs for the z-vector of `s` (input_dim x z_dim).
  Mat z_vector_inputs(const Vec& s) const;

 private:
  double clamp(double z) const;
  bool clamped(double raw) const;

  Index state_dim_ = 0;
  ActionSpace space_;
  WeightFnSpec spec_;
  MlpNet net_;
  std::vector<Vec> refs_;
};

}  // namespace bipars
