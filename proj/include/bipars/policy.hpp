#pragma once

#include "bipars/envs.hpp"
#include "bipars/mlp.hpp"
#include "bipars/rng.hpp"

#include <vector>

namespace bipars {

struct PolicySpec {
  std::vector<Index> hidden{8, 8};
  Activation activation = Activation::relu;
  double init_log_std = 0.0;
  /// Output layer drawn from U[-s, s] so the initial policy is near uniform
  /// (discrete) or near zero-mean (continuous).
  double output_init_scale = 0.01;
};

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

/// Log-density of a batch under the current parameters, with the pieces
/// needed for every gradient the learners take.
struct PolicyEval {
  ForwardTape tape;
  Vec log_prob;
  /// d log pi / d net-output, one column per sample.
  Mat dlogp_dy;
  /// d log pi / d log_std (continuous only; action_dim x batch).
  Mat dlogp_dlogstd;
  /// Categorical probabilities or Gaussian means, one column per sample.
  Mat head;
};

/// Categorical-softmax or diagonal-Gaussian policy over an MLP.
///
/// Input is the observation, or observation ⧺ z-vector in hyper mode
/// (z_dim > 0). Parameters are the network's followed by log_std for
/// continuous actions; log_std is state independent and kept inside
/// [kLogStdMin, kLogStdMax].
///
/// Discrete actions are length-1 vectors holding the index. Sampling is
/// expressed through explicit noise (one uniform for categorical inverse-CDF,
/// one standard normal per dimension for Gaussian) so rollouts can be
/// replayed with common random numbers.
class Policy {
 public:
  Policy() = default;
  Policy(Index obs_dim, Index z_dim, ActionSpace space, PolicySpec spec = {});

  void init(Rng& rng);

  bool discrete() const { return space_.discrete(); }
  bool hyper_mode() const { return z_dim_ > 0; }
  Index obs_dim() const { return obs_dim_; }
  Index z_dim() const { return z_dim_; }
  Index input_dim() const { return obs_dim_ + z_dim_; }
  Index action_dim() const { return discrete() ? 1 : space_.size; }
  const ActionSpace& action_space() const { return space_; }
  const PolicySpec& spec() const { return spec_; }

  const MlpNet& net() const { return net_; }
  const Vec& log_std() const { return log_std_; }

  Index num_params() const { return layout_->size(); }
  const LayoutPtr& layout() const { return layout_; }
  ParamVector params() const;
  void set_params(const ParamVector& p);
  void set_params(const Vec& data);

  /// Builds the network input; `z` must be given exactly when in hyper mode.
  Vec make_input(const Vec& obs, const Vec* z = nullptr) const;

  Vec draw_noise(Rng& rng) const;

  struct Sample {
    Vec action;
    double log_prob = 0.0;
  };
  Sample act(const Vec& input, const Vec& noise) const;
  Sample sample(const Vec& input, Rng& rng) const { return act(input, draw_noise(rng)); }

  /// Inputs are input_dim x B, actions action_dim x B.
  PolicyEval evaluate(const Mat& inputs, const Mat& actions) const;
  Vec log_prob_batch(const Mat& inputs, const Mat& actions) const { return evaluate(inputs, actions).log_prob; }

  /// sum_j w_j grad_theta log pi(a_j | x_j)
  ParamVector weighted_grad(const PolicyEval& ev, const Vec& w) const;
  /// Column j holds grad_theta log pi(a_j | x_j).
  Mat per_sample_grads(const PolicyEval& ev) const;
  /// Column j holds grad_x log pi(a_j | x_j) over the whole input.
  Mat input_grads(const PolicyEval& ev) const;
  /// The z rows of input_grads (hyper mode only).
  Mat z_grads(const PolicyEval& ev) const;

  /// sum_j w_j (Hessian_theta log pi(a_j | x_j)) d
  ParamVector weighted_hvp(const Mat& inputs, const Mat& actions, const Vec& w, const ParamVector& d,
                           const HvpOptions& opts = {}) const;

  /// Action probabilities (discrete) for one input.
  Vec probs(const Vec& input) const;
  /// Mean action (continuous) for one input.
  Vec mean(const Vec& input) const;

  std::uint64_t fingerprint() const;

 private:
  void build_layout();
  ParamVector weighted_hvp_reverse(const Mat& inputs, const Mat& actions, const Vec& w, const ParamVector& d) const;

  Index obs_dim_ = 0;
  Index z_dim_ = 0;
  ActionSpace space_;
  PolicySpec spec_;
  MlpNet net_;
  Vec log_std_;
  LayoutPtr layout_ = std::make_shared<ParamLayout>();
};

/// Numerically stable softmax of each column.
Mat softmax_columns(const Mat& logits);

}  // namespace bipars
