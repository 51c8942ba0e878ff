#pragma once

#include "bipars/policy.hpp"
#include "bipars/ppo.hpp"
#include "bipars/shaping.hpp"

#include <string_view>

namespace bipars {

struct ModeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class MetaMethod { em, mgl, imgl };
enum class HessianMode { exact, opg, none };

MetaMethod parse_meta_method(std::string_view name);
HessianMode parse_hessian_mode(std::string_view name);
std::string_view to_string(MetaMethod m);
std::string_view to_string(HessianMode m);

/// Largest dense h (entries) allowed with the exact second-order term, and
/// for every other dense use.
inline constexpr Index kDenseExactBudget = 1'000'000;
inline constexpr Index kDenseBudget = 10'000'000;

/// Step scale of the one-step policy update whose derivative is taken:
/// alpha / N for mean-reduced losses, alpha for summed ones.
double meta_step_scale(double alpha, Index n, LossReduction reduction);

/// Policy inputs rebuilt with the current weight function (hyper mode), or
/// the stored inputs otherwise.
Mat current_inputs(const Batch& batch, const Policy& policy, const WeightFn& wf);

/// Hyper-mode inputs obs ⧺ z_phi(obs) for each column of `obs`.
Mat hyper_inputs(const Mat& obs, const Policy& policy, const WeightFn& wf);

/// Matrix forms of the two upper-level pieces (columns are samples).
ParamVector upper_policy_direction(const Mat& inputs, const Mat& actions, const Vec& adv, const Policy& policy);
ParamVector em_upper_grad(const Mat& obs, const Mat& actions, const Vec& adv, const Policy& policy, const WeightFn& wf);

/// sum_j grad_theta log pi(a_j | s_j) * adv_j, under `policy`.
ParamVector upper_policy_direction(const Batch& upper, const Vec& adv, const Policy& policy, const WeightFn& wf);

/// Explicit mapping: sum_j adv_j * g_z(s_j, a_j) . dz_phi(s_j)/dphi, where
/// z_phi(s) is the z-vector fed to the policy and g_z the policy's input
/// gradient restricted to it.
ParamVector em_upper_grad(const Batch& upper, const Vec& adv, const Policy& policy, const WeightFn& wf);

/// Column i holds grad_theta log pi(a_i | s_i) under `policy` (n x N).
Mat lower_policy_grads(const Batch& lower, const Policy& policy, const WeightFn& wf);

/// Column i holds c_i = sum_{t >= i} gamma^(t-i) f_t dz(s_t, a_t)/dphi over
/// the rest of transition i's episode (m x N). Every episode must be
/// complete.
Mat shaping_credit(const Batch& lower, const WeightFn& wf, double gamma);

/// Meta-gradient learning:
///   scale * sum_i (u . g_i) c_i,  u = upper_policy_direction(upper, adv, policy_new)
/// with g_i under policy_old. O(N (n + m)); h is never formed.
ParamVector mgl_upper_grad(const Batch& upper, const Vec& adv, const Batch& lower, const Policy& policy_new,
                           const Policy& policy_old, const WeightFn& wf, double alpha, double gamma,
                           LossReduction reduction = LossReduction::mean);

/// d theta / d phi (n x m), either as a dense matrix or as the low-rank
/// product U V^T of accumulated column blocks.
class MetaGradState {
 public:
  MetaGradState() = default;
  MetaGradState(MetaMethod method, Index n, Index m, HessianMode hessian = HessianMode::exact, HvpOptions hvp = {});

  MetaMethod method() const { return method_; }
  HessianMode hessian() const { return hessian_; }
  Index rows() const { return n_; }
  Index cols() const { return m_; }
  bool dense() const { return dense_; }
  Index rank() const { return U_.cols(); }

  void reset();
  /// h += scale * G C^T
  void add_outer(const Mat& G, const Mat& C, double scale);
  /// Switches to dense storage; fails when n*m exceeds `budget`.
  void densify(Index budget = kDenseBudget);
  DenseMatrix materialize() const;
  /// h^T u
  Vec apply_transpose(const Vec& u) const;

  const DenseMatrix& dense_h() const { return h_; }
  DenseMatrix& dense_h() { return h_; }
  const HvpOptions& hvp_options() const { return hvp_; }

 private:
  MetaMethod method_ = MetaMethod::mgl;
  HessianMode hessian_ = HessianMode::exact;
  HvpOptions hvp_;
  Index n_ = 0, m_ = 0;
  bool dense_ = false;
  DenseMatrix h_;
  Mat U_, V_;
};

/// Incremental update at the pre-update policy:
///   h <- h + scale * sum_i q_i H_i h + scale * sum_i g_i c_i^T
/// H_i is the Hessian of log pi(a_i | s_i); with HessianMode::opg it is
/// replaced by -g_i g_i^T and with HessianMode::none the term is dropped.
void imgl_step(MetaGradState& state, const Batch& lower, const Policy& policy_old, const WeightFn& wf, double scale,
               const Vec& q_tilde, double gamma);

/// u^T h with u = upper_policy_direction(upper, adv, policy_new).
ParamVector imgl_upper_grad(const MetaGradState& state, const Batch& upper, const Vec& adv, const Policy& policy_new,
                            const WeightFn& wf);

}  // namespace bipars
