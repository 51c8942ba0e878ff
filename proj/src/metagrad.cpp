#include "bipars/metagrad.hpp"

namespace bipars {

MetaMethod parse_meta_method(std::string_view name) {
  if (name == "em") return MetaMethod::em;
  if (name == "mgl") return MetaMethod::mgl;
  if (name == "imgl") return MetaMethod::imgl;
  throw std::invalid_argument("unknown meta-gradient method: " + std::string(name));
}

HessianMode parse_hessian_mode(std::string_view name) {
  if (name == "exact") return HessianMode::exact;
  if (name == "opg") return HessianMode::opg;
  if (name == "none") return HessianMode::none;
  throw std::invalid_argument("unknown hessian mode: " + std::string(name));
}

std::string_view to_string(MetaMethod m) {
  switch (m) {
    case MetaMethod::em: return "em";
    case MetaMethod::mgl: return "mgl";
    case MetaMethod::imgl: return "imgl";
  }
  return "?";
}

std::string_view to_string(HessianMode m) {
  switch (m) {
    case HessianMode::exact: return "exact";
    case HessianMode::opg: return "opg";
    case HessianMode::none: return "none";
  }
  return "?";
}

double meta_step_scale(double alpha, Index n, LossReduction reduction) {
  if (reduction == LossReduction::sum || n == 0) return alpha;
  return alpha / static_cast<double>(n);
}

Mat hyper_inputs(const Mat& obs, const Policy& policy, const WeightFn& wf) {
  if (!policy.hyper_mode()) throw ModeError("hyper inputs need a hyper-mode policy");
  if (policy.z_dim() != wf.z_dim()) throw ShapeError("policy z input does not match the weight function");
  Mat x(policy.input_dim(), obs.cols());
  x.topRows(policy.obs_dim()) = obs;
  for (Index j = 0; j < obs.cols(); ++j) x.col(j).tail(policy.z_dim()) = wf.z_vector(obs.col(j));
  return x;
}

Mat current_inputs(const Batch& batch, const Policy& policy, const WeightFn& wf) {
  if (!policy.hyper_mode()) return batch.inputs();
  return hyper_inputs(batch.observations(), policy, wf);
}

ParamVector upper_policy_direction(const Mat& inputs, const Mat& actions, const Vec& adv, const Policy& policy) {
  if (adv.size() != inputs.cols()) throw ShapeError("upper advantage length mismatch");
  return policy.weighted_grad(policy.evaluate(inputs, actions), adv);
}

ParamVector upper_policy_direction(const Batch& upper, const Vec& adv, const Policy& policy, const WeightFn& wf) {
  return upper_policy_direction(current_inputs(upper, policy, wf), upper.actions(), adv, policy);
}

ParamVector em_upper_grad(const Mat& obs, const Mat& actions, const Vec& adv, const Policy& policy, const WeightFn& wf) {
  if (!policy.hyper_mode()) throw ModeError("explicit mapping needs a hyper-mode policy");
  if (adv.size() != obs.cols()) throw ShapeError("upper advantage length mismatch");
  const Index B = obs.cols();
  const Index K = wf.z_dim();
  const PolicyEval ev = policy.evaluate(hyper_inputs(obs, policy, wf), actions);
  const Mat gz = policy.z_grads(ev);
  Mat x(wf.input_dim(), B * K);
  Vec w(B * K);
  for (Index j = 0; j < B; ++j) {
    x.middleCols(j * K, K) = wf.z_vector_inputs(obs.col(j));
    w.segment(j * K, K) = gz.col(j) * adv[j];
  }
  return wf.weighted_grad(x, w);
}

ParamVector em_upper_grad(const Batch& upper, const Vec& adv, const Policy& policy, const WeightFn& wf) {
  if (!policy.hyper_mode()) throw ModeError("explicit mapping needs a hyper-mode policy");
  return em_upper_grad(upper.observations(), upper.actions(), adv, policy, wf);
}

Mat lower_policy_grads(const Batch& lower, const Policy& policy, const WeightFn& wf) {
  const PolicyEval ev = policy.evaluate(current_inputs(lower, policy, wf), lower.actions());
  return policy.per_sample_grads(ev);
}

Mat shaping_credit(const Batch& lower, const WeightFn& wf, double gamma) {
  if (lower.empty()) return Mat(wf.num_params(), 0);
  if (!lower.complete()) throw IncompleteTrajectoryError("shaping credit needs complete episodes in the lower batch");
  Mat C = wf.per_sample_grads(lower.weight_inputs());
  Vec carry = Vec::Zero(C.rows());
  for (Index t = lower.size() - 1; t >= 0; --t) {
    const Transition& tr = lower.steps[static_cast<std::size_t>(t)];
    if (tr.done) carry.setZero();
    carry = tr.f_val * C.col(t) + gamma * carry;
    C.col(t) = carry;
  }
  return C;
}

ParamVector mgl_upper_grad(const Batch& upper, const Vec& adv, const Batch& lower, const Policy& policy_new,
                           const Policy& policy_old, const WeightFn& wf, double alpha, double gamma,
                           LossReduction reduction) {
  const Vec u = upper_policy_direction(upper, adv, policy_new, wf).data();
  const Mat G = lower_policy_grads(lower, policy_old, wf);
  const Mat C = shaping_credit(lower, wf, gamma);
  const Vec proj = G.transpose() * u;
  Vec out = C * proj;
  out *= meta_step_scale(alpha, lower.size(), reduction);
  return ParamVector(wf.params().layout(), std::move(out));
}

// ---------------------------------------------------------------------------

MetaGradState::MetaGradState(MetaMethod method, Index n, Index m, HessianMode hessian, HvpOptions hvp)
    : method_(method), hessian_(hessian), hvp_(hvp), n_(n), m_(m) {
  if (method_ == MetaMethod::em) return;
  if (method_ == MetaMethod::imgl) {
    const Index budget = hessian_ == HessianMode::exact ? kDenseExactBudget : kDenseBudget;
    if (n_ * m_ > budget)
      throw ConfigError("meta-gradient matrix needs " + std::to_string(n_ * m_) + " entries, over the budget of " +
                        std::to_string(budget) + "; use --hessian none or smaller networks");
    dense_ = true;
    h_ = DenseMatrix::Zero(n_, m_);
  } else {
    U_.resize(n_, 0);
    V_.resize(m_, 0);
  }
}

void MetaGradState::reset() {
  if (dense_) h_.setZero();
  U_.resize(n_, 0);
  V_.resize(m_, 0);
}

void MetaGradState::add_outer(const Mat& G, const Mat& C, double scale) {
  if (method_ == MetaMethod::em) throw ModeError("explicit mapping keeps no meta-gradient matrix");
  if (G.rows() != n_ || C.rows() != m_ || G.cols() != C.cols()) throw ShapeError("meta-gradient outer product shapes");
  if (dense_) {
    h_.noalias() += scale * G * C.transpose();
    return;
  }
  const Index k = U_.cols();
  U_.conservativeResize(n_, k + G.cols());
  V_.conservativeResize(m_, k + C.cols());
  U_.rightCols(G.cols()) = scale * G;
  V_.rightCols(C.cols()) = C;
}

void MetaGradState::densify(Index budget) {
  if (dense_) return;
  if (n_ * m_ > budget) throw ConfigError("meta-gradient matrix too large to store densely");
  h_ = materialize();
  U_.resize(n_, 0);
  V_.resize(m_, 0);
  dense_ = true;
}

DenseMatrix MetaGradState::materialize() const {
  if (dense_) return h_;
  DenseMatrix h = DenseMatrix::Zero(n_, m_);
  if (U_.cols() > 0) h.noalias() = U_ * V_.transpose();
  return h;
}

Vec MetaGradState::apply_transpose(const Vec& u) const {
  if (u.size() != n_) throw ShapeError("meta-gradient apply: direction length mismatch");
  if (dense_) return h_.transpose() * u;
  if (U_.cols() == 0) return Vec::Zero(m_);
  const Vec proj = U_.transpose() * u;
  return V_ * proj;
}

void imgl_step(MetaGradState& state, const Batch& lower, const Policy& policy_old, const WeightFn& wf, double scale,
               const Vec& q_tilde, double gamma) {
  if (state.method() != MetaMethod::imgl) throw ModeError("imgl_step needs an incremental meta-gradient state");
  if (q_tilde.size() != lower.size()) throw ShapeError("imgl_step: return estimate length mismatch");
  if (state.rows() != policy_old.num_params() || state.cols() != wf.num_params())
    throw ShapeError("imgl_step: state does not match the networks");
  const Mat inputs = current_inputs(lower, policy_old, wf);
  const Mat actions = lower.actions();
  const Mat G = policy_old.per_sample_grads(policy_old.evaluate(inputs, actions));
  const Mat C = shaping_credit(lower, wf, gamma);

  DenseMatrix& h = state.dense_h();
  if (state.hessian() != HessianMode::none && h.cols() > 0 && !h.isZero(0.0)) {
    DenseMatrix second(h.rows(), h.cols());
    if (state.hessian() == HessianMode::exact) {
      for (Index k = 0; k < h.cols(); ++k) {
        const ParamVector d(policy_old.layout(), Vec(h.col(k)));
        second.col(k) = policy_old.weighted_hvp(inputs, actions, q_tilde, d, state.hvp_options()).data();
      }
    } else {
      const OuterProductOperator opg(G, -q_tilde);
      second = opg.apply_columns(Mat(h));
    }
    h += scale * second;
  }
  state.add_outer(G, C, scale);
}

ParamVector imgl_upper_grad(const MetaGradState& state, const Batch& upper, const Vec& adv, const Policy& policy_new,
                            const WeightFn& wf) {
  const Vec u = upper_policy_direction(upper, adv, policy_new, wf).data();
  return ParamVector(wf.params().layout(), state.apply_transpose(u));
}

}  // namespace bipars
