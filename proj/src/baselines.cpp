#include "bipars/baselines.hpp"

namespace bipars {

PotentialNet::PotentialNet(Index input_dim, PotentialSpec spec) : spec_(std::move(spec)) {
  std::vector<Index> sizes{input_dim};
  std::vector<Activation> acts;
  for (Index h : spec_.hidden) {
    sizes.push_back(h);
    acts.push_back(spec_.activation);
  }
  sizes.push_back(1);
  acts.push_back(Activation::identity);
  net_ = MlpNet(sizes, acts);
  opt_ = Optimizer(net_.num_params(), {OptimizerKind::adam, spec_.lr, 0.9, 0.999, 1e-8, spec_.clip_norm});
}

void PotentialNet::init(Rng& rng) {
  net_.init_fan_in(rng);
  opt_.reset();
}

double PotentialNet::value(const Vec& x) const { return net_.predict(x)[0]; }

double PotentialNet::shaping(const Vec& x, const Vec* x_next, double gamma) const {
  const double next = x_next ? value(*x_next) : 0.0;
  return gamma * next - value(x);
}

DpbaStep PotentialNet::step(const Vec& x, const Vec* x_next, double f_val, double gamma) {
  const double next = x_next ? value(*x_next) : 0.0;
  const ForwardTape tape = net_.forward(x);
  const double phi = tape.output()(0, 0);
  DpbaStep out;
  out.shaping = gamma * next - phi;
  const double target = -f_val + gamma * next;
  out.td_error = phi - target;
  // loss 0.5 * (Phi(s, a) - target)^2 with the target held fixed
  const ParamVector g = net_.grad_params(tape, Mat::Constant(1, 1, out.td_error));
  Vec p = net_.params().data();
  opt_.descend(p, g.data());
  net_.set_params(p);
  return out;
}

double single_weight_upper_grad(MetaMethod method, const Batch& upper, const Vec& adv, const Batch& lower,
                                const Policy& policy_new, const Policy& policy_old, const WeightFn& wf, double alpha,
                                double gamma, LossReduction reduction, const MetaGradState* state) {
  if (!wf.single()) throw ModeError("single_weight_upper_grad needs a single-weight function");
  const double raw = wf.net().predict(Vec(0))[0];
  const auto& clip = wf.spec().clip;
  const double dz = (clip && (raw < clip->first || raw > clip->second)) ? 0.0 : 1.0;
  switch (method) {
    case MetaMethod::em: {
      if (!policy_new.hyper_mode() || policy_new.z_dim() != 1) throw ModeError("single-weight EM needs a policy with one z input");
      const PolicyEval ev = policy_new.evaluate(current_inputs(upper, policy_new, wf), upper.actions());
      return dz * policy_new.z_grads(ev).row(0).dot(adv);
    }
    case MetaMethod::mgl: {
      if (!lower.complete()) throw IncompleteTrajectoryError("single-weight MGL needs complete episodes");
      const Vec u = upper_policy_direction(upper, adv, policy_new, wf).data();
      const Mat G = lower_policy_grads(lower, policy_old, wf);
      const Vec proj = G.transpose() * u;
      double total = 0.0;
      double carry = 0.0;
      for (Index t = lower.size() - 1; t >= 0; --t) {
        const Transition& tr = lower.steps[static_cast<std::size_t>(t)];
        if (tr.done) carry = 0.0;
        carry = tr.f_val * dz + gamma * carry;
        total += proj[t] * carry;
      }
      return meta_step_scale(alpha, lower.size(), reduction) * total;
    }
    case MetaMethod::imgl: {
      if (!state || state->cols() != 1) throw ModeError("single-weight IMGL needs an n x 1 meta-gradient state");
      const Vec u = upper_policy_direction(upper, adv, policy_new, wf).data();
      return state->apply_transpose(u)[0];
    }
  }
  return 0.0;
}

}  // namespace bipars
