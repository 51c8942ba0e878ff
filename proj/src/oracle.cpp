#include "bipars/oracle.hpp"

#include "bipars/finite_diff.hpp"

#include <json.hpp>

#include <cmath>

namespace bipars {

namespace {

Mat policy_transition(const TabularMdp& mdp, const Mat& probs) {
  const int S = mdp.num_states;
  Mat P = Mat::Zero(S, S);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < mdp.num_actions; ++a)
      for (int s2 = 0; s2 < S; ++s2) P(s, s2) += probs(s, a) * mdp.prob(s, a, s2);
  return P;
}

void check_probs(const TabularMdp& mdp, const Mat& probs) {
  if (probs.rows() != mdp.num_states || probs.cols() != mdp.num_actions)
    throw ShapeError("policy probabilities must be num_states x num_actions");
  for (Index s = 0; s < probs.rows(); ++s) {
    if ((probs.row(s).array() < 0.0).any() || std::abs(probs.row(s).sum() - 1.0) > 1e-9)
      throw std::invalid_argument("policy probabilities must be non-negative rows summing to 1");
  }
  if (!(mdp.gamma >= 0.0 && mdp.gamma < 1.0)) throw std::invalid_argument("exact evaluation needs gamma < 1");
}

Vec one_hot(int i, int n) {
  Vec v = Vec::Zero(n);
  v[i] = 1.0;
  return v;
}

// ---------------------------------------------------------------------------
// Rollouts with replayable randomness

Vec policy_input(const Policy& policy, const WeightFn& wf, const Vec& obs) {
  if (!policy.hyper_mode()) return obs;
  const Vec z = wf.z_vector(obs);
  return policy.make_input(obs, &z);
}

Batch replay_rollouts(const Env& proto, const ShapingSpec& shaping, const Policy& policy, const WeightFn& wf,
                      int episodes, std::uint64_t seed, const std::string& tag) {
  Batch b;
  for (int e = 0; e < episodes; ++e) {
    const std::string suffix = tag + "-" + std::to_string(e);
    Rng env_rng = make_stream(seed, "env-" + suffix);
    Rng noise_rng = make_stream(seed, "noise-" + suffix);
    auto env = proto.clone();
    Vec obs = env->reset(env_rng);
    for (;;) {
      Transition tr;
      tr.obs = obs;
      tr.input = policy_input(policy, wf, obs);
      const Policy::Sample smp = policy.act(tr.input, policy.draw_noise(noise_rng));
      tr.action = smp.action;
      tr.log_prob = smp.log_prob;
      tr.weight_input = wf.encode(obs, tr.action);
      const StepResult res = env->step(tr.action, env_rng);
      tr.applied = res.applied_action;
      tr.next_obs = res.next_state;
      tr.r_true = res.true_reward;
      tr.f_val = shaping(obs, tr.applied, tr.next_obs);
      tr.z_val = wf.value_encoded(tr.weight_input);
      tr.r_mod = modified_reward(tr.r_true, tr.z_val, tr.f_val);
      tr.done = res.done;
      tr.failed = res.failed;
      tr.truncated = res.truncated;
      b.steps.push_back(std::move(tr));
      if (res.done) break;
      obs = res.next_state;
    }
  }
  return b;
}

void rescore(Batch& b, const WeightFn& wf) {
  for (auto& tr : b.steps) {
    tr.z_val = wf.value_encoded(tr.weight_input);
    tr.r_mod = modified_reward(tr.r_true, tr.z_val, tr.f_val);
  }
}

bool same_discrete_actions(const Batch& a, const Batch& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.steps.size(); ++i)
    if (a.steps[i].action != b.steps[i].action) return false;
  return true;
}

/// theta + alpha * sum_i g_theta(s_i, a_i) Q~_i
Vec literal_update(const Policy& policy, const Batch& b, double alpha, double gamma) {
  const Vec q = mc_returns(b, gamma);
  const PolicyEval ev = policy.evaluate(b.inputs(), b.actions());
  return policy.params().data() + alpha * policy.weighted_grad(ev, q).data();
}

Vec flatten(const DenseMatrix& h) {
  Vec out(h.size());
  Index k = 0;
  for (Index j = 0; j < h.cols(); ++j)
    for (Index i = 0; i < h.rows(); ++i) out[k++] = h(i, j);
  return out;
}

}  // namespace

ExactPolicyEval exact_eval(const TabularMdp& mdp, const Mat& policy_probs) {
  check_probs(mdp, policy_probs);
  const int S = mdp.num_states;
  const Mat P = policy_transition(mdp, policy_probs);
  const Vec r_pi = (mdp.r.array() * policy_probs.array()).rowwise().sum();
  const Mat A = Mat::Identity(S, S) - mdp.gamma * P;
  const Eigen::FullPivLU<Mat> lu(A);
  ExactPolicyEval out;
  out.V = lu.solve(r_pi);
  out.rho = A.transpose().fullPivLu().solve(mdp.p0);
  out.Q.resize(S, mdp.num_actions);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < mdp.num_actions; ++a) {
      double next = 0.0;
      for (int s2 = 0; s2 < S; ++s2) next += mdp.prob(s, a, s2) * out.V[s2];
      out.Q(s, a) = mdp.r(s, a) + mdp.gamma * next;
    }
  return out;
}

double exact_J(const TabularMdp& mdp, const Mat& policy_probs) { return mdp.p0.dot(exact_eval(mdp, policy_probs).V); }

Mat hyper_policy_probs(const TabularMdp& mdp, const Policy& policy, const WeightFn& wf) {
  if (!policy.discrete() || policy.action_space().size != mdp.num_actions)
    throw ShapeError("policy action space does not match the MDP");
  Mat probs(mdp.num_states, mdp.num_actions);
  for (int s = 0; s < mdp.num_states; ++s)
    probs.row(s) = policy.probs(policy_input(policy, wf, one_hot(s, mdp.num_states))).transpose();
  return probs;
}

ParamVector exact_upper_grad(const TabularMdp& mdp, const Policy& policy, const WeightFn& wf) {
  if (!policy.hyper_mode()) throw ModeError("exact upper gradient needs a hyper-mode policy");
  const Mat probs = hyper_policy_probs(mdp, policy, wf);
  const ExactPolicyEval ev = exact_eval(mdp, probs);
  const int S = mdp.num_states;
  const int A = mdp.num_actions;
  Mat obs(S, S * A);
  Mat actions(1, S * A);
  Vec w(S * A);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) {
      const Index j = s * A + a;
      obs.col(j) = one_hot(s, S);
      actions(0, j) = a;
      w[j] = ev.rho[s] * probs(s, a) * ev.Q(s, a);
    }
  return em_upper_grad(obs, actions, w, policy, wf);
}

std::string OracleReport::to_json() const {
  nlohmann::json j;
  j["test_id"] = test_id;
  j["max_rel_error"] = max_rel_error;
  j["tolerance"] = tolerance;
  j["pass"] = pass;
  if (!excluded.empty()) j["excluded"] = excluded;
  if (!detail.empty()) j["detail"] = detail;
  return j.dump();
}

// ---------------------------------------------------------------------------

ToyControlEnv::ToyControlEnv(int horizon) : horizon_(horizon) {
  if (horizon < 1) throw std::invalid_argument("toy horizon must be positive");
}

Vec ToyControlEnv::reset(Rng& rng) {
  state_ = Vec::Constant(1, 2.0 * uniform01(rng) - 1.0);
  done_ = false;
  steps_ = 0;
  return state_;
}

StepResult ToyControlEnv::step(const Vec& action, Rng&) {
  require_live();
  if (action.size() != 1) throw ShapeError("toy control takes a 1-d action");
  StepResult res;
  res.applied_action = action;
  state_[0] = 0.9 * state_[0] + 0.1 * action[0];
  ++steps_;
  res.next_state = state_;
  res.true_reward = -state_[0] * state_[0];
  res.truncated = steps_ >= horizon_;
  res.done = res.truncated;
  res.steps_elapsed = steps_;
  done_ = res.done;
  return res;
}

ShapingSpec toy_shaping() {
  return {"toy", "-s * a", 1.0, [](const Vec& s, const Vec& a, const Vec&) { return -s[0] * a[0]; }};
}

OracleReport frozen_meta_grad_check(const Env& env, const ShapingSpec& shaping, const Policy& policy,
                                    const WeightFn& wf, const FrozenCheckConfig& cfg, std::uint64_t seed) {
  if (policy.hyper_mode()) throw ModeError("frozen meta-gradient check takes a plain policy");
  if (cfg.iterations != 1 && cfg.iterations != 2) throw std::invalid_argument("frozen check supports 1 or 2 iterations");
  const Index n = policy.num_params();
  const Index m = wf.num_params();
  const MetaMethod method = cfg.iterations == 1 ? MetaMethod::mgl : MetaMethod::imgl;

  // analytic side at the base phi
  const Batch b1 = replay_rollouts(env, shaping, policy, wf, cfg.episodes, seed, "first");
  MetaGradState state(method, n, m, cfg.hessian);
  Batch b2;
  if (method == MetaMethod::mgl) {
    state.add_outer(lower_policy_grads(b1, policy, wf), shaping_credit(b1, wf, cfg.gamma), cfg.alpha);
  } else {
    imgl_step(state, b1, policy, wf, cfg.alpha, mc_returns(b1, cfg.gamma), cfg.gamma);
    Policy p1 = policy;
    p1.set_params(literal_update(policy, b1, cfg.alpha, cfg.gamma));
    b2 = replay_rollouts(env, shaping, p1, wf, cfg.episodes, seed, "second");
    imgl_step(state, b2, p1, wf, cfg.alpha, mc_returns(b2, cfg.gamma), cfg.gamma);
  }
  const DenseMatrix h = state.materialize();

  // numeric side: central differences of theta'(phi) under replayed randomness
  OracleReport rep;
  rep.test_id = cfg.test_id;
  rep.tolerance = cfg.tolerance;
  WeightFn probe = wf;
  const Vec phi0 = wf.params().data();
  DenseMatrix numeric = DenseMatrix::Zero(n, m);
  std::vector<bool> keep(static_cast<std::size_t>(m), true);
  auto theta_final = [&](const Vec& phi, bool& flipped) {
    probe.set_params(phi);
    const Batch r1 = replay_rollouts(env, shaping, policy, probe, cfg.episodes, seed, "first");
    if (policy.discrete() && !same_discrete_actions(r1, b1)) flipped = true;
    Vec theta = literal_update(policy, r1, cfg.alpha, cfg.gamma);
    if (method == MetaMethod::imgl) {
      Policy p1 = policy;
      p1.set_params(theta);
      Batch r2 = b2;
      rescore(r2, probe);
      theta = literal_update(p1, r2, cfg.alpha, cfg.gamma);
    }
    return theta;
  };
  for (Index j = 0; j < m; ++j) {
    bool flipped = false;
    Vec phi = phi0;
    phi[j] = phi0[j] + cfg.fd_eps;
    const Vec tp = theta_final(phi, flipped);
    phi[j] = phi0[j] - cfg.fd_eps;
    const Vec tm = theta_final(phi, flipped);
    if (flipped) {
      keep[static_cast<std::size_t>(j)] = false;
      rep.excluded.push_back(j);
      continue;
    }
    numeric.col(j) = (tp - tm) / (2.0 * cfg.fd_eps);
  }

  DenseMatrix a_kept(n, m - static_cast<Index>(rep.excluded.size()));
  DenseMatrix n_kept(a_kept.rows(), a_kept.cols());
  for (Index j = 0, k = 0; j < m; ++j) {
    if (!keep[static_cast<std::size_t>(j)]) continue;
    a_kept.col(k) = h.col(j);
    n_kept.col(k) = numeric.col(j);
    ++k;
  }
  rep.max_rel_error = max_rel_error(flatten(a_kept), flatten(n_kept));
  rep.pass = std::isfinite(rep.max_rel_error) && rep.max_rel_error < cfg.tolerance;
  if (!rep.excluded.empty()) rep.detail = std::to_string(rep.excluded.size()) + " coordinate(s) excluded by action flips";
  return rep;
}

// ---------------------------------------------------------------------------
// Suite

namespace {

OracleReport make_report(std::string id, double err, double tol) {
  OracleReport r;
  r.test_id = std::move(id);
  r.max_rel_error = err;
  r.tolerance = tol;
  r.pass = std::isfinite(err) && err < tol;
  return r;
}

std::vector<OracleReport> mlp_checks(Rng& rng) {
  std::vector<OracleReport> out;
  MlpNet net({3, 5, 4, 2}, {Activation::tanh, Activation::tanh, Activation::identity});
  net.init_fan_in(rng);
  Mat x(3, 4);
  Mat seeds(2, 4);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = 2.0 * uniform01(rng) - 1.0;
  for (Index i = 0; i < seeds.size(); ++i) seeds.data()[i] = 2.0 * uniform01(rng) - 1.0;

  auto loss_at = [&](const Vec& p) {
    MlpNet probe = net;
    probe.set_params(p);
    return (seeds.array() * probe.predict_batch(x).array()).sum();
  };
  const ForwardTape tape = net.forward_batch(x);
  const Vec g = net.grad_params(tape, seeds).data();
  out.push_back(make_report("mlp-grad-params", max_rel_error(g, finite_diff_grad(loss_at, net.params().data(), 1e-6)),
                            1e-5));

  const Mat gx = net.grad_input(tape, seeds);
  Vec gx_num(gx.size());
  for (Index j = 0; j < x.cols(); ++j) {
    auto f = [&](const Vec& xj) {
      return seeds.col(j).dot(net.predict(xj));
    };
    gx_num.segment(j * x.rows(), x.rows()) = finite_diff_grad(f, Vec(x.col(j)), 1e-6);
  }
  out.push_back(make_report("mlp-grad-input", max_rel_error(gx.reshaped(), gx_num), 1e-5));

  // L = sum_j 0.5 |y_j|^2 exercises both the seed and curvature paths
  OutputLoss sq{[](const Mat& y) { return y; }, [](const Mat&, const Mat& ry) { return ry; }};
  ParamVector d = ParamVector::zeros_like(net.params());
  for (Index i = 0; i < d.size(); ++i) d[i] = 2.0 * uniform01(rng) - 1.0;
  const Vec hv = net.hvp(x, sq, d).data();
  auto grad_at = [&](const Vec& p) {
    MlpNet probe = net;
    probe.set_params(p);
    const ForwardTape t = probe.forward_batch(x);
    return probe.grad_params(t, t.output()).data();
  };
  const double eps = 1e-5;
  const Vec p0 = net.params().data();
  const Vec hv_num = (grad_at(p0 + eps * d.data()) - grad_at(p0 - eps * d.data())) / (2.0 * eps);
  out.push_back(make_report("mlp-hvp", max_rel_error(hv, hv_num), 1e-4));
  return out;
}

OracleReport policy_hvp_check(bool discrete, Rng& rng) {
  const ActionSpace space = discrete ? ActionSpace{ActionKind::discrete, 3} : ActionSpace{ActionKind::continuous, 2};
  PolicySpec spec;
  spec.hidden = {5};
  spec.activation = Activation::tanh;
  spec.output_init_scale = 1.0;
  spec.init_log_std = -0.3;
  Policy policy(3, 0, space, spec);
  policy.init(rng);
  const Index B = 6;
  Mat inputs(3, B);
  for (Index i = 0; i < inputs.size(); ++i) inputs.data()[i] = 2.0 * uniform01(rng) - 1.0;
  Mat actions(policy.action_dim(), B);
  for (Index j = 0; j < B; ++j) actions.col(j) = policy.sample(inputs.col(j), rng).action;
  Vec w(B);
  for (Index j = 0; j < B; ++j) w[j] = 2.0 * uniform01(rng) - 1.0;
  ParamVector d = ParamVector::zeros_like(policy.params());
  for (Index i = 0; i < d.size(); ++i) d[i] = 2.0 * uniform01(rng) - 1.0;

  const Vec hv = policy.weighted_hvp(inputs, actions, w, d).data();
  auto grad_at = [&](const Vec& p) {
    Policy probe = policy;
    probe.set_params(p);
    return probe.weighted_grad(probe.evaluate(inputs, actions), w).data();
  };
  const double eps = 1e-5;
  const Vec p0 = policy.params().data();
  const Vec hv_num = (grad_at(p0 + eps * d.data()) - grad_at(p0 - eps * d.data())) / (2.0 * eps);
  return make_report(discrete ? "policy-hvp-categorical" : "policy-hvp-gaussian", max_rel_error(hv, hv_num), 1e-4);
}

OracleReport tabular_check(Rng& rng) {
  const TabularMdp mdp = TabularMdp::random(5, 2, 0.9, rng);
  const ActionSpace space{ActionKind::discrete, 2};
  WeightFnSpec wspec;
  wspec.hidden = {};
  WeightFn wf(5, space, wspec);
  wf.init(rng);
  // move the weights away from the flat initial plateau
  Vec phi = wf.params().data();
  for (Index i = 0; i < phi.size(); ++i) phi[i] += 0.5 * (2.0 * uniform01(rng) - 1.0);
  wf.set_params(phi);
  PolicySpec pspec;
  pspec.hidden = {6};
  pspec.activation = Activation::tanh;
  pspec.output_init_scale = 1.0;
  Policy policy(5, wf.z_dim(), space, pspec);
  policy.init(rng);

  const Vec analytic = exact_upper_grad(mdp, policy, wf).data();
  auto J = [&](const Vec& p) {
    WeightFn probe = wf;
    probe.set_params(p);
    return exact_J(mdp, hyper_policy_probs(mdp, policy, probe));
  };
  return make_report("tabular-upper-grad", max_rel_error(analytic, finite_diff_grad(J, phi, 1e-5)), 1e-6);
}

/// Dense n x m reference for the MGL upper gradient, built sample by sample.
Vec mgl_dense_reference(const Batch& upper, const Vec& adv, const Batch& lower, const Policy& policy_new,
                        const Policy& policy_old, const WeightFn& wf, double alpha, double gamma) {
  const Index n = policy_old.num_params();
  const Index m = wf.num_params();
  Vec u = Vec::Zero(n);
  for (Index j = 0; j < upper.size(); ++j) {
    const Transition& tr = upper.steps[static_cast<std::size_t>(j)];
    const PolicyEval ev = policy_new.evaluate(Mat(tr.input), Mat(tr.action));
    u += adv[j] * policy_new.per_sample_grads(ev).col(0);
  }
  Mat h = Mat::Zero(n, m);
  for (const auto& [begin, end] : lower.episodes()) {
    for (Index i = begin; i < end; ++i) {
      const Transition& tr = lower.steps[static_cast<std::size_t>(i)];
      const Vec g = policy_old.per_sample_grads(policy_old.evaluate(Mat(tr.input), Mat(tr.action))).col(0);
      Vec c = Vec::Zero(m);
      double disc = 1.0;
      for (Index t = i; t < end; ++t) {
        const Transition& tt = lower.steps[static_cast<std::size_t>(t)];
        c += disc * tt.f_val * wf.per_sample_grads(Mat(tt.weight_input)).col(0);
        disc *= gamma;
      }
      h += alpha * g * c.transpose();
    }
  }
  return h.transpose() * u;
}

OracleReport mgl_ordering_check(Rng& rng) {
  ToyControlEnv env(6);
  PolicySpec pspec;
  pspec.hidden = {4};
  pspec.activation = Activation::tanh;
  pspec.output_init_scale = 0.5;
  Policy policy(1, 0, env.action_space(), pspec);
  policy.init(rng);
  WeightFnSpec wspec;
  wspec.hidden = {4};
  WeightFn wf(1, env.action_space(), wspec);
  wf.init(rng);
  Vec phi = wf.params().data();
  for (Index i = 0; i < phi.size(); ++i) phi[i] += 0.3 * (2.0 * uniform01(rng) - 1.0);
  wf.set_params(phi);
  const ShapingSpec f = toy_shaping();
  const std::uint64_t s = rng();
  const Batch lower = replay_rollouts(env, f, policy, wf, 3, s, "lower");
  Policy policy_new = policy;
  policy_new.set_params(literal_update(policy, lower, 0.05, 0.95));
  const Batch upper = replay_rollouts(env, f, policy_new, wf, 2, s, "upper");
  Vec adv(upper.size());
  for (Index i = 0; i < adv.size(); ++i) adv[i] = 2.0 * uniform01(rng) - 1.0;
  const Vec fast =
      mgl_upper_grad(upper, adv, lower, policy_new, policy, wf, 0.05, 0.95, LossReduction::sum).data();
  const Vec dense = mgl_dense_reference(upper, adv, lower, policy_new, policy, wf, 0.05, 0.95);
  return make_report("mgl-fast-ordering", max_rel_error(fast, dense), 1e-10);
}

OracleReport reduction_identity_check(Rng& rng) {
  ToyControlEnv env(5);
  PolicySpec pspec;
  pspec.hidden = {4};
  pspec.activation = Activation::tanh;
  pspec.output_init_scale = 0.5;
  Policy policy(1, 0, env.action_space(), pspec);
  policy.init(rng);
  WeightFnSpec wspec;
  wspec.hidden = {3};
  WeightFn wf(1, env.action_space(), wspec);
  wf.init(rng);
  const ShapingSpec f = toy_shaping();
  const std::uint64_t s = rng();
  MetaGradState imgl(MetaMethod::imgl, policy.num_params(), wf.num_params(), HessianMode::none);
  MetaGradState mgl(MetaMethod::mgl, policy.num_params(), wf.num_params());
  double worst = 0.0;
  Policy current = policy;
  for (int it = 0; it < 3; ++it) {
    const Batch lower = replay_rollouts(env, f, current, wf, 2, s, "lower-" + std::to_string(it));
    imgl.reset();
    imgl_step(imgl, lower, current, wf, 0.05, mc_returns(lower, 0.95), 0.95);
    mgl.reset();
    mgl.densify();
    mgl.add_outer(lower_policy_grads(lower, current, wf), shaping_credit(lower, wf, 0.95), 0.05);
    current.set_params(literal_update(current, lower, 0.05, 0.95));
    const Batch upper = replay_rollouts(env, f, current, wf, 2, s, "upper-" + std::to_string(it));
    const Vec adv = upper.rewards_true();
    const Vec a = imgl_upper_grad(imgl, upper, adv, current, wf).data();
    const Vec b = mgl.apply_transpose(upper_policy_direction(upper, adv, current, wf).data());
    worst = std::max(worst, (a - b).lpNorm<Eigen::Infinity>());
  }
  OracleReport r;
  r.test_id = "imgl-mgl-reduction";
  r.max_rel_error = worst;
  r.tolerance = 0.0;
  r.pass = worst == 0.0;
  return r;
}

}  // namespace

std::vector<OracleReport> run_oracle_suite(std::uint64_t seed) {
  Rng rng = make_stream(seed, "oracle-suite");
  std::vector<OracleReport> out = mlp_checks(rng);
  out.push_back(policy_hvp_check(true, rng));
  out.push_back(policy_hvp_check(false, rng));
  out.push_back(tabular_check(rng));
  out.push_back(mgl_ordering_check(rng));

  ToyControlEnv env(5);
  const ShapingSpec f = toy_shaping();
  {
    PolicySpec pspec;
    pspec.hidden = {};
    pspec.init_log_std = -0.5;
    pspec.output_init_scale = 0.5;
    Policy policy(1, 0, env.action_space(), pspec);
    policy.init(rng);
    WeightFnSpec wspec;
    wspec.hidden = {};
    WeightFn wf(1, env.action_space(), wspec);
    wf.init(rng);
    FrozenCheckConfig cfg;
    cfg.test_id = "frozen-mgl";
    out.push_back(frozen_meta_grad_check(env, f, policy, wf, cfg, rng()));
  }
  {
    PolicySpec pspec;
    pspec.hidden = {3};
    pspec.activation = Activation::tanh;
    pspec.init_log_std = -0.5;
    pspec.output_init_scale = 0.5;
    Policy policy(1, 0, env.action_space(), pspec);
    policy.init(rng);
    WeightFnSpec wspec;
    wspec.hidden = {2};
    WeightFn wf(1, env.action_space(), wspec);
    wf.init(rng);
    FrozenCheckConfig cfg;
    cfg.test_id = "frozen-imgl-two-step";
    cfg.iterations = 2;
    cfg.tolerance = 1e-3;
    out.push_back(frozen_meta_grad_check(env, f, policy, wf, cfg, rng()));
  }
  out.push_back(reduction_identity_check(rng));
  return out;
}

}  // namespace bipars
