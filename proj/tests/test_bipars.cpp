#include "bipars/bipars.hpp"
#include "bipars/finite_diff.hpp"
#include "bipars/oracle.hpp"
#include "test_util.hpp"

#include <cmath>
#include <limits>

using namespace bipars;
using test::random_vec;
using test::rel_err;

namespace {

struct Setup {
  ToyControlEnv env{4};
  ShapingSpec shaping = toy_shaping();
  Policy policy;
  WeightFn wf;

  explicit Setup(bool hyper = false, std::uint64_t seed = 1) {
    WeightFnSpec ws;
    ws.hidden = {3};
    wf = WeightFn(1, env.action_space(), ws);
    Rng rng(seed);
    wf.set_params(random_vec(wf.num_params(), rng, 0.6));
    PolicySpec ps;
    ps.hidden = {4};
    ps.activation = Activation::tanh;
    policy = Policy(1, hyper ? wf.z_dim() : 0, env.action_space(), ps);
    policy.set_params(random_vec(policy.num_params(), rng, 0.6));
  }

  Vec input(const Vec& obs) const {
    if (!policy.hyper_mode()) return obs;
    const Vec z = wf.z_vector(obs);
    return policy.make_input(obs, &z);
  }

  Batch rollout(int episodes, std::uint64_t seed, bool shaped = true) {
    Rng rng(seed);
    Batch b;
    for (int e = 0; e < episodes; ++e) {
      Vec obs = env.reset(rng);
      for (;;) {
        Transition t;
        t.obs = obs;
        t.input = input(obs);
        const Policy::Sample s = policy.sample(t.input, rng);
        t.action = s.action;
        t.log_prob = s.log_prob;
        t.weight_input = wf.encode(obs, t.action);
        const StepResult r = env.step(t.action, rng);
        t.applied = r.applied_action;
        t.next_obs = r.next_state;
        t.r_true = r.true_reward;
        t.f_val = shaped ? shaping(obs, t.applied, t.next_obs) : 0.0;
        t.z_val = wf.value_encoded(t.weight_input);
        t.r_mod = modified_reward(t.r_true, t.z_val, t.f_val);
        t.done = r.done;
        t.truncated = r.truncated;
        b.steps.push_back(t);
        if (r.done) break;
        obs = r.next_state;
      }
    }
    return b;
  }
};

// Per-transition dense reference: h = scale * sum_i g_i c_i^T with c_i built
// from weight_and_grad one transition at a time.
DenseMatrix dense_mgl_h(const Batch& lower, const Policy& policy, const WeightFn& wf, double gamma, double scale) {
  DenseMatrix h = DenseMatrix::Zero(policy.num_params(), wf.num_params());
  const auto eps = lower.episodes();
  for (const auto& [b, e] : eps) {
    for (Index i = b; i < e; ++i) {
      const Transition& ti = lower.steps[static_cast<std::size_t>(i)];
      const Vec g = policy.weighted_grad(policy.evaluate(ti.input, ti.action), Vec::Ones(1)).data();
      Vec c = Vec::Zero(wf.num_params());
      double disc = 1.0;
      for (Index t = i; t < e; ++t) {
        const Transition& tt = lower.steps[static_cast<std::size_t>(t)];
        c += disc * tt.f_val * wf.weight_and_grad(tt.obs, tt.action).second.data();
        disc *= gamma;
      }
      for (Index r = 0; r < h.rows(); ++r)
        for (Index k = 0; k < h.cols(); ++k) h(r, k) += scale * g[r] * c[k];
    }
  }
  return h;
}

}  // namespace

TEST_CASE("method names and families") {
  for (const auto& name : method_names()) CHECK(to_string(parse_method(name)) == name);
  CHECK(meta_method(Method::single_imgl) == MetaMethod::imgl);
  CHECK(is_single_weight(Method::single_em));
  CHECK_FALSE(uses_weight_fn(Method::dpba));
  CHECK_THROWS_AS(meta_method(Method::ns), ModeError);
  CHECK_THROWS(parse_method("rcpo"));
  CHECK(parse_hessian_mode("opg") == HessianMode::opg);
  CHECK(meta_step_scale(0.1, 4, LossReduction::mean) == 0.025);
  CHECK(meta_step_scale(0.1, 4, LossReduction::sum) == 0.1);
}

TEST_CASE("explicit mapping gradient") {
  Setup s(true);
  const Batch up = s.rollout(2, 3, false);
  CHECK(em_upper_grad(up, Vec::Zero(up.size()), s.policy, s.wf).norm() == 0.0);

  Setup plain(false);
  CHECK_THROWS_AS(em_upper_grad(up, Vec::Ones(up.size()), plain.policy, plain.wf), ModeError);
}

TEST_CASE("explicit mapping on one transition follows the hand chain rule") {
  // Linear weight function z(s, a) = w0 s + w1 a + b; z-vector at a = -1, +1.
  const ActionSpace space{ActionKind::continuous, 1, -1, 1};
  WeightFnSpec ws;
  ws.hidden = {};
  WeightFn wf(1, space, ws);
  Vec phi(3);
  phi << 0.4, -0.3, 0.9;
  wf.set_params(phi);
  PolicySpec ps;
  ps.hidden = {3};
  ps.activation = Activation::tanh;
  Policy p(1, 2, space, ps);
  Rng rng(4);
  p.set_params(random_vec(p.num_params(), rng));

  const double s = 0.7, a = 0.2, adv = -1.6;
  const Vec z = wf.z_vector(Vec::Constant(1, s));
  const Vec x = p.make_input(Vec::Constant(1, s), &z);
  const Vec gz = p.z_grads(p.evaluate(x, Vec::Constant(1, a))).col(0);
  // dz_k/dphi = [s, ref_k, 1] with ref = (-1, +1)
  Vec expected(3);
  expected << adv * s * (gz[0] + gz[1]), adv * (-gz[0] + gz[1]), adv * (gz[0] + gz[1]);
  const ParamVector got = em_upper_grad(Mat::Constant(1, 1, s), Mat::Constant(1, 1, a), Vec::Constant(1, adv), p, wf);
  CHECK(rel_err(got.data(), expected) < 1e-14);
}

TEST_CASE("shaping credit and policy gradients against per-transition references") {
  Setup s;
  const Batch lower = s.rollout(3, 5);
  const Mat C = shaping_credit(lower, s.wf, 0.9);
  const Mat G = lower_policy_grads(lower, s.policy, s.wf);
  const DenseMatrix ref = dense_mgl_h(lower, s.policy, s.wf, 0.9, 1.0);
  const DenseMatrix got = G * C.transpose();
  CHECK((got - ref).cwiseAbs().maxCoeff() <= 1e-12 * ref.cwiseAbs().maxCoeff());

  Batch open = lower;
  open.steps.back().done = false;
  CHECK_THROWS_AS(shaping_credit(open, s.wf, 0.9), IncompleteTrajectoryError);
}

TEST_CASE("MGL fast ordering equals the dense computation") {
  Setup s;
  REQUIRE(s.policy.num_params() <= 32);
  REQUIRE(s.wf.num_params() <= 32);
  const Batch lower = s.rollout(3, 6);
  Setup after = s;
  Rng rng(7);
  after.policy.set_params(s.policy.params().data() + random_vec(s.policy.num_params(), rng, 0.05));
  const Batch upper = after.rollout(2, 8, false);
  const Vec adv = random_vec(upper.size(), rng);
  const double alpha = 0.3;
  const double scale = meta_step_scale(alpha, lower.size(), LossReduction::mean);

  const ParamVector fast = mgl_upper_grad(upper, adv, lower, after.policy, s.policy, s.wf, alpha, 0.9);
  const DenseMatrix h = dense_mgl_h(lower, s.policy, s.wf, 0.9, scale);
  const Vec u = upper_policy_direction(upper, adv, after.policy, s.wf).data();
  const Vec dense = h.transpose() * u;
  CHECK(rel_err(fast.data(), dense) < 1e-10);
}

TEST_CASE("MGL gradient vanishes without shaping or without weight gradients") {
  Setup s;
  const Batch unshaped = s.rollout(2, 9, false);
  Rng rng(10);
  const Vec adv = random_vec(unshaped.size(), rng);
  CHECK(mgl_upper_grad(unshaped, adv, unshaped, s.policy, s.policy, s.wf, 0.1, 0.9).norm() == 0.0);

  // Every output clamped: dz/dphi is zero everywhere.
  Setup frozen;
  WeightFnSpec ws;
  ws.hidden = {3};
  ws.clip = std::make_pair(-0.5, 0.5);
  frozen.wf = WeightFn(1, frozen.env.action_space(), ws);
  Vec phi = Vec::Zero(frozen.wf.num_params());
  phi[phi.size() - 1] = 10.0;
  frozen.wf.set_params(phi);
  const Batch lower = frozen.rollout(2, 11);
  CHECK(mgl_upper_grad(lower, Vec::Ones(lower.size()), lower, frozen.policy, frozen.policy, frozen.wf, 0.1, 0.9).norm() ==
        0.0);
}

TEST_CASE("meta-gradient state basics") {
  const MetaGradState em(MetaMethod::em, 5, 3);
  CHECK_FALSE(em.dense());
  CHECK(em.rank() == 0);
  MetaGradState em2 = em;
  CHECK_THROWS_AS(em2.add_outer(Mat::Zero(5, 1), Mat::Zero(3, 1), 1.0), ModeError);

  const MetaGradState imgl(MetaMethod::imgl, 5, 3);
  CHECK(imgl.dense());
  CHECK(imgl.materialize().isZero(0.0));

  CHECK_THROWS_AS(MetaGradState(MetaMethod::imgl, 2000, 1000, HessianMode::exact), ConfigError);
  CHECK_NOTHROW(MetaGradState(MetaMethod::imgl, 2000, 1000, HessianMode::none));
  CHECK_THROWS_AS(MetaGradState(MetaMethod::imgl, 20000, 1000, HessianMode::none), ConfigError);
}

TEST_CASE("dense and low-rank meta-gradient representations agree") {
  Rng rng(12);
  MetaGradState low(MetaMethod::mgl, 30, 12);
  MetaGradState dense(MetaMethod::mgl, 30, 12);
  dense.densify();
  for (int k = 0; k < 3; ++k) {
    const Mat G = test::random_mat(30, 7, rng), C = test::random_mat(12, 7, rng);
    low.add_outer(G, C, 0.01 * (k + 1));
    dense.add_outer(G, C, 0.01 * (k + 1));
  }
  CHECK_FALSE(low.dense());
  CHECK(low.rank() == 21);
  const Vec u = random_vec(30, rng);
  const Vec a = low.apply_transpose(u), b = dense.apply_transpose(u);
  CHECK(rel_err(a, b) < 1e-12);
  CHECK((low.materialize() - dense.materialize()).cwiseAbs().maxCoeff() < 1e-14);

  MetaGradState empty(MetaMethod::mgl, 30, 12);
  CHECK(empty.apply_transpose(u).norm() == 0.0);
}

TEST_CASE("IMGL from zero without the second-order term is the MGL accumulation") {
  Setup s;
  const Batch lower = s.rollout(3, 13);
  const double scale = 0.01;
  MetaGradState st(MetaMethod::imgl, s.policy.num_params(), s.wf.num_params(), HessianMode::none);
  imgl_step(st, lower, s.policy, s.wf, scale, mc_returns(lower, 0.9), 0.9);
  const DenseMatrix ref = dense_mgl_h(lower, s.policy, s.wf, 0.9, scale);
  CHECK((st.materialize() - ref).cwiseAbs().maxCoeff() <= 1e-12 * ref.cwiseAbs().maxCoeff());
}

TEST_CASE("IMGL leaves h unchanged when returns and shaping are zero") {
  Setup s;
  Batch lower = s.rollout(2, 14, false);
  for (auto& t : lower.steps) t.r_mod = 0.0;
  for (const HessianMode mode : {HessianMode::exact, HessianMode::opg, HessianMode::none}) {
    MetaGradState st(MetaMethod::imgl, s.policy.num_params(), s.wf.num_params(), mode);
    Rng rng(15);
    st.dense_h() = test::random_mat(st.rows(), st.cols(), rng);
    const DenseMatrix before = st.dense_h();
    imgl_step(st, lower, s.policy, s.wf, 0.05, mc_returns(lower, 0.9), 0.9);
    CHECK((st.dense_h() - before).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("IMGL second-order term against explicit Hessians") {
  Setup s;
  const Batch lower = s.rollout(2, 16);
  const Vec q = mc_returns(lower, 0.9);
  const double scale = 0.02;
  Rng rng(17);
  const DenseMatrix h0 = test::random_mat(s.policy.num_params(), s.wf.num_params(), rng);
  const DenseMatrix add = dense_mgl_h(lower, s.policy, s.wf, 0.9, scale);
  const Mat x = lower.inputs(), a = lower.actions();

  // Explicit sum_i q_i H_i by central differences of the weighted gradient.
  const Mat H = finite_diff_jacobian(
      [&](const Vec& th) {
        Policy p = s.policy;
        p.set_params(th);
        return p.weighted_grad(p.evaluate(x, a), q).data();
      },
      s.policy.params().data(), 1e-5);
  MetaGradState exact(MetaMethod::imgl, s.policy.num_params(), s.wf.num_params(), HessianMode::exact);
  exact.dense_h() = h0;
  imgl_step(exact, lower, s.policy, s.wf, scale, q, 0.9);
  const DenseMatrix want_exact = h0 + scale * H * h0 + add;
  CHECK((exact.dense_h() - want_exact).cwiseAbs().maxCoeff() < 1e-7 * want_exact.cwiseAbs().maxCoeff());

  const Mat G = s.policy.per_sample_grads(s.policy.evaluate(x, a));
  MetaGradState opg(MetaMethod::imgl, s.policy.num_params(), s.wf.num_params(), HessianMode::opg);
  opg.dense_h() = h0;
  imgl_step(opg, lower, s.policy, s.wf, scale, q, 0.9);
  const DenseMatrix want_opg = h0 - scale * G * q.asDiagonal() * G.transpose() * h0 + add;
  CHECK((opg.dense_h() - want_opg).cwiseAbs().maxCoeff() < 1e-12 * want_opg.cwiseAbs().maxCoeff());

  MetaGradState none(MetaMethod::imgl, s.policy.num_params(), s.wf.num_params(), HessianMode::none);
  none.dense_h() = h0;
  imgl_step(none, lower, s.policy, s.wf, scale, q, 0.9);
  CHECK((none.dense_h() - (h0 + add)).cwiseAbs().maxCoeff() < 1e-14 * (h0 + add).cwiseAbs().maxCoeff());
}

TEST_CASE("IMGL reset each iteration reproduces the MGL sequence exactly") {
  Setup s;
  MetaGradState imgl(MetaMethod::imgl, s.policy.num_params(), s.wf.num_params(), HessianMode::none);
  MetaGradState mgl(MetaMethod::mgl, s.policy.num_params(), s.wf.num_params());
  Rng rng(18);
  for (int it = 0; it < 3; ++it) {
    const Batch lower = s.rollout(2, 100 + it);
    const Batch upper = s.rollout(2, 200 + it, false);
    const Vec adv = random_vec(upper.size(), rng);
    const double scale = meta_step_scale(0.1, lower.size(), LossReduction::mean);
    imgl.reset();
    imgl_step(imgl, lower, s.policy, s.wf, scale, mc_returns(lower, 0.9), 0.9);
    mgl.reset();
    mgl.densify(kDenseExactBudget);
    mgl.add_outer(lower_policy_grads(lower, s.policy, s.wf), shaping_credit(lower, s.wf, 0.9), scale);
    const Vec a = imgl_upper_grad(imgl, upper, adv, s.policy, s.wf).data();
    const Vec b = imgl_upper_grad(mgl, upper, adv, s.policy, s.wf).data();
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
    s.policy.set_params(s.policy.params().data() + random_vec(s.policy.num_params(), rng, 0.02));
  }
}

TEST_CASE("IMGL upper gradient vanishes with zero h or zero advantages") {
  Setup s;
  const Batch upper = s.rollout(2, 19, false);
  MetaGradState st(MetaMethod::imgl, s.policy.num_params(), s.wf.num_params());
  CHECK(imgl_upper_grad(st, upper, Vec::Ones(upper.size()), s.policy, s.wf).norm() == 0.0);
  Rng rng(20);
  st.dense_h() = test::random_mat(st.rows(), st.cols(), rng);
  CHECK(imgl_upper_grad(st, upper, Vec::Zero(upper.size()), s.policy, s.wf).norm() == 0.0);
}

namespace {

TrainConfig tiny(Method m, const std::string& env = "cartpole-discrete", const std::string& shaping = "cartpole-beneficial") {
  TrainConfig c;
  c.env = env;
  c.shaping = shaping;
  c.method = m;
  c.total_steps = 6000;
  c.eval_every = 2000;
  c.eval_episodes = 3;
  c.update_period = 1500;
  c.policy.hidden = {8};
  c.value_hidden = {8};
  c.weight.hidden = {4};
  c.potential.hidden = {4};
  c.ppo.epochs = 2;
  c.ppo.minibatch = 500;
  c.upper_epochs = 1;
  c.upper_minibatch = 500;
  c.upper_steps = 600;
  c.true_value_epochs = 1;
  c.phi_lr = 1e-3;
  return c;
}

Vec exact_one_weights(const TrainConfig& c) {
  const auto env = make_env(c.env);
  WeightFn wf(env->state_dim(), env->action_space(), c.weight);
  Vec phi = Vec::Zero(wf.num_params());
  phi[phi.size() - 1] = 1.0;
  return phi;
}

bool same_records(const std::vector<EvalRecord>& a, const std::vector<EvalRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].step != b[i].step || a[i].metric != b[i].metric || a[i].mean_weight != b[i].mean_weight) return false;
  return true;
}

}  // namespace

TEST_CASE("a zero upper learning rate with weights of exactly 1 reproduces naive shaping") {
  const RunArtifacts ns = bipars_train(tiny(Method::ns), 3);
  TrainConfig c = tiny(Method::mgl);
  c.phi_lr = 0.0;
  c.initial_phi = exact_one_weights(c);
  const RunArtifacts mgl = bipars_train(c, 3);
  REQUIRE(ns.records.size() == 3);
  CHECK(same_records(ns.records, mgl.records));
  CHECK(ns.policy.params().data() == mgl.policy.params().data());
  CHECK(mgl.weight_fn->params().data() == c.initial_phi.value());
}

TEST_CASE("explicit mapping with a zero upper learning rate keeps its weights") {
  TrainConfig c = tiny(Method::em);
  c.phi_lr = 0.0;
  Trainer t(c, 4);
  const Vec phi0 = t.weight_fn()->params().data();
  const RunArtifacts art = t.run();
  CHECK(art.weight_fn->params().data() == phi0);
  for (const auto& r : art.records) CHECK(std::abs(r.mean_weight - 1.0) < 0.05);
}

TEST_CASE("lower update is the plain policy-gradient step in its ratio-1 epoch") {
  TrainConfig c = tiny(Method::mgl, "torque-line", "torque-constraint");
  c.weight.clip = std::make_pair(-1.0, 1.0);
  c.ppo.epochs = 1;
  c.ppo.minibatch = 400;
  c.ppo.clip_eps = 1e6;
  c.ppo.normalize_advantages = false;
  c.ppo.optimizer = OptimizerKind::sgd;
  c.ppo.reduction = LossReduction::sum;
  // small enough that log_std stays inside its clamp
  c.ppo.policy_lr = 1e-5;
  Trainer t(c, 5);

  const auto env = make_env("torque-line");
  const ShapingSpec f = builtin_shaping("torque-constraint");
  Rng rng(6);
  Batch lower;
  for (int e = 0; e < 2; ++e) {
    Vec obs = env->reset(rng);
    for (;;) {
      Transition tr;
      tr.obs = obs;
      tr.input = obs;
      const Policy::Sample smp = t.policy().sample(obs, rng);
      tr.action = smp.action;
      tr.log_prob = smp.log_prob;
      tr.weight_input = t.weight_fn()->encode(obs, tr.action);
      const StepResult r = env->step(tr.action, rng);
      tr.applied = r.applied_action;
      tr.next_obs = r.next_state;
      tr.r_true = r.true_reward;
      tr.f_val = f(obs, tr.applied, tr.next_obs);
      tr.z_val = t.weight_fn()->value_encoded(tr.weight_input);
      tr.r_mod = modified_reward(tr.r_true, tr.z_val, tr.f_val);
      tr.done = r.done;
      tr.truncated = r.truncated;
      lower.steps.push_back(tr);
      if (r.done) break;
      obs = r.next_state;
    }
  }
  REQUIRE(lower.size() == 400);
  CHECK((t.policy().evaluate(lower.inputs(), lower.actions()).log_prob - lower.log_probs()).cwiseAbs().maxCoeff() < 1e-12);
  const Policy before = t.policy();
  const GaeResult gae = compute_gae(lower, t.value(), c.gamma, c.lambda, RewardChannel::modified);
  const ParamVector step = before.weighted_grad(before.evaluate(lower.inputs(), lower.actions()), gae.advantages);
  const Mat G = lower_policy_grads(lower, before, *t.weight_fn());
  const Mat C = shaping_credit(lower, *t.weight_fn(), c.gamma);

  t.update(lower);
  CHECK(rel_err(t.policy().params().data() - before.params().data(), c.ppo.policy_lr * step.data()) < 1e-10);
  const DenseMatrix want = c.ppo.policy_lr * G * C.transpose();
  CHECK((t.meta_state().materialize() - want).cwiseAbs().maxCoeff() <= 1e-13 * want.cwiseAbs().maxCoeff());
}

TEST_CASE("trainer stops on the wall-clock budget and on numeric failure") {
  TrainConfig c = tiny(Method::ns);
  c.total_steps = 40000;
  c.eval_every = 4000;
  c.time_limit_s = 1e-9;
  const RunArtifacts timed = bipars_train(c, 7);
  CHECK(timed.status == RunStatus::time_limit);
  CHECK(timed.steps < 40000);
  CHECK(timed.steps >= c.update_period);

  TrainConfig bad = tiny(Method::mgl);
  Vec phi = exact_one_weights(bad);
  phi[phi.size() - 1] = std::numeric_limits<double>::quiet_NaN();
  bad.initial_phi = phi;
  const RunArtifacts nan = bipars_train(bad, 8);
  CHECK(nan.status == RunStatus::numeric_failure);
  CHECK_FALSE(nan.message.empty());
}

TEST_CASE("upper rollouts carry true rewards only") {
  Trainer t(tiny(Method::mgl, "cartpole-discrete", "cartpole-harmful"), 9);
  const Batch up = t.collect_upper(500);
  CHECK(up.size() >= 500);
  CHECK(up.complete());
  for (const auto& tr : up.steps) {
    CHECK(tr.r_mod == tr.r_true);
    CHECK((tr.r_true == 0.0 || tr.r_true == -1.0));
  }
}

TEST_CASE("every method trains a few updates with finite results") {
  for (const auto& name : method_names()) {
    TrainConfig c = tiny(parse_method(name), "cartpole-continuous", "cartpole-half");
    c.total_steps = 4000;
    const RunArtifacts art = bipars_train(c, 10);
    INFO(name);
    CHECK(art.status == RunStatus::ok);
    CHECK(art.records.size() == 2);
    for (const auto& r : art.records) {
      CHECK(r.metric >= 1.0);
      CHECK(r.metric <= 200.0);
      CHECK(std::isfinite(r.mean_weight));
    }
    CHECK(art.policy.params().all_finite());
  }
}
