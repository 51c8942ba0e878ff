#include "bipars/bipars.hpp"

#include <chrono>
#include <cmath>

namespace bipars {

namespace {

struct MethodName {
  Method method;
  const char* name;
};

constexpr MethodName kMethods[] = {
    {Method::ppo, "ppo"},
    {Method::ns, "ns"},
    {Method::dpba, "dpba"},
    {Method::em, "em"},
    {Method::mgl, "mgl"},
    {Method::imgl, "imgl"},
    {Method::single_em, "single-weight-em"},
    {Method::single_mgl, "single-weight-mgl"},
    {Method::single_imgl, "single-weight-imgl"},
};

Mat gather_cols(const Mat& m, const std::vector<Index>& idx) {
  Mat out(m.rows(), static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Index>(j)) = m.col(idx[j]);
  return out;
}

Vec gather_vec(const Vec& v, const std::vector<Index>& idx) {
  Vec out(static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out[static_cast<Index>(j)] = v[idx[j]];
  return out;
}

}  // namespace

Method parse_method(std::string_view name) {
  for (const auto& m : kMethods)
    if (name == m.name) return m.method;
  throw std::invalid_argument("unknown method: " + std::string(name));
}

std::string_view to_string(Method m) {
  for (const auto& e : kMethods)
    if (e.method == m) return e.name;
  return "?";
}

std::vector<std::string> method_names() {
  std::vector<std::string> out;
  for (const auto& m : kMethods) out.emplace_back(m.name);
  return out;
}

bool uses_weight_fn(Method m) { return m != Method::ppo && m != Method::ns && m != Method::dpba; }

bool is_single_weight(Method m) {
  return m == Method::single_em || m == Method::single_mgl || m == Method::single_imgl;
}

MetaMethod meta_method(Method m) {
  switch (m) {
    case Method::em:
    case Method::single_em: return MetaMethod::em;
    case Method::mgl:
    case Method::single_mgl: return MetaMethod::mgl;
    case Method::imgl:
    case Method::single_imgl: return MetaMethod::imgl;
    default: throw ModeError("method " + std::string(to_string(m)) + " has no upper level");
  }
}

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::ok: return "ok";
    case RunStatus::numeric_failure: return "numeric-failure";
    case RunStatus::time_limit: return "time-limit";
  }
  return "?";
}

bool is_cartpole(const std::string& env_id) { return env_id.rfind("cartpole", 0) == 0; }

Trainer::Trainer(TrainConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)),
      seed_(seed),
      env_rng_(make_stream(seed, "env")),
      policy_rng_(make_stream(seed, "policy-sampling")),
      shuffle_rng_(make_stream(seed, "ppo-shuffle")),
      upper_env_rng_(make_stream(seed, "upper-env")),
      upper_policy_rng_(make_stream(seed, "upper-policy-sampling")),
      upper_shuffle_rng_(make_stream(seed, "upper-shuffle")),
      eval_rng_(make_stream(seed, "eval")) {
  env_ = make_env(cfg_.env, cfg_.torque_joints);
  upper_env_ = env_->clone();
  eval_env_ = env_->clone();
  shaping_ = builtin_shaping(cfg_.method == Method::ppo ? "none" : cfg_.shaping, cfg_.table_seed, cfg_.task_weight);

  const Index obs_dim = env_->state_dim();
  const ActionSpace space = env_->action_space();
  Rng init_rng = make_stream(seed, "init");

  if (uses_weight_fn(cfg_.method)) {
    WeightFnSpec wspec = cfg_.weight;
    wspec.single = is_single_weight(cfg_.method);
    wf_.emplace(obs_dim, space, wspec);
    Rng weight_rng = make_stream(seed, "init-weight");
    wf_->init(weight_rng);
    if (cfg_.initial_phi) wf_->set_params(*cfg_.initial_phi);
  }
  const bool hyper = uses_weight_fn(cfg_.method) && meta_method(cfg_.method) == MetaMethod::em;
  policy_ = Policy(obs_dim, hyper ? wf_->z_dim() : 0, space, cfg_.policy);
  policy_.init(init_rng);
  value_ = make_value_net(obs_dim, cfg_.value_hidden, cfg_.value_activation);
  value_.init_fan_in(init_rng);
  true_value_ = make_value_net(obs_dim, cfg_.value_hidden, cfg_.value_activation);
  true_value_.init_fan_in(init_rng);
  if (cfg_.method == Method::dpba) {
    potential_.emplace(obs_dim + space.size, cfg_.potential);
    potential_->init(init_rng);
  }

  ppo_ = PpoLearner(policy_, value_, cfg_.ppo);
  true_value_opt_ = Optimizer(true_value_.num_params(), {cfg_.ppo.optimizer, cfg_.ppo.value_lr, 0.9, 0.999, 1e-8,
                                                         cfg_.ppo.value_clip_norm});
  if (wf_) {
    phi_opt_ = Optimizer(wf_->num_params(), {OptimizerKind::adam, cfg_.phi_lr, 0.9, 0.999, 1e-8, cfg_.phi_clip_norm});
    const MetaMethod mm = meta_method(cfg_.method);
    if (mm != MetaMethod::em)
      meta_ = MetaGradState(mm, policy_.num_params(), wf_->num_params(), cfg_.hessian, HvpOptions{cfg_.hvp_mode, 1e-5});
  }
}

bool Trainer::upper_enabled() const { return wf_.has_value() && !cfg_.freeze_phi; }

Vec Trainer::policy_input(const Vec& obs) const {
  if (!policy_.hyper_mode()) return obs;
  const Vec z = wf_->z_vector(obs);
  return policy_.make_input(obs, &z);
}

RunArtifacts Trainer::run() {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto over_time = [&] {
    return cfg_.time_limit_s > 0.0 &&
           std::chrono::duration<double>(clock::now() - start).count() > cfg_.time_limit_s;
  };

  RunArtifacts art;
  Batch batch;
  batch.steps.reserve(static_cast<std::size_t>(cfg_.update_period + env_->max_steps() + 1));
  long total = 0;
  double weight_sum = 0.0;
  long weight_count = 0;
  const double gamma = cfg_.gamma;
  const ActionSpace space = env_->action_space();
  std::optional<std::size_t> pending;  // DPBA transition waiting for its next action

  auto finalize_dpba = [&](std::size_t i, const Vec* x_next) {
    Transition& tr = batch.steps[i];
    const DpbaStep d = potential_->step(tr.weight_input, x_next, tr.f_val, gamma);
    tr.f_val = d.shaping;
    tr.r_mod = modified_reward(tr.r_true, tr.z_val, tr.f_val);
  };

  try {
    Vec obs = env_->reset(env_rng_);
    while (total < cfg_.total_steps) {
      Transition tr;
      tr.obs = obs;
      tr.input = policy_input(obs);
      const Policy::Sample smp = policy_.sample(tr.input, policy_rng_);
      tr.action = smp.action;
      tr.log_prob = smp.log_prob;

      if (potential_) {
        tr.weight_input = encode_state_action(space, obs, tr.action);
        if (pending) finalize_dpba(*pending, &tr.weight_input);
        pending.reset();
      } else if (wf_) {
        tr.weight_input = wf_->encode(obs, tr.action);
      }

      const StepResult res = env_->step(tr.action, env_rng_);
      tr.applied = res.applied_action;
      tr.next_obs = res.next_state;
      tr.r_true = res.true_reward;
      tr.done = res.done;
      tr.failed = res.failed;
      tr.truncated = res.truncated;
      tr.f_val = shaping_(obs, tr.applied, tr.next_obs);
      switch (cfg_.method) {
        case Method::ppo: tr.z_val = 0.0; break;
        case Method::ns:
        case Method::dpba: tr.z_val = 1.0; break;
        default: tr.z_val = wf_->value_encoded(tr.weight_input); break;
      }
      tr.r_mod = modified_reward(tr.r_true, tr.z_val, tr.f_val);
      batch.steps.push_back(std::move(tr));
      ++total;
      weight_sum += batch.steps.back().z_val;
      ++weight_count;

      if (potential_) {
        if (res.done) {
          if (res.failed) {
            finalize_dpba(batch.steps.size() - 1, nullptr);
          } else {
            const Vec next_in = policy_input(res.next_state);
            const Vec a_next = policy_.sample(next_in, policy_rng_).action;
            const Vec x_next = encode_state_action(space, res.next_state, a_next);
            finalize_dpba(batch.steps.size() - 1, &x_next);
          }
        } else {
          pending = batch.steps.size() - 1;
        }
      }

      if (total % cfg_.eval_every == 0) {
        art.records.push_back(evaluate(total, weight_count > 0 ? weight_sum / static_cast<double>(weight_count) : 0.0));
        weight_sum = 0.0;
        weight_count = 0;
      }

      if (res.done) {
        if (batch.size() >= cfg_.update_period) {
          update(batch);
          batch.steps.clear();
          if (over_time()) {
            art.status = RunStatus::time_limit;
            art.message = "wall-clock budget exhausted after " + std::to_string(total) + " steps";
            break;
          }
        }
        obs = env_->reset(env_rng_);
      } else {
        obs = res.next_state;
      }
    }
  } catch (const NumericError& e) {
    art.status = RunStatus::numeric_failure;
    art.message = e.what();
  }

  art.steps = total;
  art.policy = policy_;
  art.value = value_;
  art.weight_fn = wf_;
  art.rng_state = serialize_rng(env_rng_);
  return art;
}

void Trainer::update(const Batch& lower) {
  const GaeResult gae = compute_gae(lower, value_, cfg_.gamma, cfg_.lambda, RewardChannel::modified);
  const double scale = meta_step_scale(cfg_.ppo.policy_lr, lower.size(), cfg_.ppo.reduction);

  if (upper_enabled()) {
    switch (meta_method(cfg_.method)) {
      case MetaMethod::mgl: {
        // theta is a constant of phi in MGL: h restarts from zero every iteration
        meta_.reset();
        if (meta_.rows() * meta_.cols() <= kDenseExactBudget) meta_.densify(kDenseExactBudget);
        meta_.add_outer(lower_policy_grads(lower, policy_, *wf_), shaping_credit(lower, *wf_, cfg_.gamma), scale);
        break;
      }
      case MetaMethod::imgl:
        imgl_step(meta_, lower, policy_, *wf_, scale, mc_returns(lower, cfg_.gamma), cfg_.gamma);
        break;
      case MetaMethod::em: break;
    }
  }

  ppo_.update(policy_, value_, lower, gae.advantages, gae.returns, shuffle_rng_);

  if (!upper_enabled()) return;
  const Batch upper = cfg_.reuse_rollouts ? lower : collect_upper(cfg_.upper_steps);
  const GaeResult ug = compute_gae(upper, true_value_, cfg_.gamma, cfg_.lambda, RewardChannel::true_reward);
  fit_value(true_value_, true_value_opt_, upper.observations(), ug.returns, cfg_.true_value_epochs,
            cfg_.upper_minibatch, upper_shuffle_rng_);
  upper_update(upper, normalize_advantages(ug.advantages));
}

void Trainer::upper_update(const Batch& upper, const Vec& adv) {
  const MetaMethod mm = meta_method(cfg_.method);
  const Mat obs = upper.observations();
  const Mat actions = upper.actions();
  const Mat inputs = mm == MetaMethod::em ? Mat() : upper.inputs();
  for (int epoch = 0; epoch < cfg_.upper_epochs; ++epoch) {
    for (const auto& idx : minibatch_indices(upper.size(), cfg_.upper_minibatch, upper_shuffle_rng_)) {
      const Vec a = gather_vec(adv, idx);
      Vec g;
      if (mm == MetaMethod::em) {
        g = em_upper_grad(gather_cols(obs, idx), gather_cols(actions, idx), a, policy_, *wf_).data();
      } else {
        const Vec u = upper_policy_direction(gather_cols(inputs, idx), gather_cols(actions, idx), a, policy_).data();
        g = meta_.apply_transpose(u);
      }
      Vec phi = wf_->params().data();
      phi_opt_.ascend(phi, std::move(g));
      wf_->set_params(phi);
    }
  }
}

Batch Trainer::collect_upper(long min_steps) {
  Batch b;
  b.steps.reserve(static_cast<std::size_t>(min_steps + env_->max_steps()));
  while (b.size() < min_steps) {
    Vec obs = upper_env_->reset(upper_env_rng_);
    for (;;) {
      Transition tr;
      tr.obs = obs;
      tr.input = policy_input(obs);
      const Policy::Sample smp = policy_.sample(tr.input, upper_policy_rng_);
      tr.action = smp.action;
      tr.log_prob = smp.log_prob;
      const StepResult res = upper_env_->step(tr.action, upper_env_rng_);
      tr.applied = res.applied_action;
      tr.next_obs = res.next_state;
      tr.r_true = res.true_reward;
      tr.r_mod = res.true_reward;
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

EvalRecord Trainer::evaluate(long step, double mean_weight) {
  EvalRecord rec;
  rec.step = step;
  rec.mean_weight = mean_weight;
  rec.seed = seed_;
  const bool cartpole = is_cartpole(cfg_.env);
  double metric_sum = 0.0;
  double torque_sum = 0.0;
  long torque_steps = 0;
  for (int ep = 0; ep < cfg_.eval_episodes; ++ep) {
    Vec obs = eval_env_->reset(eval_rng_);
    double ret = 0.0;
    int steps = 0;
    for (;;) {
      const Vec input = policy_input(obs);
      const Vec a = policy_.sample(input, eval_rng_).action;
      const StepResult res = eval_env_->step(a, eval_rng_);
      ret += res.true_reward;
      ++steps;
      torque_sum += res.applied_action.cwiseAbs().mean();
      ++torque_steps;
      if (res.done) break;
      obs = res.next_state;
    }
    metric_sum += cartpole ? static_cast<double>(steps) : ret;
  }
  rec.metric = metric_sum / static_cast<double>(std::max(cfg_.eval_episodes, 1));
  if (!cartpole && torque_steps > 0) rec.mean_torque = torque_sum / static_cast<double>(torque_steps);
  return rec;
}

RunArtifacts bipars_train(const TrainConfig& cfg, std::uint64_t seed) { return Trainer(cfg, seed).run(); }

}  // namespace bipars
