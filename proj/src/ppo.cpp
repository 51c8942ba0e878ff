#include "bipars/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bipars {

namespace {

template <class F>
Mat stack_columns(const std::vector<Transition>& steps, F&& get) {
  if (steps.empty()) return Mat();
  const Index rows = get(steps.front()).size();
  Mat m(rows, static_cast<Index>(steps.size()));
  for (std::size_t j = 0; j < steps.size(); ++j) {
    const Vec& v = get(steps[j]);
    if (v.size() != rows) throw ShapeError("batch: ragged transition fields");
    m.col(static_cast<Index>(j)) = v;
  }
  return m;
}

Mat gather(const Mat& m, const std::vector<Index>& idx) {
  Mat out(m.rows(), static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Index>(j)) = m.col(idx[j]);
  return out;
}

Vec gather(const Vec& v, const std::vector<Index>& idx) {
  Vec out(static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out[static_cast<Index>(j)] = v[idx[j]];
  return out;
}

}  // namespace

std::vector<std::pair<Index, Index>> Batch::episodes() const {
  std::vector<std::pair<Index, Index>> out;
  Index begin = 0;
  for (Index t = 0; t < size(); ++t)
    if (steps[static_cast<std::size_t>(t)].done) {
      out.emplace_back(begin, t + 1);
      begin = t + 1;
    }
  if (begin < size()) out.emplace_back(begin, size());
  return out;
}

Index Batch::num_episodes() const {
  return std::count_if(steps.begin(), steps.end(), [](const Transition& t) { return t.done; });
}

Mat Batch::inputs() const { return stack_columns(steps, [](const Transition& t) -> const Vec& { return t.input; }); }
Mat Batch::actions() const { return stack_columns(steps, [](const Transition& t) -> const Vec& { return t.action; }); }
Mat Batch::observations() const { return stack_columns(steps, [](const Transition& t) -> const Vec& { return t.obs; }); }
Mat Batch::next_observations() const {
  return stack_columns(steps, [](const Transition& t) -> const Vec& { return t.next_obs; });
}
Mat Batch::weight_inputs() const {
  return stack_columns(steps, [](const Transition& t) -> const Vec& { return t.weight_input; });
}

Vec Batch::rewards_true() const {
  Vec r(size());
  for (Index t = 0; t < size(); ++t) r[t] = steps[static_cast<std::size_t>(t)].r_true;
  return r;
}

Vec Batch::rewards_mod() const {
  Vec r(size());
  for (Index t = 0; t < size(); ++t) r[t] = steps[static_cast<std::size_t>(t)].r_mod;
  return r;
}

Vec Batch::log_probs() const {
  Vec r(size());
  for (Index t = 0; t < size(); ++t) r[t] = steps[static_cast<std::size_t>(t)].log_prob;
  return r;
}

Batch Batch::subset(const std::vector<Index>& idx) const {
  Batch b;
  b.steps.reserve(idx.size());
  for (Index i : idx) b.steps.push_back(steps.at(static_cast<std::size_t>(i)));
  return b;
}

void Batch::append(const Batch& other) { steps.insert(steps.end(), other.steps.begin(), other.steps.end()); }

GaeResult compute_gae(const Batch& batch, const Vec& values, const Vec& next_values, double gamma, double lambda,
                      RewardChannel channel) {
  const Index n = batch.size();
  if (n == 0) throw std::invalid_argument("compute_gae: empty trajectory");
  if (values.size() != n || next_values.size() != n) throw ShapeError("compute_gae: value length mismatch");
  GaeResult out;
  out.advantages.resize(n);
  double carry = 0.0;
  for (Index t = n - 1; t >= 0; --t) {
    const Transition& tr = batch.steps[static_cast<std::size_t>(t)];
    const double r = channel == RewardChannel::true_reward ? tr.r_true : tr.r_mod;
    const double boot = tr.failed ? 0.0 : next_values[t];
    const double delta = r + gamma * boot - values[t];
    if (tr.done) carry = 0.0;
    carry = delta + gamma * lambda * carry;
    out.advantages[t] = carry;
  }
  out.returns = out.advantages + values;
  return out;
}

GaeResult compute_gae(const Batch& batch, const MlpNet& value_fn, double gamma, double lambda, RewardChannel channel) {
  if (batch.empty()) throw std::invalid_argument("compute_gae: empty trajectory");
  return compute_gae(batch, value_predict(value_fn, batch.observations()),
                     value_predict(value_fn, batch.next_observations()), gamma, lambda, channel);
}

double mc_return(const Batch& batch, Index start, double gamma) {
  if (start < 0 || start >= batch.size()) throw std::out_of_range("mc_return: start index outside trajectory");
  double g = 0.0;
  double discount = 1.0;
  for (Index t = start; t < batch.size(); ++t) {
    const Transition& tr = batch.steps[static_cast<std::size_t>(t)];
    g += discount * tr.r_mod;
    discount *= gamma;
    if (tr.done) break;
  }
  return g;
}

Vec mc_returns(const Batch& batch, double gamma, RewardChannel channel) {
  Vec g(batch.size());
  double carry = 0.0;
  for (Index t = batch.size() - 1; t >= 0; --t) {
    const Transition& tr = batch.steps[static_cast<std::size_t>(t)];
    if (tr.done) carry = 0.0;
    carry = (channel == RewardChannel::true_reward ? tr.r_true : tr.r_mod) + gamma * carry;
    g[t] = carry;
  }
  return g;
}

Vec normalize_advantages(const Vec& adv) {
  if (adv.size() <= 1) return adv;
  const double mean = adv.mean();
  Vec c = adv.array() - mean;
  const double sd = std::sqrt(c.squaredNorm() / static_cast<double>(adv.size()));
  if (sd > 0.0) c /= sd;
  // second pass removes the rounding left in the mean
  c.array() -= c.mean();
  return c;
}

MlpNet make_value_net(Index obs_dim, const std::vector<Index>& hidden, Activation act) {
  std::vector<Index> sizes{obs_dim};
  std::vector<Activation> acts;
  for (Index h : hidden) {
    sizes.push_back(h);
    acts.push_back(act);
  }
  sizes.push_back(1);
  acts.push_back(Activation::identity);
  return MlpNet(sizes, acts);
}

Vec value_predict(const MlpNet& value_fn, const Mat& obs) { return value_fn.predict_batch(obs).row(0).transpose(); }

LossReduction parse_reduction(std::string_view name) {
  if (name == "mean") return LossReduction::mean;
  if (name == "sum") return LossReduction::sum;
  throw std::invalid_argument("unknown loss reduction: " + std::string(name));
}

SurrogateResult clipped_surrogate(const Policy& policy, const Mat& inputs, const Mat& actions, const Vec& old_log_prob,
                                  const Vec& adv, double clip_eps, LossReduction reduction) {
  const Index B = inputs.cols();
  const PolicyEval ev = policy.evaluate(inputs, actions);
  SurrogateResult out;
  out.ratio = (ev.log_prob - old_log_prob).array().exp();
  Vec w = Vec::Zero(B);
  double objective = 0.0;
  Index clipped = 0;
  for (Index j = 0; j < B; ++j) {
    const double r = out.ratio[j];
    const double rc = std::clamp(r, 1.0 - clip_eps, 1.0 + clip_eps);
    const double unclipped = r * adv[j];
    const double clipped_obj = rc * adv[j];
    objective += std::min(unclipped, clipped_obj);
    // gradient flows only through the unclipped branch when it is the minimum
    if (unclipped <= clipped_obj) w[j] = adv[j] * r;
    if (r < 1.0 - clip_eps || r > 1.0 + clip_eps) ++clipped;
  }
  const double scale = reduction == LossReduction::mean ? 1.0 / static_cast<double>(B) : 1.0;
  out.loss = -objective * scale;
  if (!std::isfinite(out.loss)) throw NumericError("PPO surrogate loss is not finite");
  out.grad = policy.weighted_grad(ev, w * -scale);
  out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(B);
  return out;
}

std::pair<double, ParamVector> value_loss(const MlpNet& value_fn, const Mat& obs, const Vec& targets,
                                          LossReduction reduction) {
  const ForwardTape tape = value_fn.forward_batch(obs);
  const Vec err = tape.output().row(0).transpose() - targets;
  const double scale = reduction == LossReduction::mean ? 1.0 / static_cast<double>(obs.cols()) : 1.0;
  const double loss = 0.5 * err.squaredNorm() * scale;
  if (!std::isfinite(loss)) throw NumericError("value loss is not finite");
  return {loss, value_fn.grad_params(tape, err.transpose() * scale)};
}

std::vector<std::vector<Index>> minibatch_indices(Index n, Index minibatch, Rng& rng) {
  if (minibatch <= 0) throw std::invalid_argument("minibatch size must be positive");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  // Fisher-Yates on raw draws; std::shuffle differs across standard libraries
  for (Index i = n - 1; i > 0; --i) {
    const Index j = static_cast<Index>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  std::vector<std::vector<Index>> out;
  if (n < minibatch) {
    if (n > 0) out.push_back(perm);
    return out;
  }
  for (Index start = 0; start + minibatch <= n; start += minibatch)
    out.emplace_back(perm.begin() + start, perm.begin() + start + minibatch);
  return out;
}

PpoLearner::PpoLearner(const Policy& policy, const MlpNet& value_fn, PpoConfig cfg) : cfg_(cfg) {
  policy_opt_ = Optimizer(policy.num_params(), {cfg_.optimizer, cfg_.policy_lr, 0.9, 0.999, 1e-8, cfg_.policy_clip_norm});
  value_opt_ = Optimizer(value_fn.num_params(), {cfg_.optimizer, cfg_.value_lr, 0.9, 0.999, 1e-8, cfg_.value_clip_norm});
}

PpoStats PpoLearner::update(Policy& policy, MlpNet& value_fn, const Batch& batch, const Vec& advantages,
                            const Vec& returns, Rng& shuffle_rng) {
  const Index n = batch.size();
  if (n < cfg_.minibatch) throw std::invalid_argument("PPO batch is smaller than one minibatch");
  if (advantages.size() != n || returns.size() != n) throw ShapeError("PPO: advantage/return length mismatch");
  const Mat inputs = batch.inputs();
  const Mat actions = batch.actions();
  const Mat obs = batch.observations();
  const Vec old_lp = batch.log_probs();
  const Vec adv = cfg_.normalize_advantages ? normalize_advantages(advantages) : advantages;

  PpoStats stats;
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    for (const auto& idx : minibatch_indices(n, cfg_.minibatch, shuffle_rng)) {
      const SurrogateResult s = clipped_surrogate(policy, gather(inputs, idx), gather(actions, idx), gather(old_lp, idx),
                                                  gather(adv, idx), cfg_.clip_eps, cfg_.reduction);
      Vec theta = policy.params().data();
      policy_opt_.descend(theta, s.grad.data());
      policy.set_params(theta);

      auto [vl, vg] = value_loss(value_fn, gather(obs, idx), gather(returns, idx), cfg_.reduction);
      Vec w = value_fn.params().data();
      value_opt_.descend(w, cfg_.value_coef * vg.data());
      value_fn.set_params(w);

      stats.policy_loss += s.loss;
      stats.value_loss += vl;
      stats.clip_fraction += s.clip_fraction;
      ++stats.minibatches;
    }
  }
  if (stats.minibatches > 0) {
    const double k = static_cast<double>(stats.minibatches);
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.clip_fraction /= k;
  }
  return stats;
}

void fit_value(MlpNet& value_fn, Optimizer& opt, const Mat& obs, const Vec& targets, int epochs, Index minibatch,
               Rng& shuffle_rng) {
  for (int e = 0; e < epochs; ++e)
    for (const auto& idx : minibatch_indices(obs.cols(), minibatch, shuffle_rng)) {
      auto [loss, g] = value_loss(value_fn, gather(obs, idx), gather(targets, idx), LossReduction::mean);
      Vec w = value_fn.params().data();
      opt.descend(w, g.data());
      value_fn.set_params(w);
    }
}

}  // namespace bipars
