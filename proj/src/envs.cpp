#include "bipars/envs.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace bipars {

void Env::require_live() const {
  if (done_) throw EpisodeFinishedError(id() + ": step called on a finished episode; call reset first");
}

// ---------------------------------------------------------------------------
// Cartpole

Vec CartpoleState::to_vec() const {
  Vec v(4);
  v << cart_position, cart_velocity, pole_angle, pole_angular_velocity;
  return v;
}

CartpoleState CartpoleState::from_vec(const Vec& v) {
  if (v.size() != 4) throw ShapeError("cartpole state must have 4 components");
  return {v[0], v[1], v[2], v[3]};
}

CartpoleState cartpole_dynamics(const CartpoleState& s, double force, const CartpoleParams& p) {
  const double total_mass = p.cart_mass + p.pole_mass;
  const double pole_mass_length = p.pole_mass * p.half_length;
  const double cos_t = std::cos(s.pole_angle);
  const double sin_t = std::sin(s.pole_angle);
  const double temp = (force + pole_mass_length * s.pole_angular_velocity * s.pole_angular_velocity * sin_t) / total_mass;
  const double theta_acc =
      (p.gravity * sin_t - cos_t * temp) / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos_t * cos_t / total_mass));
  const double x_acc = temp - pole_mass_length * theta_acc * cos_t / total_mass;

  CartpoleState n;
  n.cart_velocity = s.cart_velocity + p.dt * x_acc;
  n.cart_position = s.cart_position + p.dt * n.cart_velocity;
  n.pole_angular_velocity = s.pole_angular_velocity + p.dt * theta_acc;
  n.pole_angle = s.pole_angle + p.dt * n.pole_angular_velocity;
  return n;
}

bool cartpole_out_of_bounds(const CartpoleState& s, const CartpoleParams& p) {
  return std::abs(s.cart_position) > p.x_threshold || std::abs(s.pole_angle) > p.theta_threshold;
}

CartpoleEnv::CartpoleEnv(bool continuous, CartpoleParams params) : continuous_(continuous), params_(params) {
  state_ = Vec::Zero(4);
}

ActionSpace CartpoleEnv::action_space() const {
  if (continuous_) return {ActionKind::continuous, 1, -1.0, 1.0};
  return {ActionKind::discrete, 2, 0.0, 0.0};
}

Vec CartpoleEnv::reset(Rng& rng) {
  std::uniform_real_distribution<double> u(-params_.reset_range, params_.reset_range);
  state_.resize(4);
  for (Index i = 0; i < 4; ++i) state_[i] = u(rng);
  done_ = false;
  steps_ = 0;
  return state_;
}

void CartpoleEnv::set_state(const CartpoleState& s) {
  state_ = s.to_vec();
  done_ = false;
  steps_ = 0;
}

double CartpoleEnv::force_for(const Vec& action) const {
  if (action.size() != 1) throw ShapeError("cartpole expects a single action component");
  if (!continuous_) {
    const long idx = std::lround(action[0]);
    if (idx != 0 && idx != 1) throw std::out_of_range("cartpole discrete action must be 0 or 1");
    return idx == 1 ? params_.force_mag : -params_.force_mag;
  }
  return params_.force_mag * std::clamp(action[0], -1.0, 1.0);
}

StepResult CartpoleEnv::step(const Vec& action, Rng& /*rng*/) {
  require_live();
  const double force = force_for(action);
  const CartpoleState next = cartpole_dynamics(CartpoleState::from_vec(state_), force, params_);
  state_ = next.to_vec();
  ++steps_;

  StepResult r;
  r.next_state = state_;
  r.applied_action = Vec::Constant(1, force);
  r.steps_elapsed = steps_;
  if (cartpole_out_of_bounds(next, params_)) {
    r.failed = true;
    r.true_reward = -1.0;
  } else if (steps_ >= params_.max_steps) {
    r.truncated = true;
  }
  r.done = r.failed || r.truncated;
  done_ = r.done;
  return r;
}

// ---------------------------------------------------------------------------
// Torque line

TorqueLineEnv::TorqueLineEnv(Index joints, double beta, int max_steps)
    : joints_(joints), beta_(beta), max_steps_(max_steps) {
  if (joints_ <= 0) throw std::invalid_argument("torque-line needs at least one joint");
  if (!(beta_ >= 0.0 && beta_ < 1.0)) throw std::invalid_argument("torque-line beta must lie in [0, 1)");
  state_ = Vec::Zero(joints_);
}

ActionSpace TorqueLineEnv::action_space() const { return {ActionKind::continuous, joints_, -1.0, 1.0}; }

Vec TorqueLineEnv::reset(Rng& rng) {
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  state_.resize(joints_);
  for (Index i = 0; i < joints_; ++i) state_[i] = u(rng);
  done_ = false;
  steps_ = 0;
  return state_;
}

void TorqueLineEnv::set_state(const Vec& velocities) {
  if (velocities.size() != joints_) throw ShapeError("torque-line state length mismatch");
  state_ = velocities;
  done_ = false;
  steps_ = 0;
}

StepResult TorqueLineEnv::step(const Vec& action, Rng& /*rng*/) {
  require_live();
  if (action.size() != joints_) throw ShapeError("torque-line action must have one entry per joint");
  const Vec torque = action.cwiseMax(-1.0).cwiseMin(1.0);
  state_ = beta_ * state_ + (1.0 - beta_) * torque;
  ++steps_;

  StepResult r;
  r.next_state = state_;
  r.applied_action = torque;
  r.true_reward = state_.mean();
  r.steps_elapsed = steps_;
  r.truncated = steps_ >= max_steps_;
  r.done = r.truncated;
  done_ = r.done;
  return r;
}

double TorqueLineEnv::max_action_reward(int t, double beta, double v0) {
  return 1.0 - std::pow(beta, t) * (1.0 - v0);
}

// ---------------------------------------------------------------------------
// Tabular

void TabularMdp::validate() {
  if (num_states <= 0 || num_actions <= 0) throw std::invalid_argument("tabular MDP needs positive state/action counts");
  const std::size_t expected = static_cast<std::size_t>(num_states) * num_actions * num_states;
  if (P.size() != expected) throw ShapeError("transition tensor has the wrong size");
  if (r.rows() != num_states || r.cols() != num_actions) throw ShapeError("reward table has the wrong shape");
  if (p0.size() != num_states) throw ShapeError("initial distribution has the wrong length");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("discount must lie in [0, 1)");
  if (horizon <= 0) throw std::invalid_argument("horizon must be positive");
  if (!r.allFinite()) throw std::invalid_argument("rewards must be finite");

  auto normalize = [](double* row, int len, const std::string& what) {
    double sum = 0.0;
    for (int i = 0; i < len; ++i) {
      if (!(row[i] >= 0.0)) throw std::invalid_argument(what + " has a negative or NaN entry");
      sum += row[i];
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      std::ostringstream os;
      os.precision(17);
      os << what << " sums to " << sum << ", not 1";
      throw std::invalid_argument(os.str());
    }
    for (int i = 0; i < len; ++i) row[i] /= sum;
  };
  for (int s = 0; s < num_states; ++s)
    for (int a = 0; a < num_actions; ++a)
      normalize(&prob(s, a, 0), num_states, "P[" + std::to_string(s) + "][" + std::to_string(a) + "]");
  normalize(p0.data(), num_states, "p0");
}

TabularMdp TabularMdp::from_json_text(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  TabularMdp m;
  m.num_states = j.at("num_states").get<int>();
  m.num_actions = j.at("num_actions").get<int>();
  m.gamma = j.at("gamma").get<double>();
  m.horizon = j.at("horizon").get<int>();
  if (m.num_states <= 0 || m.num_actions <= 0) throw std::invalid_argument("tabular MDP needs positive state/action counts");
  const auto& P = j.at("P");
  const auto& r = j.at("r");
  const auto& p0 = j.at("p0");
  if (P.size() != static_cast<std::size_t>(m.num_states) || r.size() != static_cast<std::size_t>(m.num_states) ||
      p0.size() != static_cast<std::size_t>(m.num_states))
    throw ShapeError("tabular MDP arrays do not match num_states");
  m.P.assign(static_cast<std::size_t>(m.num_states) * m.num_actions * m.num_states, 0.0);
  m.r.resize(m.num_states, m.num_actions);
  m.p0.resize(m.num_states);
  for (int s = 0; s < m.num_states; ++s) {
    if (P[s].size() != static_cast<std::size_t>(m.num_actions) || r[s].size() != static_cast<std::size_t>(m.num_actions))
      throw ShapeError("tabular MDP arrays do not match num_actions");
    for (int a = 0; a < m.num_actions; ++a) {
      if (P[s][a].size() != static_cast<std::size_t>(m.num_states)) throw ShapeError("transition row has wrong length");
      for (int s2 = 0; s2 < m.num_states; ++s2) m.prob(s, a, s2) = P[s][a][s2].get<double>();
      m.r(s, a) = r[s][a].get<double>();
    }
    m.p0[s] = p0[s].get<double>();
  }
  m.validate();
  return m;
}

TabularMdp TabularMdp::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open tabular MDP file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string TabularMdp::to_json_text() const {
  nlohmann::json j;
  j["num_states"] = num_states;
  j["num_actions"] = num_actions;
  j["gamma"] = gamma;
  j["horizon"] = horizon;
  auto P_json = nlohmann::json::array();
  auto r_json = nlohmann::json::array();
  for (int s = 0; s < num_states; ++s) {
    auto ps = nlohmann::json::array();
    auto rs = nlohmann::json::array();
    for (int a = 0; a < num_actions; ++a) {
      auto row = nlohmann::json::array();
      for (int s2 = 0; s2 < num_states; ++s2) row.push_back(prob(s, a, s2));
      ps.push_back(row);
      rs.push_back(r(s, a));
    }
    P_json.push_back(ps);
    r_json.push_back(rs);
  }
  j["P"] = P_json;
  j["r"] = r_json;
  j["p0"] = std::vector<double>(p0.data(), p0.data() + p0.size());
  return j.dump(2);
}

TabularMdp TabularMdp::random(int states, int actions, double gamma, Rng& rng, int horizon) {
  TabularMdp m;
  m.num_states = states;
  m.num_actions = actions;
  m.gamma = gamma;
  m.horizon = horizon;
  m.P.assign(static_cast<std::size_t>(states) * actions * states, 0.0);
  std::exponential_distribution<double> ex(1.0);
  std::uniform_real_distribution<double> ur(-1.0, 1.0);
  for (int s = 0; s < states; ++s)
    for (int a = 0; a < actions; ++a) {
      double sum = 0.0;
      for (int s2 = 0; s2 < states; ++s2) sum += (m.prob(s, a, s2) = ex(rng));
      for (int s2 = 0; s2 < states; ++s2) m.prob(s, a, s2) /= sum;
    }
  m.r.resize(states, actions);
  for (int s = 0; s < states; ++s)
    for (int a = 0; a < actions; ++a) m.r(s, a) = ur(rng);
  m.p0.resize(states);
  for (int s = 0; s < states; ++s) m.p0[s] = ex(rng);
  m.p0 /= m.p0.sum();
  m.validate();
  return m;
}

TabularStep tabular_step(const TabularMdp& mdp, int state, int action, Rng& rng) {
  if (state < 0 || state >= mdp.num_states) throw std::out_of_range("tabular state index out of range");
  if (action < 0 || action >= mdp.num_actions) throw std::out_of_range("tabular action index out of range");
  const double u = uniform01(rng);
  double acc = 0.0;
  int next = mdp.num_states - 1;
  for (int s2 = 0; s2 < mdp.num_states; ++s2) {
    acc += mdp.prob(state, action, s2);
    if (u < acc) {
      next = s2;
      break;
    }
  }
  // rounding at the tail: fall back to the last state with positive mass
  while (mdp.prob(state, action, next) == 0.0 && next > 0) --next;
  return {next, mdp.r(state, action)};
}

TabularEnv::TabularEnv(TabularMdp mdp, std::string source) : mdp_(std::move(mdp)), source_(std::move(source)) {
  mdp_.validate();
  state_ = Vec::Zero(mdp_.num_states);
}

Vec TabularEnv::reset(Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  index_ = mdp_.num_states - 1;
  for (int s = 0; s < mdp_.num_states; ++s) {
    acc += mdp_.p0[s];
    if (u < acc) {
      index_ = s;
      break;
    }
  }
  state_ = Vec::Zero(mdp_.num_states);
  state_[index_] = 1.0;
  done_ = false;
  steps_ = 0;
  return state_;
}

StepResult TabularEnv::step(const Vec& action, Rng& rng) {
  require_live();
  if (action.size() != 1) throw ShapeError("tabular action must be a single index");
  const int a = static_cast<int>(std::lround(action[0]));
  const TabularStep t = tabular_step(mdp_, index_, a, rng);
  index_ = t.next_state;
  state_ = Vec::Zero(mdp_.num_states);
  state_[index_] = 1.0;
  ++steps_;
  StepResult r;
  r.next_state = state_;
  r.true_reward = t.reward;
  r.applied_action = action;
  r.steps_elapsed = steps_;
  r.truncated = steps_ >= mdp_.horizon;
  r.done = r.truncated;
  done_ = r.done;
  return r;
}

std::unique_ptr<Env> make_env(const std::string& id, Index torque_joints) {
  if (id == "cartpole-discrete") return std::make_unique<CartpoleEnv>(false);
  if (id == "cartpole-continuous") return std::make_unique<CartpoleEnv>(true);
  if (id == "torque-line") return std::make_unique<TorqueLineEnv>(torque_joints);
  if (id.rfind("tabular:", 0) == 0) {
    const std::string path = id.substr(8);
    return std::make_unique<TabularEnv>(TabularMdp::load(path), path);
  }
  throw std::invalid_argument("unknown environment id: " + id);
}

}  // namespace bipars
