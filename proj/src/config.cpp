#include "bipars/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace bipars {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double to_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

template <typename T>
T to_integer(const std::string& s) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError("not an integer: '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::vector<Index> to_sizes(const std::string& s) {
  std::vector<Index> out;
  if (s.empty() || s == "none") return out;
  for (const auto& part : split(s, ',')) out.push_back(to_integer<Index>(part));
  return out;
}

std::string fmt_sizes(const std::vector<Index>& v) {
  if (v.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

Activation to_activation(const std::string& s) {
  try {
    return parse_activation(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

template <typename F>
auto rethrow_as_config(F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  bool model = false;
};

#define BIPARS_DOUBLE(sec, name, expr)                                          \
  Field {                                                                       \
    sec, name, [](const RunConfig& c) { return fmt(c.expr); },                  \
        [](RunConfig& c, const std::string& v) { c.expr = to_double(v); }       \
  }
#define BIPARS_INT(sec, name, expr, T)                                          \
  Field {                                                                       \
    sec, name, [](const RunConfig& c) { return std::to_string(c.expr); },       \
        [](RunConfig& c, const std::string& v) { c.expr = to_integer<T>(v); }   \
  }
#define BIPARS_BOOL(sec, name, expr)                                            \
  Field {                                                                       \
    sec, name, [](const RunConfig& c) { return fmt_bool(c.expr); },             \
        [](RunConfig& c, const std::string& v) { c.expr = to_bool(v); }        \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"experiment", "env", [](const RunConfig& c) { return c.train.env; },
                 [](RunConfig& c, const std::string& v) { c.train.env = v; }, true});
    f.push_back({"experiment", "torque_joints", [](const RunConfig& c) { return std::to_string(c.train.torque_joints); },
                 [](RunConfig& c, const std::string& v) { c.train.torque_joints = to_integer<Index>(v); }, true});
    f.push_back({"experiment", "shaping", [](const RunConfig& c) { return c.train.shaping; },
                 [](RunConfig& c, const std::string& v) { c.train.shaping = v; }, true});
    f.push_back({"experiment", "table_seed", [](const RunConfig& c) { return std::to_string(c.train.table_seed); },
                 [](RunConfig& c, const std::string& v) { c.train.table_seed = to_integer<std::uint64_t>(v); }, true});
    f.push_back({"experiment", "task_weight", [](const RunConfig& c) { return fmt(c.train.task_weight); },
                 [](RunConfig& c, const std::string& v) { c.train.task_weight = to_double(v); }, true});
    f.push_back({"experiment", "method", [](const RunConfig& c) { return std::string(to_string(c.train.method)); },
                 [](RunConfig& c, const std::string& v) {
                   c.train.method = rethrow_as_config([&] { return parse_method(v); });
                 },
                 true});
    f.push_back({"experiment", "seeds",
                 [](const RunConfig& c) {
                   std::string out;
                   for (std::size_t i = 0; i < c.seeds.size(); ++i) out += (i ? "," : "") + std::to_string(c.seeds[i]);
                   return out;
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.seeds.clear();
                   for (const auto& s : split(v, ',')) c.seeds.push_back(to_integer<std::uint64_t>(s));
                 }});
    f.push_back(BIPARS_INT("experiment", "total_steps", train.total_steps, long));
    f.push_back(BIPARS_INT("experiment", "eval_every", train.eval_every, long));
    f.push_back(BIPARS_INT("experiment", "eval_episodes", train.eval_episodes, int));
    f.push_back({"experiment", "out_dir", [](const RunConfig& c) { return c.out_dir; },
                 [](RunConfig& c, const std::string& v) { c.out_dir = v; }});
    f.push_back(BIPARS_INT("experiment", "jobs", jobs, int));
    f.push_back(BIPARS_BOOL("experiment", "paper_scale", paper_scale));
    f.push_back(BIPARS_DOUBLE("experiment", "time_limit_s", train.time_limit_s));

    f.push_back(BIPARS_INT("ppo", "update_period", train.update_period, long));
    f.push_back(BIPARS_DOUBLE("ppo", "clip_eps", train.ppo.clip_eps));
    f.push_back(BIPARS_INT("ppo", "epochs", train.ppo.epochs, int));
    f.push_back(BIPARS_INT("ppo", "minibatch", train.ppo.minibatch, Index));
    f.push_back(BIPARS_DOUBLE("ppo", "policy_lr", train.ppo.policy_lr));
    f.push_back(BIPARS_DOUBLE("ppo", "value_lr", train.ppo.value_lr));
    f.push_back(BIPARS_DOUBLE("ppo", "value_coef", train.ppo.value_coef));
    f.push_back(BIPARS_DOUBLE("ppo", "policy_clip_norm", train.ppo.policy_clip_norm));
    f.push_back(BIPARS_DOUBLE("ppo", "value_clip_norm", train.ppo.value_clip_norm));
    f.push_back(BIPARS_BOOL("ppo", "normalize_advantages", train.ppo.normalize_advantages));
    f.push_back({"ppo", "optimizer", [](const RunConfig& c) { return std::string(to_string(c.train.ppo.optimizer)); },
                 [](RunConfig& c, const std::string& v) {
                   c.train.ppo.optimizer = rethrow_as_config([&] { return parse_optimizer(v); });
                 }});
    f.push_back({"ppo", "reduction",
                 [](const RunConfig& c) {
                   return std::string(c.train.ppo.reduction == LossReduction::mean ? "mean" : "sum");
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.train.ppo.reduction = rethrow_as_config([&] { return parse_reduction(v); });
                 }});
    f.push_back(BIPARS_DOUBLE("ppo", "gamma", train.gamma));
    f.push_back(BIPARS_DOUBLE("ppo", "lambda", train.lambda));
    f.push_back({"ppo", "policy_hidden", [](const RunConfig& c) { return fmt_sizes(c.train.policy.hidden); },
                 [](RunConfig& c, const std::string& v) { c.train.policy.hidden = to_sizes(v); }, true});
    f.push_back({"ppo", "policy_activation",
                 [](const RunConfig& c) { return std::string(to_string(c.train.policy.activation)); },
                 [](RunConfig& c, const std::string& v) { c.train.policy.activation = to_activation(v); }, true});
    f.push_back(BIPARS_DOUBLE("ppo", "init_log_std", train.policy.init_log_std));
    f.push_back(BIPARS_DOUBLE("ppo", "output_init_scale", train.policy.output_init_scale));
    f.push_back({"ppo", "value_hidden", [](const RunConfig& c) { return fmt_sizes(c.train.value_hidden); },
                 [](RunConfig& c, const std::string& v) { c.train.value_hidden = to_sizes(v); }, true});
    f.push_back({"ppo", "value_activation",
                 [](const RunConfig& c) { return std::string(to_string(c.train.value_activation)); },
                 [](RunConfig& c, const std::string& v) { c.train.value_activation = to_activation(v); }, true});

    f.push_back({"upper", "weight_hidden", [](const RunConfig& c) { return fmt_sizes(c.train.weight.hidden); },
                 [](RunConfig& c, const std::string& v) { c.train.weight.hidden = to_sizes(v); }, true});
    f.push_back({"upper", "weight_activation",
                 [](const RunConfig& c) { return std::string(to_string(c.train.weight.activation)); },
                 [](RunConfig& c, const std::string& v) { c.train.weight.activation = to_activation(v); }, true});
    f.push_back({"upper", "weight_clip",
                 [](const RunConfig& c) {
                   const auto& cl = c.train.weight.clip;
                   return cl ? fmt(cl->first) + "," + fmt(cl->second) : std::string("none");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "none" || v.empty()) {
                     c.train.weight.clip.reset();
                     return;
                   }
                   const auto parts = split(v, ',');
                   if (parts.size() != 2) throw ConfigError("weight_clip takes 'low,high' or 'none'");
                   c.train.weight.clip = std::make_pair(to_double(parts[0]), to_double(parts[1]));
                 },
                 true});
    f.push_back(BIPARS_DOUBLE("upper", "phi_lr", train.phi_lr));
    f.push_back(BIPARS_DOUBLE("upper", "phi_clip_norm", train.phi_clip_norm));
    f.push_back(BIPARS_INT("upper", "upper_epochs", train.upper_epochs, int));
    f.push_back(BIPARS_INT("upper", "upper_minibatch", train.upper_minibatch, Index));
    f.push_back(BIPARS_INT("upper", "upper_steps", train.upper_steps, long));
    f.push_back(BIPARS_BOOL("upper", "reuse_rollouts", train.reuse_rollouts));
    f.push_back(BIPARS_INT("upper", "true_value_epochs", train.true_value_epochs, int));
    f.push_back({"upper", "hessian", [](const RunConfig& c) { return std::string(to_string(c.train.hessian)); },
                 [](RunConfig& c, const std::string& v) {
                   c.train.hessian = rethrow_as_config([&] { return parse_hessian_mode(v); });
                 }});
    f.push_back({"upper", "hvp_mode",
                 [](const RunConfig& c) {
                   return std::string(c.train.hvp_mode == HvpMode::reverse ? "reverse" : "finite-difference");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "reverse")
                     c.train.hvp_mode = HvpMode::reverse;
                   else if (v == "finite-difference")
                     c.train.hvp_mode = HvpMode::finite_difference;
                   else
                     throw ConfigError("hvp_mode must be reverse or finite-difference");
                 }});
    f.push_back(BIPARS_BOOL("upper", "freeze_phi", train.freeze_phi));

    f.push_back({"dpba", "potential_hidden", [](const RunConfig& c) { return fmt_sizes(c.train.potential.hidden); },
                 [](RunConfig& c, const std::string& v) { c.train.potential.hidden = to_sizes(v); }, true});
    f.push_back({"dpba", "potential_activation",
                 [](const RunConfig& c) { return std::string(to_string(c.train.potential.activation)); },
                 [](RunConfig& c, const std::string& v) { c.train.potential.activation = to_activation(v); }, true});
    f.push_back(BIPARS_DOUBLE("dpba", "potential_lr", train.potential.lr));
    f.push_back(BIPARS_DOUBLE("dpba", "potential_clip_norm", train.potential.clip_norm));
    return f;
  }();
  return table;
}

#undef BIPARS_DOUBLE
#undef BIPARS_INT
#undef BIPARS_BOOL

const Field& find_field(const std::string& key) {
  const auto dot = key.find('.');
  const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
  const std::string bare = dot == std::string::npos ? key : key.substr(dot + 1);
  for (const auto& f : fields()) {
    if (f.key != bare) continue;
    if (!section.empty() && f.section != section)
      throw ConfigError("key '" + bare + "' belongs to section [" + f.section + "], not [" + section + "]");
    return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

bool cartpole_shaping(const std::string& id) { return id.rfind("cartpole-", 0) == 0; }

}  // namespace

RunConfig default_run_config(const std::string& env, const std::string& shaping, Method method, bool paper_scale) {
  RunConfig c;
  c.paper_scale = paper_scale;
  c.train.env = env;
  c.train.shaping = shaping;
  c.train.method = method;
  if (env == "torque-line") {
    c.train.total_steps = paper_scale ? 3'200'000 : 600'000;
    c.seeds = paper_scale ? std::vector<std::uint64_t>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                          : std::vector<std::uint64_t>{1, 2, 3, 4, 5};
    c.train.ppo.clip_eps = 0.2;
    c.train.ppo.policy_clip_norm = 1.0;
    c.train.ppo.value_clip_norm = 1.0;
    c.train.policy.hidden = paper_scale ? std::vector<Index>{64, 64, 64} : std::vector<Index>{16, 16};
    c.train.value_hidden = paper_scale ? std::vector<Index>{64, 64, 64} : std::vector<Index>{32, 32};
    c.train.potential.hidden = {64, 64};
    c.train.potential.clip_norm = 10.0;
    c.train.weight.clip = std::make_pair(-1.0, 1.0);
    c.train.phi_clip_norm = 10.0;
    c.train.phi_lr = 5e-4;
    if (paper_scale && uses_weight_fn(method) && meta_method(method) == MetaMethod::imgl)
      c.train.hessian = HessianMode::none;
  } else {
    c.train.total_steps = paper_scale ? 1'200'000 : 400'000;
    if (paper_scale) {
      c.seeds.clear();
      for (std::uint64_t s = 1; s <= 20; ++s) c.seeds.push_back(s);
    }
    c.train.phi_lr = shaping == "cartpole-beneficial" ? 1e-5 : 5e-4;
  }
  return c;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.section + "." + f.key);
  return out;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const Field& f = find_field(key);
  try {
    f.set(cfg, trim(value));
  } catch (const ConfigError& e) {
    throw ConfigError(f.key + ": " + e.what());
  }
}

std::string get_setting(const RunConfig& cfg, const std::string& key) { return find_field(key).get(cfg); }

RunConfig parse_config_text(const std::string& text, const RunConfig& base) {
  RunConfig cfg = base;
  std::vector<std::string> errors;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') {
        errors.push_back(where + "unterminated section header");
        continue;
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back(where + "expected 'key = value'");
      continue;
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    try {
      apply_setting(cfg, section.empty() ? key : section + "." + key, value);
    } catch (const ConfigError& e) {
      errors.push_back(where + e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

RunConfig load_config(const std::string& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), base);
}

std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    const std::string v = f.get(cfg);
    const bool quote = v.empty() || v.find_first_of(" #") != std::string::npos;
    out += f.key + " = " + (quote ? "\"" + v + "\"" : v) + "\n";
  }
  return out;
}

std::vector<std::string> validate(const RunConfig& cfg) {
  std::vector<std::string> errs;
  const TrainConfig& t = cfg.train;
  std::unique_ptr<Env> env;
  try {
    env = make_env(t.env, t.torque_joints);
  } catch (const std::exception& e) {
    errs.push_back(std::string("env: ") + e.what());
  }
  try {
    builtin_shaping(t.shaping, t.table_seed, t.task_weight);
  } catch (const std::exception& e) {
    errs.push_back(std::string("shaping: ") + e.what());
  }
  if (cartpole_shaping(t.shaping) && !is_cartpole(t.env))
    errs.push_back("shaping: " + t.shaping + " needs a cartpole env");
  if (t.shaping == "torque-constraint" && t.env != "torque-line")
    errs.push_back("shaping: torque-constraint needs the torque-line env");

  if (t.eval_every <= 0) errs.push_back("eval_every must be positive");
  if (t.total_steps < t.eval_every) errs.push_back("total_steps must be at least eval_every");
  if (t.eval_every > 0 && t.total_steps % t.eval_every != 0)
    errs.push_back("total_steps must be a multiple of eval_every");
  if (t.eval_episodes < 1) errs.push_back("eval_episodes must be at least 1");
  if (t.update_period < 1) errs.push_back("update_period must be positive");
  if (t.ppo.minibatch < 1) errs.push_back("minibatch must be positive");
  if (t.update_period < t.ppo.minibatch) errs.push_back("update_period must be at least one minibatch");
  if (t.ppo.epochs < 1) errs.push_back("epochs must be at least 1");
  if (!(t.ppo.clip_eps > 0.0)) errs.push_back("clip_eps must be positive");
  for (auto [name, v] : {std::pair{"policy_lr", t.ppo.policy_lr}, {"value_lr", t.ppo.value_lr},
                         {"phi_lr", t.phi_lr}, {"potential_lr", t.potential.lr},
                         {"policy_clip_norm", t.ppo.policy_clip_norm}, {"value_clip_norm", t.ppo.value_clip_norm},
                         {"phi_clip_norm", t.phi_clip_norm}, {"potential_clip_norm", t.potential.clip_norm},
                         {"time_limit_s", t.time_limit_s}, {"value_coef", t.ppo.value_coef}})
    if (!(v >= 0.0)) errs.push_back(std::string(name) + " must be non-negative");
  if (!(t.gamma >= 0.0 && t.gamma < 1.0)) errs.push_back("gamma must lie in [0, 1)");
  if (!(t.lambda >= 0.0 && t.lambda <= 1.0)) errs.push_back("lambda must lie in [0, 1]");
  if (t.upper_epochs < 1) errs.push_back("upper_epochs must be at least 1");
  if (t.upper_minibatch < 1) errs.push_back("upper_minibatch must be positive");
  if (t.upper_steps < 1) errs.push_back("upper_steps must be positive");
  if (t.true_value_epochs < 0) errs.push_back("true_value_epochs must be non-negative");
  if (t.torque_joints < 1) errs.push_back("torque_joints must be positive");
  if (t.weight.clip && !(t.weight.clip->first < t.weight.clip->second))
    errs.push_back("weight_clip needs low < high");
  for (auto [name, sizes] : {std::pair{"policy_hidden", &t.policy.hidden}, {"value_hidden", &t.value_hidden},
                             {"weight_hidden", &t.weight.hidden}, {"potential_hidden", &t.potential.hidden}})
    for (Index h : *sizes)
      if (h < 1) errs.push_back(std::string(name) + " sizes must be positive");
  if (cfg.seeds.empty()) errs.push_back("seeds must not be empty");
  if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size())
    errs.push_back("seeds must be distinct");
  if (cfg.jobs < 1) errs.push_back("jobs must be at least 1");

  if (env && errs.empty() && uses_weight_fn(t.method) && meta_method(t.method) == MetaMethod::imgl) {
    WeightFnSpec ws = t.weight;
    ws.single = is_single_weight(t.method);
    const Index m = WeightFn(env->state_dim(), env->action_space(), ws).num_params();
    const Index n = Policy(env->state_dim(), 0, env->action_space(), t.policy).num_params();
    const Index budget = t.hessian == HessianMode::exact ? kDenseExactBudget : kDenseBudget;
    if (n * m > budget)
      errs.push_back("imgl needs a " + std::to_string(n) + " x " + std::to_string(m) +
                     " meta-gradient matrix, over the budget of " + std::to_string(budget) +
                     "; use --hessian none or smaller networks");
  }
  return errs;
}

void require_valid(const RunConfig& cfg) {
  const auto errs = validate(cfg);
  if (errs.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& e : errs) msg += "\n  " + e;
  throw ConfigError(msg);
}

std::uint64_t model_hash(const RunConfig& cfg) {
  std::string text;
  for (const auto& f : fields())
    if (f.model) text += f.key + "=" + f.get(cfg) + "\n";
  return fnv1a(text);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace bipars
