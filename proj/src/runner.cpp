#include "bipars/runner.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace bipars {

namespace {

nlohmann::json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec json_vec(const nlohmann::json& j) {
  const auto vals = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(vals.data(), static_cast<Index>(vals.size()));
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint make_checkpoint(const RunConfig& cfg, std::uint64_t seed, const RunArtifacts& art) {
  Checkpoint ck;
  ck.model_hash = hex64(model_hash(cfg));
  ck.env = cfg.train.env;
  ck.method = std::string(to_string(cfg.train.method));
  ck.seed = seed;
  ck.steps = art.steps;
  ck.policy = art.policy.params().data();
  ck.value = art.value.params().data();
  if (art.weight_fn) ck.weight = art.weight_fn->params().data();
  ck.rng_state = art.rng_state;
  return ck;
}

std::string checkpoint_to_text(const Checkpoint& ck) {
  nlohmann::json payload;
  payload["model_hash"] = ck.model_hash;
  payload["env"] = ck.env;
  payload["method"] = ck.method;
  payload["seed"] = ck.seed;
  payload["steps"] = ck.steps;
  payload["policy"] = vec_json(ck.policy);
  payload["value"] = vec_json(ck.value);
  payload["weight"] = ck.weight ? vec_json(*ck.weight) : nlohmann::json(nullptr);
  payload["rng_state"] = ck.rng_state;
  const std::string body = payload.dump();
  nlohmann::json doc;
  doc["checksum"] = hex64(fnv1a(body));
  doc["payload"] = payload;
  return doc.dump(1) + "\n";
}

Checkpoint checkpoint_from_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ChecksumError(std::string("corrupt checkpoint: ") + e.what());
  }
  if (!doc.contains("checksum") || !doc.contains("payload")) throw ChecksumError("corrupt checkpoint: missing fields");
  const nlohmann::json& p = doc["payload"];
  if (hex64(fnv1a(p.dump())) != doc["checksum"].get<std::string>())
    throw ChecksumError("checkpoint checksum mismatch");
  try {
    Checkpoint ck;
    ck.model_hash = p.at("model_hash").get<std::string>();
    ck.env = p.at("env").get<std::string>();
    ck.method = p.at("method").get<std::string>();
    ck.seed = p.at("seed").get<std::uint64_t>();
    ck.steps = p.at("steps").get<long>();
    ck.policy = json_vec(p.at("policy"));
    ck.value = json_vec(p.at("value"));
    if (!p.at("weight").is_null()) ck.weight = json_vec(p.at("weight"));
    ck.rng_state = p.at("rng_state").get<std::string>();
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw ChecksumError(std::string("corrupt checkpoint: ") + e.what());
  }
}

void checkpoint_save(const std::string& path, const Checkpoint& ck) { write_file(path, checkpoint_to_text(ck)); }

Checkpoint checkpoint_load(const std::string& path) { return checkpoint_from_text(read_file(path)); }

void check_compatible(const Checkpoint& ck, const RunConfig& cfg, bool force) {
  const std::string expected = hex64(model_hash(cfg));
  if (ck.model_hash != expected && !force)
    throw ConfigError("checkpoint model hash " + ck.model_hash + " does not match config hash " + expected +
                      " (use --force to load anyway)");
}

// ---------------------------------------------------------------------------
// CSV

std::string records_csv(const std::vector<EvalRecord>& records) {
  std::string out = "step,metric,mean_weight,seed\n";
  for (const auto& r : records)
    out += std::to_string(r.step) + "," + g17(r.metric) + "," + g17(r.mean_weight) + "," + std::to_string(r.seed) + "\n";
  return out;
}

std::string torque_csv(const std::vector<EvalRecord>& records) {
  std::string out = "step,mean_torque_amount,seed\n";
  for (const auto& r : records)
    if (r.mean_torque) out += std::to_string(r.step) + "," + g17(*r.mean_torque) + "," + std::to_string(r.seed) + "\n";
  return out;
}

std::vector<EvalRecord> parse_records_csv(const std::string& text) {
  std::vector<EvalRecord> out;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "step,metric,mean_weight,seed")
    throw std::runtime_error("unexpected CSV header: " + line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string a, b, c, d;
    if (!std::getline(row, a, ',') || !std::getline(row, b, ',') || !std::getline(row, c, ',') ||
        !std::getline(row, d, ','))
      throw std::runtime_error("malformed CSV row: " + line);
    EvalRecord r;
    r.step = std::stol(a);
    r.metric = std::stod(b);
    r.mean_weight = std::stod(c);
    r.seed = std::stoull(d);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

bool ExperimentResult::ok() const {
  for (const auto& s : seeds)
    if (s.status != RunStatus::ok) return false;
  return true;
}

std::string seed_csv_path(const std::string& dir, std::uint64_t seed) {
  return (fs::path(dir) / ("seed-" + std::to_string(seed) + ".csv")).string();
}

std::string checkpoint_path(const std::string& dir, std::uint64_t seed) {
  return (fs::path(dir) / ("checkpoint-seed-" + std::to_string(seed) + ".json")).string();
}

ExperimentResult run_experiment(const RunConfig& cfg_in, const RunOptions& opts) {
  RunConfig cfg = cfg_in;
  require_valid(cfg);
  if (cfg.out_dir.empty()) throw ConfigError("out_dir is not set");
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  const std::string probe = (fs::path(cfg.out_dir) / ".write-probe").string();
  {
    std::ofstream p(probe);
    if (ec || !p) throw std::runtime_error("output directory " + cfg.out_dir + " is not writable");
  }
  fs::remove(probe, ec);

  // a run directory supplies one checkpoint per seed; a file is shared by all seeds
  std::vector<std::optional<Vec>> phis(cfg.seeds.size());
  if (opts.load_checkpoint) {
    const bool per_seed = fs::is_directory(*opts.load_checkpoint);
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
      const std::string path = per_seed ? checkpoint_path(*opts.load_checkpoint, cfg.seeds[i]) : *opts.load_checkpoint;
      const Checkpoint ck = checkpoint_load(path);
      check_compatible(ck, cfg, opts.force);
      if (!ck.weight) throw ConfigError("checkpoint " + path + " holds no weight function");
      phis[i] = ck.weight;
    }
  }
  write_file((fs::path(cfg.out_dir) / "config.toml").string(), to_config_text(cfg));

  ExperimentResult result;
  result.dir = cfg.out_dir;
  result.seeds.resize(cfg.seeds.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  const bool torque = cfg.train.env == "torque-line";

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cfg.seeds.size()) return;
      const std::uint64_t seed = cfg.seeds[i];
      try {
        TrainConfig train = cfg.train;
        if (phis[i]) train.initial_phi = phis[i];
        const RunArtifacts art = bipars_train(train, seed);
        SeedOutcome& out = result.seeds[i];
        out.seed = seed;
        out.status = art.status;
        out.message = art.message;
        out.csv_path = seed_csv_path(cfg.out_dir, seed);
        out.checkpoint_path = checkpoint_path(cfg.out_dir, seed);
        write_file(out.csv_path, records_csv(art.records));
        if (torque)
          write_file((fs::path(cfg.out_dir) / ("seed-" + std::to_string(seed) + "-torque.csv")).string(),
                     torque_csv(art.records));
        checkpoint_save(out.checkpoint_path, make_checkpoint(cfg, seed, art));
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(cfg.seeds.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  nlohmann::json status = nlohmann::json::array();
  for (const auto& s : result.seeds)
    status.push_back({{"seed", s.seed}, {"status", std::string(to_string(s.status))}, {"message", s.message}});
  write_file((fs::path(cfg.out_dir) / "status.json").string(), status.dump(1) + "\n");
  return result;
}

EvalRecord evaluate_checkpoint(const RunConfig& cfg_in, const Checkpoint& ck, int episodes, std::uint64_t eval_seed) {
  TrainConfig cfg = cfg_in.train;
  cfg.eval_episodes = episodes;
  cfg.initial_phi.reset();
  Trainer trainer(cfg, eval_seed);
  if (ck.policy.size() != trainer.policy().num_params())
    throw ShapeError("checkpoint policy does not match the config's network");
  trainer.policy().set_params(ck.policy);
  if (trainer.weight_fn()) {
    if (!ck.weight || ck.weight->size() != trainer.weight_fn()->num_params())
      throw ShapeError("checkpoint weight function does not match the config");
    trainer.weight_fn()->set_params(*ck.weight);
  }
  return trainer.evaluate(ck.steps, 0.0);
}

// ---------------------------------------------------------------------------
// Summaries

std::optional<double> ci_halfwidth(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) return std::nullopt;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  return 1.96 * sd / std::sqrt(static_cast<double>(n));
}

CurveSummary aggregate(const std::vector<std::vector<double>>& curves, const std::vector<long>& steps) {
  CurveSummary out;
  out.steps = steps;
  for (const auto& c : curves)
    if (c.size() != steps.size()) throw AlignmentError("curves do not share one evaluation grid");
  for (std::size_t k = 0; k < steps.size(); ++k) {
    std::vector<double> col;
    for (const auto& c : curves) col.push_back(c[k]);
    double mean = 0.0;
    for (double v : col) mean += v;
    out.mean.push_back(col.empty() ? 0.0 : mean / static_cast<double>(col.size()));
    out.ci.push_back(ci_halfwidth(col));
  }
  return out;
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

double tail_mean(const std::vector<double>& v, int window) {
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(std::max(window, 1)), v.size());
  double s = 0.0;
  for (std::size_t i = v.size() - w; i < v.size(); ++i) s += v[i];
  return w ? s / static_cast<double>(w) : 0.0;
}

}  // namespace

nlohmann::json summarize(const std::vector<std::string>& run_dirs, int final_window) {
  nlohmann::json runs = nlohmann::json::array();
  std::optional<std::vector<long>> grid;
  for (const auto& dir : run_dirs) {
    const RunConfig cfg = load_config((fs::path(dir) / "config.toml").string());
    std::vector<std::vector<double>> metrics, weights, torques;
    std::vector<long> steps;
    for (std::uint64_t seed : cfg.seeds) {
      const auto recs = parse_records_csv(read_file(seed_csv_path(dir, seed)));
      std::vector<long> s;
      std::vector<double> m, w;
      for (const auto& r : recs) {
        s.push_back(r.step);
        m.push_back(r.metric);
        w.push_back(r.mean_weight);
      }
      if (metrics.empty())
        steps = s;
      else if (s != steps)
        throw AlignmentError("seed " + std::to_string(seed) + " in " + dir + " has a different evaluation grid");
      metrics.push_back(std::move(m));
      weights.push_back(std::move(w));
      const fs::path tpath = fs::path(dir) / ("seed-" + std::to_string(seed) + "-torque.csv");
      if (fs::exists(tpath)) {
        std::istringstream in(read_file(tpath.string()));
        std::string line;
        std::getline(in, line);
        std::vector<double> t;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          const auto a = line.find(',');
          const auto b = line.find(',', a + 1);
          t.push_back(std::stod(line.substr(a + 1, b - a - 1)));
        }
        torques.push_back(std::move(t));
      }
    }
    if (grid && *grid != steps) throw AlignmentError("run " + dir + " has a different evaluation grid");
    grid = steps;

    const CurveSummary ms = aggregate(metrics, steps);
    const CurveSummary ws = aggregate(weights, steps);
    std::vector<double> final_m, final_w, final_t;
    for (const auto& c : metrics) final_m.push_back(tail_mean(c, final_window));
    for (const auto& c : weights) final_w.push_back(tail_mean(c, final_window));
    for (const auto& c : torques)
      if (!c.empty()) final_t.push_back(c.back());
    auto mean_of = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };

    nlohmann::json r;
    r["dir"] = dir;
    r["env"] = cfg.train.env;
    r["shaping"] = cfg.train.shaping;
    r["method"] = std::string(to_string(cfg.train.method));
    r["freeze_phi"] = cfg.train.freeze_phi;
    r["seeds"] = cfg.seeds;
    r["steps"] = steps;
    r["metric_mean"] = ms.mean;
    r["weight_mean"] = ws.mean;
    nlohmann::json mci = nlohmann::json::array(), wci = nlohmann::json::array();
    for (const auto& c : ms.ci) mci.push_back(opt_json(c));
    for (const auto& c : ws.ci) wci.push_back(opt_json(c));
    r["metric_ci"] = mci;
    r["weight_ci"] = wci;
    r["final_window"] = final_window;
    r["final_metric"] = mean_of(final_m);
    r["final_metric_ci"] = opt_json(ci_halfwidth(final_m));
    r["final_weight"] = mean_of(final_w);
    r["final_torque"] = final_t.empty() ? nlohmann::json(nullptr) : nlohmann::json(mean_of(final_t));
    runs.push_back(std::move(r));
  }
  return {{"runs", runs}};
}

// ---------------------------------------------------------------------------
// Weight grid

std::string export_weight_grid(const WeightFn& wf, const GridSpec& grid, std::vector<std::string>* warnings) {
  if (wf.state_dim() != 4) throw ShapeError("weight grid export needs a cartpole weight function");
  if (grid.positions < 1 || grid.angles < 1) throw std::invalid_argument("grid needs at least one point per axis");
  const CartpoleParams bounds;
  auto axis = [](double lo, double hi, int n, int i) {
    return n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  };
  if (warnings) {
    if (std::max(std::abs(grid.position_low), std::abs(grid.position_high)) > bounds.x_threshold)
      warnings->push_back("grid positions extend past the cart bounds");
    if (std::max(std::abs(grid.angle_low), std::abs(grid.angle_high)) > bounds.theta_threshold)
      warnings->push_back("grid angles extend past the pole failure angle");
  }
  const bool discrete = wf.action_space().discrete();
  std::string out = "position,angle,action,z\n";
  for (int i = 0; i < grid.positions; ++i) {
    const double x = axis(grid.position_low, grid.position_high, grid.positions, i);
    for (int j = 0; j < grid.angles; ++j) {
      const double th = axis(grid.angle_low, grid.angle_high, grid.angles, j);
      Vec s(4);
      s << x, grid.cart_velocity, th, grid.pole_velocity;
      for (const Vec& a : wf.reference_actions()) {
        const double z = wf.value(s, a);
        const std::string act = discrete ? std::to_string(static_cast<long>(a[0])) : g17(a[0]);
        out += g17(x) + "," + g17(th) + "," + act + "," + g17(z) + "\n";
      }
    }
  }
  return out;
}

WeightFn weight_fn_from_checkpoint(const RunConfig& cfg, const Checkpoint& ck) {
  if (!ck.weight) throw ConfigError("checkpoint holds no weight function");
  const auto env = make_env(cfg.train.env, cfg.train.torque_joints);
  WeightFnSpec spec = cfg.train.weight;
  spec.single = is_single_weight(cfg.train.method);
  WeightFn wf(env->state_dim(), env->action_space(), spec);
  if (ck.weight->size() != wf.num_params()) throw ShapeError("checkpoint weight function does not match the config");
  wf.set_params(*ck.weight);
  return wf;
}

}  // namespace bipars
