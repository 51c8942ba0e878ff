// Command-line front end: train, eval, oracle, export-weights, summarize.

#include "bipars/config.hpp"
#include "bipars/oracle.hpp"
#include "bipars/runner.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace bipars;

namespace {

std::string flag_name(const std::string& key) {
  std::string bare = key.substr(key.find('.') + 1);
  std::replace(bare.begin(), bare.end(), '_', '-');
  return "--" + bare;
}

std::string default_out_root() {
  const char* env = std::getenv("BIPARS_OUT");
  return env && *env ? env : "runs";
}

/// Config sources in increasing precedence: suite defaults, --config file,
/// individual flags.
struct ConfigSources {
  std::string config_file;
  bool paper_scale = false;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* app, const std::vector<std::string>& skip = {}) {
    app->add_option("--config", config_file, "Key-value config file")->check(CLI::ExistingFile);
    app->add_flag("--paper-scale", paper_scale, "Full step budgets, seed counts, and network sizes");
    for (const auto& key : config_keys()) {
      const std::string bare = key.substr(key.find('.') + 1);
      if (bare == "paper_scale" || std::find(skip.begin(), skip.end(), bare) != skip.end()) continue;
      const std::string names = bare == "out_dir" ? flag_name(key) + ",--out" : flag_name(key);
      app->add_option_function<std::string>(
          names, [this, key](const std::string& v) { overrides[key] = v; }, "Sets " + key);
    }
  }

  RunConfig build() const {
    RunConfig probe;
    if (!config_file.empty()) probe = load_config(config_file);
    for (const auto& [k, v] : overrides)
      if (k == "experiment.env" || k == "experiment.shaping" || k == "experiment.method") apply_setting(probe, k, v);
    const bool paper = paper_scale || probe.paper_scale;
    RunConfig cfg = default_run_config(probe.train.env, probe.train.shaping, probe.train.method, paper);
    if (!config_file.empty()) cfg = load_config(config_file, cfg);
    for (const auto& [k, v] : overrides) apply_setting(cfg, k, v);
    if (paper_scale) cfg.paper_scale = true;
    return cfg;
  }
};

void print_record(const EvalRecord& r) {
  nlohmann::json j{{"step", r.step}, {"metric", r.metric}, {"seed", r.seed}};
  if (r.mean_torque) j["mean_torque_amount"] = *r.mean_torque;
  std::cout << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bi-level parameterized reward shaping"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train every seed of one experiment");
  ConfigSources train_src;
  train_src.attach(train, {"freeze_phi"});
  std::string freeze_path, load_path;
  bool force = false;
  train->add_option("--freeze-phi", freeze_path, "Reuse a trained weight function (file or run dir) and keep it fixed");
  train->add_option("--load-phi", load_path, "Start from a trained weight function (file or run dir)");
  train->add_flag("--force", force, "Load a checkpoint even when its model hash differs");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  ConfigSources eval_src;
  eval_src.attach(eval);
  std::string eval_ck;
  int eval_episodes = 20;
  std::uint64_t eval_seed = 0;
  eval->add_option("--checkpoint", eval_ck, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", eval_episodes, "Evaluation episodes")->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_seed, "Evaluation seed");

  // oracle
  auto* oracle = app.add_subcommand("oracle", "Run the gradient oracle suite");
  std::uint64_t oracle_seed = 7;
  oracle->add_option("--seed", oracle_seed, "Suite seed");

  // export-weights
  auto* exportw = app.add_subcommand("export-weights", "Weight function over a position x angle grid");
  ConfigSources export_src;
  export_src.attach(exportw, {"out_dir"});
  std::string export_ck, export_out;
  GridSpec grid;
  exportw->add_option("--checkpoint", export_ck, "Checkpoint file")->required()->check(CLI::ExistingFile);
  exportw->add_option("--out", export_out, "CSV path (stdout when omitted)");
  exportw->add_option("--cart-velocity", grid.cart_velocity, "Fixed cart velocity");
  exportw->add_option("--pole-velocity", grid.pole_velocity, "Fixed pole angular velocity");
  exportw->add_option("--positions", grid.positions, "Grid points along cart position");
  exportw->add_option("--angles", grid.angles, "Grid points along pole angle");

  // summarize
  auto* summ = app.add_subcommand("summarize", "Mean and 95% CI over seeds for run directories");
  std::vector<std::string> summ_dirs;
  int final_window = 5;
  std::string summ_out;
  summ->add_option("dirs", summ_dirs, "Run directories")->required();
  summ->add_option("--final-window", final_window, "Evaluations in the final window")->check(CLI::PositiveNumber);
  summ->add_option("--out", summ_out, "JSON path (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      RunConfig cfg = train_src.build();
      RunOptions opts;
      opts.force = force;
      if (!freeze_path.empty() && !load_path.empty()) throw ConfigError("use either --freeze-phi or --load-phi");
      if (!freeze_path.empty()) {
        cfg.train.freeze_phi = true;
        opts.load_checkpoint = freeze_path;
      } else if (!load_path.empty()) {
        opts.load_checkpoint = load_path;
      }
      if (cfg.out_dir.empty())
        cfg.out_dir = (fs::path(default_out_root()) / (cfg.train.env + "_" + cfg.train.shaping + "_" +
                                                       std::string(to_string(cfg.train.method))))
                          .string();
      const ExperimentResult res = run_experiment(cfg, opts);
      for (const auto& s : res.seeds)
        std::cout << "seed " << s.seed << ": " << to_string(s.status) << (s.message.empty() ? "" : " (" + s.message + ")")
                  << " -> " << s.csv_path << "\n";
      return res.ok() ? 0 : 3;
    }
    if (*eval) {
      const RunConfig cfg = eval_src.build();
      print_record(evaluate_checkpoint(cfg, checkpoint_load(eval_ck), eval_episodes, eval_seed));
      return 0;
    }
    if (*oracle) {
      bool all = true;
      for (const auto& r : run_oracle_suite(oracle_seed)) {
        std::cout << r.to_json() << "\n";
        all = all && r.pass;
      }
      return all ? 0 : 1;
    }
    if (*exportw) {
      const RunConfig cfg = export_src.build();
      const WeightFn wf = weight_fn_from_checkpoint(cfg, checkpoint_load(export_ck));
      std::vector<std::string> warnings;
      const std::string csv = export_weight_grid(wf, grid, &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
      if (export_out.empty())
        std::cout << csv;
      else
        write_file(export_out, csv);
      return 0;
    }
    if (*summ) {
      const std::string text = summarize(summ_dirs, final_window).dump(1) + "\n";
      if (summ_out.empty())
        std::cout << text;
      else
        write_file(summ_out, text);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
