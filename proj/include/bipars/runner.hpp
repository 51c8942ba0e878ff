#pragma once

#include "bipars/config.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace bipars {

struct ChecksumError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AlignmentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Trained state of one seed. The meta-gradient matrix is not saved.
struct Checkpoint {
  std::string model_hash;
  std::string env;
  std::string method;
  std::uint64_t seed = 0;
  long steps = 0;
  Vec policy;
  Vec value;
  std::optional<Vec> weight;
  std::string rng_state;
};

Checkpoint make_checkpoint(const RunConfig& cfg, std::uint64_t seed, const RunArtifacts& art);
std::string checkpoint_to_text(const Checkpoint& ck);
/// Throws ChecksumError when the payload does not match its checksum.
Checkpoint checkpoint_from_text(const std::string& text);
void checkpoint_save(const std::string& path, const Checkpoint& ck);
Checkpoint checkpoint_load(const std::string& path);
/// Refuses a checkpoint whose model hash differs from `cfg`'s unless `force`.
void check_compatible(const Checkpoint& ck, const RunConfig& cfg, bool force);

/// CSV text for one seed: `step,metric,mean_weight,seed`.
std::string records_csv(const std::vector<EvalRecord>& records);
/// `step,mean_torque_amount,seed` for records that carry a torque amount.
std::string torque_csv(const std::vector<EvalRecord>& records);
std::vector<EvalRecord> parse_records_csv(const std::string& text);

struct SeedOutcome {
  std::uint64_t seed = 0;
  RunStatus status = RunStatus::ok;
  std::string message;
  std::string csv_path;
  std::string checkpoint_path;
};

struct ExperimentResult {
  std::string dir;
  std::vector<SeedOutcome> seeds;
  bool ok() const;
};

struct RunOptions {
  /// Weight function to start from, frozen when cfg says so: a checkpoint
  /// file shared by every seed, or a run directory matched seed by seed.
  std::optional<std::string> load_checkpoint;
  bool force = false;
};

/// Validates `cfg`, trains every seed (cfg.jobs at a time) and writes into
/// cfg.out_dir: config.toml, seed-<s>.csv, seed-<s>-torque.csv (torque-line
/// only), checkpoint-seed-<s>.json and status.json.
ExperimentResult run_experiment(const RunConfig& cfg, const RunOptions& opts = {});

/// Path of seed `seed`'s CSV inside a run directory.
std::string seed_csv_path(const std::string& dir, std::uint64_t seed);
std::string checkpoint_path(const std::string& dir, std::uint64_t seed);

/// Rebuilds the trained networks of a checkpoint and runs evaluation
/// episodes with the stochastic policy.
EvalRecord evaluate_checkpoint(const RunConfig& cfg, const Checkpoint& ck, int episodes, std::uint64_t eval_seed);

/// Half width 1.96 * sd / sqrt(n) with the sample standard deviation;
/// empty for fewer than two values.
std::optional<double> ci_halfwidth(const std::vector<double>& values);

struct CurveSummary {
  std::vector<long> steps;
  std::vector<double> mean;
  std::vector<std::optional<double>> ci;
};

/// Pointwise mean and CI over seeds; every curve must share one step grid.
CurveSummary aggregate(const std::vector<std::vector<double>>& curves, const std::vector<long>& steps);

/// Per-method curves and final-window means (last `final_window` evals)
/// over the given run directories.
nlohmann::json summarize(const std::vector<std::string>& run_dirs, int final_window = 5);

struct GridSpec {
  int positions = 10;
  int angles = 10;
  double position_low = -2.4;
  double position_high = 2.4;
  double angle_low = -0.2;
  double angle_high = 0.2;
  double cart_velocity = 1.0;
  double pole_velocity = 0.01;
};

/// z over a cart-position x pole-angle grid with the velocities fixed, one
/// row per reference action. Header `position,angle,action,z`. Points
/// outside the env bounds add a warning and are still written.
std::string export_weight_grid(const WeightFn& wf, const GridSpec& grid, std::vector<std::string>* warnings = nullptr);

/// Rebuilds the weight function of a checkpoint under `cfg`.
WeightFn weight_fn_from_checkpoint(const RunConfig& cfg, const Checkpoint& ck);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& text);

}  // namespace bipars
