#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mixline/config.hpp"
#include "mixline/cql.hpp"
#include "mixline/env.hpp"
#include "mixline/linalg.hpp"
#include "mixline/mlp.hpp"

namespace mixline::harness {

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  int episodes = 0;
  double mean_return = 0.0;
  double std_return = 0.0;  // population std; exactly 0 for a single episode
  double success_rate = 0.0;
  double mean_length = 0.0;
  // Whole-task envs break success down as stage1..stage3 completion rates;
  // single-stage and bench envs report one entry for their own predicate.
  std::vector<std::pair<std::string, double>> stage_success;
};

// Deterministic-mode rollouts; episode k reseeds the env from
// split("episode", k) of `seed`, so the report depends only on
// (env construction, checkpoint, seed). episodes < 1 is a ConfigError.
EvalReport evaluate(env::RlEnv& env, const nn::MlpParams& policy, int episodes,
                    std::uint64_t seed);

std::string eval_report_to_json(const EvalReport& r);

// ---------------------------------------------------------------------------
// Plotting

struct BandPoint {
  double x = 0.0;
  double mean = 0.0;
  double lo = 0.0;  // mean - std
  double hi = 0.0;  // mean + std
};

// Per-index mean +- population std across runs, truncated to the shortest
// run; x comes from the first run. Indices where any run holds a non-finite
// value are skipped.
std::vector<BandPoint> series_band(const std::vector<Vec>& xs, const std::vector<Vec>& ys);

struct PlotSeries {
  std::string label;
  std::vector<Vec> xs;  // one entry per run (seed)
  std::vector<Vec> ys;
};

// Standalone SVG line chart, byte-deterministic: fixed layout, %.6g numbers.
// Each series draws its mean line plus a translucent mean+-std band when it
// has two or more runs.
void write_line_chart(const std::string& path, const std::string& title,
                      const std::string& x_label, const std::string& y_label,
                      const std::vector<PlotSeries>& series);

// ---------------------------------------------------------------------------
// Subcommands. Each creates its output directory under cfg.out, echoes the
// exact config it ran with, and throws the error taxonomy on failure.

// Online PPO with the wait schedule. Bimanual stages write
// <out>/stage<k>/{config.json, metrics.csv, policy.ckpt, value.ckpt,
// terminals.bin}; bench envs use <out>/<env_name>/ and require a pure
// "both" schedule. Stage k > 1 needs stage k-1's terminals.bin.
void cmd_train_stage(const RunConfig& cfg);

// Deterministic-policy episodes into <dir>/dataset.mxds using the stage (or
// bench) checkpoint; a missing checkpoint is a CollectionError.
void cmd_collect(const RunConfig& cfg);

// Stitches the three stage policies into whole-task trajectories, relabels
// rewards, writes <out>/whole_task.mxds. Missing stage checkpoints are a
// CompositionError.
void cmd_compose(const RunConfig& cfg);

// Offline CQL on a recorded dataset (offline.dataset or <out>/whole_task.mxds)
// into <out>/offline/. Returns the trainer result for callers that want the
// final nets.
rl::OfflineTrainResult cmd_train_offline(const RunConfig& cfg);

// Evaluates cfg.checkpoint on the configured env (stage 0 = whole task).
EvalReport cmd_eval(const RunConfig& cfg);

struct AblateArmResult {
  std::string algo;
  std::vector<double> final_return;   // per seed, last finite value
  std::vector<double> final_success;
  double mean_final = 0.0;  // of the env's primary metric
  double std_final = 0.0;   // population std across seeds
};

struct AblateSummary {
  std::string env_name;
  std::string metric;  // "mean_return" (pendulum) or "success_rate"
  std::vector<std::uint64_t> seeds;
  std::array<AblateArmResult, 2> arms;
  double mean_diff = 0.0;    // arms[1] - arms[0] on the primary metric
  double pooled_std = 0.0;   // sqrt of the mean per-arm variance
  bool parity_ok = false;    // |mean_diff| <= pooled_std
  bool ordering_ok = false;  // cql_ppo mean >= ppo mean (when both arms present)
  // Max |difference| across every numeric cell of the two arms' curves,
  // per seed; meaningful as a wiring check when both arms run the same
  // algorithm (must then be exactly 0).
  double wiring_max_diff = 0.0;
  std::vector<std::string> violations;  // failed expectations for this env
};

// Trains both arms on every seed (>= 3 required) with a shared per-seed env
// stream, writes per-arm CSVs, summary.json, final_table.txt and charts under
// <out>/ablate/. env_name must be pendulum_swingup, planar_reach, or
// stage1_task; the wait schedule is forced to plain "both" on both arms.
AblateSummary cmd_ablate(const RunConfig& cfg);

// One chart per numeric metric column (iteration/env_steps excluded) into
// <out>/<metric>.svg, band across the given CSVs. All files must share one
// schema; mismatches are a FormatError.
void cmd_plot(const RunConfig& cfg, const std::vector<std::string>& csv_paths);

}  // namespace mixline::harness
