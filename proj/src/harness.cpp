#include "mixline/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "mixline/dataset.hpp"
#include "mixline/env_bench.hpp"
#include "mixline/env_bimanual.hpp"
#include "mixline/errors.hpp"
#include "mixline/metrics.hpp"
#include "mixline/rng.hpp"

namespace mixline::harness {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                    "#9467bd", "#8c564b", "#e377c2"};

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
  out.flush();
  if (!out) throw ConfigError("write failed: " + path);
}

// Bimanual stages live in stage<k>/, bench runs in <env_name>/.
std::string run_dir(const RunConfig& cfg, int stage) {
  if (is_bimanual(cfg.env_name)) return cfg.out + "/stage" + std::to_string(stage);
  return cfg.out + "/" + cfg.env_name;
}

std::string terminals_path(const RunConfig& cfg, int stage) {
  return cfg.out + "/stage" + std::to_string(stage) + "/terminals.bin";
}

std::vector<std::unique_ptr<env::RlEnv>> make_stage1_or_bench_envs(
    const RunConfig& cfg, int stage, int n, const env::TerminalBuffer* prev,
    env::TerminalBuffer* capture) {
  std::vector<std::unique_ptr<env::RlEnv>> list;
  list.reserve(static_cast<std::size_t>(n));
  if (is_bimanual(cfg.env_name)) {
    auto spec = env::make_stage_spec(stage, cfg.env);
    for (int i = 0; i < n; ++i) {
      auto e = std::make_unique<env::BimanualEnv>(cfg.env, spec, 0, prev);
      if (capture) e->capture_terminals(capture);
      list.push_back(std::move(e));
    }
  } else {
    for (int i = 0; i < n; ++i) list.push_back(env::make_bench_env(cfg.env_name, 0));
  }
  return list;
}

void check_policy_dims(const nn::MlpParams& policy, const env::RlEnv& e,
                       const std::string& what) {
  if (policy.input_dim() != e.obs_dim() || policy.output_dim() != 2 * e.action_dim()) {
    throw ConfigError(what + ": checkpoint dims (" + std::to_string(policy.input_dim()) +
                      " -> " + std::to_string(policy.output_dim()) +
                      ") do not match the env (obs " + std::to_string(e.obs_dim()) +
                      ", action " + std::to_string(e.action_dim()) + ")");
  }
}

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

// nan cells compare equal; a nan against a number is an infinite difference.
double cell_diff(double a, double b) {
  const bool na = std::isnan(a), nb = std::isnan(b);
  if (na && nb) return 0.0;
  if (na || nb) return std::numeric_limits<double>::infinity();
  return std::abs(a - b);
}

double last_finite(const std::vector<rl::TrainIterationRow>& rows,
                   double rl::TrainIterationRow::*field) {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
    if (std::isfinite((*it).*field)) return (*it).*field;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate(env::RlEnv& e, const nn::MlpParams& policy, int episodes,
                    std::uint64_t seed) {
  if (episodes < 1) throw ConfigError("evaluate: episodes must be >= 1");
  check_policy_dims(policy, e, "evaluate");
  auto* whole = dynamic_cast<env::WholeTaskEnv*>(&e);
  auto* single = dynamic_cast<env::BimanualEnv*>(&e);

  RngStream master(seed);
  EvalReport rep;
  rep.episodes = episodes;
  std::vector<double> returns(static_cast<std::size_t>(episodes), 0.0);
  double total_len = 0.0;
  int successes = 0;
  std::array<int, 3> stage_hits{0, 0, 0};

  for (int ep = 0; ep < episodes; ++ep) {
    e.seed(master.split("episode", static_cast<std::uint64_t>(ep)).state());
    Vec obs = e.reset();
    double ret = 0.0;
    bool success = false;
    std::uint64_t steps = 0;
    for (;;) {
      Vec action = rl::policy_action(policy, obs, nullptr);
      auto out = e.step(action);
      ret += out.reward;
      ++steps;
      success = success || out.success;
      obs = std::move(out.obs);
      if (out.done) break;
      if (steps >= 1'000'000) throw NumericError("evaluate: episode did not terminate");
    }
    returns[static_cast<std::size_t>(ep)] = ret;
    total_len += static_cast<double>(steps);
    if (success) ++successes;
    if (whole) {
      const int done_stages = whole->stages_completed();
      for (int k = 0; k < 3; ++k) {
        if (done_stages > k) ++stage_hits[static_cast<std::size_t>(k)];
      }
    }
  }

  double sum = 0.0;
  for (double r : returns) sum += r;
  rep.mean_return = sum / episodes;
  double ss = 0.0;
  for (double r : returns) {
    const double d = r - rep.mean_return;
    ss += d * d;
  }
  rep.std_return = std::sqrt(ss / episodes);
  rep.success_rate = static_cast<double>(successes) / episodes;
  rep.mean_length = total_len / episodes;

  if (whole) {
    for (int k = 0; k < 3; ++k) {
      rep.stage_success.emplace_back(
          "stage" + std::to_string(k + 1),
          static_cast<double>(stage_hits[static_cast<std::size_t>(k)]) / episodes);
    }
  } else if (single) {
    rep.stage_success.emplace_back("stage" + std::to_string(single->spec().stage_id),
                                   rep.success_rate);
  } else {
    rep.stage_success.emplace_back("task", rep.success_rate);
  }
  return rep;
}

std::string eval_report_to_json(const EvalReport& r) {
  ojson j;
  j["episodes"] = r.episodes;
  j["mean_return"] = r.mean_return;
  j["std_return"] = r.std_return;
  j["success_rate"] = r.success_rate;
  j["mean_length"] = r.mean_length;
  ojson s = ojson::object();
  for (const auto& [name, rate] : r.stage_success) s[name] = rate;
  j["stage_success"] = std::move(s);
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Plotting

std::vector<BandPoint> series_band(const std::vector<Vec>& xs, const std::vector<Vec>& ys) {
  if (xs.size() != ys.size()) throw ShapeError("series_band: xs/ys run counts differ");
  if (xs.empty()) return {};
  std::size_t n = std::numeric_limits<std::size_t>::max();
  for (std::size_t r = 0; r < xs.size(); ++r) {
    n = std::min(n, std::min(xs[r].size(), ys[r].size()));
  }
  const double runs = static_cast<double>(ys.size());
  std::vector<BandPoint> band;
  band.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool ok = std::isfinite(xs[0][i]);
    for (const auto& y : ys) ok = ok && std::isfinite(y[i]);
    if (!ok) continue;
    double mean = 0.0;
    for (const auto& y : ys) mean += y[i];
    mean /= runs;
    double var = 0.0;
    for (const auto& y : ys) {
      const double d = y[i] - mean;
      var += d * d;
    }
    var /= runs;
    const double sd = std::sqrt(var);
    band.push_back({xs[0][i], mean, mean - sd, mean + sd});
  }
  return band;
}

void write_line_chart(const std::string& path, const std::string& title,
                      const std::string& x_label, const std::string& y_label,
                      const std::vector<PlotSeries>& series) {
  constexpr double kW = 800, kH = 500, kMl = 70, kMr = 170, kMt = 45, kMb = 55;

  std::vector<std::vector<BandPoint>> bands;
  bands.reserve(series.size());
  bool has_data = false;
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  for (const auto& s : series) {
    bands.push_back(series_band(s.xs, s.ys));
    for (const auto& p : bands.back()) {
      if (!has_data) {
        xmin = xmax = p.x;
        ymin = p.lo;
        ymax = p.hi;
        has_data = true;
      } else {
        xmin = std::min(xmin, p.x);
        xmax = std::max(xmax, p.x);
        ymin = std::min(ymin, p.lo);
        ymax = std::max(ymax, p.hi);
      }
    }
  }
  if (!has_data) {
    xmin = ymin = 0.0;
    xmax = ymax = 1.0;
  }
  if (xmax == xmin) {
    xmin -= 1.0;
    xmax += 1.0;
  }
  if (ymax == ymin) {
    ymin -= 1.0;
    ymax += 1.0;
  }
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const auto px = [&](double x) { return kMl + (x - xmin) * (kW - kMl - kMr) / (xmax - xmin); };
  const auto py = [&](double y) { return kH - kMb - (y - ymin) * (kH - kMt - kMb) / (ymax - ymin); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"500\" "
         "viewBox=\"0 0 800 500\">\n";
  svg << "<rect width=\"800\" height=\"500\" fill=\"#ffffff\"/>\n";
  svg << "<text x=\"400\" y=\"26\" font-family=\"monospace\" font-size=\"16\" "
         "text-anchor=\"middle\">"
      << xml_escape(title) << "</text>\n";

  // Grid and tick labels at quarter fractions.
  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0;
    const double xt = xmin + f * (xmax - xmin);
    const double yt = ymin + f * (ymax - ymin);
    svg << "<line x1=\"" << format_g6(px(xt)) << "\" y1=\"" << format_g6(kMt) << "\" x2=\""
        << format_g6(px(xt)) << "\" y2=\"" << format_g6(kH - kMb)
        << "\" stroke=\"#e5e5e5\" stroke-width=\"1\"/>\n";
    svg << "<line x1=\"" << format_g6(kMl) << "\" y1=\"" << format_g6(py(yt)) << "\" x2=\""
        << format_g6(kW - kMr) << "\" y2=\"" << format_g6(py(yt))
        << "\" stroke=\"#e5e5e5\" stroke-width=\"1\"/>\n";
    svg << "<text x=\"" << format_g6(px(xt)) << "\" y=\"" << format_g6(kH - kMb + 18)
        << "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">"
        << format_g6(xt) << "</text>\n";
    svg << "<text x=\"" << format_g6(kMl - 8) << "\" y=\"" << format_g6(py(yt) + 4)
        << "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">" << format_g6(yt)
        << "</text>\n";
  }
  // Axes on top of the grid.
  svg << "<line x1=\"" << format_g6(kMl) << "\" y1=\"" << format_g6(kH - kMb) << "\" x2=\""
      << format_g6(kW - kMr) << "\" y2=\"" << format_g6(kH - kMb)
      << "\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
  svg << "<line x1=\"" << format_g6(kMl) << "\" y1=\"" << format_g6(kMt) << "\" x2=\""
      << format_g6(kMl) << "\" y2=\"" << format_g6(kH - kMb)
      << "\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
  svg << "<text x=\"" << format_g6((kMl + kW - kMr) / 2) << "\" y=\"" << format_g6(kH - 12)
      << "\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">"
      << xml_escape(x_label) << "</text>\n";
  svg << "<text transform=\"translate(18," << format_g6((kMt + kH - kMb) / 2)
      << ") rotate(-90)\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">"
      << xml_escape(y_label) << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % (sizeof(kPalette) / sizeof(kPalette[0]))];
    const auto& band = bands[s];
    if (series[s].ys.size() >= 2 && !band.empty()) {
      svg << "<path fill=\"" << color << "\" fill-opacity=\"0.18\" stroke=\"none\" d=\"";
      for (std::size_t i = 0; i < band.size(); ++i) {
        svg << (i == 0 ? "M" : " L") << format_g6(px(band[i].x)) << ','
            << format_g6(py(band[i].lo));
      }
      for (std::size_t i = band.size(); i-- > 0;) {
        svg << " L" << format_g6(px(band[i].x)) << ',' << format_g6(py(band[i].hi));
      }
      svg << " Z\"/>\n";
    }
    if (!band.empty()) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < band.size(); ++i) {
        svg << (i == 0 ? "" : " ") << format_g6(px(band[i].x)) << ','
            << format_g6(py(band[i].mean));
      }
      svg << "\"/>\n";
    }
    const double ly = kMt + 12 + 20 * static_cast<double>(s);
    svg << "<line x1=\"" << format_g6(kW - kMr + 14) << "\" y1=\"" << format_g6(ly) << "\" x2=\""
        << format_g6(kW - kMr + 36) << "\" y2=\"" << format_g6(ly) << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << format_g6(kW - kMr + 42) << "\" y=\"" << format_g6(ly + 4)
        << "\" font-family=\"monospace\" font-size=\"12\">" << xml_escape(series[s].label)
        << "</text>\n";
  }
  if (!has_data) {
    svg << "<text x=\"400\" y=\"250\" font-family=\"monospace\" font-size=\"14\" "
           "text-anchor=\"middle\">no data</text>\n";
  }
  svg << "</svg>\n";
  write_text(path, svg.str());
}

// ---------------------------------------------------------------------------
// train-stage

void cmd_train_stage(const RunConfig& cfg) {
  const bool bim = is_bimanual(cfg.env_name);
  const int stage = effective_stage(cfg);
  if (bim && (stage < 1 || stage > 3))
    throw ConfigError("train-stage: stage must be 1..3 for the bimanual task");
  if (!bim) {
    for (auto ph : cfg.ppo.schedule) {
      if (ph != rl::WaitPhase::kBoth)
        throw ConfigError("train-stage: wait phases apply to the bimanual task only");
    }
  }
  const std::string dir = run_dir(cfg, stage);
  ensure_dir(dir);
  write_text(dir + "/config.json", run_config_to_json(cfg));

  env::TerminalBuffer prev;
  const env::TerminalBuffer* prev_ptr = nullptr;
  if (bim && stage > 1) {
    const std::string p = terminals_path(cfg, stage - 1);
    if (!fs::exists(p)) {
      throw ConfigError("train-stage: missing terminal states for stage " +
                        std::to_string(stage) + ": " + p + " (train stage " +
                        std::to_string(stage - 1) + " first)");
    }
    prev = env::TerminalBuffer::load(p, cfg.env);
    if (prev.size() == 0) throw ConfigError("train-stage: empty terminal buffer: " + p);
    prev_ptr = &prev;
  }

  env::TerminalBuffer capture(1000);
  env::VecEnv envs(
      make_stage1_or_bench_envs(cfg, stage, cfg.ppo.num_envs, prev_ptr, bim ? &capture : nullptr),
      RngStream(cfg.seed).split("vecenv").state());

  CsvWriter csv(dir + "/metrics.csv", kOnlineCsvHeader);
  rl::TrainHooks hooks;
  hooks.on_metrics = [&](const rl::TrainIterationRow& row) { csv.line(online_csv_row(row)); };
  hooks.on_checkpoint = [&](const nn::MlpParams& p, const nn::MlpParams& v, int) {
    nn::save_checkpoint(p, dir + "/policy.ckpt");
    nn::save_checkpoint(v, dir + "/value.ckpt");
  };
  auto res = rl::train_stage(envs, cfg.ppo, cfg.seed, hooks);

  nn::save_checkpoint(res.policy, dir + "/policy.ckpt");
  nn::save_checkpoint(res.value, dir + "/value.ckpt");
  if (bim) capture.save(dir + "/terminals.bin", cfg.env);

  ojson r;
  r["env_steps"] = res.env_steps;
  r["iterations"] = res.iterations;
  r["final_success_rate"] = res.final_success_rate;
  r["early_stopped"] = res.early_stopped;
  r["phase_index"] = res.phase_index;
  r["first_epoch_max_ratio_dev"] = res.first_epoch_max_ratio_dev;
  r["first_epoch_max_kl"] = res.first_epoch_max_kl;
  write_text(dir + "/train_result.json", r.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// collect

void cmd_collect(const RunConfig& cfg) {
  const bool bim = is_bimanual(cfg.env_name);
  const int stage = effective_stage(cfg);
  if (bim && (stage < 1 || stage > 3))
    throw ConfigError("collect: stage must be 1..3 for the bimanual task");
  const std::string dir = run_dir(cfg, stage);
  ensure_dir(dir);
  write_text(dir + "/collect_config.json", run_config_to_json(cfg));

  const std::string ckpt = cfg.checkpoint.empty() ? dir + "/policy.ckpt" : cfg.checkpoint;
  if (!fs::exists(ckpt)) throw CollectionError("missing stage checkpoint: " + ckpt);
  auto policy = nn::load_checkpoint(ckpt);

  env::TerminalBuffer prev;
  std::unique_ptr<env::RlEnv> e;
  data::DatasetHeader header;
  data::CollectOptions opts;
  opts.success_only = cfg.collect.success_only;
  opts.retry_multiple = cfg.collect.retry_multiple;
  const std::string created =
      "collect " + cfg.env_name + (bim ? " stage " + std::to_string(stage) : "") + " seed " +
      std::to_string(cfg.seed);
  if (bim) {
    const env::TerminalBuffer* prev_ptr = nullptr;
    if (stage > 1) {
      const std::string p = terminals_path(cfg, stage - 1);
      if (!fs::exists(p)) throw CollectionError("missing terminal states: " + p);
      prev = env::TerminalBuffer::load(p, cfg.env);
      if (prev.size() == 0) throw CollectionError("empty terminal buffer: " + p);
      prev_ptr = &prev;
    }
    e = std::make_unique<env::BimanualEnv>(cfg.env, env::make_stage_spec(stage, cfg.env), 0,
                                           prev_ptr);
    opts.stage_id = stage;
    header = data::make_bimanual_header(cfg.env, created);
  } else {
    e = env::make_bench_env(cfg.env_name, 0);
    opts.stage_id = 1;
    header = data::make_bench_header(cfg.env_name, e->obs_dim(), e->action_dim(), created);
  }
  check_policy_dims(policy, *e, "collect");

  auto trajs = data::collect(*e, policy, cfg.collect.episodes, cfg.seed, opts);
  data::write_dataset(trajs, header, dir + "/dataset.mxds");

  double mean_return = 0.0;
  std::uint64_t transitions = 0;
  int successes = 0;
  for (const auto& t : trajs) {
    mean_return += t.episode_return;
    transitions += static_cast<std::uint64_t>(t.length());
    if (t.success) ++successes;
  }
  if (!trajs.empty()) mean_return /= static_cast<double>(trajs.size());
  ojson r;
  r["episodes"] = trajs.size();
  r["transitions"] = transitions;
  r["successes"] = successes;
  r["mean_episode_return"] = mean_return;
  r["dataset"] = dir + "/dataset.mxds";
  write_text(dir + "/collect_result.json", r.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// compose

void cmd_compose(const RunConfig& cfg) {
  if (!is_bimanual(cfg.env_name))
    throw ConfigError("compose: env_name must be the bimanual task");
  ensure_dir(cfg.out);
  write_text(cfg.out + "/compose_config.json", run_config_to_json(cfg));

  data::ComposeSpec spec;
  spec.step_caps = cfg.compose.step_caps;
  spec.success_required = cfg.compose.success_required;
  spec.step_cost = cfg.compose.step_cost;
  spec.stage_bonus = cfg.compose.stage_bonus;
  spec.shaped_scale = cfg.compose.shaped_scale;
  spec.checkpoints.clear();
  for (int k = 1; k <= 3; ++k) {
    const std::string p = cfg.out + "/stage" + std::to_string(k) + "/policy.ckpt";
    if (!fs::exists(p)) throw CompositionError("missing stage checkpoint: " + p);
    spec.checkpoints.push_back(p);
  }

  auto trajs = data::compose_long_horizon(spec, cfg.env, cfg.compose.episodes, cfg.seed);
  for (auto& t : trajs) t = data::relabel_rewards(std::move(t), spec);
  auto header = data::make_bimanual_header(
      cfg.env, "whole-task composition seed " + std::to_string(cfg.seed));
  data::write_dataset(trajs, header, cfg.out + "/whole_task.mxds");

  double mean_return = 0.0;
  std::uint64_t transitions = 0;
  for (const auto& t : trajs) {
    mean_return += t.episode_return;
    transitions += static_cast<std::uint64_t>(t.length());
  }
  if (!trajs.empty()) mean_return /= static_cast<double>(trajs.size());
  ojson r;
  r["episodes_requested"] = cfg.compose.episodes;
  r["episodes_kept"] = trajs.size();
  r["transitions"] = transitions;
  r["mean_episode_return"] = mean_return;
  r["dataset"] = cfg.out + "/whole_task.mxds";
  write_text(cfg.out + "/compose_result.json", r.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// train-offline

rl::OfflineTrainResult cmd_train_offline(const RunConfig& cfg) {
  const std::string dspath =
      cfg.offline.dataset.empty() ? cfg.out + "/whole_task.mxds" : cfg.offline.dataset;
  if (!fs::exists(dspath)) throw ConfigError("train-offline: dataset not found: " + dspath);
  auto ds = data::read_dataset(dspath);

  const std::string dir = cfg.out + "/offline";
  ensure_dir(dir);
  write_text(dir + "/config.json", run_config_to_json(cfg));

  env::TerminalBuffer prev;
  std::unique_ptr<env::RlEnv> eval_env;
  const std::string& ename = ds.header().env_name;
  if (cfg.offline.eval_episodes > 0) {
    if (ename == "pendulum_swingup" || ename == "planar_reach") {
      eval_env = env::make_bench_env(ename, 0);
    } else {
      if (env::env_config_digest(cfg.env) != ds.header().env_digest) {
        throw ConfigError(
            "train-offline: dataset was built with a different env config (digest mismatch)");
      }
      const int es = cfg.offline.eval_stage;
      if (es == 0) {
        eval_env = std::make_unique<env::WholeTaskEnv>(cfg.env, 0);
      } else {
        const env::TerminalBuffer* prev_ptr = nullptr;
        if (es > 1) {
          const std::string p = terminals_path(cfg, es - 1);
          if (!fs::exists(p))
            throw ConfigError("train-offline: missing terminal states for eval_stage " +
                              std::to_string(es) + ": " + p);
          prev = env::TerminalBuffer::load(p, cfg.env);
          prev_ptr = &prev;
        }
        eval_env = std::make_unique<env::BimanualEnv>(cfg.env, env::make_stage_spec(es, cfg.env),
                                                      0, prev_ptr);
      }
    }
  }

  rl::OfflineTrainConfig otc;
  otc.cql = cfg.cql;
  otc.hidden = cfg.offline.hidden;
  otc.grad_steps = cfg.offline.grad_steps;
  otc.eval_every = cfg.offline.eval_every;
  otc.eval_episodes = cfg.offline.eval_episodes;
  otc.conserve_probe = cfg.offline.conserve_probe;

  CsvWriter csv(dir + "/metrics.csv", kOfflineCsvHeader);
  CsvWriter diag(dir + "/diagnostics.csv", kOfflineDiagnosticsHeader);
  std::uint64_t row_count = 0;
  rl::OfflineHooks hooks;
  hooks.on_metrics = [&](const rl::OfflineRow& r) {
    csv.line(offline_csv_row(++row_count, r));
    diag.line(offline_diagnostics_row(r));
  };
  auto res = rl::train_offline(ds, otc, cfg.seed, eval_env.get(), hooks);

  nn::save_checkpoint(res.sac.policy, dir + "/policy.ckpt");
  nn::save_checkpoint(res.sac.q1, dir + "/q1.ckpt");
  nn::save_checkpoint(res.sac.q2, dir + "/q2.ckpt");
  ojson r;
  r["grad_steps"] = res.grad_steps;
  r["dataset"] = dspath;
  r["dataset_mean_episode_return"] = ds.mean_episode_return();
  r["final_mean_dataset_q"] = res.final_mean_dataset_q;
  r["final_mean_mc_return"] = res.final_mean_mc_return;
  r["conservative"] =
      res.final_mean_dataset_q <=
      res.final_mean_mc_return + 0.1 * std::abs(res.final_mean_mc_return);
  write_text(dir + "/result.json", r.dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------
// eval

EvalReport cmd_eval(const RunConfig& cfg) {
  if (cfg.eval_episodes < 1) throw ConfigError("eval: episodes must be >= 1");
  if (cfg.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
  if (!fs::exists(cfg.checkpoint))
    throw ConfigError("eval: checkpoint not found: " + cfg.checkpoint);
  auto policy = nn::load_checkpoint(cfg.checkpoint);

  env::TerminalBuffer prev;
  std::unique_ptr<env::RlEnv> e;
  if (is_bimanual(cfg.env_name)) {
    const int stage = effective_stage(cfg);
    if (stage == 0) {
      e = std::make_unique<env::WholeTaskEnv>(cfg.env, 0);
    } else {
      const env::TerminalBuffer* prev_ptr = nullptr;
      if (stage > 1) {
        const std::string p = terminals_path(cfg, stage - 1);
        if (!fs::exists(p))
          throw ConfigError("eval: missing terminal states for stage " + std::to_string(stage) +
                            ": " + p);
        prev = env::TerminalBuffer::load(p, cfg.env);
        prev_ptr = &prev;
      }
      e = std::make_unique<env::BimanualEnv>(cfg.env, env::make_stage_spec(stage, cfg.env), 0,
                                             prev_ptr);
    }
  } else {
    e = env::make_bench_env(cfg.env_name, 0);
  }

  auto rep = evaluate(*e, policy, cfg.eval_episodes, cfg.seed);
  const std::string dir = cfg.out + "/eval";
  ensure_dir(dir);
  write_text(dir + "/config.json", run_config_to_json(cfg));
  write_text(dir + "/report.json", eval_report_to_json(rep));
  return rep;
}

// ---------------------------------------------------------------------------
// ablate

AblateSummary cmd_ablate(const RunConfig& cfg) {
  const std::string& ename = cfg.env_name;
  if (ename != "pendulum_swingup" && ename != "planar_reach" && ename != "stage1_task") {
    throw ConfigError(
        "ablate: env_name must be pendulum_swingup, planar_reach, or stage1_task");
  }
  if (cfg.ablate.seeds.size() < 3) throw ConfigError("ablate: need at least 3 seeds");
  const std::string dir = cfg.out + "/ablate";
  ensure_dir(dir);
  write_text(dir + "/config.json", run_config_to_json(cfg));

  // Both arms run the flat task under equal budgets: no wait curriculum, no
  // early stopping, shared per-seed env streams.
  rl::PpoConfig pcfg = cfg.ppo;
  pcfg.schedule = {rl::WaitPhase::kBoth};
  pcfg.early_stop_success = -1.0;
  pcfg.checkpoint_every = 0;

  AblateSummary sum;
  sum.env_name = ename;
  sum.seeds = cfg.ablate.seeds;
  sum.metric = (ename == "pendulum_swingup") ? "mean_return" : "success_rate";
  const bool same_algos = cfg.ablate.algos[0] == cfg.ablate.algos[1];

  std::array<std::vector<std::vector<rl::TrainIterationRow>>, 2> curves;
  for (int arm = 0; arm < 2; ++arm) {
    const std::string& algo = cfg.ablate.algos[static_cast<std::size_t>(arm)];
    auto& out_arm = sum.arms[static_cast<std::size_t>(arm)];
    out_arm.algo = algo;
    for (std::uint64_t seed : cfg.ablate.seeds) {
      env::VecEnv envs(make_stage1_or_bench_envs(cfg, 1, pcfg.num_envs, nullptr, nullptr),
                       RngStream(seed).split("vecenv").state());
      std::vector<rl::TrainIterationRow> rows;
      if (algo == "ppo") {
        rows = rl::train_stage(envs, pcfg, seed).rows;
      } else {
        rows = rl::train_stage_cqlppo(envs, pcfg, cfg.cql, seed).rows;
      }
      CsvWriter csv(dir + "/arm" + std::to_string(arm) + "_" + algo + "_seed" +
                        std::to_string(seed) + ".csv",
                    kOnlineCsvHeader);
      for (const auto& row : rows) csv.line(online_csv_row(row));
      out_arm.final_return.push_back(last_finite(rows, &rl::TrainIterationRow::mean_return));
      out_arm.final_success.push_back(last_finite(rows, &rl::TrainIterationRow::success_rate));
      curves[static_cast<std::size_t>(arm)].push_back(std::move(rows));
    }
  }

  // Per-arm mean and population std of the primary metric.
  std::array<double, 2> vars{0.0, 0.0};
  for (int arm = 0; arm < 2; ++arm) {
    auto& a = sum.arms[static_cast<std::size_t>(arm)];
    const auto& finals = (sum.metric == "mean_return") ? a.final_return : a.final_success;
    double mean = 0.0;
    for (double v : finals) mean += v;
    mean /= static_cast<double>(finals.size());
    double var = 0.0;
    for (double v : finals) {
      const double d = v - mean;
      var += d * d;
    }
    var /= static_cast<double>(finals.size());
    a.mean_final = mean;
    a.std_final = std::sqrt(var);
    vars[static_cast<std::size_t>(arm)] = var;
  }
  sum.mean_diff = sum.arms[1].mean_final - sum.arms[0].mean_final;
  sum.pooled_std = std::sqrt((vars[0] + vars[1]) / 2.0);
  sum.parity_ok = std::abs(sum.mean_diff) <= sum.pooled_std;

  // Ordering: conservative arm at least as good as plain PPO on the mean.
  int ppo_arm = -1, cql_arm = -1;
  for (int arm = 0; arm < 2; ++arm) {
    if (sum.arms[static_cast<std::size_t>(arm)].algo == "ppo") ppo_arm = arm;
    if (sum.arms[static_cast<std::size_t>(arm)].algo == "cql_ppo") cql_arm = arm;
  }
  const bool both_present = ppo_arm >= 0 && cql_arm >= 0;
  sum.ordering_ok =
      both_present && sum.arms[static_cast<std::size_t>(cql_arm)].mean_final >=
                          sum.arms[static_cast<std::size_t>(ppo_arm)].mean_final;

  // Row-by-row curve difference between the arms, per seed.
  double wiring = 0.0;
  for (std::size_t si = 0; si < cfg.ablate.seeds.size(); ++si) {
    const auto& r0 = curves[0][si];
    const auto& r1 = curves[1][si];
    if (r0.size() != r1.size()) {
      wiring = std::numeric_limits<double>::infinity();
      break;
    }
    for (std::size_t i = 0; i < r0.size(); ++i) {
      wiring = std::max(wiring, cell_diff(static_cast<double>(r0[i].iteration),
                                          static_cast<double>(r1[i].iteration)));
      wiring = std::max(wiring, cell_diff(static_cast<double>(r0[i].env_steps),
                                          static_cast<double>(r1[i].env_steps)));
      wiring = std::max(wiring, cell_diff(r0[i].mean_return, r1[i].mean_return));
      wiring = std::max(wiring, cell_diff(r0[i].success_rate, r1[i].success_rate));
      wiring = std::max(wiring, cell_diff(r0[i].kl, r1[i].kl));
      wiring = std::max(wiring, cell_diff(r0[i].beta, r1[i].beta));
      if (r0[i].phase != r1[i].phase) wiring = std::numeric_limits<double>::infinity();
    }
  }
  sum.wiring_max_diff = wiring;

  if (same_algos) {
    if (!(sum.wiring_max_diff <= 1e-12))
      sum.violations.push_back("identical algorithms produced different curves");
  } else if (ename == "stage1_task") {
    if (!sum.ordering_ok)
      sum.violations.push_back("cql_ppo mean final success below plain ppo");
  } else {
    if (!sum.parity_ok)
      sum.violations.push_back("final performance differs by more than one pooled std");
  }

  ojson j;
  j["env_name"] = sum.env_name;
  j["metric"] = sum.metric;
  j["seeds"] = sum.seeds;
  ojson arms = ojson::array();
  for (int arm = 0; arm < 2; ++arm) {
    const auto& a = sum.arms[static_cast<std::size_t>(arm)];
    ojson aj;
    aj["algo"] = a.algo;
    aj["final_return"] = a.final_return;
    aj["final_success"] = a.final_success;
    aj["mean_final"] = a.mean_final;
    aj["std_final"] = a.std_final;
    arms.push_back(std::move(aj));
  }
  j["arms"] = std::move(arms);
  j["mean_diff"] = sum.mean_diff;
  j["pooled_std"] = sum.pooled_std;
  j["parity_ok"] = sum.parity_ok;
  j["ordering_checked"] = both_present;
  j["ordering_ok"] = sum.ordering_ok;
  j["wiring_max_diff"] = sum.wiring_max_diff;
  j["violations"] = sum.violations;
  write_text(dir + "/summary.json", j.dump(2) + "\n");

  std::ostringstream table;
  table << "env: " << sum.env_name << "  metric: " << sum.metric << "\n";
  for (int arm = 0; arm < 2; ++arm) {
    const auto& a = sum.arms[static_cast<std::size_t>(arm)];
    const auto& finals = (sum.metric == "mean_return") ? a.final_return : a.final_success;
    table << a.algo << ":";
    for (std::size_t si = 0; si < finals.size(); ++si) {
      table << " seed" << cfg.ablate.seeds[si] << "=" << format_g6(finals[si]);
    }
    table << "  mean=" << format_g6(a.mean_final) << " std=" << format_g6(a.std_final) << "\n";
  }
  table << "diff=" << format_g6(sum.mean_diff) << " pooled_std=" << format_g6(sum.pooled_std)
        << "\n";
  for (const auto& v : sum.violations) table << "violated: " << v << "\n";
  write_text(dir + "/final_table.txt", table.str());

  // Learning-curve charts, one band per arm across seeds.
  for (const char* metric : {"mean_return", "success_rate"}) {
    std::vector<PlotSeries> series(2);
    for (int arm = 0; arm < 2; ++arm) {
      auto& s = series[static_cast<std::size_t>(arm)];
      s.label = sum.arms[static_cast<std::size_t>(arm)].algo;
      if (same_algos) s.label += " (arm " + std::to_string(arm + 1) + ")";
      for (const auto& rows : curves[static_cast<std::size_t>(arm)]) {
        Vec x, y;
        x.reserve(rows.size());
        y.reserve(rows.size());
        for (const auto& row : rows) {
          x.push_back(static_cast<double>(row.env_steps));
          y.push_back(std::string(metric) == "mean_return" ? row.mean_return
                                                           : row.success_rate);
        }
        s.xs.push_back(std::move(x));
        s.ys.push_back(std::move(y));
      }
    }
    write_line_chart(dir + "/" + metric + ".svg", sum.env_name + ": " + metric, "env_steps",
                     metric, series);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// plot

void cmd_plot(const RunConfig& cfg, const std::vector<std::string>& csv_paths) {
  if (csv_paths.empty()) throw ConfigError("plot: give at least one metrics CSV");
  ensure_dir(cfg.out);
  write_text(cfg.out + "/plot_config.json", run_config_to_json(cfg));

  std::vector<CsvTable> tables;
  tables.reserve(csv_paths.size());
  for (const auto& p : csv_paths) tables.push_back(read_csv(p));
  for (std::size_t i = 1; i < tables.size(); ++i) {
    if (tables[i].columns != tables[0].columns)
      throw FormatError("CSV schema mismatch: " + csv_paths[i]);
  }
  int xc = tables[0].col("env_steps");
  if (xc < 0) xc = tables[0].col("grad_step");
  if (xc < 0) throw FormatError("CSV schema has no env_steps column");
  const std::string x_name = tables[0].columns[static_cast<std::size_t>(xc)];

  for (std::size_t c = 0; c < tables[0].columns.size(); ++c) {
    const std::string& name = tables[0].columns[c];
    if (name == "iteration" || name == "env_steps" || name == "grad_step") continue;
    bool numeric = true;
    for (const auto& t : tables) numeric = numeric && t.numeric_column(static_cast<int>(c));
    if (!numeric) continue;

    PlotSeries s;
    s.label = name;
    for (const auto& t : tables) {
      Vec x, y;
      x.reserve(t.rows.size());
      y.reserve(t.rows.size());
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        x.push_back(t.num(r, xc));
        y.push_back(t.num(r, static_cast<int>(c)));
      }
      s.xs.push_back(std::move(x));
      s.ys.push_back(std::move(y));
    }
    write_line_chart(cfg.out + "/" + name + ".svg", name, x_name, name, {s});
  }
}

}  // namespace mixline::harness
