#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mixline/config.hpp"
#include "mixline/errors.hpp"
#include "mixline/harness.hpp"

namespace {

int fail(const char* category, const std::exception& e, int code) {
  std::cerr << "error: " << category << ": " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "mixline: staged bimanual manipulation pipeline -- per-stage online PPO with "
      "wait-training, trajectory recording, cross-stage composition, and offline CQL"};
  app.require_subcommand(1);

  std::string config_path, out, checkpoint;
  std::uint64_t seed = 0, budget = 0;
  int stage = 1, episodes = 0;
  std::vector<std::string> csv_paths;

  const auto add_common = [&](CLI::App* sc) {
    sc->add_option("--config", config_path, "run config JSON file (defaults apply without one)");
    sc->add_option("--seed", seed, "master seed (overrides the config)");
    sc->add_option("--out", out, "output directory (overrides the config)");
    sc->add_option("--stage", stage, "bimanual stage 1..3; 0 = whole task (eval)");
    sc->add_option("--budget", budget,
                   "env-step budget (train-stage, ablate) or gradient steps (train-offline)");
    sc->add_option("--episodes", episodes, "episode count (eval, collect, compose)");
    sc->add_option("--checkpoint", checkpoint, "policy checkpoint path");
  };

  add_common(app.add_subcommand("train-stage", "online PPO on one stage (or a bench env)"));
  add_common(app.add_subcommand("collect", "record deterministic-policy episodes to a dataset"));
  add_common(app.add_subcommand("compose", "stitch stage policies into whole-task trajectories"));
  add_common(app.add_subcommand("train-offline", "offline CQL on a recorded dataset"));
  add_common(app.add_subcommand("eval", "evaluate a checkpoint, seeded and deterministic"));
  add_common(app.add_subcommand("ablate", "PPO vs CQL+PPO learning curves over >= 3 seeds"));
  auto* sc_plot = app.add_subcommand("plot", "render metric CSVs as SVG charts");
  add_common(sc_plot);
  sc_plot->add_option("csvs", csv_paths, "metrics CSV files (band across files per metric)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();

  try {
    auto cfg = mixline::harness::load_run_config(config_path);
    if (sub->count("--seed")) cfg.seed = seed;
    if (sub->count("--out")) cfg.out = out;
    if (sub->count("--stage")) cfg.stage = stage;
    if (sub->count("--checkpoint")) cfg.checkpoint = checkpoint;
    if (sub->count("--budget")) {
      if (name == "train-offline")
        cfg.offline.grad_steps = budget;
      else
        cfg.ppo.total_env_steps = budget;
    }
    if (sub->count("--episodes")) {
      if (name == "eval")
        cfg.eval_episodes = episodes;
      else if (name == "collect")
        cfg.collect.episodes = episodes;
      else if (name == "compose")
        cfg.compose.episodes = episodes;
      else if (name == "train-offline")
        cfg.offline.eval_episodes = episodes;
    }
    mixline::harness::validate_run_config(cfg);

    if (name == "train-stage") {
      mixline::harness::cmd_train_stage(cfg);
      std::cout << "train-stage complete: " << cfg.out << "\n";
    } else if (name == "collect") {
      mixline::harness::cmd_collect(cfg);
      std::cout << "collect complete: " << cfg.out << "\n";
    } else if (name == "compose") {
      mixline::harness::cmd_compose(cfg);
      std::cout << "compose complete: " << cfg.out << "/whole_task.mxds\n";
    } else if (name == "train-offline") {
      mixline::harness::cmd_train_offline(cfg);
      std::cout << "train-offline complete: " << cfg.out << "/offline\n";
    } else if (name == "eval") {
      const auto rep = mixline::harness::cmd_eval(cfg);
      std::cout << mixline::harness::eval_report_to_json(rep);
    } else if (name == "ablate") {
      const auto sum = mixline::harness::cmd_ablate(cfg);
      for (const auto& v : sum.violations) std::cout << "violated: " << v << "\n";
      std::cout << "ablate complete: " << cfg.out << "/ablate\n";
    } else if (name == "plot") {
      mixline::harness::cmd_plot(cfg, csv_paths);
      std::cout << "plot complete: " << cfg.out << "\n";
    }
  } catch (const mixline::ConfigError& e) {
    return fail("config", e, 2);
  } catch (const mixline::FormatError& e) {
    return fail("format", e, 2);
  } catch (const mixline::CorruptionError& e) {
    return fail("corruption", e, 2);
  } catch (const mixline::CollectionError& e) {
    return fail("collection", e, 3);
  } catch (const mixline::CompositionError& e) {
    return fail("composition", e, 3);
  } catch (const mixline::NumericError& e) {
    return fail("numeric", e, 4);
  } catch (const std::exception& e) {
    return fail("internal", e, 1);
  }
  return 0;
}
