#include "mixline/config.hpp"

#include <unistd.h>

#include <cctype>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include <json.hpp>

#include "mixline/errors.hpp"

extern char** environ;

namespace mixline::harness {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* a : allowed) {
      if (it.key() == a) {
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void get_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void parse_ppo(const json& j, rl::PpoConfig& p) {
  check_keys(j,
             {"num_envs", "horizon", "epochs", "minibatch", "lr", "gamma", "lambda", "use_clip",
              "clip_eps", "kl_target", "beta0", "entropy_coef", "normalize_advantages", "hidden",
              "init_log_std", "final_scale", "total_env_steps", "schedule", "advance_threshold",
              "advance_window", "early_stop_success", "checkpoint_every"},
             "ppo");
  get_field(j, "num_envs", p.num_envs, "ppo");
  get_field(j, "horizon", p.horizon, "ppo");
  get_field(j, "epochs", p.epochs, "ppo");
  get_field(j, "minibatch", p.minibatch, "ppo");
  get_field(j, "lr", p.lr, "ppo");
  get_field(j, "gamma", p.gamma, "ppo");
  get_field(j, "lambda", p.lambda, "ppo");
  get_field(j, "use_clip", p.use_clip, "ppo");
  get_field(j, "clip_eps", p.clip_eps, "ppo");
  get_field(j, "kl_target", p.kl_target, "ppo");
  get_field(j, "beta0", p.beta0, "ppo");
  get_field(j, "entropy_coef", p.entropy_coef, "ppo");
  get_field(j, "normalize_advantages", p.normalize_advantages, "ppo");
  get_field(j, "hidden", p.hidden, "ppo");
  get_field(j, "init_log_std", p.init_log_std, "ppo");
  get_field(j, "final_scale", p.final_scale, "ppo");
  get_field(j, "total_env_steps", p.total_env_steps, "ppo");
  if (j.contains("schedule")) {
    std::vector<std::string> names;
    get_field(j, "schedule", names, "ppo");
    p.schedule.clear();
    for (const auto& n : names) p.schedule.push_back(rl::wait_phase_from_name(n));
  }
  get_field(j, "advance_threshold", p.advance_threshold, "ppo");
  get_field(j, "advance_window", p.advance_window, "ppo");
  get_field(j, "early_stop_success", p.early_stop_success, "ppo");
  get_field(j, "checkpoint_every", p.checkpoint_every, "ppo");
}

void parse_cql(const json& j, rl::CqlConfig& c) {
  check_keys(j,
             {"alpha_cql", "num_sampled_actions", "mu_mode", "gamma", "polyak_tau", "lr_policy",
              "lr_critic", "lr_alpha", "batch_size"},
             "cql");
  get_field(j, "alpha_cql", c.alpha_cql, "cql");
  get_field(j, "num_sampled_actions", c.num_sampled_actions, "cql");
  if (j.contains("mu_mode")) {
    std::string name;
    get_field(j, "mu_mode", name, "cql");
    c.mu_mode = rl::mu_mode_from_name(name);
  }
  get_field(j, "gamma", c.gamma, "cql");
  get_field(j, "polyak_tau", c.polyak_tau, "cql");
  get_field(j, "lr_policy", c.lr_policy, "cql");
  get_field(j, "lr_critic", c.lr_critic, "cql");
  get_field(j, "lr_alpha", c.lr_alpha, "cql");
  get_field(j, "batch_size", c.batch_size, "cql");
}

void parse_offline(const json& j, OfflineConfig& o) {
  check_keys(j,
             {"hidden", "grad_steps", "eval_every", "eval_episodes", "conserve_probe",
              "eval_stage", "dataset"},
             "offline");
  get_field(j, "hidden", o.hidden, "offline");
  get_field(j, "grad_steps", o.grad_steps, "offline");
  get_field(j, "eval_every", o.eval_every, "offline");
  get_field(j, "eval_episodes", o.eval_episodes, "offline");
  get_field(j, "conserve_probe", o.conserve_probe, "offline");
  get_field(j, "eval_stage", o.eval_stage, "offline");
  get_field(j, "dataset", o.dataset, "offline");
}

void parse_collect(const json& j, CollectConfig& c) {
  check_keys(j, {"episodes", "success_only", "retry_multiple"}, "collect");
  get_field(j, "episodes", c.episodes, "collect");
  get_field(j, "success_only", c.success_only, "collect");
  get_field(j, "retry_multiple", c.retry_multiple, "collect");
}

void parse_compose(const json& j, ComposeConfig& c) {
  check_keys(j,
             {"episodes", "step_caps", "success_required", "step_cost", "stage_bonus",
              "shaped_scale"},
             "compose");
  get_field(j, "episodes", c.episodes, "compose");
  get_field(j, "step_caps", c.step_caps, "compose");
  get_field(j, "success_required", c.success_required, "compose");
  get_field(j, "step_cost", c.step_cost, "compose");
  get_field(j, "stage_bonus", c.stage_bonus, "compose");
  get_field(j, "shaped_scale", c.shaped_scale, "compose");
}

void parse_ablate(const json& j, AblateConfig& a) {
  check_keys(j, {"seeds", "algos"}, "ablate");
  get_field(j, "seeds", a.seeds, "ablate");
  get_field(j, "algos", a.algos, "ablate");
}

}  // namespace

bool is_bimanual(const std::string& env_name) {
  return env_name == "bimanual" || env_name == "stage1_task";
}

int effective_stage(const RunConfig& cfg) {
  return cfg.env_name == "stage1_task" ? 1 : cfg.stage;
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected an object");
  check_keys(j,
             {"experiment", "seed", "out", "env_name", "stage", "checkpoint", "eval_episodes",
              "env", "ppo", "cql", "offline", "collect", "compose", "ablate"},
             "config");
  RunConfig cfg;
  get_field(j, "experiment", cfg.experiment, "config");
  get_field(j, "seed", cfg.seed, "config");
  get_field(j, "out", cfg.out, "config");
  get_field(j, "env_name", cfg.env_name, "config");
  get_field(j, "stage", cfg.stage, "config");
  get_field(j, "checkpoint", cfg.checkpoint, "config");
  get_field(j, "eval_episodes", cfg.eval_episodes, "config");
  if (j.contains("env")) cfg.env = env::env_config_from_json(j.at("env").dump());
  if (j.contains("ppo")) parse_ppo(j.at("ppo"), cfg.ppo);
  if (j.contains("cql")) parse_cql(j.at("cql"), cfg.cql);
  if (j.contains("offline")) parse_offline(j.at("offline"), cfg.offline);
  if (j.contains("collect")) parse_collect(j.at("collect"), cfg.collect);
  if (j.contains("compose")) parse_compose(j.at("compose"), cfg.compose);
  if (j.contains("ablate")) parse_ablate(j.at("ablate"), cfg.ablate);
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  ojson j;
  j["experiment"] = cfg.experiment;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out;
  j["env_name"] = cfg.env_name;
  j["stage"] = cfg.stage;
  j["checkpoint"] = cfg.checkpoint;
  j["eval_episodes"] = cfg.eval_episodes;
  j["env"] = ojson::parse(env::env_config_to_json(cfg.env));

  ojson p;
  p["num_envs"] = cfg.ppo.num_envs;
  p["horizon"] = cfg.ppo.horizon;
  p["epochs"] = cfg.ppo.epochs;
  p["minibatch"] = cfg.ppo.minibatch;
  p["lr"] = cfg.ppo.lr;
  p["gamma"] = cfg.ppo.gamma;
  p["lambda"] = cfg.ppo.lambda;
  p["use_clip"] = cfg.ppo.use_clip;
  p["clip_eps"] = cfg.ppo.clip_eps;
  p["kl_target"] = cfg.ppo.kl_target;
  p["beta0"] = cfg.ppo.beta0;
  p["entropy_coef"] = cfg.ppo.entropy_coef;
  p["normalize_advantages"] = cfg.ppo.normalize_advantages;
  p["hidden"] = cfg.ppo.hidden;
  p["init_log_std"] = cfg.ppo.init_log_std;
  p["final_scale"] = cfg.ppo.final_scale;
  p["total_env_steps"] = cfg.ppo.total_env_steps;
  std::vector<std::string> schedule;
  for (auto ph : cfg.ppo.schedule) schedule.push_back(rl::wait_phase_name(ph));
  p["schedule"] = schedule;
  p["advance_threshold"] = cfg.ppo.advance_threshold;
  p["advance_window"] = cfg.ppo.advance_window;
  p["early_stop_success"] = cfg.ppo.early_stop_success;
  p["checkpoint_every"] = cfg.ppo.checkpoint_every;
  j["ppo"] = std::move(p);

  ojson c;
  c["alpha_cql"] = cfg.cql.alpha_cql;
  c["num_sampled_actions"] = cfg.cql.num_sampled_actions;
  c["mu_mode"] = rl::mu_mode_name(cfg.cql.mu_mode);
  c["gamma"] = cfg.cql.gamma;
  c["polyak_tau"] = cfg.cql.polyak_tau;
  c["lr_policy"] = cfg.cql.lr_policy;
  c["lr_critic"] = cfg.cql.lr_critic;
  c["lr_alpha"] = cfg.cql.lr_alpha;
  c["batch_size"] = cfg.cql.batch_size;
  j["cql"] = std::move(c);

  ojson o;
  o["hidden"] = cfg.offline.hidden;
  o["grad_steps"] = cfg.offline.grad_steps;
  o["eval_every"] = cfg.offline.eval_every;
  o["eval_episodes"] = cfg.offline.eval_episodes;
  o["conserve_probe"] = cfg.offline.conserve_probe;
  o["eval_stage"] = cfg.offline.eval_stage;
  o["dataset"] = cfg.offline.dataset;
  j["offline"] = std::move(o);

  ojson col;
  col["episodes"] = cfg.collect.episodes;
  col["success_only"] = cfg.collect.success_only;
  col["retry_multiple"] = cfg.collect.retry_multiple;
  j["collect"] = std::move(col);

  ojson com;
  com["episodes"] = cfg.compose.episodes;
  com["step_caps"] = cfg.compose.step_caps;
  com["success_required"] = cfg.compose.success_required;
  com["step_cost"] = cfg.compose.step_cost;
  com["stage_bonus"] = cfg.compose.stage_bonus;
  com["shaped_scale"] = cfg.compose.shaped_scale;
  j["compose"] = std::move(com);

  ojson a;
  a["seeds"] = cfg.ablate.seeds;
  a["algos"] = cfg.ablate.algos;
  j["ablate"] = std::move(a);

  return j.dump(2) + "\n";
}

std::vector<std::pair<std::string, std::string>> env_overrides() {
  std::vector<std::pair<std::string, std::string>> out;
  const std::string prefix = "MIXLINE_";
  for (char** p = environ; p && *p; ++p) {
    std::string entry(*p);
    auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string name = entry.substr(0, eq);
    if (name.rfind(prefix, 0) != 0 || name.size() == prefix.size()) continue;
    out.emplace_back(name.substr(prefix.size()), entry.substr(eq + 1));
  }
  return out;
}

void apply_overrides(std::string& json_text,
                     const std::vector<std::pair<std::string, std::string>>& overrides) {
  if (overrides.empty()) return;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected an object");
  for (const auto& [name, value] : overrides) {
    // Split the variable name on "__" and lowercase the segments.
    std::vector<std::string> path;
    std::string seg;
    for (std::size_t i = 0; i <= name.size(); ++i) {
      if (i + 1 < name.size() && name[i] == '_' && name[i + 1] == '_') {
        path.push_back(seg);
        seg.clear();
        ++i;
      } else if (i < name.size()) {
        seg += static_cast<char>(std::tolower(static_cast<unsigned char>(name[i])));
      }
    }
    path.push_back(seg);
    for (const auto& s : path) {
      if (s.empty()) throw ConfigError("override MIXLINE_" + name + ": empty path segment");
    }
    json* node = &j;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      json& child = (*node)[path[i]];
      if (!child.is_object()) {
        if (!child.is_null())
          throw ConfigError("override MIXLINE_" + name + ": '" + path[i] + "' is not a section");
        child = json::object();
      }
      node = &child;
    }
    (*node)[path.back()] =
        json::accept(value) ? json::parse(value) : json(value);
  }
  json_text = j.dump();
}

RunConfig load_run_config(const std::string& path) {
  std::string text = "{}";
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config file not found: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  apply_overrides(text, env_overrides());
  return run_config_from_json(text);
}

void validate_run_config(const RunConfig& cfg) {
  auto bad = [](const std::string& msg) { return ConfigError("config: " + msg); };
  if (!is_bimanual(cfg.env_name) && cfg.env_name != "pendulum_swingup" &&
      cfg.env_name != "planar_reach") {
    throw bad("unknown env_name '" + cfg.env_name + "'");
  }
  if (cfg.stage < 0 || cfg.stage > 3) throw bad("stage must be in [0, 3]");
  if (cfg.eval_episodes < 0) throw bad("eval_episodes must be >= 0");

  const auto& p = cfg.ppo;
  if (p.num_envs < 1) throw bad("ppo.num_envs must be >= 1");
  if (p.horizon < 1) throw bad("ppo.horizon must be >= 1");
  if (p.epochs < 1) throw bad("ppo.epochs must be >= 1");
  if (p.minibatch < 1) throw bad("ppo.minibatch must be >= 1");
  if (!(p.lr > 0.0) || !std::isfinite(p.lr)) throw bad("ppo.lr must be positive");
  if (!(p.gamma >= 0.0 && p.gamma <= 1.0)) throw bad("ppo.gamma must be in [0, 1]");
  if (!(p.lambda >= 0.0 && p.lambda <= 1.0)) throw bad("ppo.lambda must be in [0, 1]");
  if (!(p.clip_eps > 0.0)) throw bad("ppo.clip_eps must be positive");
  if (!(p.kl_target > 0.0)) throw bad("ppo.kl_target must be positive");
  if (!(p.beta0 > 0.0)) throw bad("ppo.beta0 must be positive");
  if (!(p.entropy_coef >= 0.0)) throw bad("ppo.entropy_coef must be >= 0");
  if (p.hidden.empty()) throw bad("ppo.hidden must not be empty");
  for (int h : p.hidden)
    if (h < 1) throw bad("ppo.hidden entries must be >= 1");
  if (!(p.final_scale > 0.0)) throw bad("ppo.final_scale must be positive");
  if (p.schedule.empty()) throw bad("ppo.schedule must not be empty");
  if (!(p.advance_threshold >= 0.0 && p.advance_threshold <= 1.0))
    throw bad("ppo.advance_threshold must be in [0, 1]");
  if (p.advance_window < 1) throw bad("ppo.advance_window must be >= 1");
  if (p.checkpoint_every < 0) throw bad("ppo.checkpoint_every must be >= 0");

  rl::validate(cfg.cql);

  const auto& o = cfg.offline;
  if (o.hidden.empty()) throw bad("offline.hidden must not be empty");
  for (int h : o.hidden)
    if (h < 1) throw bad("offline.hidden entries must be >= 1");
  if (o.eval_every < 1) throw bad("offline.eval_every must be >= 1");
  if (o.eval_episodes < 0) throw bad("offline.eval_episodes must be >= 0");
  if (o.conserve_probe < 1) throw bad("offline.conserve_probe must be >= 1");
  if (o.eval_stage < 0 || o.eval_stage > 3) throw bad("offline.eval_stage must be in [0, 3]");

  if (cfg.collect.episodes < 1) throw bad("collect.episodes must be >= 1");
  if (cfg.collect.retry_multiple < 1) throw bad("collect.retry_multiple must be >= 1");

  const auto& cm = cfg.compose;
  if (cm.episodes < 1) throw bad("compose.episodes must be >= 1");
  if (cm.step_caps.size() != 3) throw bad("compose.step_caps must have 3 entries");
  for (int c : cm.step_caps)
    if (c < 1) throw bad("compose.step_caps entries must be >= 1");
  if (cm.success_required.size() != 3) throw bad("compose.success_required must have 3 entries");
  if (!(cm.step_cost >= 0.0)) throw bad("compose.step_cost must be >= 0");
  if (!(cm.stage_bonus >= 0.0)) throw bad("compose.stage_bonus must be >= 0");
  if (!(cm.shaped_scale >= 0.0)) throw bad("compose.shaped_scale must be >= 0");

  if (cfg.ablate.algos.size() != 2) throw bad("ablate.algos must have exactly 2 entries");
  for (const auto& a : cfg.ablate.algos) {
    if (a != "ppo" && a != "cql_ppo")
      throw bad("ablate.algos entries must be 'ppo' or 'cql_ppo'");
  }
  if (cfg.ablate.seeds.empty()) throw bad("ablate.seeds must not be empty");
}

}  // namespace mixline::harness
