#include "mixline/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mixline/binary_io.hpp"
#include "mixline/checksum.hpp"
#include "mixline/errors.hpp"
#include "mixline/ppo.hpp"
#include "mixline/rng.hpp"

namespace mixline::data {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Trajectory invariants

void validate_trajectory(const Trajectory& t) {
  const int n = t.obs.rows;
  if (t.actions.rows != n || t.next_obs.rows != n ||
      static_cast<int>(t.rewards.size()) != n || static_cast<int>(t.dones.size()) != n ||
      static_cast<int>(t.stage_ids.size()) != n)
    throw ConfigError("trajectory: parallel arrays disagree on length");
  if (t.obs.cols != t.next_obs.cols)
    throw ConfigError("trajectory: obs and next_obs dimensions differ");
  if (!t.orig_rewards.empty() && static_cast<int>(t.orig_rewards.size()) != n)
    throw ConfigError("trajectory: orig_rewards length mismatch");

  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(t.rewards[i])) throw ConfigError("trajectory: non-finite reward");
    sum += t.rewards[i];
    if (t.dones[i] != (i == n - 1 ? 1 : 0))
      throw ConfigError("trajectory: done must be set exactly on the final transition");
    if (i > 0 && t.stage_ids[i] < t.stage_ids[i - 1])
      throw ConfigError("trajectory: stage ids must be non-decreasing");
    if (i + 1 < n &&
        std::memcmp(t.next_obs.row(i), t.obs.row(i + 1), sizeof(double) * t.obs.cols) != 0)
      throw ConfigError("trajectory: next_obs[t] != obs[t+1]");
  }
  if (n > 0 && sum != t.episode_return)
    throw ConfigError("trajectory: episode_return does not equal the reward sum");
}

// ---------------------------------------------------------------------------
// Headers

DatasetHeader make_bimanual_header(const env::EnvConfig& cfg, std::string created) {
  DatasetHeader h;
  h.env_name = "bimanual_coffee";
  h.env_digest = env::env_config_digest(cfg);
  h.obs_layout = env::bimanual_observation_layout();
  h.obs_dim = h.obs_layout.total_dim;
  h.action_dim = 8;
  h.created = std::move(created);
  return h;
}

DatasetHeader make_bench_header(const std::string& env_name, int obs_dim, int action_dim,
                                std::string created) {
  DatasetHeader h;
  h.env_name = env_name;
  h.env_digest = fnv1a64("bench:" + env_name);
  h.obs_layout.blocks = {{"obs", 0, obs_dim}};
  h.obs_layout.total_dim = obs_dim;
  h.obs_dim = obs_dim;
  h.action_dim = action_dim;
  h.created = std::move(created);
  return h;
}

static bool layouts_equal(const env::ObservationLayout& a, const env::ObservationLayout& b) {
  if (a.total_dim != b.total_dim || a.blocks.size() != b.blocks.size()) return false;
  for (std::size_t i = 0; i < a.blocks.size(); ++i)
    if (a.blocks[i].name != b.blocks[i].name || a.blocks[i].start != b.blocks[i].start ||
        a.blocks[i].length != b.blocks[i].length)
      return false;
  return true;
}

// ---------------------------------------------------------------------------
// OfflineDataset

OfflineDataset::OfflineDataset(DatasetHeader header, std::vector<Trajectory> trajectories)
    : header_(std::move(header)), trajectories_(std::move(trajectories)) {
  index_.reserve(trajectories_.size());
  std::uint64_t acc = 0;
  for (const auto& t : trajectories_) {
    acc += static_cast<std::uint64_t>(t.length());
    index_.push_back(acc);
  }
  header_.trajectory_count = trajectories_.size();
  header_.transition_count = acc;
}

OfflineDataset::TransitionRef OfflineDataset::transition(std::uint64_t i) const {
  if (i >= transition_count()) throw ConfigError("dataset: transition index out of range");
  const auto it = std::upper_bound(index_.begin(), index_.end(), i);
  const std::size_t traj = static_cast<std::size_t>(it - index_.begin());
  const std::uint64_t base = traj == 0 ? 0 : index_[traj - 1];
  const Trajectory& t = trajectories_[traj];
  const int row = static_cast<int>(i - base);
  TransitionRef ref;
  ref.obs = {t.obs.row(row), static_cast<std::size_t>(t.obs.cols)};
  ref.action = {t.actions.row(row), static_cast<std::size_t>(t.actions.cols)};
  ref.reward = t.rewards[row];
  ref.next_obs = {t.next_obs.row(row), static_cast<std::size_t>(t.next_obs.cols)};
  ref.done = t.dones[row] != 0;
  ref.stage_id = t.stage_ids[row];
  return ref;
}

double OfflineDataset::mean_episode_return() const {
  if (trajectories_.empty()) throw ConfigError("dataset: empty");
  double s = 0.0;
  for (const auto& t : trajectories_) s += t.episode_return;
  return s / static_cast<double>(trajectories_.size());
}

// ---------------------------------------------------------------------------
// File format

namespace {

constexpr char kMagic[4] = {'M', 'X', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

void write_section(std::vector<std::uint8_t>& out, const char tag[4],
                   const std::vector<std::uint8_t>& body) {
  ByteWriter w{out};
  out.insert(out.end(), tag, tag + 4);
  w.u64(body.size());
  out.insert(out.end(), body.begin(), body.end());
  w.u64(crc64(body.data(), body.size()));
}

std::vector<std::uint8_t> read_section(ByteReader& r, const char tag[4]) {
  r.need(4);
  if (std::memcmp(r.data + r.pos, tag, 4) != 0)
    throw CorruptionError(std::string("dataset: expected section ") + std::string(tag, 4));
  r.pos += 4;
  const std::uint64_t len = r.u64();
  r.need(len);
  std::vector<std::uint8_t> body(r.data + r.pos, r.data + r.pos + len);
  r.pos += len;
  const std::uint64_t stored = r.u64();
  if (crc64(body.data(), body.size()) != stored)
    throw CorruptionError(std::string("dataset: checksum mismatch in section ") +
                          std::string(tag, 4));
  return body;
}

json header_to_json(const DatasetHeader& h) {
  json layout = json::array();
  for (const auto& b : h.obs_layout.blocks)
    layout.push_back({{"name", b.name}, {"start", b.start}, {"length", b.length}});
  return json{{"format_version", h.format_version},
              {"env_name", h.env_name},
              {"env_digest", h.env_digest},
              {"obs_dim", h.obs_dim},
              {"action_dim", h.action_dim},
              {"obs_layout", layout},
              {"created", h.created},
              {"trajectory_count", h.trajectory_count},
              {"transition_count", h.transition_count}};
}

DatasetHeader header_from_json(const json& j) {
  DatasetHeader h;
  for (const auto& [key, value] : j.items()) {
    if (key == "format_version") h.format_version = value.get<std::uint32_t>();
    else if (key == "env_name") h.env_name = value.get<std::string>();
    else if (key == "env_digest") h.env_digest = value.get<std::uint64_t>();
    else if (key == "obs_dim") h.obs_dim = value.get<int>();
    else if (key == "action_dim") h.action_dim = value.get<int>();
    else if (key == "created") h.created = value.get<std::string>();
    else if (key == "trajectory_count") h.trajectory_count = value.get<std::uint64_t>();
    else if (key == "transition_count") h.transition_count = value.get<std::uint64_t>();
    else if (key == "obs_layout") {
      for (const auto& b : value) {
        env::ObservationBlock blk;
        blk.name = b.at("name").get<std::string>();
        blk.start = b.at("start").get<int>();
        blk.length = b.at("length").get<int>();
        h.obs_layout.blocks.push_back(blk);
        h.obs_layout.total_dim += blk.length;
      }
    } else {
      throw CorruptionError("dataset: unknown header key: " + key);
    }
  }
  return h;
}

void check_dims(const Trajectory& t, const DatasetHeader& h) {
  if (t.length() == 0) return;
  if (t.obs.cols != h.obs_dim || t.actions.cols != h.action_dim)
    throw ConfigError("dataset: trajectory dimensions disagree with the header");
}

}  // namespace

void write_dataset(const std::vector<Trajectory>& trajectories, DatasetHeader header,
                   const std::string& path) {
  if (trajectories.empty()) throw ConfigError("dataset: refusing to write an empty dataset");
  header.format_version = kVersion;
  header.trajectory_count = trajectories.size();
  header.transition_count = 0;
  for (const auto& t : trajectories) {
    validate_trajectory(t);
    check_dims(t, header);
    header.transition_count += static_cast<std::uint64_t>(t.length());
  }

  std::vector<std::uint8_t> head_body;
  const std::string head_text = header_to_json(header).dump();
  head_body.assign(head_text.begin(), head_text.end());

  std::vector<std::uint8_t> table;
  ByteWriter tw{table};
  for (const auto& t : trajectories) {
    tw.u64(static_cast<std::uint64_t>(t.length()));
    tw.f64(t.episode_return);
    tw.u64(t.seed);
    tw.u8(t.success ? 1 : 0);
    tw.u8(t.orig_rewards.empty() ? 0 : 1);
  }

  std::vector<std::uint8_t> payload;
  ByteWriter pw{payload};
  for (const auto& t : trajectories) {
    for (double v : t.obs.a) pw.f64(v);
    for (double v : t.actions.a) pw.f64(v);
    for (double v : t.rewards) pw.f64(v);
    for (double v : t.next_obs.a) pw.f64(v);
    for (std::uint8_t v : t.dones) pw.u8(v);
    for (std::int32_t v : t.stage_ids) pw.i32(v);
    for (double v : t.orig_rewards) pw.f64(v);
  }

  std::vector<std::uint8_t> file;
  file.insert(file.end(), kMagic, kMagic + 4);
  ByteWriter fw{file};
  fw.u32(kVersion);
  write_section(file, "HEAD", head_body);
  write_section(file, "TRAJ", table);
  write_section(file, "DATA", payload);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write dataset: " + path);
  f.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
  if (!f) throw ConfigError("short write: " + path);
}

OfflineDataset read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read dataset: " + path);
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  ByteReader r{raw.data(), raw.size()};
  r.need(4);
  if (std::memcmp(raw.data(), kMagic, 4) != 0) throw CorruptionError("dataset: bad magic");
  r.pos += 4;
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError("dataset: unsupported format version " + std::to_string(version));

  const auto head_body = read_section(r, "HEAD");
  const auto table = read_section(r, "TRAJ");
  const auto payload = read_section(r, "DATA");
  if (r.pos != raw.size()) throw CorruptionError("dataset: trailing bytes after DATA");

  json hj;
  try {
    hj = json::parse(std::string(head_body.begin(), head_body.end()));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("dataset: malformed header JSON: ") + e.what());
  }
  DatasetHeader header = header_from_json(hj);
  if (header.format_version != version)
    throw CorruptionError("dataset: header/file version disagreement");

  struct Row {
    std::uint64_t length;
    double episode_return;
    std::uint64_t seed;
    bool success;
    bool has_orig;
  };
  std::vector<Row> rows;
  ByteReader tr{table.data(), table.size()};
  while (tr.pos < tr.size) {
    Row row{};
    row.length = tr.u64();
    row.episode_return = tr.f64();
    row.seed = tr.u64();
    row.success = tr.u8() != 0;
    row.has_orig = tr.u8() != 0;
    rows.push_back(row);
  }
  if (rows.size() != header.trajectory_count)
    throw CorruptionError("dataset: trajectory table does not match the header count");

  std::vector<Trajectory> trajectories;
  trajectories.reserve(rows.size());
  ByteReader pr{payload.data(), payload.size()};
  std::uint64_t transitions = 0;
  for (const Row& row : rows) {
    const int n = static_cast<int>(row.length);
    Trajectory t;
    t.obs = Matrix(n, header.obs_dim);
    t.actions = Matrix(n, header.action_dim);
    t.rewards.resize(n);
    t.next_obs = Matrix(n, header.obs_dim);
    t.dones.resize(n);
    t.stage_ids.resize(n);
    t.episode_return = row.episode_return;
    t.seed = row.seed;
    t.success = row.success;
    for (double& v : t.obs.a) v = pr.f64();
    for (double& v : t.actions.a) v = pr.f64();
    for (double& v : t.rewards) v = pr.f64();
    for (double& v : t.next_obs.a) v = pr.f64();
    for (std::uint8_t& v : t.dones) v = pr.u8();
    for (std::int32_t& v : t.stage_ids) v = pr.i32();
    if (row.has_orig) {
      t.orig_rewards.resize(n);
      for (double& v : t.orig_rewards) v = pr.f64();
    }
    try {
      validate_trajectory(t);
    } catch (const ConfigError& e) {
      throw CorruptionError(std::string("dataset: ") + e.what());
    }
    transitions += row.length;
    trajectories.push_back(std::move(t));
  }
  if (pr.pos != pr.size) throw CorruptionError("dataset: payload size mismatch");
  if (transitions != header.transition_count)
    throw CorruptionError("dataset: transition count does not match the header");

  return OfflineDataset(std::move(header), std::move(trajectories));
}

OfflineDataset merge_datasets(const std::vector<const OfflineDataset*>& parts) {
  if (parts.empty()) throw ConfigError("merge: no datasets given");
  const DatasetHeader& first = parts.front()->header();
  std::vector<Trajectory> all;
  for (const OfflineDataset* p : parts) {
    const DatasetHeader& h = p->header();
    if (h.env_name != first.env_name || h.env_digest != first.env_digest ||
        h.obs_dim != first.obs_dim || h.action_dim != first.action_dim ||
        !layouts_equal(h.obs_layout, first.obs_layout))
      throw ConfigError("merge: datasets come from different environments");
    all.insert(all.end(), p->trajectories().begin(), p->trajectories().end());
  }
  DatasetHeader header = first;
  return OfflineDataset(std::move(header), std::move(all));
}

// ---------------------------------------------------------------------------
// Collection

namespace {

Trajectory run_episode(env::RlEnv& e, const nn::MlpParams& policy, std::uint64_t ep_seed,
                       int stage_id) {
  e.seed(ep_seed);
  Vec obs = e.reset();
  const int od = e.obs_dim(), ad = e.action_dim();
  Trajectory t;
  t.seed = ep_seed;
  std::vector<double> obs_rows, act_rows, next_rows;
  while (true) {
    const Vec action = rl::policy_action(policy, obs, nullptr);
    const env::StepOut out = e.step(action);
    obs_rows.insert(obs_rows.end(), obs.begin(), obs.end());
    act_rows.insert(act_rows.end(), action.begin(), action.end());
    next_rows.insert(next_rows.end(), out.obs.begin(), out.obs.end());
    t.rewards.push_back(out.reward);
    t.episode_return += out.reward;
    t.dones.push_back(out.done ? 1 : 0);
    t.stage_ids.push_back(stage_id);
    obs = out.obs;
    if (out.done) {
      t.success = out.success;
      break;
    }
  }
  const int n = static_cast<int>(t.rewards.size());
  t.obs = Matrix(n, od);
  t.obs.a = std::move(obs_rows);
  t.actions = Matrix(n, ad);
  t.actions.a = std::move(act_rows);
  t.next_obs = Matrix(n, od);
  t.next_obs.a = std::move(next_rows);
  return t;
}

}  // namespace

std::vector<Trajectory> collect(env::RlEnv& env, const nn::MlpParams& policy, int episodes,
                                std::uint64_t seed, const CollectOptions& opts) {
  if (episodes < 0) throw ConfigError("collect: negative episode count");
  const RngStream master(seed);
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(episodes));
  const long cap = opts.success_only ? static_cast<long>(opts.retry_multiple) * episodes
                                     : static_cast<long>(episodes);
  long attempts = 0;
  while (static_cast<int>(out.size()) < episodes) {
    if (attempts >= cap)
      throw CollectionError("stage " + std::to_string(opts.stage_id) + ": only " +
                            std::to_string(out.size()) + "/" + std::to_string(episodes) +
                            " successful episodes after " + std::to_string(attempts) +
                            " attempts");
    const std::uint64_t ep_seed =
        master.split("episode", static_cast<std::uint64_t>(attempts)).state();
    Trajectory t = run_episode(env, policy, ep_seed, opts.stage_id);
    ++attempts;
    if (!opts.success_only || t.success) out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composition

std::vector<Trajectory> compose_long_horizon(const ComposeSpec& spec,
                                             const std::vector<StageController>& controllers,
                                             const env::EnvConfig& cfg, int episodes,
                                             std::uint64_t seed) {
  const int stages = static_cast<int>(controllers.size());
  if (stages < 2 || stages > 3) throw ConfigError("compose: need 2 or 3 stage controllers");
  if (spec.step_caps.size() != controllers.size() ||
      spec.success_required.size() != controllers.size())
    throw ConfigError("compose: per-stage spec lengths disagree with the controller count");
  for (int c : spec.step_caps)
    if (c <= 0) throw ConfigError("compose: step caps must be positive");
  if (episodes <= 0) throw ConfigError("compose: need at least one episode");

  const RngStream master(seed);
  const int od = env::bimanual_observation_layout().total_dim;
  std::vector<Trajectory> out;
  int discarded = 0;

  for (int k = 0; k < episodes; ++k) {
    const std::uint64_t ep_seed =
        master.split("episode", static_cast<std::uint64_t>(k)).state();
    RngStream ep_rng(ep_seed);
    env::WorldState st = env::reset_nominal(cfg, ep_rng);
    st.stages_done_mask = 0;

    Trajectory t;
    t.seed = ep_seed;
    std::vector<double> obs_rows, act_rows, next_rows;
    bool dead = false;

    for (int s = 1; s <= stages && !dead; ++s) {
      const env::StageSpec sp = env::make_stage_spec(s, cfg);
      bool advanced = false;
      for (int step = 0; step < spec.step_caps[s - 1]; ++step) {
        const Vec obs = env::build_observation(st, cfg);
        Vec action = controllers[s - 1](st, obs);
        if (static_cast<int>(action.size()) != 8)
          throw ConfigError("compose: controller returned a non 8-dim action");
        for (double& a : action) a = std::clamp(a, -1.0, 1.0);
        const env::TransitionOut tr = env::step_world(st, action, sp, cfg);
        env::WorldState nxt = tr.next;
        const bool fell = nxt.fall_event;  // latch: prepare_for_stage clears it

        // Mirror WholeTaskEnv: stage completion keeps the cumulative step
        // count and done mask through the bookkeeping reset.
        const bool last_chance = step + 1 == spec.step_caps[s - 1];
        const bool switching =
            tr.success || (last_chance && !spec.success_required[s - 1] && s < stages);
        if (tr.success) nxt.stages_done_mask |= static_cast<std::uint8_t>(1u << (s - 1));
        if (switching && s < stages) {
          const std::uint32_t steps = nxt.step_count;
          const std::uint8_t mask = nxt.stages_done_mask;
          nxt = env::prepare_for_stage(nxt, s + 1);
          nxt.step_count = steps;
          nxt.stages_done_mask = mask;
        }

        obs_rows.insert(obs_rows.end(), obs.begin(), obs.end());
        act_rows.insert(act_rows.end(), action.begin(), action.end());
        const Vec next_obs = env::build_observation(nxt, cfg);
        next_rows.insert(next_rows.end(), next_obs.begin(), next_obs.end());
        t.rewards.push_back(tr.reward);
        t.episode_return += tr.reward;
        t.stage_ids.push_back(s);
        t.dones.push_back(0);

        if (fell || nxt.step_count >= static_cast<std::uint32_t>(cfg.whole_task_max_length)) {
          const bool finished = tr.success && s == stages;
          if (!finished) dead = true;
        }
        st = nxt;
        if (switching || dead) {
          advanced = switching;
          break;
        }
      }
      if (!advanced && !dead && spec.success_required[s - 1]) dead = true;
    }

    if (dead || t.dones.empty()) {
      ++discarded;
      continue;
    }
    const int n = static_cast<int>(t.rewards.size());
    t.dones.back() = 1;
    t.obs = Matrix(n, od);
    t.obs.a = std::move(obs_rows);
    t.actions = Matrix(n, 8);
    t.actions.a = std::move(act_rows);
    t.next_obs = Matrix(n, od);
    t.next_obs.a = std::move(next_rows);
    t.success = st.stages_done_mask == ((1u << stages) - 1);
    out.push_back(std::move(t));
  }

  if (out.empty())
    throw CompositionError("composition discarded all " + std::to_string(discarded) +
                           " episodes");
  return out;
}

std::vector<Trajectory> compose_long_horizon(const ComposeSpec& spec,
                                             const env::EnvConfig& cfg, int episodes,
                                             std::uint64_t seed) {
  if (spec.checkpoints.size() != spec.step_caps.size())
    throw ConfigError("compose: checkpoint count disagrees with step caps");
  std::vector<nn::MlpParams> policies;
  policies.reserve(spec.checkpoints.size());
  for (const std::string& path : spec.checkpoints) policies.push_back(nn::load_checkpoint(path));
  std::vector<StageController> controllers;
  for (const auto& p : policies)
    controllers.push_back(
        [&p](const env::WorldState&, const Vec& obs) { return rl::policy_action(p, obs, nullptr); });
  return compose_long_horizon(spec, controllers, cfg, episodes, seed);
}

// ---------------------------------------------------------------------------
// Relabeling

Trajectory relabel_rewards(Trajectory t, const ComposeSpec& spec) {
  const int n = t.length();
  if (n == 0) return t;
  t.orig_rewards = t.rewards;
  t.episode_return = 0.0;
  for (int i = 0; i < n; ++i) {
    const bool stage_completed = (i + 1 < n && t.stage_ids[i + 1] > t.stage_ids[i]) ||
                                 (i == n - 1 && t.success);
    // Same expression order as WholeTaskEnv::step so relabeled rewards match
    // what the evaluation env emits bitwise.
    double r = -spec.step_cost + spec.shaped_scale * t.orig_rewards[i];
    if (stage_completed) r += spec.stage_bonus;
    t.rewards[i] = r;
    t.episode_return += r;
  }
  return t;
}

}  // namespace mixline::data
