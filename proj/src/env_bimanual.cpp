#include "mixline/env_bimanual.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mixline/binary_io.hpp"
#include "mixline/checksum.hpp"
#include "mixline/errors.hpp"

namespace mixline::env {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

EnvConfig::EnvConfig() {
  stages[1] = StageParams{300,
                          {{"distance", 1.0},
                           {"rotation", 1.0},
                           {"around", 1.0},
                           {"finger_distance", 1.0},
                           {"lift", 1.0},
                           {"action_penalty", 1.0},
                           {"collision_penalty", 1.0},
                           {"fall_penalty", 1.0},
                           {"wrong_pose_penalty", 1.0}}};
  stages[2] = StageParams{200,
                          {{"distance", 1.0},
                           {"rotation", 1.0},
                           {"action_penalty", 1.0},
                           {"collision_penalty", 1.0},
                           {"fall_penalty", 1.0},
                           {"wrong_pose_penalty", 1.0}}};
  stages[3] = StageParams{200,
                          {{"distance", 0.5},
                           {"rotation", 0.5},
                           {"stir", 5.0},
                           {"action_penalty", 1.0},
                           {"collision_penalty", 1.0},
                           {"fall_penalty", 1.0},
                           {"wrong_pose_penalty", 1.0}}};
}

namespace {

void check_known_keys(const json& j, const std::vector<std::string>& allowed,
                      const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

json vec2_to_json(Vec2 v) { return json::array({v.x, v.y}); }

Vec2 vec2_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2)
    throw ConfigError(where + ": expected [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

void validate_weights(const std::map<std::string, double>& weights, const std::string& where) {
  const auto& names = reward_term_names();
  for (const auto& [name, w] : weights) {
    if (std::find(names.begin(), names.end(), name) == names.end())
      throw ConfigError("unknown reward term '" + name + "' in " + where);
    if (!std::isfinite(w)) throw ConfigError("non-finite weight for '" + name + "' in " + where);
  }
}

}  // namespace

std::string env_config_to_json(const EnvConfig& cfg) {
  json j;
  j["arm"] = {{"link_lengths", cfg.link_lengths},
              {"joint_limit", cfg.joint_limit},
              {"joint_delta", cfg.joint_delta},
              {"aperture_max", cfg.aperture_max},
              {"aperture_delta", cfg.aperture_delta},
              {"base_left", vec2_to_json(cfg.base_left)},
              {"base_right", vec2_to_json(cfg.base_right)}};
  j["objects"] = {{"spoon_length", cfg.spoon_length},
                  {"spoon_width", cfg.spoon_width},
                  {"cup_radius", cfg.cup_radius},
                  {"cup_depth", cfg.cup_depth},
                  {"cup_width", cfg.cup_width},
                  {"spoon_nominal", cfg.spoon_nominal},
                  {"cup_nominal", cfg.cup_nominal}};
  j["shelves"] = json::array();
  for (const auto& s : cfg.shelves)
    j["shelves"].push_back({{"x_min", s.x_min}, {"x_max", s.x_max}, {"height", s.height}});
  j["support"] = {{"spoon_rest_offset", cfg.spoon_rest_offset},
                  {"cup_rest_offset", cfg.cup_rest_offset},
                  {"fall_step", cfg.fall_step}};
  j["grasp"] = {{"axial_tol", cfg.grasp_axial_tol}, {"detach_margin", cfg.detach_margin}};
  j["reset"] = {{"object_jitter", cfg.object_jitter},
                {"joint_jitter", cfg.joint_jitter},
                {"hover", cfg.hover},
                {"approach_orientation", cfg.approach_orientation}};
  j["goals"] = {{"lift_height", cfg.lift_height},
                {"hold_steps", cfg.hold_steps},
                {"insert_depth_min", cfg.insert_depth_min},
                {"insert_depth_max", cfg.insert_depth_max},
                {"insert_target_depth", cfg.insert_target_depth},
                {"stir_sweep", cfg.stir_sweep},
                {"wall_contact_max", cfg.wall_contact_max},
                {"wall_margin", cfg.wall_margin},
                {"cup_tilt_limit", cfg.cup_tilt_limit}};
  json stages;
  for (const auto& [id, params] : cfg.stages)
    stages[std::to_string(id)] = {{"max_episode_length", params.max_episode_length},
                                  {"reward_weights", params.reward_weights}};
  j["stages"] = stages;
  j["whole_task"] = {{"max_episode_length", cfg.whole_task_max_length},
                     {"step_cost", cfg.whole_step_cost},
                     {"stage_bonus", cfg.whole_stage_bonus},
                     {"shaped_scale", cfg.whole_shaped_scale}};
  return j.dump();
}

EnvConfig env_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("env config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("env config: expected an object");
  EnvConfig cfg;
  check_known_keys(j, {"arm", "objects", "shelves", "support", "grasp", "reset", "goals",
                       "stages", "whole_task"},
                   "env config");
  try {
    if (j.contains("arm")) {
      const auto& a = j["arm"];
      check_known_keys(a, {"link_lengths", "joint_limit", "joint_delta", "aperture_max",
                           "aperture_delta", "base_left", "base_right"},
                       "arm");
      if (a.contains("link_lengths")) cfg.link_lengths = a["link_lengths"].get<std::vector<double>>();
      if (a.contains("joint_limit")) cfg.joint_limit = a["joint_limit"].get<double>();
      if (a.contains("joint_delta")) cfg.joint_delta = a["joint_delta"].get<double>();
      if (a.contains("aperture_max")) cfg.aperture_max = a["aperture_max"].get<double>();
      if (a.contains("aperture_delta")) cfg.aperture_delta = a["aperture_delta"].get<double>();
      if (a.contains("base_left")) cfg.base_left = vec2_from_json(a["base_left"], "arm.base_left");
      if (a.contains("base_right")) cfg.base_right = vec2_from_json(a["base_right"], "arm.base_right");
    }
    if (j.contains("objects")) {
      const auto& o = j["objects"];
      check_known_keys(o, {"spoon_length", "spoon_width", "cup_radius", "cup_depth", "cup_width",
                           "spoon_nominal", "cup_nominal"},
                       "objects");
      if (o.contains("spoon_length")) cfg.spoon_length = o["spoon_length"].get<double>();
      if (o.contains("spoon_width")) cfg.spoon_width = o["spoon_width"].get<double>();
      if (o.contains("cup_radius")) cfg.cup_radius = o["cup_radius"].get<double>();
      if (o.contains("cup_depth")) cfg.cup_depth = o["cup_depth"].get<double>();
      if (o.contains("cup_width")) cfg.cup_width = o["cup_width"].get<double>();
      if (o.contains("spoon_nominal")) cfg.spoon_nominal = o["spoon_nominal"].get<std::array<double, 3>>();
      if (o.contains("cup_nominal")) cfg.cup_nominal = o["cup_nominal"].get<std::array<double, 3>>();
    }
    if (j.contains("shelves")) {
      cfg.shelves.clear();
      for (const auto& s : j["shelves"]) {
        check_known_keys(s, {"x_min", "x_max", "height"}, "shelves[]");
        cfg.shelves.push_back(
            {s.at("x_min").get<double>(), s.at("x_max").get<double>(), s.at("height").get<double>()});
      }
    }
    if (j.contains("support")) {
      const auto& s = j["support"];
      check_known_keys(s, {"spoon_rest_offset", "cup_rest_offset", "fall_step"}, "support");
      if (s.contains("spoon_rest_offset")) cfg.spoon_rest_offset = s["spoon_rest_offset"].get<double>();
      if (s.contains("cup_rest_offset")) cfg.cup_rest_offset = s["cup_rest_offset"].get<double>();
      if (s.contains("fall_step")) cfg.fall_step = s["fall_step"].get<double>();
    }
    if (j.contains("grasp")) {
      const auto& g = j["grasp"];
      check_known_keys(g, {"axial_tol", "detach_margin"}, "grasp");
      if (g.contains("axial_tol")) cfg.grasp_axial_tol = g["axial_tol"].get<double>();
      if (g.contains("detach_margin")) cfg.detach_margin = g["detach_margin"].get<double>();
    }
    if (j.contains("reset")) {
      const auto& r = j["reset"];
      check_known_keys(r, {"object_jitter", "joint_jitter", "hover", "approach_orientation"},
                       "reset");
      if (r.contains("object_jitter")) cfg.object_jitter = r["object_jitter"].get<double>();
      if (r.contains("joint_jitter")) cfg.joint_jitter = r["joint_jitter"].get<double>();
      if (r.contains("hover")) cfg.hover = r["hover"].get<double>();
      if (r.contains("approach_orientation"))
        cfg.approach_orientation = r["approach_orientation"].get<double>();
    }
    if (j.contains("goals")) {
      const auto& g = j["goals"];
      check_known_keys(g, {"lift_height", "hold_steps", "insert_depth_min", "insert_depth_max",
                           "insert_target_depth", "stir_sweep", "wall_contact_max", "wall_margin",
                           "cup_tilt_limit"},
                       "goals");
      if (g.contains("lift_height")) cfg.lift_height = g["lift_height"].get<double>();
      if (g.contains("hold_steps")) cfg.hold_steps = g["hold_steps"].get<int>();
      if (g.contains("insert_depth_min")) cfg.insert_depth_min = g["insert_depth_min"].get<double>();
      if (g.contains("insert_depth_max")) cfg.insert_depth_max = g["insert_depth_max"].get<double>();
      if (g.contains("insert_target_depth"))
        cfg.insert_target_depth = g["insert_target_depth"].get<double>();
      if (g.contains("stir_sweep")) cfg.stir_sweep = g["stir_sweep"].get<double>();
      if (g.contains("wall_contact_max")) cfg.wall_contact_max = g["wall_contact_max"].get<int>();
      if (g.contains("wall_margin")) cfg.wall_margin = g["wall_margin"].get<double>();
      if (g.contains("cup_tilt_limit")) cfg.cup_tilt_limit = g["cup_tilt_limit"].get<double>();
    }
    if (j.contains("stages")) {
      for (const auto& [key, s] : j["stages"].items()) {
        int id = 0;
        try {
          id = std::stoi(key);
        } catch (...) {
          throw ConfigError("stages: bad stage id '" + key + "'");
        }
        if (id < 1 || id > 3) throw ConfigError("stages: stage id out of range: " + key);
        check_known_keys(s, {"max_episode_length", "reward_weights"}, "stages." + key);
        StageParams params = cfg.stages[id];
        if (s.contains("max_episode_length"))
          params.max_episode_length = s["max_episode_length"].get<int>();
        if (s.contains("reward_weights"))
          params.reward_weights = s["reward_weights"].get<std::map<std::string, double>>();
        validate_weights(params.reward_weights, "stages." + key);
        cfg.stages[id] = params;
      }
    }
    if (j.contains("whole_task")) {
      const auto& w = j["whole_task"];
      check_known_keys(w, {"max_episode_length", "step_cost", "stage_bonus", "shaped_scale"},
                       "whole_task");
      if (w.contains("max_episode_length"))
        cfg.whole_task_max_length = w["max_episode_length"].get<int>();
      if (w.contains("step_cost")) cfg.whole_step_cost = w["step_cost"].get<double>();
      if (w.contains("stage_bonus")) cfg.whole_stage_bonus = w["stage_bonus"].get<double>();
      if (w.contains("shaped_scale")) cfg.whole_shaped_scale = w["shaped_scale"].get<double>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("env config: ") + e.what());
  }
  if (cfg.link_lengths.size() != 3) throw ConfigError("env config: need exactly 3 link lengths");
  return cfg;
}

std::uint64_t env_config_digest(const EnvConfig& cfg) {
  return fnv1a64(env_config_to_json(cfg));
}

// ---------------------------------------------------------------------------
// World-state serialization

namespace {

void write_arm(ByteWriter& w, const ArmState& a) {
  for (double v : a.joint_angles) w.f64(v);
  for (double v : a.joint_velocities) w.f64(v);
  w.f64(a.gripper_aperture);
  w.f64(a.gripper_target);
  w.f64(a.aperture_velocity);
}

ArmState read_arm(ByteReader& r) {
  ArmState a;
  for (double& v : a.joint_angles) v = r.f64();
  for (double& v : a.joint_velocities) v = r.f64();
  a.gripper_aperture = r.f64();
  a.gripper_target = r.f64();
  a.aperture_velocity = r.f64();
  return a;
}

void write_object(ByteWriter& w, const ObjectState& o) {
  w.f64(o.position.x);
  w.f64(o.position.y);
  w.f64(o.orientation);
  w.f64(o.attach_delta);
  w.u8(static_cast<std::uint8_t>(o.attached_to));
  w.u8(o.attached_ever ? 1 : 0);
}

ObjectState read_object(ByteReader& r, ObjectKind kind) {
  ObjectState o;
  o.kind = kind;
  o.position.x = r.f64();
  o.position.y = r.f64();
  o.orientation = r.f64();
  o.attach_delta = r.f64();
  const std::uint8_t att = r.u8();
  if (att > 2) throw CorruptionError("world state: bad attachment tag");
  o.attached_to = static_cast<Attachment>(att);
  o.attached_ever = r.u8() != 0;
  return o;
}

}  // namespace

std::vector<std::uint8_t> world_state_to_bytes(const WorldState& s) {
  std::vector<std::uint8_t> out;
  out.reserve(kWorldStateBytes);
  ByteWriter w{out};
  write_arm(w, s.left);
  write_arm(w, s.right);
  write_object(w, s.spoon);
  write_object(w, s.cup);
  w.u32(s.step_count);
  w.u8(s.stage);
  w.u32(s.hold_left);
  w.u32(s.hold_right);
  w.u32(s.hold_both);
  w.f64(s.stir_angle_acc);
  w.f64(s.stir_prev_angle);
  w.u8(s.stir_has_prev ? 1 : 0);
  w.u32(s.wall_contact_steps);
  w.u8(s.fall_event ? 1 : 0);
  w.u8(s.stages_done_mask);
  return out;
}

WorldState world_state_from_bytes(const std::uint8_t* data, std::size_t size) {
  ByteReader r{data, size};
  WorldState s;
  s.left = read_arm(r);
  s.right = read_arm(r);
  s.spoon = read_object(r, ObjectKind::kSpoon);
  s.cup = read_object(r, ObjectKind::kCup);
  s.step_count = r.u32();
  s.stage = r.u8();
  s.hold_left = r.u32();
  s.hold_right = r.u32();
  s.hold_both = r.u32();
  s.stir_angle_acc = r.f64();
  s.stir_prev_angle = r.f64();
  s.stir_has_prev = r.u8() != 0;
  s.wall_contact_steps = r.u32();
  s.fall_event = r.u8() != 0;
  s.stages_done_mask = r.u8();
  if (r.pos != size) throw CorruptionError("world state: trailing bytes");
  return s;
}

// ---------------------------------------------------------------------------
// Kinematics and grasp geometry

GripperPose forward_kinematics(const ArmState& arm, Vec2 base, const EnvConfig& cfg) {
  std::vector<double> angles(arm.joint_angles.begin(), arm.joint_angles.end());
  GripperPose out;
  out.chain = chain_fk(base, cfg.link_lengths, angles);
  out.midpoint = out.chain.points.back();
  out.orientation = out.chain.orientation;
  const Vec2 n = normal(out.orientation);
  out.finger_a = out.midpoint + (arm.gripper_aperture / 2.0) * n;
  out.finger_b = out.midpoint - (arm.gripper_aperture / 2.0) * n;
  return out;
}

Vec2 spoon_grasp_point(const ObjectState& spoon, const EnvConfig& cfg) {
  return spoon.position + (cfg.spoon_length / 2.0) * heading(spoon.orientation);
}

Vec2 spoon_tip(const ObjectState& spoon, const EnvConfig& cfg) {
  return spoon.position - (cfg.spoon_length / 2.0) * heading(spoon.orientation);
}

Vec2 cup_rim_center(const ObjectState& cup, const EnvConfig& cfg) {
  return cup.position + (cfg.cup_depth / 2.0) * normal(cup.orientation);
}

Vec2 cup_grasp_point(const ObjectState& cup, const EnvConfig& cfg) {
  return cup_rim_center(cup, cfg) + cfg.cup_radius * heading(cup.orientation);
}

Vec2 grasp_offset(ObjectKind kind, double orientation, const EnvConfig& cfg) {
  if (kind == ObjectKind::kSpoon) return (cfg.spoon_length / 2.0) * heading(orientation);
  return (cfg.cup_depth / 2.0) * normal(orientation) + cfg.cup_radius * heading(orientation);
}

double rest_height(ObjectKind kind, double x, double y, const EnvConfig& cfg) {
  const double offset = kind == ObjectKind::kSpoon ? cfg.spoon_rest_offset : cfg.cup_rest_offset;
  double rest = offset;  // table
  for (const auto& s : cfg.shelves) {
    if (x >= s.x_min && x <= s.x_max) {
      const double candidate = s.height + offset;
      // An object cannot come to rest on a shelf it is already below.
      if (candidate <= y && candidate > rest) rest = candidate;
    }
  }
  return std::min(rest, y);
}

CupFrameCoords tip_in_cup(const WorldState& s, const EnvConfig& cfg) {
  const Vec2 u = spoon_tip(s.spoon, cfg) - cup_rim_center(s.cup, cfg);
  const Vec2 axis = normal(s.cup.orientation);
  const Vec2 side = heading(s.cup.orientation);
  return {-dot(u, axis), dot(u, side)};
}

bool tip_inside_cup(const WorldState& s, const EnvConfig& cfg) {
  const CupFrameCoords c = tip_in_cup(s, cfg);
  return c.depth_below_rim > 0.0 && c.depth_below_rim < cfg.cup_depth &&
         std::abs(c.radial) < cfg.cup_radius;
}

double stir_increment(const WorldState& prev, const WorldState& next, const EnvConfig& cfg) {
  if (!prev.stir_has_prev || !tip_inside_cup(next, cfg)) return 0.0;
  const Vec2 rel = spoon_tip(next.spoon, cfg) - next.cup.position;
  return wrap_angle(std::atan2(rel.y, rel.x) - prev.stir_prev_angle);
}

void update_stir_tracking(const WorldState& prev, WorldState& next, const EnvConfig& cfg) {
  next.stir_angle_acc = prev.stir_angle_acc + stir_increment(prev, next, cfg);
  if (tip_inside_cup(next, cfg)) {
    const Vec2 rel = spoon_tip(next.spoon, cfg) - next.cup.position;
    next.stir_prev_angle = std::atan2(rel.y, rel.x);
    next.stir_has_prev = true;
  } else {
    next.stir_has_prev = false;
    next.stir_prev_angle = 0.0;
  }
  const CupFrameCoords cc = tip_in_cup(next, cfg);
  next.wall_contact_steps = prev.wall_contact_steps;
  if (cc.depth_below_rim > 0.0 && cc.depth_below_rim < cfg.cup_depth &&
      std::abs(cc.radial) > cfg.cup_radius - cfg.wall_margin &&
      std::abs(cc.radial) < cfg.cup_radius + cfg.wall_margin)
    next.wall_contact_steps += 1;
}

// ---------------------------------------------------------------------------
// Stage specs and resets

StageSpec make_stage_spec(int stage_id, const EnvConfig& cfg, SuccessMode mode) {
  auto it = cfg.stages.find(stage_id);
  if (it == cfg.stages.end())
    throw ConfigError("no stage params for stage " + std::to_string(stage_id));
  StageSpec spec;
  spec.stage_id = stage_id;
  spec.success_mode = mode;
  spec.max_episode_length = it->second.max_episode_length;
  spec.reward_weights = it->second.reward_weights;
  return spec;
}

WorldState reset_nominal(const EnvConfig& cfg, RngStream& rng) {
  WorldState s;
  s.stage = 1;

  s.spoon.kind = ObjectKind::kSpoon;
  s.spoon.position = {cfg.spoon_nominal[0] + rng.uniform(-cfg.object_jitter, cfg.object_jitter),
                      0.0};
  s.spoon.orientation = cfg.spoon_nominal[2];
  s.spoon.position.y =
      rest_height(ObjectKind::kSpoon, s.spoon.position.x, cfg.spoon_nominal[1], cfg);

  s.cup.kind = ObjectKind::kCup;
  s.cup.position = {cfg.cup_nominal[0] + rng.uniform(-cfg.object_jitter, cfg.object_jitter), 0.0};
  s.cup.orientation = cfg.cup_nominal[2];
  s.cup.position.y = rest_height(ObjectKind::kCup, s.cup.position.x, cfg.cup_nominal[1], cfg);

  // Grippers start hovering above the nominal (pre-jitter) grasp points.
  ObjectState nominal_spoon = s.spoon;
  nominal_spoon.position = {cfg.spoon_nominal[0], cfg.spoon_nominal[1]};
  ObjectState nominal_cup = s.cup;
  nominal_cup.position = {cfg.cup_nominal[0], cfg.cup_nominal[1]};
  const Vec2 left_target = spoon_grasp_point(nominal_spoon, cfg) + Vec2{0.0, cfg.hover};
  const Vec2 right_target = cup_grasp_point(nominal_cup, cfg) + Vec2{0.0, cfg.hover};
  const auto ql = ik_3link(cfg.base_left, cfg.link_lengths, left_target,
                           cfg.approach_orientation, cfg.joint_limit);
  const auto qr = ik_3link(cfg.base_right, cfg.link_lengths, right_target,
                           cfg.approach_orientation, cfg.joint_limit);
  for (int i = 0; i < 3; ++i)
    s.left.joint_angles[i] = std::clamp(ql[i] + rng.uniform(-cfg.joint_jitter, cfg.joint_jitter),
                                        -cfg.joint_limit, cfg.joint_limit);
  for (int i = 0; i < 3; ++i)
    s.right.joint_angles[i] = std::clamp(qr[i] + rng.uniform(-cfg.joint_jitter, cfg.joint_jitter),
                                         -cfg.joint_limit, cfg.joint_limit);
  s.left.gripper_aperture = s.left.gripper_target = cfg.aperture_max;
  s.right.gripper_aperture = s.right.gripper_target = cfg.aperture_max;
  return s;
}

WorldState prepare_for_stage(const WorldState& terminal, int stage) {
  WorldState s = terminal;
  s.stage = static_cast<std::uint8_t>(stage);
  s.step_count = 0;
  s.hold_left = s.hold_right = s.hold_both = 0;
  s.stir_angle_acc = 0.0;
  s.stir_prev_angle = 0.0;
  s.stir_has_prev = false;
  s.wall_contact_steps = 0;
  s.fall_event = false;
  s.left.joint_velocities = {};
  s.right.joint_velocities = {};
  s.left.aperture_velocity = 0.0;
  s.right.aperture_velocity = 0.0;
  return s;
}

// ---------------------------------------------------------------------------
// Success predicates

namespace {

bool insertion_ok(const WorldState& s, const EnvConfig& cfg) {
  const CupFrameCoords c = tip_in_cup(s, cfg);
  return c.depth_below_rim >= cfg.insert_depth_min && c.depth_below_rim <= cfg.insert_depth_max &&
         std::abs(c.radial) <= cfg.cup_radius;
}

}  // namespace

bool stage_success(const WorldState& s, const StageSpec& spec, const EnvConfig& cfg) {
  if (s.fall_event) return false;
  const auto hold = static_cast<std::uint32_t>(cfg.hold_steps);
  switch (spec.stage_id) {
    case 1:
      switch (spec.success_mode) {
        case SuccessMode::kLeftOnly: return s.hold_left >= hold;
        case SuccessMode::kRightOnly: return s.hold_right >= hold;
        case SuccessMode::kFull: return s.hold_both >= hold;
      }
      return false;
    case 2:
      return insertion_ok(s, cfg);
    case 3:
      return std::abs(s.stir_angle_acc) >= cfg.stir_sweep &&
             s.wall_contact_steps <= static_cast<std::uint32_t>(cfg.wall_contact_max);
    default:
      throw ConfigError("stage_success: bad stage id");
  }
}

// ---------------------------------------------------------------------------
// Reward

double weighted_total(const RewardTerms& terms, const std::map<std::string, double>& weights) {
  double total = 0.0;
  for (const auto& [name, w] : weights) total += w * terms.get(name);
  return total;
}

RewardTerms compute_reward_terms(const WorldState& prev, const Vec& action,
                                 const WorldState& next, const StageSpec& spec,
                                 const EnvConfig& cfg) {
  RewardTerms t;
  const GripperPose lp = forward_kinematics(next.left, cfg.base_left, cfg);
  const GripperPose rp = forward_kinematics(next.right, cfg.base_right, cfg);
  const Vec2 sg = spoon_grasp_point(next.spoon, cfg);
  const Vec2 cg = cup_grasp_point(next.cup, cfg);

  // Per-arm geometry shared by several terms.
  auto around_of = [&](const GripperPose& g, Vec2 grasp, double aperture) {
    const Vec2 d = grasp - g.midpoint;
    return std::abs(dot(d, heading(g.orientation))) <= cfg.grasp_axial_tol &&
                   std::abs(dot(d, normal(g.orientation))) <= aperture / 2.0
               ? 1.0
               : 0.0;
  };
  const double around_l = around_of(lp, sg, next.left.gripper_aperture);
  const double around_r = around_of(rp, cg, next.right.gripper_aperture);
  t.around = 0.5 * (around_l + around_r);

  if (spec.stage_id == 1) {
    const double dl = norm(sg - lp.midpoint);
    const double dr = norm(cg - rp.midpoint);
    t.distance = 0.5 * (1.0 / (1.0 + dl) + 1.0 / (1.0 + dr));
    t.rotation = 0.5 * (0.5 * (1.0 + std::cos(lp.orientation - cfg.approach_orientation)) +
                        0.5 * (1.0 + std::cos(rp.orientation - cfg.approach_orientation)));
  } else {
    const Vec2 target =
        cup_rim_center(next.cup, cfg) - cfg.insert_target_depth * normal(next.cup.orientation);
    t.distance = 1.0 / (1.0 + norm(spoon_tip(next.spoon, cfg) - target));
    t.rotation =
        0.5 * (1.0 + dot(heading(next.spoon.orientation), normal(next.cup.orientation)));
  }

  t.finger_distance = 0.5 * (around_l * (1.0 - next.left.gripper_aperture / cfg.aperture_max) +
                             around_r * (1.0 - next.right.gripper_aperture / cfg.aperture_max));

  auto lift_of = [&](const ObjectState& o, Vec2 grasp, Attachment arm) {
    if (o.attached_to != arm) return 0.0;
    return 2.0 * std::clamp(grasp.y / cfg.lift_height, 0.0, 1.0);
  };
  t.lift = 0.5 * (lift_of(next.spoon, sg, Attachment::kLeftGripper) +
                  lift_of(next.cup, cg, Attachment::kRightGripper));

  t.stir = stir_increment(prev, next, cfg);

  double a2 = 0.0;
  for (double a : action) a2 += a * a;
  t.action_penalty = -0.01 * a2;

  auto below_table = [&](const GripperPose& g) {
    for (std::size_t i = 1; i < g.chain.points.size(); ++i)
      if (g.chain.points[i].y < 0.0) return true;
    return g.finger_a.y < 0.0 || g.finger_b.y < 0.0;
  };
  t.collision_penalty = (below_table(lp) || below_table(rp)) ? -1.0 : 0.0;

  t.fall_penalty = (next.fall_event && !prev.fall_event) ? -5.0 : 0.0;
  t.wrong_pose_penalty =
      std::abs(wrap_angle(next.cup.orientation)) > cfg.cup_tilt_limit ? -0.5 : 0.0;
  return t;
}

// ---------------------------------------------------------------------------
// Transition

TransitionOut step_world(const WorldState& state, const Vec& action, const StageSpec& spec,
                         const EnvConfig& cfg) {
  if (action.size() != 8) throw ShapeError("step_world: action must have 8 components");
  Vec a(8);
  for (int i = 0; i < 8; ++i) {
    if (!std::isfinite(action[i])) throw NumericError("step_world: non-finite action");
    a[i] = std::clamp(action[i], -1.0, 1.0);
  }

  TransitionOut out;
  WorldState& next = out.next;
  next = state;

  // Joints and gripper commands.
  auto apply_arm = [&](ArmState& arm, int base_idx) {
    for (int i = 0; i < 3; ++i) {
      const double na = std::clamp(arm.joint_angles[i] + a[base_idx + i] * cfg.joint_delta,
                                   -cfg.joint_limit, cfg.joint_limit);
      arm.joint_velocities[i] = na - arm.joint_angles[i];
      arm.joint_angles[i] = na;
    }
    arm.gripper_target =
        std::clamp(arm.gripper_target + a[base_idx + 3] * cfg.aperture_delta, 0.0, cfg.aperture_max);
  };
  apply_arm(next.left, 0);
  apply_arm(next.right, 4);

  // Aperture dynamics; detach on over-opening.
  auto aperture_update = [&](ArmState& arm, ObjectState& obj, Attachment who, double width) {
    if (obj.attached_to == who && arm.gripper_target > width + cfg.detach_margin)
      obj.attached_to = Attachment::kNone;
    if (obj.attached_to == who) {
      arm.aperture_velocity = width - arm.gripper_aperture;
      arm.gripper_aperture = width;
    } else {
      const double delta = std::clamp(arm.gripper_target - arm.gripper_aperture,
                                      -cfg.aperture_delta, cfg.aperture_delta);
      arm.gripper_aperture += delta;
      arm.aperture_velocity = delta;
    }
  };
  aperture_update(next.left, next.spoon, Attachment::kLeftGripper, cfg.spoon_width);
  aperture_update(next.right, next.cup, Attachment::kRightGripper, cfg.cup_width);

  const GripperPose lp = forward_kinematics(next.left, cfg.base_left, cfg);
  const GripperPose rp = forward_kinematics(next.right, cfg.base_right, cfg);

  // Attached objects ride the gripper; grasp point lands on the midpoint exactly.
  auto follow = [&](ObjectState& obj, const GripperPose& g) {
    obj.orientation = wrap_angle(g.orientation + obj.attach_delta);
    obj.position = g.midpoint - grasp_offset(obj.kind, obj.orientation, cfg);
  };
  if (next.spoon.attached_to == Attachment::kLeftGripper) follow(next.spoon, lp);
  if (next.cup.attached_to == Attachment::kRightGripper) follow(next.cup, rp);

  // Engagement.
  auto try_attach = [&](ArmState& arm, const GripperPose& g, ObjectState& obj, Attachment who,
                        double width) {
    if (obj.attached_to != Attachment::kNone) return;
    if (arm.gripper_aperture > width || arm.aperture_velocity >= 0.0) return;
    const Vec2 d = grasp_offset(obj.kind, obj.orientation, cfg) + obj.position - g.midpoint;
    if (std::abs(dot(d, heading(g.orientation))) > cfg.grasp_axial_tol) return;
    if (std::abs(dot(d, normal(g.orientation))) > arm.gripper_aperture / 2.0) return;
    obj.attached_to = who;
    obj.attached_ever = true;
    obj.attach_delta = wrap_angle(obj.orientation - g.orientation);
    follow(obj, g);
    arm.aperture_velocity += width - arm.gripper_aperture;
    arm.gripper_aperture = width;
  };
  try_attach(next.left, lp, next.spoon, Attachment::kLeftGripper, cfg.spoon_width);
  try_attach(next.right, rp, next.cup, Attachment::kRightGripper, cfg.cup_width);

  // Unsupported objects fall; landing after having been carried ends the episode.
  auto fall = [&](ObjectState& obj) {
    if (obj.attached_to != Attachment::kNone) return;
    const double rest = rest_height(obj.kind, obj.position.x, obj.position.y, cfg);
    if (obj.position.y > rest)
      obj.position.y = std::max(rest, obj.position.y - cfg.fall_step);
    if (obj.position.y <= rest && obj.attached_ever) next.fall_event = true;
  };
  fall(next.spoon);
  fall(next.cup);

  // Stir tracking (active in every stage; only stage 3 weights it).
  update_stir_tracking(state, next, cfg);

  // Hold counters for the stage-1 predicates.
  const bool left_ok = next.spoon.attached_to == Attachment::kLeftGripper &&
                       spoon_grasp_point(next.spoon, cfg).y >= cfg.lift_height;
  const bool right_ok = next.cup.attached_to == Attachment::kRightGripper &&
                        cup_grasp_point(next.cup, cfg).y >= cfg.lift_height;
  next.hold_left = left_ok ? next.hold_left + 1 : 0;
  next.hold_right = right_ok ? next.hold_right + 1 : 0;
  next.hold_both = (left_ok && right_ok) ? next.hold_both + 1 : 0;

  next.step_count += 1;

  out.terms = compute_reward_terms(state, a, next, spec, cfg);
  out.reward = weighted_total(out.terms, spec.reward_weights);
  out.success = stage_success(next, spec, cfg);
  out.done = out.success || next.fall_event ||
             next.step_count >= static_cast<std::uint32_t>(spec.max_episode_length);
  return out;
}

// ---------------------------------------------------------------------------
// Observation

const ObservationLayout& bimanual_observation_layout() {
  static const ObservationLayout layout = [] {
    ObservationLayout l;
    auto add = [&](const std::string& name, int len) {
      l.blocks.push_back({name, l.total_dim, len});
      l.total_dim += len;
    };
    add("scaled_joint_pos_left", 4);
    add("scaled_joint_pos_right", 4);
    add("joint_vel_left", 4);
    add("rel_gripper_left_spoon", 2);
    add("joint_vel_right", 4);
    add("rel_gripper_right_cup", 2);
    add("spoon_pose", 3);
    add("cup_pose", 3);
    add("joint_pos_left", 4);
    add("joint_pos_right", 4);
    return l;
  }();
  return layout;
}

Vec build_observation(const WorldState& s, const EnvConfig& cfg) {
  Vec obs;
  obs.reserve(bimanual_observation_layout().total_dim);
  auto scaled = [&](const ArmState& a) {
    for (double q : a.joint_angles) obs.push_back(q / cfg.joint_limit);
    obs.push_back(2.0 * (a.gripper_aperture / cfg.aperture_max) - 1.0);
  };
  auto vels = [&](const ArmState& a) {
    for (double v : a.joint_velocities) obs.push_back(v);
    obs.push_back(a.aperture_velocity);
  };
  auto raw = [&](const ArmState& a) {
    for (double q : a.joint_angles) obs.push_back(q);
    obs.push_back(a.gripper_aperture);
  };
  const GripperPose lp = forward_kinematics(s.left, cfg.base_left, cfg);
  const GripperPose rp = forward_kinematics(s.right, cfg.base_right, cfg);
  const Vec2 rel_l = spoon_grasp_point(s.spoon, cfg) - lp.midpoint;
  const Vec2 rel_r = cup_grasp_point(s.cup, cfg) - rp.midpoint;

  scaled(s.left);
  scaled(s.right);
  vels(s.left);
  obs.push_back(rel_l.x);
  obs.push_back(rel_l.y);
  vels(s.right);
  obs.push_back(rel_r.x);
  obs.push_back(rel_r.y);
  obs.push_back(s.spoon.position.x);
  obs.push_back(s.spoon.position.y);
  obs.push_back(s.spoon.orientation);
  obs.push_back(s.cup.position.x);
  obs.push_back(s.cup.position.y);
  obs.push_back(s.cup.orientation);
  raw(s.left);
  raw(s.right);
  return obs;
}

// ---------------------------------------------------------------------------
// Terminal buffer

void TerminalBuffer::push(const WorldState& s) {
  if (states_.size() == capacity_) states_.erase(states_.begin());
  states_.push_back(s);
}

const WorldState& TerminalBuffer::draw(RngStream& rng) const {
  if (states_.empty())
    throw ConfigError("terminal buffer is empty: run the previous stage first");
  return states_[rng.uniform_index(states_.size())];
}

namespace {
constexpr char kTerminalMagic[4] = {'M', 'X', 'T', 'B'};
}

void TerminalBuffer::save(const std::string& path, const EnvConfig& cfg) const {
  std::vector<std::uint8_t> body;
  ByteWriter w{body};
  const std::uint64_t digest = env_config_digest(cfg);
  for (int i = 0; i < 8; ++i) body.push_back(static_cast<std::uint8_t>(digest >> (8 * i)));
  w.u32(1);  // version
  w.u32(static_cast<std::uint32_t>(states_.size()));
  for (const auto& s : states_) {
    const auto bytes = world_state_to_bytes(s);
    body.insert(body.end(), bytes.begin(), bytes.end());
  }
  const std::uint64_t crc = crc64(body.data(), body.size());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write terminal buffer: " + path);
  f.write(kTerminalMagic, 4);
  for (int i = 0; i < 8; ++i) f.put(static_cast<char>(crc >> (8 * i)));
  f.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
}

TerminalBuffer TerminalBuffer::load(const std::string& path, const EnvConfig& cfg) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read terminal buffer: " + path);
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  if (raw.size() < 12 || std::memcmp(raw.data(), kTerminalMagic, 4) != 0)
    throw CorruptionError("terminal buffer: bad magic");
  std::uint64_t crc_stored = 0;
  for (int i = 0; i < 8; ++i) crc_stored |= static_cast<std::uint64_t>(raw[4 + i]) << (8 * i);
  const std::uint8_t* body = raw.data() + 12;
  const std::size_t body_size = raw.size() - 12;
  if (crc64(body, body_size) != crc_stored)
    throw CorruptionError("terminal buffer: checksum mismatch");
  ByteReader r{body, body_size};
  std::uint64_t digest = 0;
  for (int i = 0; i < 8; ++i) digest |= static_cast<std::uint64_t>(r.u8()) << (8 * i);
  if (digest != env_config_digest(cfg))
    throw ConfigError("terminal buffer: env config digest mismatch");
  const std::uint32_t version = r.u32();
  if (version != 1) throw CorruptionError("terminal buffer: unsupported version");
  const std::uint32_t count = r.u32();
  if (body_size - r.pos != static_cast<std::size_t>(count) * kWorldStateBytes)
    throw CorruptionError("terminal buffer: size mismatch");
  TerminalBuffer buf;
  for (std::uint32_t i = 0; i < count; ++i) {
    buf.push(world_state_from_bytes(body + r.pos, kWorldStateBytes));
    r.pos += kWorldStateBytes;
  }
  return buf;
}

// ---------------------------------------------------------------------------
// Stateful adapters

BimanualEnv::BimanualEnv(EnvConfig cfg, StageSpec spec, std::uint64_t seed,
                         const TerminalBuffer* reset_buffer)
    : cfg_(std::move(cfg)), spec_(std::move(spec)), rng_(seed), reset_buffer_(reset_buffer) {}

int BimanualEnv::obs_dim() const { return bimanual_observation_layout().total_dim; }

Vec BimanualEnv::reset() {
  RngStream episode = rng_.split("reset", rng_.next_u64());
  if (spec_.stage_id == 1) {
    state_ = reset_nominal(cfg_, episode);
  } else {
    if (reset_buffer_ == nullptr)
      throw ConfigError("stage " + std::to_string(spec_.stage_id) +
                        " needs a terminal buffer from the previous stage");
    state_ = prepare_for_stage(reset_buffer_->draw(episode), spec_.stage_id);
  }
  return build_observation(state_, cfg_);
}

StepOut BimanualEnv::step(const Vec& action) {
  TransitionOut tr = step_world(state_, action, spec_, cfg_);
  state_ = tr.next;
  StepOut out;
  out.obs = build_observation(state_, cfg_);
  out.reward = tr.reward;
  out.done = tr.done;
  out.success = tr.success;
  out.terms = tr.terms;
  if (capture_ && tr.success && spec_.success_mode == SuccessMode::kFull)
    capture_->push(state_);
  return out;
}

WholeTaskEnv::WholeTaskEnv(EnvConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), rng_(seed) {
  for (int k = 1; k <= 3; ++k) {
    specs_[k - 1] = make_stage_spec(k, cfg_);
    // Per-stage caps do not apply inside the whole-task episode.
    specs_[k - 1].max_episode_length = cfg_.whole_task_max_length;
  }
}

int WholeTaskEnv::obs_dim() const { return bimanual_observation_layout().total_dim; }

int WholeTaskEnv::stages_completed() const {
  int n = 0;
  for (int k = 0; k < 3; ++k)
    if (state_.stages_done_mask & (1u << k)) ++n;
  return n;
}

Vec WholeTaskEnv::reset() {
  RngStream episode = rng_.split("reset", rng_.next_u64());
  state_ = reset_nominal(cfg_, episode);
  state_.stages_done_mask = 0;
  return build_observation(state_, cfg_);
}

StepOut WholeTaskEnv::step(const Vec& action) {
  const int stage = state_.stage;
  TransitionOut tr = step_world(state_, action, specs_[stage - 1], cfg_);

  double reward = -cfg_.whole_step_cost + cfg_.whole_shaped_scale * tr.reward;
  bool done = tr.next.fall_event;
  bool success = false;

  if (tr.success) {
    reward += cfg_.whole_stage_bonus;
    tr.next.stages_done_mask |= static_cast<std::uint8_t>(1u << (stage - 1));
    if (stage == 3) {
      done = true;
      success = true;
    } else {
      const std::uint32_t steps = tr.next.step_count;
      const std::uint8_t mask = tr.next.stages_done_mask;
      tr.next = prepare_for_stage(tr.next, stage + 1);
      tr.next.step_count = steps;
      tr.next.stages_done_mask = mask;
    }
  }
  if (tr.next.step_count >= static_cast<std::uint32_t>(cfg_.whole_task_max_length)) done = true;

  state_ = tr.next;
  StepOut out;
  out.obs = build_observation(state_, cfg_);
  out.reward = reward;
  out.done = done;
  out.success = success;
  out.terms = tr.terms;
  return out;
}

}  // namespace mixline::env
