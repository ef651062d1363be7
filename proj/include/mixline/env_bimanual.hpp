#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mixline/env.hpp"
#include "mixline/planar.hpp"
#include "mixline/rng.hpp"

namespace mixline::env {

// ---------------------------------------------------------------------------
// Configuration

struct ShelfSpec {
  double x_min = 0.0;
  double x_max = 0.0;
  double height = 0.0;
};

struct StageParams {
  int max_episode_length = 200;
  std::map<std::string, double> reward_weights;
};

struct EnvConfig {
  // Arms.
  std::vector<double> link_lengths{0.30, 0.25, 0.20};
  double joint_limit = 2.9;        // rad
  double joint_delta = 0.05;       // rad per step at |action| = 1
  double aperture_max = 0.08;      // m
  double aperture_delta = 0.01;    // m per step at |action| = 1
  Vec2 base_left{-0.5, 0.0};
  Vec2 base_right{0.5, 0.0};

  // Objects.
  double spoon_length = 0.15;
  double spoon_width = 0.03;       // graspable thickness
  double cup_radius = 0.05;
  double cup_depth = 0.10;
  double cup_width = 0.03;         // rim thickness at the grasp point
  std::array<double, 3> spoon_nominal{-0.20, 0.11, 0.0};  // x, y, orientation
  std::array<double, 3> cup_nominal{0.20, 0.10, 0.0};

  std::vector<ShelfSpec> shelves{{-0.35, -0.05, 0.10}, {0.05, 0.35, 0.05}};
  double spoon_rest_offset = 0.01;  // center height above support when resting
  double cup_rest_offset = 0.05;
  double fall_step = 0.05;          // m per step while unsupported

  // Grasp model.
  double grasp_axial_tol = 0.03;
  double detach_margin = 0.01;

  // Reset.
  double object_jitter = 0.02;      // m, uniform, object x positions
  double joint_jitter = 0.05;       // rad, uniform, every joint
  double hover = 0.05;              // nominal gripper height above grasp point
  double approach_orientation = -M_PI / 2.0;

  // Stage goals.
  double lift_height = 0.20;        // m above table
  int hold_steps = 10;
  double insert_depth_min = 0.02;   // m below rim
  double insert_depth_max = 0.08;
  double insert_target_depth = 0.05;
  double stir_sweep = 2.0 * M_PI;   // rad of accumulated signed sweep
  int wall_contact_max = 5;
  double wall_margin = 0.005;

  // Wrong-pose threshold for the cup.
  double cup_tilt_limit = M_PI / 4.0;

  std::map<int, StageParams> stages;  // keys 1..3
  int whole_task_max_length = 700;
  double whole_step_cost = 0.01;
  double whole_stage_bonus = 10.0;
  double whole_shaped_scale = 0.1;

  EnvConfig();  // fills default stage params
};

// Strict JSON round-trip: unknown keys are rejected.
std::string env_config_to_json(const EnvConfig& cfg);
EnvConfig env_config_from_json(const std::string& text);
// FNV-1a over the canonical (sorted-key, compact) JSON encoding.
std::uint64_t env_config_digest(const EnvConfig& cfg);

// ---------------------------------------------------------------------------
// World state

enum class Attachment : std::uint8_t { kNone = 0, kLeftGripper = 1, kRightGripper = 2 };
enum class ObjectKind : std::uint8_t { kSpoon = 0, kCup = 1 };

struct ArmState {
  std::array<double, 3> joint_angles{};
  std::array<double, 3> joint_velocities{};  // applied delta, rad per step
  double gripper_aperture = 0.08;
  double gripper_target = 0.08;
  double aperture_velocity = 0.0;
};

struct ObjectState {
  ObjectKind kind = ObjectKind::kSpoon;
  Vec2 position{};           // spoon: segment center; cup: cavity center
  double orientation = 0.0;  // spoon: handle direction; cup: 0 = upright
  Attachment attached_to = Attachment::kNone;
  double attach_delta = 0.0;  // orientation minus gripper orientation at attach
  bool attached_ever = false;
};

struct WorldState {
  ArmState left;
  ArmState right;
  ObjectState spoon;
  ObjectState cup;
  std::uint32_t step_count = 0;
  std::uint8_t stage = 1;

  // Episode bookkeeping for the success predicates.
  std::uint32_t hold_left = 0;
  std::uint32_t hold_right = 0;
  std::uint32_t hold_both = 0;
  double stir_angle_acc = 0.0;
  double stir_prev_angle = 0.0;
  bool stir_has_prev = false;
  std::uint32_t wall_contact_steps = 0;
  bool fall_event = false;
  std::uint8_t stages_done_mask = 0;  // whole-task: bit k-1 = stage k completed
};

// Fixed-size little-endian encoding (terminal buffers, composition).
std::vector<std::uint8_t> world_state_to_bytes(const WorldState& s);
WorldState world_state_from_bytes(const std::uint8_t* data, std::size_t size);
constexpr std::size_t kWorldStateBytes = 9 * 8 * 2 + 2 * (4 * 8 + 2) + 4 + 1 + 3 * 4 + 2 * 8 + 1 + 4 + 1 + 1;

// ---------------------------------------------------------------------------
// Kinematics and grasp geometry

struct GripperPose {
  ChainPose chain;      // base + 3 link end points
  Vec2 midpoint{};      // end-effector point, between the fingertips
  double orientation = 0.0;
  Vec2 finger_a{};      // midpoint + (aperture/2) * normal
  Vec2 finger_b{};      // midpoint - (aperture/2) * normal
};

GripperPose forward_kinematics(const ArmState& arm, Vec2 base, const EnvConfig& cfg);

Vec2 spoon_grasp_point(const ObjectState& spoon, const EnvConfig& cfg);
Vec2 spoon_tip(const ObjectState& spoon, const EnvConfig& cfg);
Vec2 cup_rim_center(const ObjectState& cup, const EnvConfig& cfg);
Vec2 cup_grasp_point(const ObjectState& cup, const EnvConfig& cfg);
// Object grasp point relative to its center, as a function of orientation.
Vec2 grasp_offset(ObjectKind kind, double orientation, const EnvConfig& cfg);

// Support height for an object center currently at (x, y): highest shelf top
// (plus the object's rest offset) at or below y, else the table.
double rest_height(ObjectKind kind, double x, double y, const EnvConfig& cfg);

// Tip position expressed in the cup frame.
struct CupFrameCoords {
  double depth_below_rim = 0.0;  // positive inside the cup
  double radial = 0.0;           // signed distance from the cup axis
};
CupFrameCoords tip_in_cup(const WorldState& s, const EnvConfig& cfg);
bool tip_inside_cup(const WorldState& s, const EnvConfig& cfg);

// Signed angular step of the spoon tip about the cup center, counted only
// while the tip stays inside the cup (prev carries the reference angle).
double stir_increment(const WorldState& prev, const WorldState& next, const EnvConfig& cfg);
// Advances stir accumulation, the reference angle, and the wall-contact
// counter of next from prev's bookkeeping.
void update_stir_tracking(const WorldState& prev, WorldState& next, const EnvConfig& cfg);

// ---------------------------------------------------------------------------
// Core transition

enum class SuccessMode : std::uint8_t { kFull = 0, kLeftOnly = 1, kRightOnly = 2 };

struct StageSpec {
  int stage_id = 1;
  SuccessMode success_mode = SuccessMode::kFull;
  int max_episode_length = 300;
  std::map<std::string, double> reward_weights;
};

StageSpec make_stage_spec(int stage_id, const EnvConfig& cfg,
                          SuccessMode mode = SuccessMode::kFull);

WorldState reset_nominal(const EnvConfig& cfg, RngStream& rng);
// step_count and episode bookkeeping cleared, poses kept.
WorldState prepare_for_stage(const WorldState& terminal, int stage);

struct TransitionOut {
  WorldState next;
  double reward = 0.0;
  bool done = false;
  bool success = false;
  RewardTerms terms;
};

// Deterministic transition. Throws ShapeError on wrong action length and
// NumericError on non-finite action components; actions are clamped to [-1,1].
TransitionOut step_world(const WorldState& state, const Vec& action,
                         const StageSpec& spec, const EnvConfig& cfg);

// Raw terms for the (prev, action, next) pair; pure, also used inside
// step_world. The weighted total sums spec.reward_weights only.
RewardTerms compute_reward_terms(const WorldState& prev, const Vec& action,
                                 const WorldState& next, const StageSpec& spec,
                                 const EnvConfig& cfg);
double weighted_total(const RewardTerms& terms, const std::map<std::string, double>& weights);

bool stage_success(const WorldState& s, const StageSpec& spec, const EnvConfig& cfg);

// ---------------------------------------------------------------------------
// Observation

struct ObservationBlock {
  std::string name;
  int start = 0;
  int length = 0;
};

struct ObservationLayout {
  std::vector<ObservationBlock> blocks;
  int total_dim = 0;
};

const ObservationLayout& bimanual_observation_layout();
Vec build_observation(const WorldState& s, const EnvConfig& cfg);

// ---------------------------------------------------------------------------
// Terminal-state buffer (reset distribution for the next stage)

class TerminalBuffer {
 public:
  explicit TerminalBuffer(std::size_t capacity = 1000) : capacity_(capacity) {}

  std::size_t size() const { return states_.size(); }
  std::size_t capacity() const { return capacity_; }
  void push(const WorldState& s);  // FIFO eviction at capacity
  const WorldState& at(std::size_t i) const { return states_[i]; }
  const WorldState& draw(RngStream& rng) const;  // throws ConfigError when empty

  void save(const std::string& path, const EnvConfig& cfg) const;
  static TerminalBuffer load(const std::string& path, const EnvConfig& cfg);

 private:
  std::size_t capacity_;
  std::vector<WorldState> states_;
};

// ---------------------------------------------------------------------------
// Stateful adapters

class BimanualEnv : public RlEnv {
 public:
  BimanualEnv(EnvConfig cfg, StageSpec spec, std::uint64_t seed,
              const TerminalBuffer* reset_buffer = nullptr);

  int obs_dim() const override;
  int action_dim() const override { return 8; }
  void seed(std::uint64_t s) override { rng_ = RngStream(s); }
  Vec reset() override;
  StepOut step(const Vec& action) override;

  const WorldState& state() const { return state_; }
  void set_state(const WorldState& s) { state_ = s; }
  const StageSpec& spec() const { return spec_; }
  void set_success_mode(SuccessMode m) { spec_.success_mode = m; }
  const EnvConfig& config() const { return cfg_; }
  // Full-success terminal states are appended here when set.
  void capture_terminals(TerminalBuffer* buffer) { capture_ = buffer; }

 private:
  EnvConfig cfg_;
  StageSpec spec_;
  RngStream rng_;
  const TerminalBuffer* reset_buffer_;
  TerminalBuffer* capture_ = nullptr;
  WorldState state_;
};

// Runs stages 1..3 in one episode with the relabeled whole-task reward:
// -step_cost per step, +stage_bonus at each stage completion, +shaped_scale
// times the active stage's shaped reward.
class WholeTaskEnv : public RlEnv {
 public:
  WholeTaskEnv(EnvConfig cfg, std::uint64_t seed);

  int obs_dim() const override;
  int action_dim() const override { return 8; }
  void seed(std::uint64_t s) override { rng_ = RngStream(s); }
  Vec reset() override;
  StepOut step(const Vec& action) override;

  const WorldState& state() const { return state_; }
  void set_state(const WorldState& s) { state_ = s; }
  int stages_completed() const;
  const EnvConfig& config() const { return cfg_; }

 private:
  EnvConfig cfg_;
  RngStream rng_;
  WorldState state_;
  std::array<StageSpec, 3> specs_;
};

}  // namespace mixline::env
