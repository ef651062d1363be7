#include "mixline/env.hpp"

#include "mixline/errors.hpp"
#include "mixline/rng.hpp"

namespace mixline::env {

const std::vector<std::string>& reward_term_names() {
  static const std::vector<std::string> names{
      "distance",       "rotation",     "around",
      "finger_distance", "lift",         "stir",
      "action_penalty", "collision_penalty", "fall_penalty",
      "wrong_pose_penalty"};
  return names;
}

double RewardTerms::get(const std::string& name) const {
  if (name == "distance") return distance;
  if (name == "rotation") return rotation;
  if (name == "around") return around;
  if (name == "finger_distance") return finger_distance;
  if (name == "lift") return lift;
  if (name == "stir") return stir;
  if (name == "action_penalty") return action_penalty;
  if (name == "collision_penalty") return collision_penalty;
  if (name == "fall_penalty") return fall_penalty;
  if (name == "wrong_pose_penalty") return wrong_pose_penalty;
  throw ConfigError("unknown reward term: " + name);
}

std::map<std::string, double> RewardTerms::as_map() const {
  std::map<std::string, double> out;
  for (const auto& name : reward_term_names()) out[name] = get(name);
  return out;
}

VecEnv::VecEnv(std::vector<std::unique_ptr<RlEnv>> envs, std::uint64_t master_seed)
    : envs_(std::move(envs)) {
  if (envs_.empty()) throw ConfigError("VecEnv: need at least one instance");
  RngStream master(master_seed);
  for (std::size_t i = 0; i < envs_.size(); ++i)
    envs_[i]->seed(master.split("env", static_cast<std::uint64_t>(i)).state());
  running_return_.assign(envs_.size(), 0.0);
  running_length_.assign(envs_.size(), 0);
}

std::vector<Vec> VecEnv::reset_all() {
  std::vector<Vec> obs;
  obs.reserve(envs_.size());
  for (auto& e : envs_) obs.push_back(e->reset());
  std::fill(running_return_.begin(), running_return_.end(), 0.0);
  std::fill(running_length_.begin(), running_length_.end(), 0);
  return obs;
}

StepOut VecEnv::step(int i, const Vec& action) {
  StepOut out = envs_[i]->step(action);
  running_return_[i] += out.reward;
  running_length_[i] += 1;
  if (out.done) {
    finished_.push_back({running_return_[i], running_length_[i], out.success});
    running_return_[i] = 0.0;
    running_length_[i] = 0;
    out.obs = envs_[i]->reset();
  }
  return out;
}

}  // namespace mixline::env
