#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mixline/linalg.hpp"

namespace mixline::env {

// Raw (unweighted) per-step reward terms. Terms an environment does not use
// stay zero; the weighted sum is taken over the stage's weight map only.
struct RewardTerms {
  double distance = 0.0;
  double rotation = 0.0;
  double around = 0.0;
  double finger_distance = 0.0;
  double lift = 0.0;
  double stir = 0.0;
  double action_penalty = 0.0;
  double collision_penalty = 0.0;
  double fall_penalty = 0.0;
  double wrong_pose_penalty = 0.0;

  double get(const std::string& name) const;
  std::map<std::string, double> as_map() const;
};

// Names accepted in reward-weight maps.
const std::vector<std::string>& reward_term_names();

struct StepOut {
  Vec obs;
  double reward = 0.0;
  bool done = false;
  bool success = false;
  RewardTerms terms;
};

class RlEnv {
 public:
  virtual ~RlEnv() = default;
  virtual int obs_dim() const = 0;
  virtual int action_dim() const = 0;
  // Reseeds the env's private stream; affects subsequent resets.
  virtual void seed(std::uint64_t s) = 0;
  virtual Vec reset() = 0;
  virtual StepOut step(const Vec& action) = 0;
};

// N independent instances stepped in lockstep; auto-resets finished episodes.
class VecEnv {
 public:
  VecEnv(std::vector<std::unique_ptr<RlEnv>> envs, std::uint64_t master_seed);

  int size() const { return static_cast<int>(envs_.size()); }
  int obs_dim() const { return envs_.front()->obs_dim(); }
  int action_dim() const { return envs_.front()->action_dim(); }
  RlEnv& env(int i) { return *envs_[i]; }

  // Resets every instance; returns observations row-per-env.
  std::vector<Vec> reset_all();
  // Steps instance i with the given action. When the episode ends the
  // returned StepOut keeps the terminal flags/reward but obs is already the
  // next episode's first observation.
  StepOut step(int i, const Vec& action);
  // Episode return / length / success of the episode that ended last step.
  struct EpisodeStats {
    double episode_return = 0.0;
    int episode_length = 0;
    bool success = false;
  };
  const std::vector<EpisodeStats>& finished() const { return finished_; }
  void clear_finished() { finished_.clear(); }

 private:
  std::vector<std::unique_ptr<RlEnv>> envs_;
  std::vector<double> running_return_;
  std::vector<int> running_length_;
  std::vector<EpisodeStats> finished_;
};

}  // namespace mixline::env
