#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mixline/linalg.hpp"
#include "mixline/rng.hpp"

namespace mixline::nn {

// Fully-connected net with tanh hidden layers and a linear output layer.
// Weights, biases and Adam moments live together so a checkpoint captures the
// whole optimizer state. All math is double precision.
struct MlpParams {
  std::vector<int> layer_sizes;
  std::vector<Matrix> weights;  // layer i: layer_sizes[i+1] x layer_sizes[i]
  std::vector<Vec> biases;
  std::vector<Matrix> adam_m_w, adam_v_w;
  std::vector<Vec> adam_m_b, adam_v_b;
  std::uint64_t adam_t = 0;

  int input_dim() const { return layer_sizes.front(); }
  int output_dim() const { return layer_sizes.back(); }
  int num_layers() const { return static_cast<int>(weights.size()); }
  std::size_t num_coords() const;
};

MlpParams mlp_zeros(const std::vector<int>& layer_sizes);
// Xavier-uniform init; final_scale shrinks the output layer (small initial
// actions / values).
MlpParams mlp_init(const std::vector<int>& layer_sizes, RngStream rng, double final_scale = 1.0);

struct MlpCache {
  std::vector<Matrix> acts;  // acts[0] = input batch, acts[i+1] = output of layer i
};

Matrix mlp_forward_batch(const MlpParams& params, const Matrix& input, MlpCache* cache = nullptr);
Vec mlp_forward(const MlpParams& params, std::span<const double> input);

struct MlpGrads {
  std::vector<Matrix> dw;
  std::vector<Vec> db;

  void init_like(const MlpParams& params);
  void zero();
  void scale(double s);
  void axpy(double s, const MlpGrads& other);  // this += s * other
  std::size_t num_coords() const;
};

// Accumulates parameter gradients into `grads` (must be init_like'd) and
// returns the gradient w.r.t. the input batch.
Matrix mlp_backward_batch(const MlpParams& params, const MlpCache& cache,
                          const Matrix& upstream, MlpGrads& grads);
// Single-sample convenience: runs its own forward pass.
Vec mlp_backward(const MlpParams& params, std::span<const double> input,
                 std::span<const double> upstream, MlpGrads& grads);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction; throws NumericError on a non-finite
// gradient before touching any state.
void adam_step(MlpParams& params, const MlpGrads& grads, const AdamConfig& cfg);

// Flat coordinate view used by gradcheck and the checkpoint writer: for each
// layer, weight entries row-major then biases.
double get_coord(const MlpParams& params, std::size_t index);
void set_coord(MlpParams& params, std::size_t index, double value);
double get_grad_coord(const MlpGrads& grads, std::size_t index);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = false;
};

// loss(params, grads): returns the scalar loss; when grads != nullptr it must
// also accumulate the analytic gradient. Central differences with the given
// step; nets with more than `max_coords` coordinates are checked on a seeded
// random subset of at least that size.
using LossFn = std::function<double(const MlpParams&, MlpGrads*)>;
GradCheckReport gradcheck(const MlpParams& params, const LossFn& loss, double tolerance,
                          double fd_step = 1e-5, std::size_t max_coords = 200,
                          std::uint64_t seed = 0);

// Self-describing binary checkpoint ("MXL1"); write-then-read is byte-exact.
void save_checkpoint(const MlpParams& params, const std::string& path);
MlpParams load_checkpoint(const std::string& path);

}  // namespace mixline::nn
