#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "harmony/edges.hpp"
#include "harmony/field.hpp"
#include "harmony/patches.hpp"
#include "harmony/volume.hpp"

namespace harmony {

struct FlowTrainConfig {
  double learning_rate = 5e-5;
  std::int64_t batch_size = 8;
  std::int64_t steps = 2000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t rng_seed = 0;
  // Writes <checkpoint_dir>/step_<n>.ckpt every `checkpoint_every` steps when both are set.
  std::int64_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;

  void validate() const;
};

enum class Solver { midpoint, euler };

struct SamplerConfig {
  std::int64_t n_steps = 16;
  Solver solver = Solver::midpoint;
  // Kept for an adaptive solver; the fixed-step solvers ignore them.
  double abs_tol = 5e-5;
  double rel_tol = 5e-5;
  std::uint64_t rng_seed = 0;
  // Whole-volume inference is refused above this estimated activation size
  // unless tiled inference is enabled.
  std::int64_t memory_budget_bytes = std::int64_t{2} << 30;
  bool tiled = false;
  std::int64_t tile_size = 64;
  std::int64_t tile_overlap = 16;

  void validate() const;
};

// x_t = t * x1 + (1 - t) * x0
std::vector<double> interpolate(std::span<const double> x0, std::span<const double> x1, double t);

struct LossSample {
  double t = 0.0;
  std::vector<double> x0;
  std::vector<double> x_t;
  std::vector<double> target;  // x1 - x0
};

// Draws t ~ U(0, 1) and then x0 ~ N(0, 1) per voxel, in that order.
LossSample draw_loss_sample(const TrainingPatch& patch, Rng& rng);

// Squared-error objective for any velocity predictor (no gradients).
using VelocityPredictor =
    std::function<std::vector<double>(const TrainingPatch& patch, std::span<const double> x_t, double t)>;
double rectified_loss_value(const VelocityPredictor& predict, const TrainingPatch& patch, Rng& rng);

template <typename T>
struct LossAndGradients {
  double loss = 0.0;
  FieldGradients<T> grads;
};

// mean((x1 - x0) - v(x_t, t; e, i, j, k))^2 with its exact parameter gradient.
template <typename T>
LossAndGradients<T> rectified_loss(const VelocityField<T>& field, const TrainingPatch& patch, Rng& rng);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

void adam_update(std::span<float> params, std::span<const float> grads, AdamState& state, const FlowTrainConfig& cfg);

struct TrainResult {
  VelocityField<float> field;
  std::vector<double> loss_trace;  // mean batch loss per step
};

using TrainObserver = std::function<void(std::int64_t step, double loss)>;

// Adam on rectified-flow losses of patches drawn by sample_batch.
TrainResult train(VelocityField<float> field, std::span<const Volume3D> volumes, std::span<const EdgeMap> edges,
                  const FlowTrainConfig& cfg, const PatchSamplerConfig& sampler, const TrainObserver& observer = {});

void save_loss_trace_csv(std::span<const double> trace, const std::filesystem::path& path);

// Fixed-step integration of dx/dt = v(x, t) from t = 0 to t = 1.
using VelocityFn = std::function<void(std::span<const double> x, double t, std::span<double> out)>;
std::vector<double> integrate(const VelocityFn& velocity, std::vector<double> x0, const SamplerConfig& cfg);

// Standard-normal starting state for a volume of `voxels`, from cfg.rng_seed.
std::vector<double> draw_initial_noise(std::int64_t voxels, const SamplerConfig& cfg);

// Generates an image for the given conditioning; dims must suit the architecture.
std::vector<double> sample(const VelocityField<float>& field, std::span<const double> edge, const CoordChannels& coords,
                           const Dims& dims, const SamplerConfig& cfg);

std::vector<double> sample_from(const VelocityField<float>& field, std::vector<double> x0, std::span<const double> edge,
                                const CoordChannels& coords, const Dims& dims, const SamplerConfig& cfg);

// Rough peak activation footprint of one whole-volume forward pass.
std::int64_t estimate_inference_bytes(const Architecture& arch, const Dims& dims);

// Whole-volume (or tiled) generation conditioned on a given edge map, clamped to [0, 1].
Volume3D harmonize_from_edges(const VelocityField<float>& field, const EdgeMap& edges, const Volume3D& like,
                              const SamplerConfig& sampler);

// Adaptive edge detection on x_src followed by harmonize_from_edges.
Volume3D harmonize(const VelocityField<float>& field, const Volume3D& x_src, const CannyConfig& canny,
                   const SamplerConfig& sampler);

}  // namespace harmony
