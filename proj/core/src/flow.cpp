#include "harmony/flow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "harmony/error.hpp"
#include "harmony/io.hpp"

namespace harmony {

void FlowTrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw UsageError("learning_rate must be >= 0");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (steps < 1) throw UsageError("steps must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw UsageError("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw UsageError("Adam epsilon must be > 0");
  if (checkpoint_every < 0) throw UsageError("checkpoint_every must be >= 0");
}

void SamplerConfig::validate() const {
  if (n_steps < 1) throw UsageError("n_steps must be >= 1");
  if (!(abs_tol > 0.0 && rel_tol > 0.0)) throw UsageError("solver tolerances must be > 0");
  if (memory_budget_bytes < 1) throw UsageError("memory_budget_bytes must be >= 1");
  if (tile_size < 2 || tile_overlap < 0 || tile_overlap >= tile_size) {
    throw UsageError("tile_size must be >= 2 and exceed tile_overlap");
  }
}

std::vector<double> interpolate(std::span<const double> x0, std::span<const double> x1, double t) {
  if (x0.size() != x1.size()) throw ShapeError("interpolate: shape mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw UsageError("interpolate: t must lie in [0, 1]");
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t * x1[i] + (1.0 - t) * x0[i];
  return out;
}

LossSample draw_loss_sample(const TrainingPatch& patch, Rng& rng) {
  LossSample s;
  s.t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  s.x0.resize(patch.data.size());
  for (double& x : s.x0) x = normal(rng);
  s.x_t = interpolate(s.x0, patch.data, s.t);
  s.target.resize(patch.data.size());
  for (std::size_t i = 0; i < s.target.size(); ++i) s.target[i] = patch.data[i] - s.x0[i];
  return s;
}

double rectified_loss_value(const VelocityPredictor& predict, const TrainingPatch& patch, Rng& rng) {
  const LossSample s = draw_loss_sample(patch, rng);
  const auto v = predict(patch, s.x_t, s.t);
  if (v.size() != s.target.size()) throw ShapeError("velocity predictor returned the wrong size");
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double r = s.target[i] - v[i];
    acc += r * r;
  }
  return acc / static_cast<double>(v.size());
}

template <typename T>
LossAndGradients<T> rectified_loss(const VelocityField<T>& field, const TrainingPatch& patch, Rng& rng) {
  const LossSample s = draw_loss_sample(patch, rng);
  const Dims dims{patch.size, patch.size, patch.size};
  const Tensor<T> input = make_field_input<T>(s.x_t, patch.edge, patch.coords, dims);
  FieldTape<T> tape;
  const Tensor<T> v = field.forward(input, s.t, tape);
  const auto n = static_cast<double>(v.size());
  Tensor<T> grad(1, dims);
  double acc = 0.0;
  for (std::int64_t i = 0; i < v.size(); ++i) {
    const double r = static_cast<double>(v[i]) - s.target[static_cast<std::size_t>(i)];
    acc += r * r;
    grad[i] = static_cast<T>(2.0 * r / n);
  }
  LossAndGradients<T> out{acc / n, field.zero_gradients()};
  field.backward(tape, grad, out.grads);
  return out;
}

template LossAndGradients<float> rectified_loss(const VelocityField<float>&, const TrainingPatch&, Rng&);
template LossAndGradients<double> rectified_loss(const VelocityField<double>&, const TrainingPatch&, Rng&);

void adam_update(std::span<float> params, std::span<const float> grads, AdamState& state, const FlowTrainConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adam: gradient length mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double step = cfg.learning_rate * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + cfg.epsilon);
    params[i] = static_cast<float>(params[i] - step);
  }
}

TrainResult train(VelocityField<float> field, std::span<const Volume3D> volumes, std::span<const EdgeMap> edges,
                  const FlowTrainConfig& cfg, const PatchSamplerConfig& sampler, const TrainObserver& observer) {
  cfg.validate();
  sampler.validate();
  if (volumes.empty()) throw UsageError("train needs at least one target volume");
  const std::int64_t m = field.architecture().spatial_multiple();
  if (sampler.patch_size % m) throw UsageError("patch_size must be divisible by " + std::to_string(m));

  Rng rng(cfg.rng_seed);
  AdamState adam;
  TrainResult result{std::move(field), {}};
  result.loss_trace.reserve(static_cast<std::size_t>(cfg.steps));
  auto grads = result.field.zero_gradients();
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const auto batch = sample_batch(volumes, edges, sampler, rng, cfg.batch_size);
    std::fill(grads.values.begin(), grads.values.end(), 0.0f);
    double loss = 0.0;
    for (const auto& patch : batch) {
      auto lg = rectified_loss(result.field, patch, rng);
      loss += lg.loss;
      for (std::size_t i = 0; i < grads.values.size(); ++i) grads.values[i] += lg.grads.values[i];
    }
    loss /= static_cast<double>(batch.size());
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "training diverged: non-finite loss at step " << step;
      throw DataError(msg.str());
    }
    const float scale = 1.0f / static_cast<float>(batch.size());
    for (float& g : grads.values) g *= scale;
    adam_update(result.field.params(), grads.values, adam, cfg);
    result.loss_trace.push_back(loss);
    if (observer) observer(step, loss);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() && (step + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(result.field, cfg.checkpoint_dir / ("step_" + std::to_string(step + 1) + ".ckpt"));
    }
  }
  return result;
}

void save_loss_trace_csv(std::span<const double> trace, const std::filesystem::path& path) {
  std::ostringstream out;
  out.precision(17);
  out << "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out << i << ',' << trace[i] << '\n';
  write_file_atomic(path, out.str());
}

std::vector<double> integrate(const VelocityFn& velocity, std::vector<double> x, const SamplerConfig& cfg) {
  cfg.validate();
  const double h = 1.0 / static_cast<double>(cfg.n_steps);
  std::vector<double> k(x.size());
  std::vector<double> mid(x.size());
  for (std::int64_t n = 0; n < cfg.n_steps; ++n) {
    const double t = static_cast<double>(n) / static_cast<double>(cfg.n_steps);
    velocity(x, t, k);
    if (cfg.solver == Solver::midpoint) {
      for (std::size_t i = 0; i < x.size(); ++i) mid[i] = x[i] + 0.5 * h * k[i];
      velocity(mid, t + 0.5 * h, k);
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += h * k[i];
    for (double xi : x) {
      if (!std::isfinite(xi)) throw DataError("sampler state became non-finite at step " + std::to_string(n));
    }
  }
  return x;
}

std::vector<double> draw_initial_noise(std::int64_t voxels, const SamplerConfig& cfg) {
  Rng rng(cfg.rng_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(static_cast<std::size_t>(voxels));
  for (double& xi : x) xi = normal(rng);
  return x;
}

std::vector<double> sample_from(const VelocityField<float>& field, std::vector<double> x0, std::span<const double> edge,
                                const CoordChannels& coords, const Dims& dims, const SamplerConfig& cfg) {
  // Conditioning channels are fixed; only channel 0 changes between evaluations.
  std::vector<double> zeros(static_cast<std::size_t>(dims.total()), 0.0);
  Tensor<float> input = make_field_input<float>(zeros, edge, coords, dims);
  VelocityFn v = [&](std::span<const double> x, double t, std::span<double> out) {
    auto ch = input.channel(0);
    for (std::size_t i = 0; i < x.size(); ++i) ch[i] = static_cast<float>(x[i]);
    const Tensor<float> y = field.forward(input, t);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = y[static_cast<std::int64_t>(i)];
  };
  if (static_cast<std::int64_t>(x0.size()) != dims.total()) throw ShapeError("sample: x0 has the wrong size");
  return integrate(v, std::move(x0), cfg);
}

std::vector<double> sample(const VelocityField<float>& field, std::span<const double> edge, const CoordChannels& coords,
                           const Dims& dims, const SamplerConfig& cfg) {
  cfg.validate();
  return sample_from(field, draw_initial_noise(dims.total(), cfg), edge, coords, dims, cfg);
}

std::int64_t estimate_inference_bytes(const Architecture& arch, const Dims& dims) {
  // Per level: skip tensor, block intermediates and the im2col chunk.
  double voxels = static_cast<double>(dims.total());
  double floats = 0.0;
  for (std::int64_t l = 0; l < arch.levels(); ++l) {
    floats += voxels * static_cast<double>(arch.width(l)) * 8.0;
    voxels /= 8.0;
  }
  floats += 8192.0 * 2.0 * static_cast<double>(arch.width(0)) * static_cast<double>(arch.kernel * arch.kernel * arch.kernel);
  return static_cast<std::int64_t>(floats * sizeof(float));
}

namespace {

std::int64_t round_up(std::int64_t n, std::int64_t m) { return (n + m - 1) / m * m; }

// Coordinates for every voxel of `padded`, normalised against the original dims.
CoordChannels padded_coords(const Dims& original, const Dims& padded, const Index3& origin) {
  CoordChannels c;
  for (auto& ch : c) ch.resize(static_cast<std::size_t>(padded.total()));
  std::size_t m = 0;
  for (std::int64_t k = 0; k < padded.nz; ++k) {
    for (std::int64_t j = 0; j < padded.ny; ++j) {
      for (std::int64_t i = 0; i < padded.nx; ++i, ++m) {
        c[0][m] = normalized_coordinate(origin[0] + i, original.nx);
        c[1][m] = normalized_coordinate(origin[1] + j, original.ny);
        c[2][m] = normalized_coordinate(origin[2] + k, original.nz);
      }
    }
  }
  return c;
}

std::vector<double> crop(std::span<const double> src, const Dims& sd, const Index3& origin, const Dims& cd) {
  std::vector<double> out(static_cast<std::size_t>(cd.total()));
  std::size_t m = 0;
  for (std::int64_t k = 0; k < cd.nz; ++k) {
    for (std::int64_t j = 0; j < cd.ny; ++j) {
      for (std::int64_t i = 0; i < cd.nx; ++i, ++m) {
        out[m] = src[static_cast<std::size_t>((origin[0] + i) + sd.nx * ((origin[1] + j) + sd.ny * (origin[2] + k)))];
      }
    }
  }
  return out;
}

std::vector<std::int64_t> tile_starts(std::int64_t n, std::int64_t tile, std::int64_t overlap) {
  if (tile >= n) return {0};
  std::vector<std::int64_t> starts;
  for (std::int64_t s = 0;; s += tile - overlap) {
    if (s + tile >= n) {
      starts.push_back(n - tile);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

}  // namespace

Volume3D harmonize_from_edges(const VelocityField<float>& field, const EdgeMap& edges, const Volume3D& like,
                              const SamplerConfig& cfg) {
  cfg.validate();
  const Dims d = like.dims();
  if (!(edges.dims == d)) throw ShapeError("edge map dims differ from the volume");
  const std::int64_t m = field.architecture().spatial_multiple();
  const Dims pd{round_up(d.nx, m), round_up(d.ny, m), round_up(d.nz, m)};

  std::vector<double> edge(static_cast<std::size_t>(pd.total()), 0.0);
  for (std::int64_t k = 0; k < d.nz; ++k) {
    for (std::int64_t j = 0; j < d.ny; ++j) {
      for (std::int64_t i = 0; i < d.nx; ++i) {
        edge[static_cast<std::size_t>(i + pd.nx * (j + pd.ny * k))] = edges.bits[static_cast<std::size_t>(like.index(i, j, k))];
      }
    }
  }
  const std::vector<double> x0 = draw_initial_noise(pd.total(), cfg);

  std::vector<double> generated;
  const bool fits = estimate_inference_bytes(field.architecture(), pd) <= cfg.memory_budget_bytes;
  if (!cfg.tiled) {
    if (!fits) {
      throw CapacityError("volume too large for whole-volume inference within the memory budget; enable tiled inference");
    }
    generated = sample_from(field, x0, edge, padded_coords(d, pd, {0, 0, 0}), pd, cfg);
  } else {
    const std::int64_t tile = round_up(cfg.tile_size, m);
    std::vector<double> sum(x0.size(), 0.0);
    std::vector<double> hits(x0.size(), 0.0);
    for (auto z0 : tile_starts(pd.nz, tile, cfg.tile_overlap)) {
      for (auto y0 : tile_starts(pd.ny, tile, cfg.tile_overlap)) {
        for (auto x0i : tile_starts(pd.nx, tile, cfg.tile_overlap)) {
          const Index3 o{x0i, y0, z0};
          const Dims td{std::min(tile, pd.nx), std::min(tile, pd.ny), std::min(tile, pd.nz)};
          auto out = sample_from(field, crop(x0, pd, o, td), crop(edge, pd, o, td), padded_coords(d, td, o), td, cfg);
          std::size_t q = 0;
          for (std::int64_t k = 0; k < td.nz; ++k) {
            for (std::int64_t j = 0; j < td.ny; ++j) {
              for (std::int64_t i = 0; i < td.nx; ++i, ++q) {
                const auto idx = static_cast<std::size_t>((o[0] + i) + pd.nx * ((o[1] + j) + pd.ny * (o[2] + k)));
                sum[idx] += out[q];
                hits[idx] += 1.0;
              }
            }
          }
        }
      }
    }
    generated.resize(sum.size());
    for (std::size_t i = 0; i < sum.size(); ++i) generated[i] = sum[i] / hits[i];
  }

  Volume3D out(d, like.spacing());
  for (std::int64_t k = 0; k < d.nz; ++k) {
    for (std::int64_t j = 0; j < d.ny; ++j) {
      for (std::int64_t i = 0; i < d.nx; ++i) {
        out(i, j, k) = std::clamp(generated[static_cast<std::size_t>(i + pd.nx * (j + pd.ny * k))], 0.0, 1.0);
      }
    }
  }
  if (like.has_mask()) out.set_mask(*like.mask());
  return out;
}

Volume3D harmonize(const VelocityField<float>& field, const Volume3D& x_src, const CannyConfig& canny,
                   const SamplerConfig& sampler) {
  const EdgeMap edges = adaptive_edge_detect(x_src, canny);
  return harmonize_from_edges(field, edges, x_src, sampler);
}

}  // namespace harmony
