#pragma once

#include "textmesh/camera.hpp"
#include "textmesh/error.hpp"
#include "textmesh/field.hpp"
#include "textmesh/guidance.hpp"
#include "textmesh/render.hpp"
#include "textmesh/rng.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace textmesh::sds {

class SdsError : public Error {
 public:
  using Error::Error;
};

struct SdsConfig {
  double guidance_weight = 100.0;  // classifier-free guidance strength
  double t_min = 0.02;
  double t_max = 0.98;
  guidance::SdsWeighting weighting = guidance::SdsWeighting::one;
  double weight_scale = 1.0;

  int steps = 2000;
  double learning_rate = 0.01;
  int batch_size = 1;   // cameras per optimization step
  int resolution = 64;  // square render resolution, >= 8

  render::RenderConfig render;
  render::CameraSampleConfig camera;  // width/height overridden by resolution

  // Keeps the SDF an approximate distance function: mean (|grad s| - 1)^2
  // over random scene points, spatial gradient by central differences.
  double eikonal_weight = 0.01;
  int eikonal_points = 32;
  double eikonal_fd_step = 1e-3;

  int checkpoint_every = 100;   // steps between checkpoints; 0 disables
  std::string checkpoint_path;  // empty disables checkpoint writing

  guidance::NoiseSchedule schedule() const;
  void validate() const;
};

struct SdsPixelGradient {
  std::vector<double> gradient;  // w(t) * (eps_hat - eps), per pixel channel
  double t = 0.0;
};

// One SDS draw: t ~ U[schedule range], eps ~ N(0, I); noises the rendered
// image, queries the model conditionally and unconditionally, combines with
// classifier-free guidance, and returns the pixel-space factor. The score
// model is treated as a fixed function: nothing differentiates through it.
// Depth is forwarded only when the model accepts it.
SdsPixelGradient sds_pixel_gradient(std::span<const double> rendered,
                                    const guidance::ImageShape& shape,
                                    guidance::ScoreModel& model,
                                    const guidance::Conditioning& cond,
                                    const guidance::NoiseSchedule& schedule,
                                    double guidance_weight, Rng& rng,
                                    std::span<const double> depth = {});

// Uniform points in the scene cube, xyz interleaved.
std::vector<double> sample_eikonal_points(int count, double bound, Rng& rng);

// Value and parameter gradient of the eikonal penalty at fixed points.
diff::GradResult eikonal_penalty_at(const field::Field& f, std::span<const double> xyz,
                                    std::size_t count, double h);

// Convenience wrapper drawing `count` fresh points from rng.
diff::GradResult eikonal_penalty(const field::Field& f, int count, double h, Rng& rng);

struct StageResult {
  int steps_run = 0;
  double final_grad_norm = 0.0;
};

// Stage-1 shape optimization. Per step: sample an orbit camera, render,
// draw the SDS pixel factor, chain it through the renderer to the field
// parameters, add the weighted eikonal gradient, and take one Adam step
// (0.9 / 0.999 / 1e-8). Telemetry writes one line per step; a non-finite
// gradient aborts with a checkpoint (when a path is configured).
StageResult stage1_optimize(field::Field& f, guidance::ScoreModel& model,
                            const std::string& prompt, const SdsConfig& config, Rng& rng,
                            std::ostream* telemetry = nullptr);

// Renderer-bypass harness: the parameters ARE the image, so the SDS pixel
// factor applies to them directly. Returns the optimized pixels.
std::vector<double> direct_pixel_optimize(std::vector<double> pixels,
                                          const guidance::ImageShape& shape,
                                          guidance::ScoreModel& model,
                                          const guidance::Conditioning& cond,
                                          const SdsConfig& config, Rng& rng,
                                          std::ostream* telemetry = nullptr);

}  // namespace textmesh::sds
