#include "textmesh/sds.hpp"

#include "textmesh/optim.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>
#include <vector>

namespace textmesh::sds {

namespace {

double l2_norm(std::span<const double> v) {
  double sum = 0.0;
  for (double x : v) sum += x * x;
  return std::sqrt(sum);
}

void write_telemetry(std::ostream* telemetry, int step, double t, double grad_norm,
                     double wall_seconds) {
  if (telemetry == nullptr) return;
  std::ostringstream line;
  line.setf(std::ios::scientific, std::ios::floatfield);
  line.precision(8);
  line << "step=" << step << " t=" << t << " grad_norm=" << grad_norm
       << " wall_s=" << wall_seconds << "\n";
  (*telemetry) << line.str();
  telemetry->flush();
}

}  // namespace

guidance::NoiseSchedule SdsConfig::schedule() const {
  guidance::NoiseSchedule s;
  s.t_min = t_min;
  s.t_max = t_max;
  s.weighting = weighting;
  s.weight_scale = weight_scale;
  return s;
}

void SdsConfig::validate() const {
  schedule().validate();
  if (steps < 0) throw SdsError("sds config: step count must be non-negative");
  if (!(learning_rate > 0.0)) throw SdsError("sds config: learning rate must be positive");
  if (batch_size < 1) throw SdsError("sds config: batch size must be at least 1");
  if (resolution < 8) throw SdsError("sds config: render resolution must be at least 8");
  if (!(guidance_weight >= 0.0) || !std::isfinite(guidance_weight)) {
    throw SdsError("sds config: guidance weight must be finite and non-negative");
  }
  if (!(eikonal_weight >= 0.0)) throw SdsError("sds config: eikonal weight must be non-negative");
  if (eikonal_points < 0) throw SdsError("sds config: eikonal point count must be non-negative");
  if (!(eikonal_fd_step > 0.0)) throw SdsError("sds config: eikonal step must be positive");
  if (checkpoint_every < 0) throw SdsError("sds config: checkpoint cadence must be non-negative");
}

SdsPixelGradient sds_pixel_gradient(std::span<const double> rendered,
                                    const guidance::ImageShape& shape,
                                    guidance::ScoreModel& model,
                                    const guidance::Conditioning& cond,
                                    const guidance::NoiseSchedule& schedule,
                                    double guidance_weight, Rng& rng,
                                    std::span<const double> depth) {
  if (shape.size() == 0 || rendered.size() != shape.size()) {
    std::ostringstream os;
    os << "sds: rendered image has " << rendered.size() << " values but the shape wants "
       << shape.size();
    throw guidance::GuidanceShapeError(os.str());
  }

  const double t = schedule.sample_t(rng);
  std::vector<double> eps(rendered.size());
  for (auto& e : eps) e = rng.normal();

  const std::vector<double> noisy = guidance::add_noise(rendered, eps, t, schedule);

  // Hand the drawn noise to oracle models before they are asked for it.
  model.observe_true_noise(eps);

  const std::span<const double> fed_depth = model.caps().accepts_depth ? depth
                                                                       : std::span<const double>{};
  const std::vector<double> eps_cond = model.predict_noise(noisy, shape, t, cond, fed_depth);
  if (eps_cond.size() != rendered.size()) {
    throw guidance::GuidanceShapeError("sds: conditional prediction size mismatch");
  }
  const std::vector<double> eps_uncond =
      model.predict_noise(noisy, shape, t, cond.as_uncond(), fed_depth);
  if (eps_uncond.size() != rendered.size()) {
    throw guidance::GuidanceShapeError("sds: unconditional prediction size mismatch");
  }
  const std::vector<double> eps_hat = guidance::cfg_combine(eps_cond, eps_uncond, guidance_weight);

  const double w = schedule.weight(t);
  SdsPixelGradient out;
  out.t = t;
  out.gradient.resize(rendered.size());
  for (std::size_t i = 0; i < out.gradient.size(); ++i) {
    out.gradient[i] = w * (eps_hat[i] - eps[i]);
  }
  return out;
}

std::vector<double> sample_eikonal_points(int count, double bound, Rng& rng) {
  if (count < 0) throw SdsError("eikonal: point count must be non-negative");
  std::vector<double> xyz(static_cast<std::size_t>(count) * 3);
  for (auto& v : xyz) v = rng.uniform(-bound, bound);
  return xyz;
}

diff::GradResult eikonal_penalty_at(const field::Field& f, std::span<const double> xyz,
                                    std::size_t count, double h) {
  if (!(h > 0.0)) throw SdsError("eikonal: finite-difference step must be positive");
  if (xyz.size() != count * 3) {
    throw SdsError("eikonal: point buffer does not match the declared count");
  }
  if (count == 0) {
    return diff::GradResult{0.0, std::vector<double>(f.params().size(), 0.0)};
  }

  diff::Tape tape(f.params());

  // Central differences per axis: six probe batches around every point.
  std::array<diff::Node, 3> grad_axis{};
  std::vector<double> probes(xyz.size());
  for (int axis = 0; axis < 3; ++axis) {
    probes.assign(xyz.begin(), xyz.end());
    for (std::size_t j = 0; j < count; ++j) probes[3 * j + axis] += h;
    const diff::Node plus = f.sdf_program(tape, probes, count);
    probes.assign(xyz.begin(), xyz.end());
    for (std::size_t j = 0; j < count; ++j) probes[3 * j + axis] -= h;
    const diff::Node minus = f.sdf_program(tape, probes, count);
    grad_axis[axis] = tape.affine_scalar(tape.sub(plus, minus), 1.0 / (2.0 * h), 0.0);
  }

  diff::Node sq_norm = tape.mul(grad_axis[0], grad_axis[0]);
  sq_norm = tape.add(sq_norm, tape.mul(grad_axis[1], grad_axis[1]));
  sq_norm = tape.add(sq_norm, tape.mul(grad_axis[2], grad_axis[2]));
  const diff::Node norm = tape.sqrt(tape.clamp_min(sq_norm, 1e-12));
  const diff::Node residual = tape.affine_scalar(norm, 1.0, -1.0);
  const diff::Node total = tape.sum(tape.mul(residual, residual));
  const diff::Node mean = tape.affine_scalar(total, 1.0 / static_cast<double>(count), 0.0);
  return tape.backward(mean);
}

diff::GradResult eikonal_penalty(const field::Field& f, int count, double h, Rng& rng) {
  const std::vector<double> xyz = sample_eikonal_points(count, f.config().bound, rng);
  return eikonal_penalty_at(f, xyz, static_cast<std::size_t>(count), h);
}

StageResult stage1_optimize(field::Field& f, guidance::ScoreModel& model,
                            const std::string& prompt, const SdsConfig& config, Rng& rng,
                            std::ostream* telemetry) {
  config.validate();
  const guidance::NoiseSchedule schedule = config.schedule();

  render::CameraSampleConfig camera_cfg = config.camera;
  camera_cfg.width = config.resolution;
  camera_cfg.height = config.resolution;
  const guidance::ImageShape shape{static_cast<std::size_t>(config.resolution),
                                   static_cast<std::size_t>(config.resolution), 3};

  const std::size_t n_params = f.params().size();
  optim::Adam adam(n_params, config.learning_rate);

  const bool checkpoints = !config.checkpoint_path.empty();
  auto write_checkpoint = [&] {
    if (checkpoints) field::save_params(config.checkpoint_path, f.params());
  };

  StageResult stats;
  std::vector<double> total_grad(n_params);
  for (int step = 0; step < config.steps; ++step) {
    const auto start = std::chrono::steady_clock::now();
    std::fill(total_grad.begin(), total_grad.end(), 0.0);
    double t_drawn = 0.0;

    try {
      for (int b = 0; b < config.batch_size; ++b) {
        const render::Camera cam = render::sample_training_camera(rng, camera_cfg);
        const std::uint64_t render_seed = rng.next_u64();
        const render::RenderedImage img = render::render_image(f, cam, config.render, render_seed);
        const guidance::Conditioning cond = guidance::view_conditioning(prompt, cam);
        const SdsPixelGradient pixel = sds_pixel_gradient(
            img.rgb.data, shape, model, cond, schedule, config.guidance_weight, rng);
        t_drawn = pixel.t;
        const diff::GradResult chained =
            render::render_weighted_grad(f, cam, config.render, render_seed, pixel.gradient);
        for (std::size_t i = 0; i < n_params; ++i) {
          total_grad[i] += chained.gradient[i] / config.batch_size;
        }
      }
      if (config.eikonal_weight > 0.0 && config.eikonal_points > 0) {
        const diff::GradResult eik =
            eikonal_penalty(f, config.eikonal_points, config.eikonal_fd_step, rng);
        for (std::size_t i = 0; i < n_params; ++i) {
          total_grad[i] += config.eikonal_weight * eik.gradient[i];
        }
      }
    } catch (const diff::TapeError& e) {
      write_checkpoint();
      std::ostringstream os;
      os << "sds stage 1 aborted at step " << step << ": " << e.what();
      if (checkpoints) os << " (checkpoint written to " << config.checkpoint_path << ")";
      throw SdsError(os.str());
    }

    const double grad_norm = l2_norm(total_grad);
    if (!std::isfinite(grad_norm)) {
      write_checkpoint();
      std::ostringstream os;
      os << "sds stage 1 aborted at step " << step << ": non-finite gradient norm";
      if (checkpoints) os << " (checkpoint written to " << config.checkpoint_path << ")";
      throw SdsError(os.str());
    }

    adam.step(f.params().values(), total_grad);

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_telemetry(telemetry, step, t_drawn, grad_norm, wall);
    stats.steps_run = step + 1;
    stats.final_grad_norm = grad_norm;

    if (config.checkpoint_every > 0 && checkpoints &&
        (step + 1) % config.checkpoint_every == 0) {
      write_checkpoint();
    }
  }
  return stats;
}

std::vector<double> direct_pixel_optimize(std::vector<double> pixels,
                                          const guidance::ImageShape& shape,
                                          guidance::ScoreModel& model,
                                          const guidance::Conditioning& cond,
                                          const SdsConfig& config, Rng& rng,
                                          std::ostream* telemetry) {
  config.validate();
  if (pixels.size() != shape.size() || shape.size() == 0) {
    throw guidance::GuidanceShapeError("direct-pixel sds: pixel buffer does not match the shape");
  }
  const guidance::NoiseSchedule schedule = config.schedule();
  optim::Adam adam(pixels.size(), config.learning_rate);

  for (int step = 0; step < config.steps; ++step) {
    const auto start = std::chrono::steady_clock::now();
    const SdsPixelGradient pixel =
        sds_pixel_gradient(pixels, shape, model, cond, schedule, config.guidance_weight, rng);
    const double grad_norm = l2_norm(pixel.gradient);
    if (!std::isfinite(grad_norm)) {
      std::ostringstream os;
      os << "direct-pixel sds aborted at step " << step << ": non-finite gradient";
      throw SdsError(os.str());
    }
    adam.step(pixels, pixel.gradient);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_telemetry(telemetry, step, pixel.t, grad_norm, wall);
  }
  return pixels;
}

}  // namespace textmesh::sds
