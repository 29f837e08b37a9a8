#include "textmesh/camera.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace textmesh::render {

namespace {

constexpr double kDegToRad = M_PI / 180.0;

Eigen::Matrix3d as_matrix(const std::array<double, 9>& m) {
  Eigen::Matrix3d out;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out(r, c) = m[static_cast<std::size_t>(3 * r + c)];
  }
  return out;
}

}  // namespace

void Camera::validate() const {
  if (width < 1 || height < 1) throw Error("camera image size must be positive");
  if (!(t_near > 0.0) || !(t_near < t_far)) {
    throw Error("camera depth range requires 0 < near < far");
  }
  const Eigen::Matrix3d k = as_matrix(K);
  if (std::abs(k.determinant()) < 1e-12) throw Error("camera intrinsics are singular");
  const Eigen::Matrix3d r = as_matrix(R);
  if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6) {
    throw Error("camera rotation is not orthonormal");
  }
}

Ray pixel_ray(const Camera& cam, double px, double py) {
  const Eigen::Matrix3d k = as_matrix(cam.K);
  if (std::abs(k.determinant()) < 1e-12) throw Error("camera intrinsics are singular");
  if (px < 0.0 || py < 0.0 || px > cam.width || py > cam.height) {
    throw Error("pixel coordinates outside the image bounds");
  }
  const Eigen::Vector3d p_bar(px, py, 1.0);
  const Eigen::Vector3d q = k.inverse() * p_bar;
  const Eigen::Vector3d d_world = as_matrix(cam.R) * q;
  const double n = d_world.norm();
  if (!(n > 0.0)) throw Error("degenerate pixel ray");
  Ray ray;
  ray.origin = cam.t;
  for (int a = 0; a < 3; ++a) ray.dir[static_cast<std::size_t>(a)] = d_world(a) / n;
  return ray;
}

Camera make_lookat_camera(const std::array<double, 3>& position,
                          const std::array<double, 3>& target, double focal_px, int width,
                          int height, double t_near, double t_far) {
  const Eigen::Vector3d pos(position[0], position[1], position[2]);
  const Eigen::Vector3d tgt(target[0], target[1], target[2]);
  Eigen::Vector3d forward = tgt - pos;
  const double dist = forward.norm();
  if (!(dist > 1e-9)) throw Error("look-at camera position coincides with its target");
  forward /= dist;

  Eigen::Vector3d up(0.0, 1.0, 0.0);
  if (std::abs(forward.dot(up)) > 1.0 - 1e-6) up = Eigen::Vector3d(0.0, 0.0, 1.0);
  Eigen::Vector3d right = forward.cross(up).normalized();
  Eigen::Vector3d down = forward.cross(right);  // unit by construction

  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.t_near = t_near;
  cam.t_far = t_far;
  cam.t = position;
  for (int r = 0; r < 3; ++r) {
    cam.R[static_cast<std::size_t>(3 * r + 0)] = right(r);
    cam.R[static_cast<std::size_t>(3 * r + 1)] = down(r);
    cam.R[static_cast<std::size_t>(3 * r + 2)] = forward(r);
  }
  cam.K = {focal_px, 0.0, width / 2.0, 0.0, focal_px, height / 2.0, 0.0, 0.0, 1.0};
  cam.validate();
  return cam;
}

std::array<double, 3> orbit_position(double azimuth_deg, double elevation_deg, double radius) {
  const double a = azimuth_deg * kDegToRad;
  const double e = elevation_deg * kDegToRad;
  return {radius * std::cos(e) * std::sin(a), radius * std::sin(e),
          radius * std::cos(e) * std::cos(a)};
}

double azimuth_deg_of(const std::array<double, 3>& position) {
  return std::atan2(position[0], position[2]) / kDegToRad;
}

double elevation_deg_of(const std::array<double, 3>& position) {
  const double rho =
      std::sqrt(position[0] * position[0] + position[1] * position[1] + position[2] * position[2]);
  return std::asin(position[1] / rho) / kDegToRad;
}

Camera sample_training_camera(Rng& rng, const CameraSampleConfig& cfg) {
  const double azimuth = rng.uniform(0.0, 360.0);
  const double elevation = rng.uniform(-90.0, 90.0);
  const double radius = rng.uniform(cfg.radius_min, cfg.radius_max);
  const double t_near = std::max(0.05, radius - cfg.scene_extent);
  const double t_far = radius + cfg.scene_extent;
  return make_lookat_camera(orbit_position(azimuth, elevation, radius), {0.0, 0.0, 0.0},
                            cfg.focal_scale * cfg.width, cfg.width, cfg.height, t_near, t_far);
}

std::vector<Camera> turntable_cameras(int n, double elevation_deg,
                                      const CameraSampleConfig& cfg) {
  if (n < 1) throw Error("turntable needs at least one camera");
  const double radius = 0.5 * (cfg.radius_min + cfg.radius_max);
  const double t_near = std::max(0.05, radius - cfg.scene_extent);
  const double t_far = radius + cfg.scene_extent;
  std::vector<Camera> cams;
  cams.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double azimuth = 360.0 * static_cast<double>(i) / static_cast<double>(n);
    cams.push_back(make_lookat_camera(orbit_position(azimuth, elevation_deg, radius),
                                      {0.0, 0.0, 0.0}, cfg.focal_scale * cfg.width, cfg.width,
                                      cfg.height, t_near, t_far));
  }
  return cams;
}

}  // namespace textmesh::render
