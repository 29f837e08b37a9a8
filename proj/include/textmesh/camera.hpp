#pragma once

#include "textmesh/error.hpp"
#include "textmesh/rng.hpp"

#include <array>
#include <vector>

namespace textmesh::render {

// Pinhole camera. R maps camera coordinates to world coordinates with
// columns (right, down, forward); t is the camera center in world space.
// World axes: y up; image rows grow downward.
struct Camera {
  std::array<double, 9> K{};  // row-major intrinsics
  std::array<double, 9> R{};  // row-major rotation, camera -> world
  std::array<double, 3> t{};  // camera center
  int width = 64;
  int height = 64;
  double t_near = 0.1;
  double t_far = 4.0;

  // K invertible, R orthonormal within 1e-6, 0 < t_near < t_far.
  void validate() const;
};

struct Ray {
  std::array<double, 3> origin{};
  std::array<double, 3> dir{};  // unit length
};

// Back-projects pixel coordinates (image frame, origin at the top-left,
// +x right, +y down) through K and rotates into world space.
Ray pixel_ray(const Camera& cam, double px, double py);

// Camera at `position` looking at `target`, focal length in pixels,
// principal point at the image center.
Camera make_lookat_camera(const std::array<double, 3>& position,
                          const std::array<double, 3>& target, double focal_px, int width,
                          int height, double t_near, double t_far);

// Position on the viewing sphere: azimuth measured from +z toward +x,
// elevation from the horizontal plane toward +y.
std::array<double, 3> orbit_position(double azimuth_deg, double elevation_deg, double radius);
double azimuth_deg_of(const std::array<double, 3>& position);
double elevation_deg_of(const std::array<double, 3>& position);

struct CameraSampleConfig {
  double radius_min = 1.8;
  double radius_max = 2.2;
  double focal_scale = 1.2;  // focal length in pixels = focal_scale * width
  int width = 64;
  int height = 64;
  double scene_extent = 1.75;  // near/far = radius -/+ this (near floored at 0.05)
};

// Random orbit view: azimuth uniform over the full circle, elevation uniform
// over the full [-90, 90] range, look-at the origin.
Camera sample_training_camera(Rng& rng, const CameraSampleConfig& cfg);

// n equally spaced azimuths at a fixed elevation, all looking at the origin,
// radius = midpoint of the configured range.
std::vector<Camera> turntable_cameras(int n, double elevation_deg,
                                      const CameraSampleConfig& cfg);

}  // namespace textmesh::render
