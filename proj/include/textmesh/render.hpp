#pragma once

#include "textmesh/camera.hpp"
#include "textmesh/diffengine.hpp"
#include "textmesh/field.hpp"
#include "textmesh/image.hpp"
#include "textmesh/rng.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace textmesh::render {

// M sample depths in [t_near, t_far], ascending. Non-stratified: an
// inclusive uniform grid (M = 2 gives exactly the endpoints). Stratified:
// one uniform draw inside each of M equal bins.
std::vector<double> sample_depths(double t_near, double t_far, int m, bool stratified, Rng& rng);

struct CompositeResult {
  std::array<double, 3> rgb{};
  double acc = 0.0;
  double depth = 0.0;
};

// Volume compositing along one ray. The m-th weight uses the transmittance
// accumulated through and including the m-th interval:
//   delta_m = t_{m+1} - t_m (last: t_far - t_M)
//   T_m     = exp(-sum_{m'<=m} sigma_m' delta_m')
//   alpha_m = T_m (1 - exp(-sigma_m delta_m))
//   rgb     = sum alpha_m c_m + (1 - sum alpha_m) background
//   depth   = sum alpha_m t_m / max(acc, 1e-8)
// Negative densities are rejected.
CompositeResult composite(std::span<const double> colors, std::span<const double> sigmas,
                          std::span<const double> depths, double t_far,
                          const std::array<double, 3>& background);

struct RenderConfig {
  int samples_per_ray = 64;
  bool stratified = true;
  std::array<double, 3> background{0.5, 0.5, 0.5};
  std::size_t chunk_points = 4096;  // max field evaluations per batch
};

struct RenderedImage {
  Image rgb;    // H x W x 3 in [0,1]
  Image depth;  // H x W
  Image acc;    // H x W in [0,1]
};

// Forward volume rendering. Depth sampling derives an independent substream
// per ray from (seed, ray index), so results do not depend on chunking and
// a later gradient pass can replay identical depths.
RenderedImage render_image(const field::Field& f, const Camera& cam, const RenderConfig& cfg,
                           std::uint64_t seed);

// Gradient of sum(weights . rgb) with respect to the field parameters,
// replaying the same rays/depths as render_image for this seed. weights has
// 3*H*W entries (rgb interleaved, row-major). Chunks are reduced in a fixed
// order so the result is deterministic.
diff::GradResult render_weighted_grad(const field::Field& f, const Camera& cam,
                                      const RenderConfig& cfg, std::uint64_t seed,
                                      std::span<const double> weights);

}  // namespace textmesh::render
