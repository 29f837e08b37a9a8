#pragma once

#include "textmesh/camera.hpp"
#include "textmesh/error.hpp"
#include "textmesh/field.hpp"
#include "textmesh/guidance.hpp"
#include "textmesh/image.hpp"
#include "textmesh/mesh.hpp"
#include "textmesh/rng.hpp"
#include "textmesh/texrast.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace textmesh::retexture {

class RetextureError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Canonical views and the 2x2 tiling
// ---------------------------------------------------------------------------

// View order used everywhere in this module.
enum ViewIndex : int { kFront = 0, kBack = 1, kLeft = 2, kRight = 3 };

// Azimuth (degrees) of each view: front looks from +z, right from +x.
inline constexpr std::array<double, 4> kViewAzimuthDeg = {0.0, 180.0, 270.0, 90.0};

// Quadrant layout of the tiled image, row-major over 2x2 quadrants:
// top-left front, top-right right, bottom-left back, bottom-right left.
inline constexpr std::array<int, 4> kQuadrantViews = {kFront, kRight, kBack, kLeft};

struct ViewSetConfig {
  double radius = 2.0;
  int resolution = 256;
  double focal_scale = 1.2;    // focal length in pixels = focal_scale * width
  double scene_extent = 1.75;  // near/far = radius -/+ this (near floored at 0.05)
};

// Exactly four cameras at azimuths {0, 180, 270, 90} (front, back, left,
// right), zero elevation, equal radius, all looking at the origin.
struct ViewSet {
  std::array<render::Camera, 4> cameras;

  void validate() const;
};

ViewSet make_canonical_views(const ViewSetConfig& cfg = {});

// 2H x 2W packing of four equally shaped views under kQuadrantViews.
struct TiledImage {
  Image image;
  int view_width = 0;
  int view_height = 0;

  void validate() const;
};

// Lossless quadrant packing; exact inverse pair. Throws on shape mismatch.
TiledImage tile_views(const std::array<Image, 4>& views);
std::array<Image, 4> untile(const TiledImage& tiled);

// ---------------------------------------------------------------------------
// Joint multi-view sampling
// ---------------------------------------------------------------------------

struct SamplerSettings {
  double strength = 0.5;  // initial noise level t0, in (0, 1]
  int steps = 20;
  double guidance_weight = 7.5;
  guidance::NoiseSchedule schedule{};
};

// Depth-conditioned img2img over the tiled image: noise the input to
// t0 = clamp(strength), then walk `steps` equally spaced t values down to
// t_min with deterministic denoising updates (classifier-free guidance,
// conditional prediction first). One trajectory serves all four quadrants.
// The final clean estimate is clamped to [0, 1]. The model must accept
// depth; `tiled_depth` is a single-channel raster in [0, 1] of the same
// extent as the color image.
TiledImage joint_sample(const TiledImage& tiled_rgb, const TiledImage& tiled_depth,
                        guidance::ScoreModel& model, const guidance::Conditioning& cond,
                        const SamplerSettings& settings, Rng& rng);

// ---------------------------------------------------------------------------
// Pseudo ground truth
// ---------------------------------------------------------------------------

struct PseudoGtSet {
  std::array<Image, 4> views;  // 8-bit quantized at creation
  std::string provenance;      // sampler settings, seed, guidance weight

  void validate() const;
};

// Renders color and depth from the four canonical views, tiles both (depth
// is min-max normalized once over the tiled map, so quadrants share one
// scale), runs joint_sample, and unpacks the result. Outputs are 8-bit
// quantized so persisted and in-memory sets match exactly.
PseudoGtSet build_pseudo_gt(const mesh::TriangleMesh& m, const texrast::TextureAtlas& atlas,
                            const ViewSet& views, guidance::ScoreModel& model,
                            const guidance::Conditioning& cond, const SamplerSettings& settings,
                            std::uint64_t seed);

// Numbered rasters (view_0.png .. view_3.png) plus provenance.txt.
void save_pseudo_gt(const PseudoGtSet& set, const std::filesystem::path& dir);
PseudoGtSet load_pseudo_gt(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Atlas initialization and fill
// ---------------------------------------------------------------------------

// Bakes the field's color into a fresh atlas: each texel whose center lies
// inside a uv chart maps to a surface point; the color field is queried at
// that point looking along the negated interpolated vertex normal. Baked
// texels set the valid mask; everything else starts mid-gray and should be
// filled with dilate_atlas before sampling.
texrast::TextureAtlas bake_initial_atlas(const mesh::TriangleMesh& m, const field::Field& f,
                                         int resolution);

// Fills invalid texels by breadth-first propagation from the nearest valid
// texel (8-neighborhood, deterministic tie-break). The valid mask itself is
// left unchanged. Requires a non-empty mask.
texrast::TextureAtlas dilate_atlas(texrast::TextureAtlas atlas);

// Accumulated bilinear footprint weight per texel over every covered pixel
// of the given cameras; a texel is marked when its total reaches
// `min_weight` (0 marks any touched texel).
std::vector<std::uint8_t> view_coverage_mask(const mesh::TriangleMesh& m,
                                             const std::vector<render::Camera>& cameras,
                                             int atlas_width, int atlas_height,
                                             double min_weight = 0.0);

// Peak signal-to-noise ratio over the texels selected by `mask` (all three
// channels, peak 1.0). Identical selections return +infinity.
double atlas_psnr(const texrast::TextureAtlas& a, const texrast::TextureAtlas& b,
                  const std::vector<std::uint8_t>& mask);

// ---------------------------------------------------------------------------
// Stage A: texture fit to pseudo ground truth
// ---------------------------------------------------------------------------

struct StageAResult {
  texrast::TextureAtlas atlas;
  std::vector<double> losses;  // one entry per step, evaluated before update
};

// Plain gradient descent on the texels minimizing the mean over the four
// views of the squared L2 image distance. Texels outside every sampled
// footprint receive exactly zero gradient and stay untouched.
StageAResult stage_a_fit(const mesh::TriangleMesh& m, const PseudoGtSet& pseudo,
                         const ViewSet& views, const texrast::TextureAtlas& init, int steps,
                         double learning_rate);

// ---------------------------------------------------------------------------
// Stage B: anchored refinement
// ---------------------------------------------------------------------------

struct RefinePoseConfig {
  int azimuth_count = 8;
  std::vector<double> elevations_deg = {-20.0, 20.0};
  double radius = 2.0;
  int resolution = 256;
  double focal_scale = 1.2;
  double scene_extent = 1.75;
};

// Camera ring for refinement; at least four cameras, all looking at the
// origin. Ordered azimuth-major, elevations inner.
struct RefinePoseSet {
  std::vector<render::Camera> cameras;

  void validate() const;
};

RefinePoseSet make_refine_poses(const RefinePoseConfig& cfg = {});

struct StageBConfig {
  double lambda_sds = 1e-4;
  double guidance_weight = 7.5;
  int steps = 32;
  double learning_rate = 0.05;
  guidance::NoiseSchedule schedule{};
  // Forward the rendered depth to depth-capable models during the SDS draw;
  // plain image scoring by default.
  bool use_depth_conditioning = false;
};

struct StageBResult {
  texrast::TextureAtlas atlas;
  std::vector<double> mse_losses;  // squared L2 against the anchor, per step
};

// Snapshots renders of the incoming atlas at every pose once, then per step
// visits poses round-robin: the image gradient is the MSE pull toward the
// snapshot plus lambda_sds times the SDS pixel factor (guidance weight
// settings.guidance_weight, prompt augmented per view), chained to texels
// through the bilinear footprints. Plain gradient descent on the texels.
StageBResult stage_b_refine(const mesh::TriangleMesh& m, const texrast::TextureAtlas& atlas,
                            const RefinePoseSet& poses, guidance::ScoreModel& model,
                            const std::string& prompt, const StageBConfig& cfg, Rng& rng);

}  // namespace textmesh::retexture
