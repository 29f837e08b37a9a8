#pragma once

#include "textmesh/camera.hpp"
#include "textmesh/error.hpp"
#include "textmesh/image.hpp"
#include "textmesh/mesh.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace textmesh::texrast {

class RasterError : public Error {
 public:
  using Error::Error;
};

// Optimizable texture. `texels` is an RGB raster; `valid` flags the texels
// reachable from some triangle's chart (empty means "not computed yet").
struct TextureAtlas {
  Image texels;
  std::vector<std::uint8_t> valid;

  int width() const { return texels.width; }
  int height() const { return texels.height; }

  // texels RGB with finite values; valid empty or one flag per texel.
  void validate() const;
};

TextureAtlas make_constant_atlas(int width, int height, const std::array<double, 3>& rgb);

// Per-pixel nearest-surface hit. `tri` is -1 where nothing is visible;
// barycentrics are perspective-correct (affine coordinates of the 3D hit
// point), non-negative and summing to 1 where covered. `depth` is eye-space
// z along the camera forward axis, +infinity where uncovered.
struct FragmentBuffer {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> tri;
  std::vector<std::array<double, 3>> bary;
  std::vector<double> depth;

  std::size_t covered_count() const;
  void validate() const;
};

// Z-buffered perspective rasterization at pixel centers. Deterministic: ties
// go to the lowest triangle index. Triangles with any vertex at or behind
// the camera plane are dropped whole (no near clipping); both windings are
// rasterized. The mesh must carry uv coordinates.
FragmentBuffer rasterize(const mesh::TriangleMesh& m, const render::Camera& camera);

// Bilinear sample footprint at (u, v). v runs bottom-up: v = 0 names the
// bottom texel row of the raster (which Image stores last). Out-of-range
// coordinates clamp to the border and set `clamped`. Indices are texel ids
// (row * width + column, top-left origin); weights are the bilinear
// coefficients and sum to 1. Border clamping can repeat an index.
struct BilinearFootprint {
  std::array<std::uint32_t, 4> index{};
  std::array<double, 4> weight{};
  bool clamped = false;
};

BilinearFootprint bilinear_footprint(double u, double v, int width, int height);

// uv coordinates of the center of texel (x, y) under the same convention.
std::array<double, 2> texel_center_uv(int x, int y, int width, int height);

struct ShadeStats {
  std::size_t clamped_uv_pixels = 0;
};

// Per covered pixel: interpolate the triangle's uvs with the fragment
// barycentrics and bilinear-sample the atlas; uncovered pixels take the
// background color. The result is linear in the atlas texels, and each pixel
// reads at most four texels. uvs outside [0,1]^2 are clamped and counted.
Image shade_textured(const FragmentBuffer& frags, const mesh::TriangleMesh& m,
                     const TextureAtlas& atlas,
                     const std::array<double, 3>& background = {0.5, 0.5, 0.5},
                     ShadeStats* stats = nullptr);

// Adjoint of shade_textured with respect to the atlas texels: accumulates
// d_image (laid out like the shaded image, height*width*3) into a
// height*width*3 texel gradient. Exactly zero outside sampled footprints.
// Geometry carries no gradient.
std::vector<double> shade_backward(const FragmentBuffer& frags, const mesh::TriangleMesh& m,
                                   int atlas_width, int atlas_height,
                                   std::span<const double> d_image);

// Single-channel eye-space depth image; uncovered pixels hold +infinity.
Image render_mesh_depth(const FragmentBuffer& frags);

// Texels within `dilation_texels` of some triangle's uv chart. Covers every
// texel a bilinear footprint can touch from inside a triangle (distance
// strictly below sqrt(2) texels), with slack for border rounding.
std::vector<std::uint8_t> chart_coverage_mask(const mesh::TriangleMesh& m, int width, int height,
                                              double dilation_texels = 1.5);

}  // namespace textmesh::texrast
