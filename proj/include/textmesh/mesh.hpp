#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "textmesh/error.hpp"
#include "textmesh/field.hpp"
#include "textmesh/image.hpp"

namespace textmesh::mesh {

class MeshError : public Error {
 public:
  using Error::Error;
};

struct Bounds {
  std::array<double, 3> min{-1.0, -1.0, -1.0};
  std::array<double, 3> max{1.0, 1.0, 1.0};

  std::array<double, 3> extent() const;
  std::array<double, 3> center() const;
  void validate() const;
};

// N lattice samples per axis spanning the bounds inclusively: sample (i,j,k)
// sits at min + (i,j,k) * spacing with spacing = extent / (N - 1). Each
// sample is the center of a voxel of edge `spacing` in the dual grid; the
// cells used for surface extraction span adjacent samples.
struct VoxelGrid {
  int resolution = 0;
  Bounds bounds;
  std::vector<double> values;  // x-fastest: index = i + N*(j + N*k)

  std::size_t index(int i, int j, int k) const {
    const std::size_t n = static_cast<std::size_t>(resolution);
    return (static_cast<std::size_t>(k) * n + static_cast<std::size_t>(j)) * n +
           static_cast<std::size_t>(i);
  }
  double value(int i, int j, int k) const { return values[index(i, j, k)]; }
  std::array<double, 3> spacing() const;
  std::array<double, 3> position(int i, int j, int k) const;
  void validate() const;
};

struct TriangleMesh {
  std::vector<std::array<double, 3>> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<std::array<double, 2>> uvs;  // empty, or exactly one per vertex

  bool empty() const { return faces.empty(); }
  bool has_uvs() const { return !uvs.empty(); }
  void validate() const;
};

// Batched signed-distance evaluator: fills out[0..n) for packed xyz triples.
using BatchSdf =
    std::function<void(std::span<const double> xyz, std::size_t n, std::span<double> out)>;

VoxelGrid sample_sdf_grid(const BatchSdf& sdf, int resolution, const Bounds& bounds);
VoxelGrid sample_sdf_grid(const field::Field& f, int resolution, const Bounds& bounds);

// Classic 256-case surface extraction with linear interpolation along cell
// edges. Shared edge vertices are welded, triangle normals point toward
// positive values, and degenerate (near zero area) triangles are dropped.
TriangleMesh marching_cubes(const VoxelGrid& grid, double iso = 0.0);

double triangle_area(const std::array<double, 3>& a, const std::array<double, 3>& b,
                     const std::array<double, 3>& c);
double surface_area(const TriangleMesh& m);

// Removes near-zero-area faces and unreferenced vertices, reindexing faces.
TriangleMesh clean_mesh(TriangleMesh m, double min_area = 1e-12);

struct MeshTopology {
  std::size_t vertex_count = 0;
  std::size_t edge_count = 0;
  std::size_t face_count = 0;
  bool watertight = false;              // every edge bounds exactly two faces
  bool consistent_orientation = false;  // shared edges traversed in opposite directions
  long long euler_characteristic = 0;   // V - E + F
  int component_count = 0;
};
MeshTopology analyze_topology(const TriangleMesh& m);

// Keeps the component maximizing triangle_count / (1 + |centroid - center|).
TriangleMesh select_main_component(const TriangleMesh& m, const std::array<double, 3>& center);

struct AtlasOptions {
  // Fixed chart scale in texels per world unit. When > 0 the atlas is grown
  // (up to max_resolution) until everything packs; when 0 the charts are
  // instead scaled to fill a square atlas of exactly `resolution`.
  double texels_per_unit = 0.0;
  int resolution = 512;
  int gutter_texels = 2;
  int max_resolution = 4096;
};

struct AtlasResult {
  TriangleMesh mesh;  // vertices split per triangle; one uv per vertex
  int resolution = 0;
  double texels_per_unit = 0.0;  // realized chart scale
};

// Per-triangle charting: each triangle is unfolded isometrically and packed
// as an isolated chart with gutters on every side.
AtlasResult generate_uv_atlas(const TriangleMesh& m, const AtlasOptions& options = {});

enum class MeshFormat { obj, ply };

// OBJ is text (with .mtl + PNG alongside when an atlas image is given); PLY
// is binary little-endian and round-trips coordinates bit-exactly.
void export_mesh(const TriangleMesh& m, const std::filesystem::path& path, MeshFormat format,
                 const Image* atlas = nullptr);
TriangleMesh import_mesh(const std::filesystem::path& path);

// Case-table access for structural verification.
std::span<const std::int8_t> mc_triangle_row(int config);  // -1 terminated
std::uint16_t mc_cut_edges(int config);                    // bit e set when edge e is cut
std::array<int, 2> mc_edge_corners(int edge);
std::array<int, 3> mc_corner_offset(int corner);

}  // namespace textmesh::mesh
