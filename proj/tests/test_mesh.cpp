#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "textmesh/field.hpp"
#include "textmesh/mesh.hpp"
#include "textmesh/rng.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace textmesh;
using namespace textmesh::mesh;

namespace {

BatchSdf analytic(double (*fn)(double, double, double)) {
  return [fn](std::span<const double> xyz, std::size_t n, std::span<double> out) {
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = fn(xyz[3 * i], xyz[3 * i + 1], xyz[3 * i + 2]);
    }
  };
}

double sphere_sdf(double x, double y, double z) {
  return std::sqrt(x * x + y * y + z * z) - 0.5;
}

double plane_sdf(double x, double, double) { return x - 0.0123; }

double torus_sdf(double x, double y, double z) {
  const double q0 = std::sqrt(x * x + z * z) - 0.55;
  return std::sqrt(q0 * q0 + y * y) - 0.22;
}

double norm(const std::array<double, 3>& v) {
  return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

std::array<double, 3> face_normal(const TriangleMesh& m, std::size_t f) {
  const auto& a = m.vertices[m.faces[f][0]];
  const auto& b = m.vertices[m.faces[f][1]];
  const auto& c = m.vertices[m.faces[f][2]];
  return {(b[1] - a[1]) * (c[2] - a[2]) - (b[2] - a[2]) * (c[1] - a[1]),
          (b[2] - a[2]) * (c[0] - a[0]) - (b[0] - a[0]) * (c[2] - a[2]),
          (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])};
}

std::array<double, 3> face_centroid(const TriangleMesh& m, std::size_t f) {
  const auto& a = m.vertices[m.faces[f][0]];
  const auto& b = m.vertices[m.faces[f][1]];
  const auto& c = m.vertices[m.faces[f][2]];
  return {(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0, (a[2] + b[2] + c[2]) / 3.0};
}

// One cell over [0,1]^3 whose corner values realize the given configuration.
VoxelGrid single_cell_grid(int config) {
  VoxelGrid grid;
  grid.resolution = 2;
  grid.bounds = Bounds{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}};
  grid.values.assign(8, 1.0);
  for (int c = 0; c < 8; ++c) {
    const auto off = mc_corner_offset(c);
    const bool inside = (config >> c) & 1;
    grid.values[grid.index(off[0], off[1], off[2])] = inside ? -1.0 : 1.0;
  }
  return grid;
}

// Gradient of the trilinear interpolant of the cell corner values.
std::array<double, 3> trilinear_gradient(const VoxelGrid& grid, const std::array<double, 3>& p) {
  std::array<double, 3> g{0.0, 0.0, 0.0};
  for (int c = 0; c < 8; ++c) {
    const auto off = mc_corner_offset(c);
    const double v = grid.value(off[0], off[1], off[2]);
    const double wx = off[0] ? p[0] : 1.0 - p[0];
    const double wy = off[1] ? p[1] : 1.0 - p[1];
    const double wz = off[2] ? p[2] : 1.0 - p[2];
    g[0] += v * (off[0] ? 1.0 : -1.0) * wy * wz;
    g[1] += v * (off[1] ? 1.0 : -1.0) * wx * wz;
    g[2] += v * (off[2] ? 1.0 : -1.0) * wx * wy;
  }
  return g;
}

bool on_common_boundary_plane(const std::array<double, 3>& p, const std::array<double, 3>& q,
                                  const Bounds& bounds) {
  for (int axis = 0; axis < 3; ++axis) {
    for (const double val : {bounds.min[axis], bounds.max[axis]}) {
      if (std::abs(p[axis] - val) < 1e-9 && std::abs(q[axis] - val) < 1e-9) return true;
    }
  }
  return false;
}

}  // namespace

TEST_CASE("case table: every row uses exactly the cut edges of its configuration") {
  for (int config = 0; config < 256; ++config) {
    CAPTURE(config);
    const auto row = mc_triangle_row(config);
    REQUIRE(row.size() % 3 == 0);
    std::uint16_t used = 0;
    for (const std::int8_t e : row) {
      REQUIRE(e >= 0);
      REQUIRE(e < 12);
      used |= static_cast<std::uint16_t>(1u << e);
    }
    CHECK(used == mc_cut_edges(config));
  }
}

TEST_CASE("case table: each cell patch is manifold with boundary on the cell faces") {
  for (int config = 0; config < 256; ++config) {
    CAPTURE(config);
    const VoxelGrid grid = single_cell_grid(config);
    const TriangleMesh patch = marching_cubes(grid);

    // Welding collapses each cut edge to one vertex.
    const int cut_count = std::popcount(mc_cut_edges(config));
    CHECK(static_cast<int>(patch.vertices.size()) == cut_count);

    std::map<std::pair<int, int>, int> directed;
    for (const auto& f : patch.faces) {
      for (int v = 0; v < 3; ++v) {
        directed[{f[v], f[(v + 1) % 3]}] += 1;
      }
    }
    for (const auto& [edge, count] : directed) {
      CAPTURE(edge.first);
      CAPTURE(edge.second);
      CHECK(count == 1);  // consistent orientation inside one cell
      const int reverse = directed.count({edge.second, edge.first})
                              ? directed.at({edge.second, edge.first})
                              : 0;
      const int total = count + reverse;
      CHECK(total <= 2);
      if (total == 1) {
        // Boundary chords of the patch must lie on the cube surface.
        CHECK(on_common_boundary_plane(patch.vertices[edge.first],
                                          patch.vertices[edge.second], grid.bounds));
      }
    }
  }
}

TEST_CASE("case table: triangle normals follow the interpolated field gradient") {
  for (int config = 0; config < 256; ++config) {
    CAPTURE(config);
    const VoxelGrid grid = single_cell_grid(config);
    const TriangleMesh patch = marching_cubes(grid);
    for (std::size_t f = 0; f < patch.faces.size(); ++f) {
      const auto n = face_normal(patch, f);
      const auto g = trilinear_gradient(grid, face_centroid(patch, f));
      const double dot = n[0] * g[0] + n[1] * g[1] + n[2] * g[2];
      CAPTURE(f);
      CHECK(dot > 0.0);
    }
  }
}

TEST_CASE("case table: random sign grids produce crack-free interiors") {
  const int n = 6;
  Bounds bounds{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}};
  for (int seed = 0; seed < 300; ++seed) {
    CAPTURE(seed);
    Rng rng(9000 + seed);
    VoxelGrid grid;
    grid.resolution = n;
    grid.bounds = bounds;
    grid.values.resize(static_cast<std::size_t>(n) * n * n);
    for (auto& v : grid.values) v = rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0;

    const TriangleMesh m = marching_cubes(grid);
    std::map<std::pair<int, int>, int> directed;
    for (const auto& f : m.faces) {
      for (int v = 0; v < 3; ++v) {
        directed[{f[v], f[(v + 1) % 3]}] += 1;
      }
    }
    for (const auto& [edge, count] : directed) {
      CHECK(count == 1);
      if (on_common_boundary_plane(m.vertices[edge.first], m.vertices[edge.second], bounds)) {
        continue;
      }
      CAPTURE(edge.first);
      CAPTURE(edge.second);
      const bool matched = directed.count({edge.second, edge.first}) > 0;
      CHECK(matched);
    }
  }
}

TEST_CASE("marching cubes: linear field reproduces the plane exactly") {
  const VoxelGrid grid = sample_sdf_grid(analytic(plane_sdf), 16, Bounds{});
  const TriangleMesh m = marching_cubes(grid);
  REQUIRE(!m.empty());
  for (const auto& v : m.vertices) {
    CHECK(std::abs(v[0] - 0.0123) <= 1e-9);
    CHECK(std::abs(v[1]) <= 1.0 + 1e-12);
    CHECK(std::abs(v[2]) <= 1.0 + 1e-12);
  }
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    CHECK(face_normal(m, f)[0] > 0.0);  // normals toward positive values
  }
  const MeshTopology topo = analyze_topology(m);
  CHECK(topo.consistent_orientation);
  CHECK_FALSE(topo.watertight);  // open at the volume boundary
}

TEST_CASE("marching cubes: sphere is accurate, watertight, and outward-oriented") {
  const int n = 64;
  const VoxelGrid grid = sample_sdf_grid(analytic(sphere_sdf), n, Bounds{});
  const TriangleMesh m = marching_cubes(grid);
  REQUIRE(!m.empty());

  const double voxel_edge = 2.0 / (n - 1);
  double worst = 0.0;
  for (const auto& v : m.vertices) {
    worst = std::max(worst, std::abs(norm(v) - 0.5));
  }
  INFO("worst radial error in voxel edges: " << worst / voxel_edge);
  CHECK(worst < 1.5 * voxel_edge);

  const MeshTopology topo = analyze_topology(m);
  CHECK(topo.watertight);
  CHECK(topo.consistent_orientation);
  CHECK(topo.euler_characteristic == 2);
  CHECK(topo.component_count == 1);

  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    const auto nrm = face_normal(m, f);
    const auto c = face_centroid(m, f);
    CHECK(nrm[0] * c[0] + nrm[1] * c[1] + nrm[2] * c[2] > 0.0);
  }

  CHECK(surface_area(m) == doctest::Approx(4.0 * std::acos(-1.0) * 0.25).epsilon(0.05));

  // Determinism and clean welding.
  const TriangleMesh again = marching_cubes(grid);
  CHECK(again.vertices == m.vertices);
  CHECK(again.faces == m.faces);
  std::set<std::array<double, 3>> unique(m.vertices.begin(), m.vertices.end());
  CHECK(unique.size() == m.vertices.size());
}

TEST_CASE("marching cubes: torus topology") {
  const VoxelGrid grid = sample_sdf_grid(analytic(torus_sdf), 48, Bounds{});
  const TriangleMesh m = marching_cubes(grid);
  const MeshTopology topo = analyze_topology(m);
  CHECK(topo.watertight);
  CHECK(topo.consistent_orientation);
  CHECK(topo.euler_characteristic == 0);
  CHECK(topo.component_count == 1);
}

TEST_CASE("marching cubes: sign-free grids give empty meshes") {
  VoxelGrid grid;
  grid.resolution = 8;
  grid.values.assign(512, 1.0);
  CHECK(marching_cubes(grid).empty());
  grid.values.assign(512, -1.0);
  CHECK(marching_cubes(grid).empty());
}

TEST_CASE("grid sampling: values are the function at lattice positions") {
  const VoxelGrid grid = sample_sdf_grid(analytic(sphere_sdf), 8, Bounds{});
  for (int k = 0; k < 8; ++k) {
    for (int j = 0; j < 8; ++j) {
      for (int i = 0; i < 8; ++i) {
        const auto p = grid.position(i, j, k);
        CHECK(grid.value(i, j, k) == sphere_sdf(p[0], p[1], p[2]));
      }
    }
  }
  CHECK_THROWS_AS((void)sample_sdf_grid(analytic(sphere_sdf), 7, Bounds{}), MeshError);
}

TEST_CASE("grid sampling: refinements agree at shared lattice points") {
  const VoxelGrid coarse = sample_sdf_grid(analytic(torus_sdf), 8, Bounds{});

  // Doubling the cell count keeps every coarse point on the fine lattice.
  const VoxelGrid fine = sample_sdf_grid(analytic(torus_sdf), 15, Bounds{});
  for (int k = 0; k < 8; ++k) {
    for (int j = 0; j < 8; ++j) {
      for (int i = 0; i < 8; ++i) {
        CHECK(coarse.value(i, j, k) == fine.value(2 * i, 2 * j, 2 * k));
      }
    }
  }

  // Resolutions 8 and 16 share only the box corners.
  const VoxelGrid sixteen = sample_sdf_grid(analytic(torus_sdf), 16, Bounds{});
  for (int k = 0; k < 8; k += 7) {
    for (int j = 0; j < 8; j += 7) {
      for (int i = 0; i < 8; i += 7) {
        CHECK(coarse.value(i, j, k) == sixteen.value(i ? 15 : 0, j ? 15 : 0, k ? 15 : 0));
      }
    }
  }
}

TEST_CASE("grid sampling: sphere-trained field changes sign only near the shell") {
  field::FieldConfig cfg;
  cfg.num_frequencies = 6;
  cfg.hidden_width = 64;
  cfg.hidden_layers = 3;
  cfg.color_hidden_width = 16;
  field::Field f(cfg, 2024);
  Rng rng(2024);
  (void)f.init_sphere(0.5, 8000, rng);

  const int n = 16;
  const VoxelGrid grid = sample_sdf_grid(f, n, Bounds{});
  int sign_changes = 0;
  auto check_pair = [&](int i0, int j0, int k0, int i1, int j1, int k1) {
    const double a = grid.value(i0, j0, k0);
    const double b = grid.value(i1, j1, k1);
    if ((a < 0.0) == (b < 0.0)) return;
    ++sign_changes;
    const auto pa = grid.position(i0, j0, k0);
    const auto pb = grid.position(i1, j1, k1);
    CHECK(std::abs(sphere_sdf(pa[0], pa[1], pa[2])) < 0.15);
    CHECK(std::abs(sphere_sdf(pb[0], pb[1], pb[2])) < 0.15);
  };
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        if (i + 1 < n) check_pair(i, j, k, i + 1, j, k);
        if (j + 1 < n) check_pair(i, j, k, i, j + 1, k);
        if (k + 1 < n) check_pair(i, j, k, i, j, k + 1);
      }
    }
  }
  CHECK(sign_changes > 0);
}

TEST_CASE("component selection") {
  SUBCASE("single component is unchanged") {
    const VoxelGrid grid = sample_sdf_grid(analytic(sphere_sdf), 32, Bounds{});
    const TriangleMesh m = marching_cubes(grid);
    const TriangleMesh kept = select_main_component(m, {0.0, 0.0, 0.0});
    CHECK(kept.faces.size() == m.faces.size());
    CHECK(kept.vertices.size() == m.vertices.size());
  }
  SUBCASE("floater is removed") {
    const auto two_bodies = [](double x, double y, double z) {
      const double main_body = sphere_sdf(x, y, z);
      const double dx = x - 0.75, dy = y - 0.75, dz = z - 0.75;
      const double floater = std::sqrt(dx * dx + dy * dy + dz * dz) - 0.12;
      return std::min(main_body, floater);
    };
    const VoxelGrid grid = sample_sdf_grid(analytic(two_bodies), 48, Bounds{});
    const TriangleMesh m = marching_cubes(grid);
    CHECK(analyze_topology(m).component_count == 2);
    const TriangleMesh kept = select_main_component(m, {0.0, 0.0, 0.0});
    const MeshTopology topo = analyze_topology(kept);
    CHECK(topo.component_count == 1);
    CHECK(topo.face_count < m.faces.size());
    for (const auto& v : kept.vertices) {
      CHECK(std::abs(norm(v) - 0.5) < 0.1);
    }
  }
  SUBCASE("equal components: the central one wins") {
    const auto twins = [](double x, double y, double z) {
      const double a = std::sqrt(x * x + y * y + z * z) - 0.15;
      const double dx = x - 0.7;
      const double b = std::sqrt(dx * dx + y * y + z * z) - 0.15;
      return std::min(a, b);
    };
    const VoxelGrid grid = sample_sdf_grid(analytic(twins), 64, Bounds{});
    const TriangleMesh m = marching_cubes(grid);
    const TriangleMesh kept = select_main_component(m, {0.0, 0.0, 0.0});
    for (const auto& v : kept.vertices) {
      CHECK(norm(v) < 0.3);  // the component around the origin
    }
  }
  SUBCASE("empty mesh stays empty") {
    CHECK(select_main_component(TriangleMesh{}, {0.0, 0.0, 0.0}).empty());
  }
}

TEST_CASE("topology analysis on handmade meshes") {
  TriangleMesh single;
  single.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  single.faces = {{0, 1, 2}};
  MeshTopology topo = analyze_topology(single);
  CHECK_FALSE(topo.watertight);
  CHECK(topo.consistent_orientation);
  CHECK(topo.component_count == 1);
  CHECK(topo.euler_characteristic == 1);

  TriangleMesh pair = single;
  pair.vertices.push_back({1, 1, 0});
  pair.faces.push_back({1, 3, 2});  // shares edge 1-2, opposite traversal
  topo = analyze_topology(pair);
  CHECK(topo.consistent_orientation);

  pair.faces[1] = {1, 2, 3};  // same traversal direction as face 0
  topo = analyze_topology(pair);
  CHECK_FALSE(topo.consistent_orientation);
}

TEST_CASE("uv atlas: single triangle chart") {
  TriangleMesh m;
  m.vertices = {{0, 0, 0}, {0.3, 0, 0}, {0, 0.4, 0}};
  m.faces = {{0, 1, 2}};
  AtlasOptions options;
  options.texels_per_unit = 64.0;
  const AtlasResult atlas = generate_uv_atlas(m, options);
  CHECK(atlas.resolution >= 16);
  REQUIRE(atlas.mesh.uvs.size() == 3);
  for (const auto& uv : atlas.mesh.uvs) {
    CHECK(uv[0] >= 0.0);
    CHECK(uv[0] <= 1.0);
    CHECK(uv[1] >= 0.0);
    CHECK(uv[1] <= 1.0);
  }
  const auto& uv = atlas.mesh.uvs;
  const double area = 0.5 * std::abs((uv[1][0] - uv[0][0]) * (uv[2][1] - uv[0][1]) -
                                     (uv[2][0] - uv[0][0]) * (uv[1][1] - uv[0][1]));
  CHECK(area > 0.0);
}

TEST_CASE("uv atlas: sphere charts pack disjointly and isometrically") {
  const VoxelGrid grid = sample_sdf_grid(analytic(sphere_sdf), 24, Bounds{});
  const TriangleMesh m = marching_cubes(grid);
  const AtlasResult atlas = generate_uv_atlas(m);  // fit mode, 512 default
  CHECK(atlas.resolution == 512);
  CHECK(atlas.texels_per_unit > 0.0);
  REQUIRE(atlas.mesh.vertices.size() == 3 * m.faces.size());
  REQUIRE(atlas.mesh.uvs.size() == atlas.mesh.vertices.size());

  // Geometry is preserved under vertex splitting.
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    for (int v = 0; v < 3; ++v) {
      CHECK(atlas.mesh.vertices[3 * f + v] == m.vertices[m.faces[f][v]]);
    }
  }

  // Charts stay inside the atlas.
  for (const auto& uv : atlas.mesh.uvs) {
    CHECK(uv[0] >= 0.0);
    CHECK(uv[0] <= 1.0);
    CHECK(uv[1] >= 0.0);
    CHECK(uv[1] <= 1.0);
  }

  // Pairwise-disjoint chart boxes with at least a two-texel gutter.
  struct Box {
    double x0, y0, x1, y1;
  };
  std::vector<Box> boxes;
  const double res = atlas.resolution;
  for (std::size_t f = 0; f < atlas.mesh.faces.size(); ++f) {
    Box b{1e30, 1e30, -1e30, -1e30};
    for (int v = 0; v < 3; ++v) {
      const auto& uv = atlas.mesh.uvs[3 * f + v];
      b.x0 = std::min(b.x0, uv[0] * res);
      b.y0 = std::min(b.y0, uv[1] * res);
      b.x1 = std::max(b.x1, uv[0] * res);
      b.y1 = std::max(b.y1, uv[1] * res);
    }
    boxes.push_back(b);
  }
  int violations = 0;
  for (std::size_t a = 0; a < boxes.size(); ++a) {
    for (std::size_t b = a + 1; b < boxes.size(); ++b) {
      const bool apart_x = boxes[a].x1 + 2.0 <= boxes[b].x0 || boxes[b].x1 + 2.0 <= boxes[a].x0;
      const bool apart_y = boxes[a].y1 + 2.0 <= boxes[b].y0 || boxes[b].y1 + 2.0 <= boxes[a].y0;
      if (!apart_x && !apart_y) ++violations;
    }
  }
  CHECK(violations == 0);

  // Isometric unfolding: texel area over surface area is constant.
  std::vector<double> ratios;
  for (std::size_t f = 0; f < atlas.mesh.faces.size(); ++f) {
    const auto& u0 = atlas.mesh.uvs[3 * f + 0];
    const auto& u1 = atlas.mesh.uvs[3 * f + 1];
    const auto& u2 = atlas.mesh.uvs[3 * f + 2];
    const double uv_area = 0.5 * std::abs((u1[0] - u0[0]) * (u2[1] - u0[1]) -
                                          (u2[0] - u0[0]) * (u1[1] - u0[1]));
    const double world =
        triangle_area(m.vertices[m.faces[f][0]], m.vertices[m.faces[f][1]], m.vertices[m.faces[f][2]]);
    const double scale = atlas.texels_per_unit / res;
    ratios.push_back(uv_area / (world * scale * scale));
  }
  std::vector<double> sorted = ratios;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[sorted.size() / 2];
  CHECK(median == doctest::Approx(1.0).epsilon(1e-6));
  for (const double r : ratios) {
    CHECK(r <= 2.0 * median);
    CHECK(r >= 0.5 * median);
  }
}

TEST_CASE("uv atlas: fixed scale overflows loudly") {
  const VoxelGrid grid = sample_sdf_grid(analytic(sphere_sdf), 24, Bounds{});
  const TriangleMesh m = marching_cubes(grid);
  AtlasOptions options;
  options.texels_per_unit = 1e5;
  options.max_resolution = 256;
  CHECK_THROWS_AS((void)generate_uv_atlas(m, options), MeshError);
  CHECK_THROWS_AS((void)generate_uv_atlas(TriangleMesh{}, AtlasOptions{}), MeshError);
}

namespace {

TriangleMesh unit_cube_mesh() {
  TriangleMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
  m.faces = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
             {1, 2, 6}, {1, 6, 5}, {2, 3, 7}, {2, 7, 6}, {3, 0, 4}, {3, 4, 7}};
  return m;
}

}  // namespace

TEST_CASE("export: obj round-trip") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "textmesh_cube.obj";
  const TriangleMesh cube = unit_cube_mesh();
  export_mesh(cube, path, MeshFormat::obj);

  // 1-based indexing on disk.
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text.find("f 1 3 2") != std::string::npos);
  CHECK(text.find("f 0") == std::string::npos);

  const TriangleMesh back = import_mesh(path);
  REQUIRE(back.vertices.size() == 8);
  REQUIRE(back.faces.size() == 12);
  CHECK(back.vertices == cube.vertices);
  CHECK(back.faces == cube.faces);
  CHECK_FALSE(back.has_uvs());
  std::remove(path.string().c_str());
}

TEST_CASE("export: textured obj writes material and texture files") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path();
  const fs::path path = dir / "textmesh_tex.obj";

  const VoxelGrid grid = sample_sdf_grid(analytic(sphere_sdf), 12, Bounds{});
  const AtlasResult atlas = generate_uv_atlas(marching_cubes(grid));
  Image tex(64, 64, 3, 0.5);
  export_mesh(atlas.mesh, path, MeshFormat::obj, &tex);

  CHECK(fs::exists(dir / "textmesh_tex.mtl"));
  CHECK(fs::exists(dir / "textmesh_tex.png"));
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text.find("mtllib textmesh_tex.mtl") != std::string::npos);
  CHECK(text.find("usemtl material0") != std::string::npos);

  const TriangleMesh back = import_mesh(path);
  CHECK(back.faces.size() == atlas.mesh.faces.size());
  REQUIRE(back.has_uvs());
  CHECK(back.vertices == atlas.mesh.vertices);
  CHECK(back.uvs == atlas.mesh.uvs);

  std::remove(path.string().c_str());
  std::remove((dir / "textmesh_tex.mtl").string().c_str());
  std::remove((dir / "textmesh_tex.png").string().c_str());
}

TEST_CASE("export: ply round-trips bitwise") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "textmesh_sphere.ply";

  const VoxelGrid grid = sample_sdf_grid(analytic(sphere_sdf), 20, Bounds{});
  const AtlasResult atlas = generate_uv_atlas(marching_cubes(grid));
  export_mesh(atlas.mesh, path, MeshFormat::ply);
  const TriangleMesh back = import_mesh(path);
  CHECK(back.vertices == atlas.mesh.vertices);
  CHECK(back.faces == atlas.mesh.faces);
  CHECK(back.uvs == atlas.mesh.uvs);

  // Plain (uv-free) meshes round-trip as well.
  const TriangleMesh cube = unit_cube_mesh();
  export_mesh(cube, path, MeshFormat::ply);
  const TriangleMesh cube_back = import_mesh(path);
  CHECK(cube_back.vertices == cube.vertices);
  CHECK(cube_back.faces == cube.faces);
  CHECK_FALSE(cube_back.has_uvs());
  std::remove(path.string().c_str());
}

TEST_CASE("export: missing files fail loudly") {
  CHECK_THROWS_AS((void)import_mesh("/nonexistent/nowhere.obj"), MeshError);
}
