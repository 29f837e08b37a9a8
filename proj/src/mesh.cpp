#include "textmesh/mesh.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>

namespace textmesh::mesh {

static_assert(std::endian::native == std::endian::little,
              "binary mesh output assumes a little-endian host");

namespace {

std::array<double, 3> sub3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

std::array<double, 3> cross3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double norm3(const std::array<double, 3>& a) {
  return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
}

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace

std::array<double, 3> Bounds::extent() const {
  return {max[0] - min[0], max[1] - min[1], max[2] - min[2]};
}

std::array<double, 3> Bounds::center() const {
  return {0.5 * (min[0] + max[0]), 0.5 * (min[1] + max[1]), 0.5 * (min[2] + max[2])};
}

void Bounds::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(min[a]) || !std::isfinite(max[a])) {
      throw MeshError("bounds must be finite");
    }
    if (!(max[a] > min[a])) throw MeshError("bounds must have positive extent on every axis");
  }
}

std::array<double, 3> VoxelGrid::spacing() const {
  const auto e = bounds.extent();
  const double d = static_cast<double>(resolution - 1);
  return {e[0] / d, e[1] / d, e[2] / d};
}

std::array<double, 3> VoxelGrid::position(int i, int j, int k) const {
  const auto s = spacing();
  return {bounds.min[0] + i * s[0], bounds.min[1] + j * s[1], bounds.min[2] + k * s[2]};
}

void VoxelGrid::validate() const {
  bounds.validate();
  if (resolution < 2) throw MeshError("voxel grid needs at least 2 samples per axis");
  const std::size_t n = static_cast<std::size_t>(resolution);
  if (values.size() != n * n * n) throw MeshError("voxel grid value count does not match resolution");
  for (double v : values) {
    if (!std::isfinite(v)) throw MeshError("voxel grid contains a non-finite value");
  }
}

void TriangleMesh::validate() const {
  const int n = static_cast<int>(vertices.size());
  for (const auto& f : faces) {
    for (int idx : f) {
      if (idx < 0 || idx >= n) throw MeshError("face index out of range");
    }
  }
  if (!uvs.empty() && uvs.size() != vertices.size()) {
    throw MeshError("uv count must match vertex count");
  }
}

VoxelGrid sample_sdf_grid(const BatchSdf& sdf, int resolution, const Bounds& bounds) {
  bounds.validate();
  if (resolution < 8) throw MeshError("grid sampling requires resolution >= 8");
  VoxelGrid grid;
  grid.resolution = resolution;
  grid.bounds = bounds;
  const std::size_t n = static_cast<std::size_t>(resolution);
  grid.values.resize(n * n * n);

  const std::size_t slab = n * n;
  std::vector<double> xyz(3 * slab);
  for (int k = 0; k < resolution; ++k) {
    std::size_t p = 0;
    for (int j = 0; j < resolution; ++j) {
      for (int i = 0; i < resolution; ++i) {
        const auto pos = grid.position(i, j, k);
        xyz[3 * p + 0] = pos[0];
        xyz[3 * p + 1] = pos[1];
        xyz[3 * p + 2] = pos[2];
        ++p;
      }
    }
    sdf(xyz, slab, std::span<double>(grid.values.data() + k * slab, slab));
  }
  grid.validate();
  return grid;
}

VoxelGrid sample_sdf_grid(const field::Field& f, int resolution, const Bounds& bounds) {
  return sample_sdf_grid(
      [&f](std::span<const double> xyz, std::size_t n, std::span<double> out) {
        f.eval_sdf(xyz, n, out);
      },
      resolution, bounds);
}

double triangle_area(const std::array<double, 3>& a, const std::array<double, 3>& b,
                     const std::array<double, 3>& c) {
  return 0.5 * norm3(cross3(sub3(b, a), sub3(c, a)));
}

double surface_area(const TriangleMesh& m) {
  double area = 0.0;
  for (const auto& f : m.faces) {
    area += triangle_area(m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]);
  }
  return area;
}

TriangleMesh clean_mesh(TriangleMesh m, double min_area) {
  std::vector<std::array<int, 3>> kept;
  kept.reserve(m.faces.size());
  for (const auto& f : m.faces) {
    if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
    if (triangle_area(m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]) < min_area) continue;
    kept.push_back(f);
  }
  std::vector<int> remap(m.vertices.size(), -1);
  for (const auto& f : kept) {
    for (int idx : f) remap[idx] = 0;
  }
  int next = 0;
  for (std::size_t i = 0; i < remap.size(); ++i) {
    if (remap[i] == 0) remap[i] = next++;
  }
  TriangleMesh out;
  out.vertices.resize(next);
  if (m.has_uvs()) out.uvs.resize(next);
  for (std::size_t i = 0; i < remap.size(); ++i) {
    if (remap[i] >= 0) {
      out.vertices[remap[i]] = m.vertices[i];
      if (m.has_uvs()) out.uvs[remap[i]] = m.uvs[i];
    }
  }
  out.faces.reserve(kept.size());
  for (const auto& f : kept) {
    out.faces.push_back({remap[f[0]], remap[f[1]], remap[f[2]]});
  }
  return out;
}

TriangleMesh marching_cubes(const VoxelGrid& grid, double iso) {
  grid.validate();
  const int n = grid.resolution;
  const auto spacing = grid.spacing();

  TriangleMesh out;
  std::unordered_map<std::uint64_t, int> edge_vertex;

  auto lattice_key = [n](int i, int j, int k, int axis) {
    return (static_cast<std::uint64_t>((static_cast<std::size_t>(k) * n + j) * n + i)) * 3 +
           static_cast<std::uint64_t>(axis);
  };

  auto vertex_on_edge = [&](int i, int j, int k, int axis) {
    const std::uint64_t key = lattice_key(i, j, k, axis);
    if (auto it = edge_vertex.find(key); it != edge_vertex.end()) return it->second;
    int i2 = i, j2 = j, k2 = k;
    (axis == 0 ? i2 : axis == 1 ? j2 : k2) += 1;
    const double va = grid.value(i, j, k);
    const double vb = grid.value(i2, j2, k2);
    const double t = (iso - va) / (vb - va);
    auto pos = grid.position(i, j, k);
    pos[axis] += t * spacing[axis];
    const int id = static_cast<int>(out.vertices.size());
    out.vertices.push_back(pos);
    edge_vertex.emplace(key, id);
    return id;
  };

  std::array<double, 8> corner;
  for (int k = 0; k + 1 < n; ++k) {
    for (int j = 0; j + 1 < n; ++j) {
      for (int i = 0; i + 1 < n; ++i) {
        int config = 0;
        for (int c = 0; c < 8; ++c) {
          const auto off = mc_corner_offset(c);
          corner[c] = grid.value(i + off[0], j + off[1], k + off[2]);
          if (corner[c] < iso) config |= 1 << c;
        }
        const auto row = mc_triangle_row(config);
        if (row.empty()) continue;

        std::array<int, 3> ids{};
        for (std::size_t r = 0; r + 3 <= row.size(); r += 3) {
          for (int v = 0; v < 3; ++v) {
            const int edge = row[r + v];
            const auto [ca, cb] = mc_edge_corners(edge);
            const auto oa = mc_corner_offset(ca);
            const auto ob = mc_corner_offset(cb);
            int axis = 0;
            for (int a = 0; a < 3; ++a) {
              if (oa[a] != ob[a]) axis = a;
            }
            const int li = i + std::min(oa[0], ob[0]);
            const int lj = j + std::min(oa[1], ob[1]);
            const int lk = k + std::min(oa[2], ob[2]);
            ids[v] = vertex_on_edge(li, lj, lk, axis);
          }
          // The raw table winds triangles toward the below-iso side; flip so
          // normals point toward positive values.
          out.faces.push_back({ids[0], ids[2], ids[1]});
        }
      }
    }
  }
  return clean_mesh(std::move(out));
}

MeshTopology analyze_topology(const TriangleMesh& m) {
  m.validate();
  MeshTopology topo;
  topo.face_count = m.faces.size();

  struct EdgeUse {
    int forward = 0;   // traversed low -> high vertex index
    int backward = 0;  // traversed high -> low
  };
  std::unordered_map<std::uint64_t, EdgeUse> edges;
  edges.reserve(m.faces.size() * 3);
  std::vector<char> referenced(m.vertices.size(), 0);
  UnionFind uf(m.vertices.size());

  for (const auto& f : m.faces) {
    for (int v = 0; v < 3; ++v) {
      const int a = f[v];
      const int b = f[(v + 1) % 3];
      referenced[a] = 1;
      uf.unite(a, b);
      const std::uint64_t key =
          (static_cast<std::uint64_t>(std::min(a, b)) << 32) | static_cast<std::uint32_t>(std::max(a, b));
      auto& use = edges[key];
      (a < b ? use.forward : use.backward) += 1;
    }
  }

  topo.edge_count = edges.size();
  topo.watertight = !m.faces.empty();
  topo.consistent_orientation = true;
  for (const auto& [key, use] : edges) {
    (void)key;
    if (use.forward + use.backward != 2) topo.watertight = false;
    if (use.forward > 1 || use.backward > 1) topo.consistent_orientation = false;
  }

  std::unordered_map<std::size_t, int> roots;
  for (std::size_t v = 0; v < m.vertices.size(); ++v) {
    if (!referenced[v]) continue;
    ++topo.vertex_count;
    roots.emplace(uf.find(v), 1);
  }
  topo.component_count = static_cast<int>(roots.size());
  topo.euler_characteristic = static_cast<long long>(topo.vertex_count) -
                              static_cast<long long>(topo.edge_count) +
                              static_cast<long long>(topo.face_count);
  return topo;
}

TriangleMesh select_main_component(const TriangleMesh& m, const std::array<double, 3>& center) {
  m.validate();
  if (m.faces.empty()) return {};

  UnionFind uf(m.vertices.size());
  for (const auto& f : m.faces) {
    uf.unite(f[0], f[1]);
    uf.unite(f[1], f[2]);
  }

  struct Component {
    std::size_t tri_count = 0;
    std::array<double, 3> sum{0.0, 0.0, 0.0};
    std::size_t vert_count = 0;
  };
  std::unordered_map<std::size_t, Component> comps;
  for (const auto& f : m.faces) {
    comps[uf.find(f[0])].tri_count += 1;
  }
  std::vector<char> referenced(m.vertices.size(), 0);
  for (const auto& f : m.faces) {
    for (int idx : f) referenced[idx] = 1;
  }
  for (std::size_t v = 0; v < m.vertices.size(); ++v) {
    if (!referenced[v]) continue;
    auto& comp = comps[uf.find(v)];
    comp.vert_count += 1;
    for (int a = 0; a < 3; ++a) comp.sum[a] += m.vertices[v][a];
  }

  double best_score = -1.0;
  std::size_t best_root = 0;
  std::vector<std::size_t> roots;
  roots.reserve(comps.size());
  for (const auto& [root, comp] : comps) {
    (void)comp;
    roots.push_back(root);
  }
  std::sort(roots.begin(), roots.end());
  for (const std::size_t root : roots) {
    const auto& comp = comps[root];
    const std::array<double, 3> centroid = {comp.sum[0] / comp.vert_count,
                                            comp.sum[1] / comp.vert_count,
                                            comp.sum[2] / comp.vert_count};
    const double dist = norm3(sub3(centroid, center));
    const double score = static_cast<double>(comp.tri_count) / (1.0 + dist);
    if (score > best_score) {
      best_score = score;
      best_root = root;
    }
  }

  TriangleMesh kept = m;
  kept.faces.clear();
  for (const auto& f : m.faces) {
    if (uf.find(f[0]) == best_root) kept.faces.push_back(f);
  }
  return clean_mesh(std::move(kept));
}

namespace {

struct Chart {
  std::array<std::array<double, 2>, 3> local;  // unfolded corners, world units
  double width = 0.0;                          // bbox, world units
  double height = 0.0;
};

Chart unfold_triangle(const std::array<double, 3>& a, const std::array<double, 3>& b,
                      const std::array<double, 3>& c) {
  const double e01 = std::max(norm3(sub3(b, a)), 1e-12);
  const double e02 = norm3(sub3(c, a));
  const double e12 = norm3(sub3(c, b));
  const double x2 = (e01 * e01 + e02 * e02 - e12 * e12) / (2.0 * e01);
  const double y2 = std::max(std::sqrt(std::max(e02 * e02 - x2 * x2, 0.0)), 1e-12);
  Chart chart;
  const double xmin = std::min(0.0, x2);
  chart.local = {{{0.0 - xmin, 0.0}, {e01 - xmin, 0.0}, {x2 - xmin, y2}}};
  chart.width = std::max(e01, x2) - xmin;
  chart.height = y2;
  return chart;
}

struct Placement {
  int x = 0;
  int y = 0;
};

// Shelf-packs padded chart boxes into a square of side `resolution`.
// Returns placements (top-left of each padded box) or empty on overflow.
std::vector<Placement> shelf_pack(const std::vector<Chart>& charts, double scale, int gutter,
                                  int resolution, std::vector<std::array<int, 2>>* padded_out) {
  const std::size_t count = charts.size();
  std::vector<std::array<int, 2>> padded(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int w = static_cast<int>(std::ceil(charts[i].width * scale)) + 2 * gutter;
    const int h = static_cast<int>(std::ceil(charts[i].height * scale)) + 2 * gutter;
    padded[i] = {std::max(w, 2 * gutter + 1), std::max(h, 2 * gutter + 1)};
  }
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (padded[a][1] != padded[b][1]) return padded[a][1] > padded[b][1];
    if (padded[a][0] != padded[b][0]) return padded[a][0] > padded[b][0];
    return a < b;
  });

  std::vector<Placement> place(count);
  int x = 0, y = 0, shelf = 0;
  for (const std::size_t i : order) {
    const int w = padded[i][0];
    const int h = padded[i][1];
    if (w > resolution) return {};
    if (x + w > resolution) {
      y += shelf;
      x = 0;
      shelf = 0;
    }
    if (y + h > resolution) return {};
    place[i] = {x, y};
    x += w;
    shelf = std::max(shelf, h);
  }
  if (padded_out) *padded_out = std::move(padded);
  return place;
}

}  // namespace

AtlasResult generate_uv_atlas(const TriangleMesh& m, const AtlasOptions& options) {
  m.validate();
  if (m.faces.empty()) throw MeshError("cannot build a uv atlas for an empty mesh");
  if (options.gutter_texels < 1) throw MeshError("atlas gutter must be at least one texel");

  std::vector<Chart> charts;
  charts.reserve(m.faces.size());
  for (const auto& f : m.faces) {
    charts.push_back(unfold_triangle(m.vertices[f[0]], m.vertices[f[1]], m.vertices[f[2]]));
  }

  const int gutter = options.gutter_texels;
  double scale = 0.0;
  int resolution = 0;
  std::vector<Placement> placements;

  if (options.texels_per_unit > 0.0) {
    // Fixed chart scale; grow the atlas until everything fits.
    scale = options.texels_per_unit;
    double padded_area = 0.0;
    for (const auto& c : charts) {
      padded_area += (c.width * scale + 2 * gutter) * (c.height * scale + 2 * gutter);
    }
    resolution = std::max(16, static_cast<int>(std::ceil(std::sqrt(padded_area))));
    for (;;) {
      if (resolution > options.max_resolution) {
        throw MeshError("uv atlas overflow at resolution " +
                        std::to_string(options.max_resolution) +
                        "; lower texels_per_unit or raise max_resolution");
      }
      placements = shelf_pack(charts, scale, gutter, resolution, nullptr);
      if (!placements.empty()) break;
      resolution = std::min(options.max_resolution + 1,
                            std::max(resolution + 16, resolution + resolution / 4));
    }
  } else {
    // Fixed atlas size; find the largest chart scale that still packs.
    resolution = options.resolution;
    if (resolution < 16) throw MeshError("atlas resolution must be at least 16");
    if (shelf_pack(charts, 0.0, gutter, resolution, nullptr).empty()) {
      throw MeshError("too many charts for a " + std::to_string(resolution) +
                      " atlas; raise the resolution");
    }
    double lo = 0.0;
    double hi = 1.0;
    while (!shelf_pack(charts, hi, gutter, resolution, nullptr).empty() && hi < 1e9) hi *= 2.0;
    for (int it = 0; it < 48; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (!shelf_pack(charts, mid, gutter, resolution, nullptr).empty()) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    scale = lo;
    placements = shelf_pack(charts, scale, gutter, resolution, nullptr);
    if (placements.empty()) throw MeshError("uv atlas packing failed unexpectedly");
  }

  AtlasResult result;
  result.resolution = resolution;
  result.texels_per_unit = scale;
  auto& out = result.mesh;
  out.vertices.reserve(3 * m.faces.size());
  out.uvs.reserve(3 * m.faces.size());
  out.faces.reserve(m.faces.size());
  for (std::size_t fi = 0; fi < m.faces.size(); ++fi) {
    const auto& f = m.faces[fi];
    const auto& chart = charts[fi];
    const auto& at = placements[fi];
    const int base = static_cast<int>(out.vertices.size());
    for (int v = 0; v < 3; ++v) {
      out.vertices.push_back(m.vertices[f[v]]);
      const double u = (at.x + gutter + chart.local[v][0] * scale) / resolution;
      const double w = (at.y + gutter + chart.local[v][1] * scale) / resolution;
      out.uvs.push_back({u, w});
    }
    out.faces.push_back({base, base + 1, base + 2});
  }
  return result;
}

namespace {

void write_obj(const TriangleMesh& m, const std::filesystem::path& path, const Image* atlas) {
  std::ofstream out(path);
  if (!out) throw MeshError("cannot open " + path.string() + " for writing");
  out << std::setprecision(17);

  const std::filesystem::path stem = path.stem();
  if (atlas != nullptr) {
    out << "mtllib " << stem.string() << ".mtl\n";
  }
  for (const auto& v : m.vertices) {
    out << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << '\n';
  }
  for (const auto& uv : m.uvs) {
    out << "vt " << uv[0] << ' ' << uv[1] << '\n';
  }
  if (atlas != nullptr) {
    out << "usemtl material0\n";
  }
  for (const auto& f : m.faces) {
    if (m.has_uvs()) {
      out << "f " << f[0] + 1 << '/' << f[0] + 1 << ' ' << f[1] + 1 << '/' << f[1] + 1 << ' '
          << f[2] + 1 << '/' << f[2] + 1 << '\n';
    } else {
      out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
    }
  }
  if (!out) throw MeshError("failed writing " + path.string());
  out.close();

  if (atlas != nullptr) {
    const std::filesystem::path dir = path.parent_path();
    const std::filesystem::path mtl = dir / (stem.string() + ".mtl");
    const std::filesystem::path png = dir / (stem.string() + ".png");
    std::ofstream mtl_out(mtl);
    if (!mtl_out) throw MeshError("cannot open " + mtl.string() + " for writing");
    mtl_out << "newmtl material0\nKd 1 1 1\nmap_Kd " << stem.string() << ".png\n";
    if (!mtl_out) throw MeshError("failed writing " + mtl.string());
    write_png(png, *atlas);
  }
}

TriangleMesh read_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MeshError("cannot open " + path.string());

  std::vector<std::array<double, 3>> positions;
  std::vector<std::array<double, 2>> texcoords;
  struct Corner {
    int v = 0;
    int t = -1;
  };
  std::vector<std::array<Corner, 3>> faces;

  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      std::array<double, 3> p{};
      ls >> p[0] >> p[1] >> p[2];
      if (!ls) throw MeshError("malformed vertex line in " + path.string());
      positions.push_back(p);
    } else if (tag == "vt") {
      std::array<double, 2> t{};
      ls >> t[0] >> t[1];
      if (!ls) throw MeshError("malformed texcoord line in " + path.string());
      texcoords.push_back(t);
    } else if (tag == "f") {
      std::array<Corner, 3> corners;
      for (int c = 0; c < 3; ++c) {
        std::string entry;
        ls >> entry;
        if (entry.empty()) throw MeshError("face with fewer than 3 corners in " + path.string());
        const auto slash = entry.find('/');
        Corner corner;
        corner.v = std::stoi(entry.substr(0, slash));
        if (slash != std::string::npos) {
          const auto rest = entry.substr(slash + 1);
          const auto slash2 = rest.find('/');
          const std::string t = rest.substr(0, slash2);
          if (!t.empty()) corner.t = std::stoi(t);
        }
        if (corner.v < 1 || corner.t == 0) {
          throw MeshError("unsupported face index in " + path.string());
        }
        corners[c] = corner;
      }
      std::string extra;
      if (ls >> extra) throw MeshError("only triangle faces are supported in " + path.string());
      faces.push_back(corners);
    }
  }

  const bool textured = !texcoords.empty();
  TriangleMesh m;
  if (!textured) {
    m.vertices = positions;
    for (const auto& f : faces) {
      m.faces.push_back({f[0].v - 1, f[1].v - 1, f[2].v - 1});
    }
  } else {
    // Split per unique (position, texcoord) pair.
    std::unordered_map<std::uint64_t, int> remap;
    for (const auto& f : faces) {
      std::array<int, 3> idx{};
      for (int c = 0; c < 3; ++c) {
        if (f[c].t < 1) throw MeshError("textured mesh with untextured corner in " + path.string());
        const std::uint64_t key =
            (static_cast<std::uint64_t>(f[c].v) << 32) | static_cast<std::uint32_t>(f[c].t);
        auto it = remap.find(key);
        if (it == remap.end()) {
          it = remap.emplace(key, static_cast<int>(m.vertices.size())).first;
          m.vertices.push_back(positions.at(f[c].v - 1));
          m.uvs.push_back(texcoords.at(f[c].t - 1));
        }
        idx[c] = it->second;
      }
      m.faces.push_back(idx);
    }
  }
  m.validate();
  return m;
}

void write_ply(const TriangleMesh& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MeshError("cannot open " + path.string() + " for writing");

  out << "ply\nformat binary_little_endian 1.0\n";
  out << "element vertex " << m.vertices.size() << '\n';
  out << "property double x\nproperty double y\nproperty double z\n";
  if (m.has_uvs()) out << "property double u\nproperty double v\n";
  out << "element face " << m.faces.size() << '\n';
  out << "property list uchar int vertex_indices\nend_header\n";

  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    out.write(reinterpret_cast<const char*>(m.vertices[i].data()), 3 * sizeof(double));
    if (m.has_uvs()) {
      out.write(reinterpret_cast<const char*>(m.uvs[i].data()), 2 * sizeof(double));
    }
  }
  for (const auto& f : m.faces) {
    const unsigned char count = 3;
    std::array<std::int32_t, 3> idx = {f[0], f[1], f[2]};
    out.write(reinterpret_cast<const char*>(&count), 1);
    out.write(reinterpret_cast<const char*>(idx.data()), 3 * sizeof(std::int32_t));
  }
  if (!out) throw MeshError("failed writing " + path.string());
}

TriangleMesh read_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MeshError("cannot open " + path.string());

  std::string line;
  auto next_line = [&]() {
    if (!std::getline(in, line)) throw MeshError("truncated header in " + path.string());
    return line;
  };
  if (next_line() != "ply") throw MeshError(path.string() + " is not a ply file");
  if (next_line() != "format binary_little_endian 1.0") {
    throw MeshError("unsupported ply format in " + path.string());
  }

  std::size_t vertex_count = 0, face_count = 0;
  std::vector<std::string> vertex_props;
  std::string element;
  while (next_line() != "end_header") {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "comment") continue;
    if (tag == "element") {
      std::size_t count = 0;
      ls >> element >> count;
      if (element == "vertex") {
        vertex_count = count;
      } else if (element == "face") {
        face_count = count;
      } else {
        throw MeshError("unsupported ply element in " + path.string());
      }
    } else if (tag == "property") {
      if (element == "vertex") {
        std::string type, name;
        ls >> type >> name;
        if (type != "double") throw MeshError("unsupported vertex property type in " + path.string());
        vertex_props.push_back(name);
      } else if (element == "face") {
        std::string rest;
        std::getline(ls, rest);
        if (rest != " list uchar int vertex_indices") {
          throw MeshError("unsupported face property in " + path.string());
        }
      }
    } else {
      throw MeshError("unsupported ply header line in " + path.string());
    }
  }

  bool has_uv = false;
  if (vertex_props == std::vector<std::string>{"x", "y", "z"}) {
    has_uv = false;
  } else if (vertex_props == std::vector<std::string>{"x", "y", "z", "u", "v"}) {
    has_uv = true;
  } else {
    throw MeshError("unsupported vertex layout in " + path.string());
  }

  TriangleMesh m;
  m.vertices.resize(vertex_count);
  if (has_uv) m.uvs.resize(vertex_count);
  for (std::size_t i = 0; i < vertex_count; ++i) {
    in.read(reinterpret_cast<char*>(m.vertices[i].data()), 3 * sizeof(double));
    if (has_uv) in.read(reinterpret_cast<char*>(m.uvs[i].data()), 2 * sizeof(double));
  }
  m.faces.resize(face_count);
  for (std::size_t i = 0; i < face_count; ++i) {
    unsigned char count = 0;
    in.read(reinterpret_cast<char*>(&count), 1);
    if (count != 3) throw MeshError("non-triangle face in " + path.string());
    std::array<std::int32_t, 3> idx{};
    in.read(reinterpret_cast<char*>(idx.data()), 3 * sizeof(std::int32_t));
    m.faces[i] = {idx[0], idx[1], idx[2]};
  }
  if (!in) throw MeshError("truncated payload in " + path.string());
  m.validate();
  return m;
}

}  // namespace

void export_mesh(const TriangleMesh& m, const std::filesystem::path& path, MeshFormat format,
                 const Image* atlas) {
  m.validate();
  if (format == MeshFormat::obj) {
    write_obj(m, path, atlas);
  } else {
    write_ply(m, path);
  }
}

TriangleMesh import_mesh(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  if (ext == ".obj") return read_obj(path);
  if (ext == ".ply") return read_ply(path);
  // Sniff the magic for extensionless paths.
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MeshError("cannot open " + path.string());
  std::array<char, 3> magic{};
  in.read(magic.data(), 3);
  if (in && magic == std::array<char, 3>{'p', 'l', 'y'}) return read_ply(path);
  return read_obj(path);
}

}  // namespace textmesh::mesh
