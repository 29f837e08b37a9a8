#include "textmesh/texrast.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <thread>
#include <utility>
#include <vector>

namespace textmesh::texrast {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMinCameraZ = 1e-9;

// Fixed band decomposition keeps results bitwise independent of the thread
// count: each row belongs to exactly one band, bands are processed by at most
// one thread each, and cross-band reductions always run in band order.
constexpr int kBands = 16;

struct BandRange {
  int begin = 0;
  int end = 0;
};

int band_count(int height) { return std::clamp(height, 1, kBands); }

BandRange band_rows(int band, int bands, int height) {
  const int lo = static_cast<int>(static_cast<long long>(band) * height / bands);
  const int hi = static_cast<int>(static_cast<long long>(band + 1) * height / bands);
  return {lo, hi};
}

template <typename Fn>
void for_each_band(int height, Fn&& fn) {
  const int bands = band_count(height);
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  const int nthreads = std::min<int>(bands, static_cast<int>(hw));
  if (nthreads <= 1) {
    for (int b = 0; b < bands; ++b) {
      const BandRange r = band_rows(b, bands, height);
      fn(b, r.begin, r.end);
    }
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nthreads));
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(nthreads));
  for (int tid = 0; tid < nthreads; ++tid) {
    workers.emplace_back([&, tid]() {
      try {
        for (int b = tid; b < bands; b += nthreads) {
          const BandRange r = band_rows(b, bands, height);
          fn(b, r.begin, r.end);
        }
      } catch (...) {
        errors[static_cast<std::size_t>(tid)] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double edge_fn(double ax, double ay, double bx, double by, double qx, double qy) {
  return (bx - ax) * (qy - ay) - (by - ay) * (qx - ax);
}

Eigen::Matrix3d as_matrix(const std::array<double, 9>& m) {
  Eigen::Matrix3d out;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out(r, c) = m[static_cast<std::size_t>(3 * r + c)];
  }
  return out;
}

// Continuous texel-space position of (u, v): the center of texel (x, y)
// sits at exactly (x, y). v points up, rows are stored top-down.
struct TexelPoint {
  double x = 0.0;
  double y = 0.0;
  bool clamped = false;
};

TexelPoint uv_to_texel_space(double u, double v, int width, int height) {
  TexelPoint p;
  p.clamped = u < 0.0 || u > 1.0 || v < 0.0 || v > 1.0;
  const double cu = std::clamp(u, 0.0, 1.0);
  const double cv = std::clamp(v, 0.0, 1.0);
  p.x = cu * width - 0.5;
  p.y = (1.0 - cv) * height - 0.5;
  return p;
}

struct BilinearCell {
  int x0 = 0;
  int x1 = 0;
  int y0 = 0;
  int y1 = 0;
  double fx = 0.0;
  double fy = 0.0;
  bool clamped = false;
};

BilinearCell bilinear_cell(double u, double v, int width, int height) {
  const TexelPoint p = uv_to_texel_space(u, v, width, height);
  BilinearCell c;
  c.clamped = p.clamped;
  const double xf = std::floor(p.x);
  const double yf = std::floor(p.y);
  c.fx = p.x - xf;
  c.fy = p.y - yf;
  const int xi = static_cast<int>(xf);
  const int yi = static_cast<int>(yf);
  c.x0 = std::clamp(xi, 0, width - 1);
  c.x1 = std::clamp(xi + 1, 0, width - 1);
  c.y0 = std::clamp(yi, 0, height - 1);
  c.y1 = std::clamp(yi + 1, 0, height - 1);
  return c;
}

double point_segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0);
  const double cx = ax + t * dx - px;
  const double cy = ay + t * dy - py;
  return std::sqrt(cx * cx + cy * cy);
}

double point_triangle_distance(double px, double py, const std::array<double, 2>& a,
                               const std::array<double, 2>& b, const std::array<double, 2>& c) {
  const double area2 = edge_fn(a[0], a[1], b[0], b[1], c[0], c[1]);
  if (area2 != 0.0) {
    const double s = area2 > 0.0 ? 1.0 : -1.0;
    const double w0 = s * edge_fn(b[0], b[1], c[0], c[1], px, py);
    const double w1 = s * edge_fn(c[0], c[1], a[0], a[1], px, py);
    const double w2 = s * edge_fn(a[0], a[1], b[0], b[1], px, py);
    if (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) return 0.0;
  }
  double d = point_segment_distance(px, py, a[0], a[1], b[0], b[1]);
  d = std::min(d, point_segment_distance(px, py, b[0], b[1], c[0], c[1]));
  d = std::min(d, point_segment_distance(px, py, c[0], c[1], a[0], a[1]));
  return d;
}

void check_fragment_mesh(const FragmentBuffer& frags, const mesh::TriangleMesh& m) {
  for (const std::int32_t t : frags.tri) {
    if (t >= 0 && static_cast<std::size_t>(t) >= m.faces.size()) {
      throw RasterError("fragment buffer references a triangle outside the mesh");
    }
  }
}

}  // namespace

void TextureAtlas::validate() const {
  if (texels.width < 1 || texels.height < 1) throw RasterError("texture atlas must not be empty");
  if (texels.channels != 3) throw RasterError("texture atlas must have 3 channels");
  if (texels.data.size() !=
      static_cast<std::size_t>(texels.width) * texels.height * texels.channels) {
    throw RasterError("texture atlas buffer size does not match its shape");
  }
  for (const double v : texels.data) {
    if (!std::isfinite(v)) throw RasterError("texture atlas contains non-finite texels");
  }
  if (!valid.empty() &&
      valid.size() != static_cast<std::size_t>(texels.width) * texels.height) {
    throw RasterError("texture atlas valid-mask size does not match its shape");
  }
}

TextureAtlas make_constant_atlas(int width, int height, const std::array<double, 3>& rgb) {
  TextureAtlas atlas;
  atlas.texels = Image(width, height, 3);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) atlas.texels.at(x, y, c) = rgb[static_cast<std::size_t>(c)];
    }
  }
  atlas.validate();
  return atlas;
}

std::size_t FragmentBuffer::covered_count() const {
  std::size_t n = 0;
  for (const std::int32_t t : tri) {
    if (t >= 0) ++n;
  }
  return n;
}

void FragmentBuffer::validate() const {
  if (width < 1 || height < 1) throw RasterError("fragment buffer must not be empty");
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (tri.size() != n || bary.size() != n || depth.size() != n) {
    throw RasterError("fragment buffer arrays do not match its shape");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (tri[i] < 0) {
      if (depth[i] != kInf) throw RasterError("uncovered fragment must hold infinite depth");
      continue;
    }
    if (!(std::isfinite(depth[i]) && depth[i] > 0.0)) {
      throw RasterError("covered fragment must hold positive finite depth");
    }
    double sum = 0.0;
    for (const double b : bary[i]) {
      if (!(b >= 0.0)) throw RasterError("fragment barycentrics must be non-negative");
      sum += b;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw RasterError("fragment barycentrics must sum to one");
    }
  }
}

FragmentBuffer rasterize(const mesh::TriangleMesh& m, const render::Camera& camera) {
  m.validate();
  camera.validate();
  if (!m.has_uvs()) throw RasterError("rasterization requires uv coordinates on the mesh");

  FragmentBuffer fb;
  fb.width = camera.width;
  fb.height = camera.height;
  const std::size_t n = static_cast<std::size_t>(fb.width) * fb.height;
  fb.tri.assign(n, -1);
  fb.bary.assign(n, {0.0, 0.0, 0.0});
  fb.depth.assign(n, kInf);
  if (m.faces.empty()) return fb;

  const Eigen::Matrix3d k = as_matrix(camera.K);
  const Eigen::Matrix3d r_t = as_matrix(camera.R).transpose();
  const Eigen::Vector3d center(camera.t[0], camera.t[1], camera.t[2]);

  struct ProjectedVertex {
    double px = 0.0;
    double py = 0.0;
    double z = 0.0;
    bool ok = false;
  };
  std::vector<ProjectedVertex> proj(m.vertices.size());
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    const Eigen::Vector3d p(m.vertices[i][0], m.vertices[i][1], m.vertices[i][2]);
    const Eigen::Vector3d pc = r_t * (p - center);
    const Eigen::Vector3d h = k * pc;
    ProjectedVertex& v = proj[i];
    v.z = pc.z();
    v.ok = pc.z() > kMinCameraZ && h.z() > kMinCameraZ;
    if (v.ok) {
      v.px = h.x() / h.z();
      v.py = h.y() / h.z();
    }
  }

  struct ProjectedTriangle {
    double ax, ay, bx, by, cx, cy;
    double za, zb, zc;
    double orient;
    double inv_abs_area;
    int x0, x1, y0, y1;
    bool live;
  };
  std::vector<ProjectedTriangle> tris(m.faces.size());
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    ProjectedTriangle& t = tris[f];
    t.live = false;
    const auto& face = m.faces[f];
    const ProjectedVertex& a = proj[static_cast<std::size_t>(face[0])];
    const ProjectedVertex& b = proj[static_cast<std::size_t>(face[1])];
    const ProjectedVertex& c = proj[static_cast<std::size_t>(face[2])];
    if (!(a.ok && b.ok && c.ok)) continue;
    const double area2 = edge_fn(a.px, a.py, b.px, b.py, c.px, c.py);
    if (area2 == 0.0 || !std::isfinite(area2)) continue;
    t.ax = a.px;
    t.ay = a.py;
    t.bx = b.px;
    t.by = b.py;
    t.cx = c.px;
    t.cy = c.py;
    t.za = a.z;
    t.zb = b.z;
    t.zc = c.z;
    t.orient = area2 > 0.0 ? 1.0 : -1.0;
    t.inv_abs_area = 1.0 / std::abs(area2);
    const double min_x = std::min({a.px, b.px, c.px});
    const double max_x = std::max({a.px, b.px, c.px});
    const double min_y = std::min({a.py, b.py, c.py});
    const double max_y = std::max({a.py, b.py, c.py});
    t.x0 = std::max(0, static_cast<int>(std::floor(min_x - 0.5)));
    t.x1 = std::min(fb.width - 1, static_cast<int>(std::ceil(max_x - 0.5)));
    t.y0 = std::max(0, static_cast<int>(std::floor(min_y - 0.5)));
    t.y1 = std::min(fb.height - 1, static_cast<int>(std::ceil(max_y - 0.5)));
    t.live = t.x0 <= t.x1 && t.y0 <= t.y1;
  }

  for_each_band(fb.height, [&](int /*band*/, int row_begin, int row_end) {
    for (std::size_t f = 0; f < tris.size(); ++f) {
      const ProjectedTriangle& t = tris[f];
      if (!t.live) continue;
      const int y_lo = std::max(t.y0, row_begin);
      const int y_hi = std::min(t.y1, row_end - 1);
      for (int y = y_lo; y <= y_hi; ++y) {
        const double qy = y + 0.5;
        for (int x = t.x0; x <= t.x1; ++x) {
          const double qx = x + 0.5;
          const double w0 = t.orient * edge_fn(t.bx, t.by, t.cx, t.cy, qx, qy);
          if (w0 < 0.0) continue;
          const double w1 = t.orient * edge_fn(t.cx, t.cy, t.ax, t.ay, qx, qy);
          if (w1 < 0.0) continue;
          const double w2 = t.orient * edge_fn(t.ax, t.ay, t.bx, t.by, qx, qy);
          if (w2 < 0.0) continue;
          const double l0 = w0 * t.inv_abs_area;
          const double l1 = w1 * t.inv_abs_area;
          const double l2 = w2 * t.inv_abs_area;
          const double inv_z = l0 / t.za + l1 / t.zb + l2 / t.zc;
          if (!(inv_z > 0.0)) continue;
          const double depth = 1.0 / inv_z;
          const std::size_t idx = static_cast<std::size_t>(y) * fb.width + x;
          if (depth < fb.depth[idx]) {
            fb.depth[idx] = depth;
            fb.tri[idx] = static_cast<std::int32_t>(f);
            fb.bary[idx] = {l0 / t.za * depth, l1 / t.zb * depth, l2 / t.zc * depth};
          }
        }
      }
    }
  });
  return fb;
}

BilinearFootprint bilinear_footprint(double u, double v, int width, int height) {
  if (width < 1 || height < 1) throw RasterError("bilinear footprint needs a non-empty raster");
  const BilinearCell c = bilinear_cell(u, v, width, height);
  BilinearFootprint fp;
  fp.clamped = c.clamped;
  const auto idx = [&](int x, int y) {
    return static_cast<std::uint32_t>(y) * static_cast<std::uint32_t>(width) +
           static_cast<std::uint32_t>(x);
  };
  fp.index = {idx(c.x0, c.y0), idx(c.x1, c.y0), idx(c.x0, c.y1), idx(c.x1, c.y1)};
  fp.weight = {(1.0 - c.fx) * (1.0 - c.fy), c.fx * (1.0 - c.fy), (1.0 - c.fx) * c.fy,
               c.fx * c.fy};
  return fp;
}

std::array<double, 2> texel_center_uv(int x, int y, int width, int height) {
  if (width < 1 || height < 1 || x < 0 || y < 0 || x >= width || y >= height) {
    throw RasterError("texel coordinates outside the raster");
  }
  return {(x + 0.5) / width, (height - (y + 0.5)) / height};
}

Image shade_textured(const FragmentBuffer& frags, const mesh::TriangleMesh& m,
                     const TextureAtlas& atlas, const std::array<double, 3>& background,
                     ShadeStats* stats) {
  frags.validate();
  m.validate();
  if (!m.has_uvs()) throw RasterError("shading requires uv coordinates on the mesh");
  atlas.validate();
  check_fragment_mesh(frags, m);

  Image out(frags.width, frags.height, 3);
  const int aw = atlas.width();
  const int ah = atlas.height();
  const Image& tex = atlas.texels;
  const int bands = band_count(frags.height);
  std::vector<std::size_t> clamped(static_cast<std::size_t>(bands), 0);

  for_each_band(frags.height, [&](int band, int row_begin, int row_end) {
    std::size_t band_clamped = 0;
    for (int y = row_begin; y < row_end; ++y) {
      for (int x = 0; x < frags.width; ++x) {
        const std::size_t idx = static_cast<std::size_t>(y) * frags.width + x;
        if (frags.tri[idx] < 0) {
          for (int c = 0; c < 3; ++c) out.at(x, y, c) = background[static_cast<std::size_t>(c)];
          continue;
        }
        const auto& face = m.faces[static_cast<std::size_t>(frags.tri[idx])];
        const auto& w = frags.bary[idx];
        double u = 0.0;
        double v = 0.0;
        for (int k = 0; k < 3; ++k) {
          const auto& uv = m.uvs[static_cast<std::size_t>(face[static_cast<std::size_t>(k)])];
          u += w[static_cast<std::size_t>(k)] * uv[0];
          v += w[static_cast<std::size_t>(k)] * uv[1];
        }
        const BilinearCell cell = bilinear_cell(u, v, aw, ah);
        if (cell.clamped) ++band_clamped;
        for (int c = 0; c < 3; ++c) {
          const double c00 = tex.at(cell.x0, cell.y0, c);
          const double c10 = tex.at(cell.x1, cell.y0, c);
          const double c01 = tex.at(cell.x0, cell.y1, c);
          const double c11 = tex.at(cell.x1, cell.y1, c);
          const double top = c00 + cell.fx * (c10 - c00);
          const double bottom = c01 + cell.fx * (c11 - c01);
          out.at(x, y, c) = top + cell.fy * (bottom - top);
        }
      }
    }
    clamped[static_cast<std::size_t>(band)] = band_clamped;
  });

  if (stats != nullptr) {
    stats->clamped_uv_pixels = 0;
    for (const std::size_t c : clamped) stats->clamped_uv_pixels += c;
  }
  return out;
}

std::vector<double> shade_backward(const FragmentBuffer& frags, const mesh::TriangleMesh& m,
                                   int atlas_width, int atlas_height,
                                   std::span<const double> d_image) {
  frags.validate();
  m.validate();
  if (!m.has_uvs()) throw RasterError("shading requires uv coordinates on the mesh");
  if (atlas_width < 1 || atlas_height < 1) {
    throw RasterError("texture atlas must not be empty");
  }
  check_fragment_mesh(frags, m);
  const std::size_t pixels = static_cast<std::size_t>(frags.width) * frags.height;
  if (d_image.size() != pixels * 3) {
    throw RasterError("image adjoint size does not match the fragment buffer");
  }

  struct Entry {
    std::uint32_t texel;
    std::array<double, 3> g;
  };
  const int bands = band_count(frags.height);
  std::vector<std::vector<Entry>> partials(static_cast<std::size_t>(bands));

  for_each_band(frags.height, [&](int band, int row_begin, int row_end) {
    std::vector<Entry>& entries = partials[static_cast<std::size_t>(band)];
    for (int y = row_begin; y < row_end; ++y) {
      for (int x = 0; x < frags.width; ++x) {
        const std::size_t idx = static_cast<std::size_t>(y) * frags.width + x;
        if (frags.tri[idx] < 0) continue;
        const auto& face = m.faces[static_cast<std::size_t>(frags.tri[idx])];
        const auto& w = frags.bary[idx];
        double u = 0.0;
        double v = 0.0;
        for (int k = 0; k < 3; ++k) {
          const auto& uv = m.uvs[static_cast<std::size_t>(face[static_cast<std::size_t>(k)])];
          u += w[static_cast<std::size_t>(k)] * uv[0];
          v += w[static_cast<std::size_t>(k)] * uv[1];
        }
        const BilinearFootprint fp = bilinear_footprint(u, v, atlas_width, atlas_height);
        const double* d = d_image.data() + idx * 3;
        for (int k = 0; k < 4; ++k) {
          const double weight = fp.weight[static_cast<std::size_t>(k)];
          entries.push_back({fp.index[static_cast<std::size_t>(k)],
                             {weight * d[0], weight * d[1], weight * d[2]}});
        }
      }
    }
  });

  std::vector<double> grad(static_cast<std::size_t>(atlas_width) * atlas_height * 3, 0.0);
  for (const auto& entries : partials) {
    for (const Entry& e : entries) {
      double* g = grad.data() + static_cast<std::size_t>(e.texel) * 3;
      g[0] += e.g[0];
      g[1] += e.g[1];
      g[2] += e.g[2];
    }
  }
  return grad;
}

Image render_mesh_depth(const FragmentBuffer& frags) {
  frags.validate();
  Image out(frags.width, frags.height, 1);
  out.data = frags.depth;
  return out;
}

std::vector<std::uint8_t> chart_coverage_mask(const mesh::TriangleMesh& m, int width, int height,
                                              double dilation_texels) {
  m.validate();
  if (!m.has_uvs()) throw RasterError("chart coverage requires uv coordinates on the mesh");
  if (width < 1 || height < 1) throw RasterError("chart coverage needs a non-empty raster");
  if (!(dilation_texels >= 0.0)) throw RasterError("chart dilation must be non-negative");

  std::vector<std::uint8_t> mask(static_cast<std::size_t>(width) * height, 0);
  for (const auto& face : m.faces) {
    std::array<std::array<double, 2>, 3> p;
    for (int k = 0; k < 3; ++k) {
      const auto& uv = m.uvs[static_cast<std::size_t>(face[static_cast<std::size_t>(k)])];
      const TexelPoint tp = uv_to_texel_space(uv[0], uv[1], width, height);
      p[static_cast<std::size_t>(k)] = {tp.x, tp.y};
    }
    const double pad = dilation_texels + 1.0;
    const int x0 = std::max(
        0, static_cast<int>(std::floor(std::min({p[0][0], p[1][0], p[2][0]}) - pad)));
    const int x1 = std::min(
        width - 1, static_cast<int>(std::ceil(std::max({p[0][0], p[1][0], p[2][0]}) + pad)));
    const int y0 = std::max(
        0, static_cast<int>(std::floor(std::min({p[0][1], p[1][1], p[2][1]}) - pad)));
    const int y1 = std::min(
        height - 1, static_cast<int>(std::ceil(std::max({p[0][1], p[1][1], p[2][1]}) + pad)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (point_triangle_distance(x, y, p[0], p[1], p[2]) <= dilation_texels) {
          mask[static_cast<std::size_t>(y) * width + x] = 1;
        }
      }
    }
  }
  return mask;
}

}  // namespace textmesh::texrast
