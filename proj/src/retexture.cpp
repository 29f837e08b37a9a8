#include "textmesh/retexture.hpp"

#include "textmesh/sds.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <utility>

namespace textmesh::retexture {

namespace {

using Vec3 = std::array<double, 3>;

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double norm(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

double circular_diff_deg(double a, double b) { return std::remainder(a - b, 360.0); }

struct PosKey {
  std::array<std::uint64_t, 3> bits;
  bool operator==(const PosKey&) const = default;
};

struct PosKeyHash {
  std::size_t operator()(const PosKey& k) const {
    std::uint64_t h = 0x9E3779B97F4A7C15ULL;
    for (const std::uint64_t b : k.bits) {
      h ^= b + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

PosKey position_key(const Vec3& p) {
  return {{std::bit_cast<std::uint64_t>(p[0]), std::bit_cast<std::uint64_t>(p[1]),
           std::bit_cast<std::uint64_t>(p[2])}};
}

// Same continuous texel-space mapping the rasterizer samples with: the
// center of texel (x, y) sits at (x, y), v running bottom-up.
std::array<double, 2> uv_to_texel_space(double u, double v, int width, int height) {
  return {u * width - 0.5, (1.0 - v) * height - 0.5};
}

double edge_fn(const std::array<double, 2>& a, const std::array<double, 2>& b, double qx,
               double qy) {
  return (b[0] - a[0]) * (qy - a[1]) - (b[1] - a[1]) * (qx - a[0]);
}

void check_view_shapes(const std::array<Image, 4>& views) {
  for (const Image& v : views) {
    if (v.width < 1 || v.height < 1 || v.channels < 1) {
      throw RetextureError("tiling requires non-empty views");
    }
    if (!v.same_shape(views[0])) throw RetextureError("tiling requires equally shaped views");
    if (v.data.size() != static_cast<std::size_t>(v.width) * v.height * v.channels) {
      throw RetextureError("view buffer size does not match its shape");
    }
  }
}

void copy_quadrant(Image& dst, const Image& src, int dst_x0, int dst_y0) {
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      for (int c = 0; c < src.channels; ++c) {
        dst.at(dst_x0 + x, dst_y0 + y, c) = src.at(x, y, c);
      }
    }
  }
}

Image extract_quadrant(const Image& src, int x0, int y0, int w, int h) {
  Image out(w, h, src.channels);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < src.channels; ++c) out.at(x, y, c) = src.at(x0 + x, y0 + y, c);
    }
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Canonical views and tiling
// ---------------------------------------------------------------------------

void ViewSet::validate() const {
  const double r0 = norm({cameras[0].t[0], cameras[0].t[1], cameras[0].t[2]});
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    const render::Camera& cam = cameras[i];
    cam.validate();
    const Vec3 pos = {cam.t[0], cam.t[1], cam.t[2]};
    const double r = norm(pos);
    if (!(r > 1e-9)) throw RetextureError("canonical view camera sits at the origin");
    if (std::abs(r - r0) > 1e-6 * std::max(1.0, r0)) {
      throw RetextureError("canonical views must share one radius");
    }
    if (std::abs(pos[1]) > 1e-6 * r) {
      throw RetextureError("canonical views must sit at zero elevation");
    }
    const double az = render::azimuth_deg_of(pos);
    if (std::abs(circular_diff_deg(az, kViewAzimuthDeg[i])) > 1e-6) {
      throw RetextureError("canonical view azimuths must be front/back/left/right");
    }
    const Vec3 forward = {cam.R[2], cam.R[5], cam.R[8]};
    for (int a = 0; a < 3; ++a) {
      if (std::abs(forward[static_cast<std::size_t>(a)] + pos[static_cast<std::size_t>(a)] / r) >
          1e-6) {
        throw RetextureError("canonical views must look at the origin");
      }
    }
    if (cam.width != cameras[0].width || cam.height != cameras[0].height) {
      throw RetextureError("canonical views must share one resolution");
    }
  }
}

ViewSet make_canonical_views(const ViewSetConfig& cfg) {
  if (cfg.resolution < 1) throw RetextureError("view resolution must be positive");
  if (!(cfg.radius > 0.0)) throw RetextureError("view radius must be positive");
  const double t_near = std::max(0.05, cfg.radius - cfg.scene_extent);
  const double t_far = cfg.radius + cfg.scene_extent;
  ViewSet set;
  for (std::size_t i = 0; i < set.cameras.size(); ++i) {
    set.cameras[i] = render::make_lookat_camera(
        render::orbit_position(kViewAzimuthDeg[i], 0.0, cfg.radius), {0.0, 0.0, 0.0},
        cfg.focal_scale * cfg.resolution, cfg.resolution, cfg.resolution, t_near, t_far);
  }
  set.validate();
  return set;
}

void TiledImage::validate() const {
  if (view_width < 1 || view_height < 1) throw RetextureError("tiled image views must not be empty");
  if (image.width != 2 * view_width || image.height != 2 * view_height) {
    throw RetextureError("tiled image extent must be twice the view extent");
  }
  if (image.channels < 1 ||
      image.data.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw RetextureError("tiled image buffer size does not match its shape");
  }
}

TiledImage tile_views(const std::array<Image, 4>& views) {
  check_view_shapes(views);
  const int w = views[0].width;
  const int h = views[0].height;
  TiledImage tiled;
  tiled.view_width = w;
  tiled.view_height = h;
  tiled.image = Image(2 * w, 2 * h, views[0].channels);
  for (int q = 0; q < 4; ++q) {
    const Image& view = views[static_cast<std::size_t>(kQuadrantViews[static_cast<std::size_t>(q)])];
    copy_quadrant(tiled.image, view, (q % 2) * w, (q / 2) * h);
  }
  return tiled;
}

std::array<Image, 4> untile(const TiledImage& tiled) {
  tiled.validate();
  const int w = tiled.view_width;
  const int h = tiled.view_height;
  std::array<Image, 4> views;
  for (int q = 0; q < 4; ++q) {
    views[static_cast<std::size_t>(kQuadrantViews[static_cast<std::size_t>(q)])] =
        extract_quadrant(tiled.image, (q % 2) * w, (q / 2) * h, w, h);
  }
  return views;
}

// ---------------------------------------------------------------------------
// Joint multi-view sampling
// ---------------------------------------------------------------------------

TiledImage joint_sample(const TiledImage& tiled_rgb, const TiledImage& tiled_depth,
                        guidance::ScoreModel& model, const guidance::Conditioning& cond,
                        const SamplerSettings& settings, Rng& rng) {
  tiled_rgb.validate();
  tiled_depth.validate();
  if (tiled_rgb.image.channels != 3) throw RetextureError("joint sampling expects RGB input");
  if (tiled_depth.image.channels != 1) {
    throw RetextureError("joint sampling expects single-channel depth");
  }
  if (tiled_depth.image.width != tiled_rgb.image.width ||
      tiled_depth.image.height != tiled_rgb.image.height) {
    throw RetextureError("joint sampling depth extent must match the color extent");
  }
  if (!model.caps().accepts_depth) {
    throw RetextureError("joint sampling requires a depth-conditioned score model");
  }
  if (!(settings.strength > 0.0) || settings.strength > 1.0) {
    throw RetextureError("img2img strength must lie in (0, 1]");
  }
  if (settings.steps < 1) throw RetextureError("joint sampling needs at least one step");
  if (!std::isfinite(settings.guidance_weight) || settings.guidance_weight < 0.0) {
    throw RetextureError("guidance weight must be finite and non-negative");
  }
  settings.schedule.validate();
  for (const double v : tiled_rgb.image.data) {
    if (!std::isfinite(v)) throw RetextureError("joint sampling input must be finite");
  }
  for (const double v : tiled_depth.image.data) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw RetextureError("joint sampling depth must lie in [0, 1]");
    }
  }

  const guidance::NoiseSchedule& schedule = settings.schedule;
  const guidance::ImageShape shape = {static_cast<std::size_t>(tiled_rgb.image.height),
                                      static_cast<std::size_t>(tiled_rgb.image.width), 3};
  const std::size_t n = shape.size();
  const double t0 = schedule.clamp_t(settings.strength);

  std::vector<double> eps(n);
  for (double& e : eps) e = rng.normal();
  model.observe_true_noise(eps);

  std::vector<double> x = guidance::add_noise(tiled_rgb.image.data, eps, t0, schedule);
  std::vector<double> x0_hat(n, 0.0);
  const std::span<const double> depth_span(tiled_depth.image.data);

  for (int k = 0; k < settings.steps; ++k) {
    const double t =
        settings.steps == 1
            ? t0
            : t0 + (schedule.t_min - t0) * static_cast<double>(k) / (settings.steps - 1);
    const std::vector<double> eps_cond = model.predict_noise(x, shape, t, cond, depth_span);
    if (eps_cond.size() != n) {
      throw guidance::GuidanceShapeError("joint sampling: conditional prediction size mismatch");
    }
    const std::vector<double> eps_uncond =
        model.predict_noise(x, shape, t, cond.as_uncond(), depth_span);
    if (eps_uncond.size() != n) {
      throw guidance::GuidanceShapeError("joint sampling: unconditional prediction size mismatch");
    }
    const std::vector<double> eps_hat =
        guidance::cfg_combine(eps_cond, eps_uncond, settings.guidance_weight);

    const double a = schedule.alpha(t);
    const double s = schedule.sigma(t);
    for (std::size_t i = 0; i < n; ++i) x0_hat[i] = (x[i] - s * eps_hat[i]) / a;

    if (k + 1 < settings.steps) {
      const double t_next =
          t0 + (schedule.t_min - t0) * static_cast<double>(k + 1) / (settings.steps - 1);
      const double a_next = schedule.alpha(t_next);
      const double s_next = schedule.sigma(t_next);
      for (std::size_t i = 0; i < n; ++i) x[i] = a_next * x0_hat[i] + s_next * eps_hat[i];
    }
  }

  for (const double v : x0_hat) {
    if (!std::isfinite(v)) throw RetextureError("joint sampling produced non-finite values");
  }

  TiledImage out;
  out.view_width = tiled_rgb.view_width;
  out.view_height = tiled_rgb.view_height;
  out.image = Image(tiled_rgb.image.width, tiled_rgb.image.height, 3);
  out.image.data = std::move(x0_hat);
  out.image = clamp01(std::move(out.image));
  return out;
}

// ---------------------------------------------------------------------------
// Pseudo ground truth
// ---------------------------------------------------------------------------

void PseudoGtSet::validate() const {
  for (const Image& v : views) {
    if (v.width < 1 || v.height < 1 || v.channels != 3) {
      throw RetextureError("pseudo ground truth views must be RGB rasters");
    }
    if (!v.same_shape(views[0])) {
      throw RetextureError("pseudo ground truth views must share one shape");
    }
    for (const double x : v.data) {
      if (!(x >= 0.0 && x <= 1.0)) {
        throw RetextureError("pseudo ground truth views must lie in [0, 1]");
      }
    }
  }
}

PseudoGtSet build_pseudo_gt(const mesh::TriangleMesh& m, const texrast::TextureAtlas& atlas,
                            const ViewSet& views, guidance::ScoreModel& model,
                            const guidance::Conditioning& cond, const SamplerSettings& settings,
                            std::uint64_t seed) {
  views.validate();
  atlas.validate();

  std::array<Image, 4> colors;
  std::array<Image, 4> depths;
  for (std::size_t i = 0; i < views.cameras.size(); ++i) {
    const texrast::FragmentBuffer fb = texrast::rasterize(m, views.cameras[i]);
    colors[i] = texrast::shade_textured(fb, m, atlas);
    depths[i] = texrast::render_mesh_depth(fb);
  }

  const TiledImage tiled_rgb = tile_views(colors);
  TiledImage tiled_depth = tile_views(depths);
  tiled_depth.image.data = guidance::normalize_depth_unit(tiled_depth.image.data);

  Rng rng(seed);
  const TiledImage refined = joint_sample(tiled_rgb, tiled_depth, model, cond, settings, rng);
  std::array<Image, 4> outs = untile(refined);

  PseudoGtSet set;
  for (std::size_t i = 0; i < outs.size(); ++i) set.views[i] = quantize8(outs[i]);
  std::ostringstream prov;
  prov << "sampler strength=" << format_double(settings.strength)
       << " steps=" << settings.steps
       << " guidance_weight=" << format_double(settings.guidance_weight)
       << " t_min=" << format_double(settings.schedule.t_min)
       << " t_max=" << format_double(settings.schedule.t_max) << " seed=" << seed << "\n";
  set.provenance = prov.str();
  set.validate();
  return set;
}

void save_pseudo_gt(const PseudoGtSet& set, const std::filesystem::path& dir) {
  set.validate();
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < set.views.size(); ++i) {
    write_png(dir / ("view_" + std::to_string(i) + ".png"), set.views[i]);
  }
  std::ofstream out(dir / "provenance.txt", std::ios::binary);
  if (!out) throw RetextureError("cannot write pseudo ground truth provenance");
  out << set.provenance;
  if (set.provenance.empty() || set.provenance.back() != '\n') out << "\n";
}

PseudoGtSet load_pseudo_gt(const std::filesystem::path& dir) {
  PseudoGtSet set;
  for (std::size_t i = 0; i < set.views.size(); ++i) {
    const std::filesystem::path p = dir / ("view_" + std::to_string(i) + ".png");
    if (!std::filesystem::exists(p)) {
      throw RetextureError("pseudo ground truth view missing: " + p.string());
    }
    set.views[i] = read_png(p);
  }
  const std::filesystem::path prov = dir / "provenance.txt";
  if (!std::filesystem::exists(prov)) {
    throw RetextureError("pseudo ground truth provenance missing: " + prov.string());
  }
  std::ifstream in(prov, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  set.provenance = buf.str();
  set.validate();
  return set;
}

// ---------------------------------------------------------------------------
// Atlas initialization and fill
// ---------------------------------------------------------------------------

texrast::TextureAtlas bake_initial_atlas(const mesh::TriangleMesh& m, const field::Field& f,
                                         int resolution) {
  m.validate();
  if (!m.has_uvs()) throw RetextureError("baking requires uv coordinates on the mesh");
  if (resolution < 1) throw RetextureError("atlas resolution must be positive");

  texrast::TextureAtlas atlas;
  atlas.texels = Image(resolution, resolution, 3, 0.5);
  atlas.valid.assign(static_cast<std::size_t>(resolution) * resolution, 0);
  if (m.faces.empty()) return atlas;

  // Smooth normals: weld split vertices by exact position and accumulate
  // area-weighted face normals.
  std::unordered_map<PosKey, Vec3, PosKeyHash> welded;
  welded.reserve(m.vertices.size());
  std::vector<Vec3> face_normal(m.faces.size(), Vec3{0.0, 0.0, 0.0});
  for (std::size_t fi = 0; fi < m.faces.size(); ++fi) {
    const auto& face = m.faces[fi];
    const Vec3& a = m.vertices[static_cast<std::size_t>(face[0])];
    const Vec3& b = m.vertices[static_cast<std::size_t>(face[1])];
    const Vec3& c = m.vertices[static_cast<std::size_t>(face[2])];
    const Vec3 weighted = cross(sub(b, a), sub(c, a));  // 2 * area * unit normal
    const double len = norm(weighted);
    if (len > 0.0) {
      face_normal[fi] = {weighted[0] / len, weighted[1] / len, weighted[2] / len};
    }
    for (const int vi : face) {
      Vec3& acc = welded[position_key(m.vertices[static_cast<std::size_t>(vi)])];
      acc[0] += weighted[0];
      acc[1] += weighted[1];
      acc[2] += weighted[2];
    }
  }

  const auto vertex_normal = [&](int vi, std::size_t fi) -> Vec3 {
    const Vec3& acc = welded[position_key(m.vertices[static_cast<std::size_t>(vi)])];
    const double len = norm(acc);
    if (len > 1e-12) return {acc[0] / len, acc[1] / len, acc[2] / len};
    return face_normal[fi];
  };

  struct BakePoint {
    std::size_t texel;
    Vec3 position;
    Vec3 direction;
  };
  std::vector<BakePoint> points;

  for (std::size_t fi = 0; fi < m.faces.size(); ++fi) {
    const auto& face = m.faces[fi];
    std::array<std::array<double, 2>, 3> p;
    for (int k = 0; k < 3; ++k) {
      const auto& uv = m.uvs[static_cast<std::size_t>(face[static_cast<std::size_t>(k)])];
      p[static_cast<std::size_t>(k)] = uv_to_texel_space(uv[0], uv[1], resolution, resolution);
    }
    const double area2 = edge_fn(p[0], p[1], p[2][0], p[2][1]);
    if (area2 == 0.0) continue;
    const double orient = area2 > 0.0 ? 1.0 : -1.0;
    const double inv_area = 1.0 / std::abs(area2);
    const int x0 = std::max(
        0, static_cast<int>(std::ceil(std::min({p[0][0], p[1][0], p[2][0]}))));
    const int x1 = std::min(
        resolution - 1, static_cast<int>(std::floor(std::max({p[0][0], p[1][0], p[2][0]}))));
    const int y0 = std::max(
        0, static_cast<int>(std::ceil(std::min({p[0][1], p[1][1], p[2][1]}))));
    const int y1 = std::min(
        resolution - 1, static_cast<int>(std::floor(std::max({p[0][1], p[1][1], p[2][1]}))));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double w0 = orient * edge_fn(p[1], p[2], x, y);
        if (w0 < 0.0) continue;
        const double w1 = orient * edge_fn(p[2], p[0], x, y);
        if (w1 < 0.0) continue;
        const double w2 = orient * edge_fn(p[0], p[1], x, y);
        if (w2 < 0.0) continue;
        const std::array<double, 3> bary = {w0 * inv_area, w1 * inv_area, w2 * inv_area};
        Vec3 position = {0.0, 0.0, 0.0};
        Vec3 normal = {0.0, 0.0, 0.0};
        for (int k = 0; k < 3; ++k) {
          const Vec3& vert = m.vertices[static_cast<std::size_t>(face[static_cast<std::size_t>(k)])];
          const Vec3 vn = vertex_normal(face[static_cast<std::size_t>(k)], fi);
          for (int a = 0; a < 3; ++a) {
            position[static_cast<std::size_t>(a)] +=
                bary[static_cast<std::size_t>(k)] * vert[static_cast<std::size_t>(a)];
            normal[static_cast<std::size_t>(a)] +=
                bary[static_cast<std::size_t>(k)] * vn[static_cast<std::size_t>(a)];
          }
        }
        double len = norm(normal);
        if (len < 1e-12) {
          normal = face_normal[fi];
          len = norm(normal);
          if (len < 1e-12) continue;
        }
        const Vec3 direction = {-normal[0] / len, -normal[1] / len, -normal[2] / len};
        points.push_back({static_cast<std::size_t>(y) * resolution + x, position, direction});
      }
    }
  }

  constexpr std::size_t kChunk = 4096;
  std::vector<double> xyz;
  std::vector<double> dirs;
  std::vector<double> rgb;
  for (std::size_t begin = 0; begin < points.size(); begin += kChunk) {
    const std::size_t count = std::min(kChunk, points.size() - begin);
    xyz.resize(3 * count);
    dirs.resize(3 * count);
    rgb.assign(3 * count, 0.0);
    for (std::size_t i = 0; i < count; ++i) {
      for (int a = 0; a < 3; ++a) {
        xyz[3 * i + static_cast<std::size_t>(a)] =
            points[begin + i].position[static_cast<std::size_t>(a)];
        dirs[3 * i + static_cast<std::size_t>(a)] =
            points[begin + i].direction[static_cast<std::size_t>(a)];
      }
    }
    f.eval_color(xyz, dirs, count, rgb);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t texel = points[begin + i].texel;
      for (int c = 0; c < 3; ++c) {
        atlas.texels.data[texel * 3 + static_cast<std::size_t>(c)] =
            rgb[3 * i + static_cast<std::size_t>(c)];
      }
      atlas.valid[texel] = 1;
    }
  }
  return atlas;
}

texrast::TextureAtlas dilate_atlas(texrast::TextureAtlas atlas) {
  atlas.validate();
  if (atlas.valid.empty()) {
    throw RetextureError("dilation requires the atlas valid mask");
  }
  const int w = atlas.width();
  const int h = atlas.height();
  std::vector<std::uint8_t> filled = atlas.valid;
  std::deque<std::uint32_t> queue;
  for (std::uint32_t i = 0; i < filled.size(); ++i) {
    if (filled[i]) queue.push_back(i);
  }
  while (!queue.empty()) {
    const std::uint32_t i = queue.front();
    queue.pop_front();
    const int x = static_cast<int>(i % static_cast<std::uint32_t>(w));
    const int y = static_cast<int>(i / static_cast<std::uint32_t>(w));
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        if (dx == 0 && dy == 0) continue;
        const int nx = x + dx;
        const int ny = y + dy;
        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
        const std::uint32_t ni = static_cast<std::uint32_t>(ny) * static_cast<std::uint32_t>(w) +
                                 static_cast<std::uint32_t>(nx);
        if (filled[ni]) continue;
        filled[ni] = 1;
        for (int c = 0; c < 3; ++c) {
          atlas.texels.data[static_cast<std::size_t>(ni) * 3 + static_cast<std::size_t>(c)] =
              atlas.texels.data[static_cast<std::size_t>(i) * 3 + static_cast<std::size_t>(c)];
        }
        queue.push_back(ni);
      }
    }
  }
  return atlas;
}

std::vector<std::uint8_t> view_coverage_mask(const mesh::TriangleMesh& m,
                                             const std::vector<render::Camera>& cameras,
                                             int atlas_width, int atlas_height,
                                             double min_weight) {
  if (atlas_width < 1 || atlas_height < 1) {
    throw RetextureError("coverage mask needs a non-empty raster");
  }
  if (!(min_weight >= 0.0)) throw RetextureError("coverage threshold must be non-negative");
  std::vector<double> total(static_cast<std::size_t>(atlas_width) * atlas_height, 0.0);
  for (const render::Camera& cam : cameras) {
    const texrast::FragmentBuffer fb = texrast::rasterize(m, cam);
    for (int y = 0; y < fb.height; ++y) {
      for (int x = 0; x < fb.width; ++x) {
        const std::size_t idx = static_cast<std::size_t>(y) * fb.width + x;
        if (fb.tri[idx] < 0) continue;
        const auto& face = m.faces[static_cast<std::size_t>(fb.tri[idx])];
        double u = 0.0;
        double v = 0.0;
        for (int k = 0; k < 3; ++k) {
          const auto& uv = m.uvs[static_cast<std::size_t>(face[static_cast<std::size_t>(k)])];
          u += fb.bary[idx][static_cast<std::size_t>(k)] * uv[0];
          v += fb.bary[idx][static_cast<std::size_t>(k)] * uv[1];
        }
        const texrast::BilinearFootprint fp =
            texrast::bilinear_footprint(u, v, atlas_width, atlas_height);
        for (int k = 0; k < 4; ++k) {
          total[fp.index[static_cast<std::size_t>(k)]] += fp.weight[static_cast<std::size_t>(k)];
        }
      }
    }
  }
  std::vector<std::uint8_t> mask(total.size(), 0);
  for (std::size_t i = 0; i < total.size(); ++i) {
    mask[i] = (total[i] > 0.0 && total[i] >= min_weight) ? 1 : 0;
  }
  return mask;
}

double atlas_psnr(const texrast::TextureAtlas& a, const texrast::TextureAtlas& b,
                  const std::vector<std::uint8_t>& mask) {
  a.validate();
  b.validate();
  if (a.width() != b.width() || a.height() != b.height()) {
    throw RetextureError("atlas shapes must match for PSNR");
  }
  if (mask.size() != static_cast<std::size_t>(a.width()) * a.height()) {
    throw RetextureError("coverage mask size does not match the atlas");
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = a.texels.data[i * 3 + static_cast<std::size_t>(c)] -
                       b.texels.data[i * 3 + static_cast<std::size_t>(c)];
      sum += d * d;
    }
    ++count;
  }
  if (count == 0) throw RetextureError("coverage mask selects no texels");
  const double mse = sum / (3.0 * static_cast<double>(count));
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

// ---------------------------------------------------------------------------
// Stage A
// ---------------------------------------------------------------------------

StageAResult stage_a_fit(const mesh::TriangleMesh& m, const PseudoGtSet& pseudo,
                         const ViewSet& views, const texrast::TextureAtlas& init, int steps,
                         double learning_rate) {
  views.validate();
  pseudo.validate();
  init.validate();
  if (steps < 0) throw RetextureError("stage A step count must be non-negative");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw RetextureError("stage A learning rate must be positive");
  }
  for (std::size_t i = 0; i < pseudo.views.size(); ++i) {
    if (pseudo.views[i].width != views.cameras[i].width ||
        pseudo.views[i].height != views.cameras[i].height) {
      throw RetextureError("pseudo ground truth resolution must match the cameras");
    }
  }

  std::array<texrast::FragmentBuffer, 4> frags;
  for (std::size_t i = 0; i < views.cameras.size(); ++i) {
    frags[i] = texrast::rasterize(m, views.cameras[i]);
  }

  StageAResult result;
  result.atlas = init;
  result.losses.reserve(static_cast<std::size_t>(steps));
  const int aw = init.width();
  const int ah = init.height();
  std::vector<double> grad(static_cast<std::size_t>(aw) * ah * 3);
  std::vector<double> d_image;

  for (int step = 0; step < steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < frags.size(); ++i) {
      const Image rendered = texrast::shade_textured(frags[i], m, result.atlas);
      d_image.resize(rendered.data.size());
      for (std::size_t j = 0; j < rendered.data.size(); ++j) {
        const double diff = rendered.data[j] - pseudo.views[i].data[j];
        loss += diff * diff;
        d_image[j] = 0.5 * diff;  // d/dI of (1/4) * sum of squares
      }
      const std::vector<double> g = texrast::shade_backward(frags[i], m, aw, ah, d_image);
      for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += g[j];
    }
    result.losses.push_back(0.25 * loss);
    for (std::size_t j = 0; j < grad.size(); ++j) {
      result.atlas.texels.data[j] -= learning_rate * grad[j];
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Stage B
// ---------------------------------------------------------------------------

void RefinePoseSet::validate() const {
  if (cameras.size() < 4) throw RetextureError("refinement needs at least four poses");
  for (const render::Camera& cam : cameras) {
    cam.validate();
    const Vec3 pos = {cam.t[0], cam.t[1], cam.t[2]};
    const double r = norm(pos);
    if (!(r > 1e-9)) throw RetextureError("refinement pose sits at the origin");
    const Vec3 forward = {cam.R[2], cam.R[5], cam.R[8]};
    for (int a = 0; a < 3; ++a) {
      if (std::abs(forward[static_cast<std::size_t>(a)] + pos[static_cast<std::size_t>(a)] / r) >
          1e-6) {
        throw RetextureError("refinement poses must look at the origin");
      }
    }
  }
}

RefinePoseSet make_refine_poses(const RefinePoseConfig& cfg) {
  if (cfg.azimuth_count < 1) throw RetextureError("refinement needs at least one azimuth");
  if (cfg.elevations_deg.empty()) throw RetextureError("refinement needs at least one elevation");
  if (cfg.resolution < 1) throw RetextureError("pose resolution must be positive");
  if (!(cfg.radius > 0.0)) throw RetextureError("pose radius must be positive");
  const double t_near = std::max(0.05, cfg.radius - cfg.scene_extent);
  const double t_far = cfg.radius + cfg.scene_extent;
  RefinePoseSet poses;
  for (int a = 0; a < cfg.azimuth_count; ++a) {
    const double azimuth = 360.0 * static_cast<double>(a) / cfg.azimuth_count;
    for (const double elevation : cfg.elevations_deg) {
      poses.cameras.push_back(render::make_lookat_camera(
          render::orbit_position(azimuth, elevation, cfg.radius), {0.0, 0.0, 0.0},
          cfg.focal_scale * cfg.resolution, cfg.resolution, cfg.resolution, t_near, t_far));
    }
  }
  poses.validate();
  return poses;
}

StageBResult stage_b_refine(const mesh::TriangleMesh& m, const texrast::TextureAtlas& atlas,
                            const RefinePoseSet& poses, guidance::ScoreModel& model,
                            const std::string& prompt, const StageBConfig& cfg, Rng& rng) {
  poses.validate();
  atlas.validate();
  if (cfg.steps < 0) throw RetextureError("stage B step count must be non-negative");
  if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate)) {
    throw RetextureError("stage B learning rate must be positive");
  }
  if (!(cfg.lambda_sds >= 0.0) || !std::isfinite(cfg.lambda_sds)) {
    throw RetextureError("stage B SDS weight must be finite and non-negative");
  }
  if (!std::isfinite(cfg.guidance_weight) || cfg.guidance_weight < 0.0) {
    throw RetextureError("guidance weight must be finite and non-negative");
  }
  cfg.schedule.validate();

  // Snapshot the anchors once: renders of the incoming atlas at every pose.
  const std::size_t pose_count = poses.cameras.size();
  std::vector<texrast::FragmentBuffer> frags(pose_count);
  std::vector<Image> anchors(pose_count);
  std::vector<std::vector<double>> depths(pose_count);
  for (std::size_t p = 0; p < pose_count; ++p) {
    frags[p] = texrast::rasterize(m, poses.cameras[p]);
    anchors[p] = texrast::shade_textured(frags[p], m, atlas);
    if (cfg.use_depth_conditioning) {
      depths[p] = guidance::normalize_depth_unit(texrast::render_mesh_depth(frags[p]).data);
    }
  }

  StageBResult result;
  result.atlas = atlas;
  result.mse_losses.reserve(static_cast<std::size_t>(cfg.steps));
  const int aw = atlas.width();
  const int ah = atlas.height();
  std::vector<double> d_image;

  for (int step = 0; step < cfg.steps; ++step) {
    const std::size_t p = static_cast<std::size_t>(step) % pose_count;
    const Image rendered = texrast::shade_textured(frags[p], m, result.atlas);
    d_image.resize(rendered.data.size());
    double mse = 0.0;
    for (std::size_t j = 0; j < rendered.data.size(); ++j) {
      const double diff = rendered.data[j] - anchors[p].data[j];
      mse += diff * diff;
      d_image[j] = 2.0 * diff;
    }
    result.mse_losses.push_back(mse);

    if (cfg.lambda_sds != 0.0) {
      const guidance::Conditioning cond = guidance::view_conditioning(prompt, poses.cameras[p]);
      const guidance::ImageShape shape = {static_cast<std::size_t>(rendered.height),
                                          static_cast<std::size_t>(rendered.width), 3};
      const std::span<const double> depth_span =
          cfg.use_depth_conditioning ? std::span<const double>(depths[p])
                                     : std::span<const double>{};
      const sds::SdsPixelGradient pixel = sds::sds_pixel_gradient(
          rendered.data, shape, model, cond, cfg.schedule, cfg.guidance_weight, rng, depth_span);
      for (std::size_t j = 0; j < d_image.size(); ++j) {
        d_image[j] += cfg.lambda_sds * pixel.gradient[j];
      }
    }

    const std::vector<double> g = texrast::shade_backward(frags[p], m, aw, ah, d_image);
    for (std::size_t j = 0; j < g.size(); ++j) {
      result.atlas.texels.data[j] -= cfg.learning_rate * g[j];
    }
  }
  return result;
}

}  // namespace textmesh::retexture
