#include "textmesh/render.hpp"

#include <algorithm>
#include <cmath>

namespace textmesh::render {

namespace {

struct ChunkGeometry {
  std::size_t first_ray = 0;
  std::size_t n_rays = 0;
  std::vector<double> points;  // n_rays * M * 3
  std::vector<double> dirs;    // n_rays * M * 3
  std::vector<double> depths;  // n_rays * M
  std::vector<double> deltas;  // n_rays * M
};

// Rays and sample positions for rays [first, first+n). Depths come from a
// per-ray substream keyed on (seed, ray index): chunk boundaries and
// evaluation order cannot change what any ray sees.
ChunkGeometry build_chunk(const Camera& cam, const RenderConfig& cfg, std::uint64_t seed,
                          std::size_t first_ray, std::size_t n_rays) {
  const std::size_t m = static_cast<std::size_t>(cfg.samples_per_ray);
  ChunkGeometry g;
  g.first_ray = first_ray;
  g.n_rays = n_rays;
  g.points.resize(n_rays * m * 3);
  g.dirs.resize(n_rays * m * 3);
  g.depths.resize(n_rays * m);
  g.deltas.resize(n_rays * m);

  const Rng base(seed);
  for (std::size_t r = 0; r < n_rays; ++r) {
    const std::size_t ray_index = first_ray + r;
    const std::size_t x = ray_index % static_cast<std::size_t>(cam.width);
    const std::size_t y = ray_index / static_cast<std::size_t>(cam.width);
    const Ray ray = pixel_ray(cam, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);

    Rng ray_rng = base.split(ray_index);
    const std::vector<double> ts =
        sample_depths(cam.t_near, cam.t_far, cfg.samples_per_ray, cfg.stratified, ray_rng);
    for (std::size_t i = 0; i < m; ++i) {
      const double t = ts[i];
      g.depths[r * m + i] = t;
      g.deltas[r * m + i] = (i + 1 < m ? ts[i + 1] - t : cam.t_far - t);
      for (std::size_t a = 0; a < 3; ++a) {
        g.points[(r * m + i) * 3 + a] = ray.origin[a] + t * ray.dir[a];
        g.dirs[(r * m + i) * 3 + a] = ray.dir[a];
      }
    }
  }
  return g;
}

std::size_t rays_per_chunk(const RenderConfig& cfg) {
  const std::size_t m = static_cast<std::size_t>(cfg.samples_per_ray);
  return std::max<std::size_t>(1, cfg.chunk_points / std::max<std::size_t>(1, m));
}

}  // namespace

std::vector<double> sample_depths(double t_near, double t_far, int m, bool stratified,
                                  Rng& rng) {
  if (m < 2) throw Error("depth sampling requires at least two samples per ray");
  if (!(t_near > 0.0) || !(t_near < t_far)) throw Error("depth range requires 0 < near < far");
  const std::size_t n = static_cast<std::size_t>(m);
  std::vector<double> out(n);
  if (stratified) {
    const double bin = (t_far - t_near) / static_cast<double>(m);
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = t_near + (static_cast<double>(i) + rng.uniform()) * bin;
    }
  } else {
    const double step = (t_far - t_near) / static_cast<double>(m - 1);
    for (std::size_t i = 0; i < n; ++i) out[i] = t_near + static_cast<double>(i) * step;
    out[n - 1] = t_far;  // exact endpoint
  }
  return out;
}

CompositeResult composite(std::span<const double> colors, std::span<const double> sigmas,
                          std::span<const double> depths, double t_far,
                          const std::array<double, 3>& background) {
  const std::size_t m = sigmas.size();
  if (m < 1) throw Error("composite requires at least one sample");
  if (colors.size() != 3 * m || depths.size() != m) {
    throw Error("composite arrays must agree in length");
  }
  CompositeResult res;
  double cum = 0.0;          // sum of sigma*delta through the current term
  double weighted_t = 0.0;   // sum alpha_m t_m
  for (std::size_t i = 0; i < m; ++i) {
    if (sigmas[i] < 0.0) throw Error("composite requires non-negative densities");
    const double delta = (i + 1 < m ? depths[i + 1] - depths[i] : t_far - depths[i]);
    if (delta < 0.0) throw Error("composite requires ascending depths within the far plane");
    const double sd = sigmas[i] * delta;
    cum += sd;
    const double transmittance = std::exp(-cum);  // includes the current term
    const double alpha = transmittance * (1.0 - std::exp(-sd));
    res.acc += alpha;
    weighted_t += alpha * depths[i];
    for (std::size_t ch = 0; ch < 3; ++ch) res.rgb[ch] += alpha * colors[3 * i + ch];
  }
  if (res.acc > 1.0 + 1e-9) throw Error("composite opacity exceeded one");
  res.acc = std::min(res.acc, 1.0);
  for (std::size_t ch = 0; ch < 3; ++ch) res.rgb[ch] += (1.0 - res.acc) * background[ch];
  res.depth = weighted_t / std::max(res.acc, 1e-8);
  return res;
}

RenderedImage render_image(const field::Field& f, const Camera& cam, const RenderConfig& cfg,
                           std::uint64_t seed) {
  cam.validate();
  if (cfg.samples_per_ray < 2) throw Error("render requires at least two samples per ray");
  const std::size_t w = static_cast<std::size_t>(cam.width);
  const std::size_t h = static_cast<std::size_t>(cam.height);
  const std::size_t m = static_cast<std::size_t>(cfg.samples_per_ray);
  const std::size_t total_rays = w * h;
  const std::size_t chunk_rays = rays_per_chunk(cfg);

  RenderedImage img;
  img.rgb = Image(static_cast<int>(w), static_cast<int>(h), 3);
  img.depth = Image(static_cast<int>(w), static_cast<int>(h), 1);
  img.acc = Image(static_cast<int>(w), static_cast<int>(h), 1);

  std::vector<double> sdf, rgb;
  for (std::size_t first = 0; first < total_rays; first += chunk_rays) {
    const std::size_t n_rays = std::min(chunk_rays, total_rays - first);
    const ChunkGeometry g = build_chunk(cam, cfg, seed, first, n_rays);
    const std::size_t n_pts = n_rays * m;
    sdf.assign(n_pts, 0.0);
    rgb.assign(n_pts * 3, 0.0);
    f.eval_sdf(g.points, n_pts, sdf);
    f.eval_color(g.points, g.dirs, n_pts, rgb);

    for (std::size_t r = 0; r < n_rays; ++r) {
      std::vector<double> sigmas(m);
      for (std::size_t i = 0; i < m; ++i) sigmas[i] = f.density_of_sdf(sdf[r * m + i]);
      const CompositeResult cr = composite(
          std::span<const double>(rgb.data() + r * m * 3, m * 3), sigmas,
          std::span<const double>(g.depths.data() + r * m, m), cam.t_far, cfg.background);
      const std::size_t ray_index = first + r;
      const std::size_t x = ray_index % w;
      const std::size_t y = ray_index / w;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        img.rgb.at(static_cast<int>(x), static_cast<int>(y), static_cast<int>(ch)) = cr.rgb[ch];
      }
      img.depth.at(static_cast<int>(x), static_cast<int>(y), 0) = cr.depth;
      img.acc.at(static_cast<int>(x), static_cast<int>(y), 0) = cr.acc;
    }
  }
  return img;
}

diff::GradResult render_weighted_grad(const field::Field& f, const Camera& cam,
                                      const RenderConfig& cfg, std::uint64_t seed,
                                      std::span<const double> weights) {
  cam.validate();
  if (cfg.samples_per_ray < 2) throw Error("render requires at least two samples per ray");
  const std::size_t w = static_cast<std::size_t>(cam.width);
  const std::size_t h = static_cast<std::size_t>(cam.height);
  const std::size_t m = static_cast<std::size_t>(cfg.samples_per_ray);
  const std::size_t total_rays = w * h;
  if (weights.size() != total_rays * 3) {
    throw Error("pixel weight buffer must have 3 entries per pixel");
  }
  const std::size_t chunk_rays = rays_per_chunk(cfg);

  diff::GradResult total;
  total.gradient.assign(f.params().size(), 0.0);

  for (std::size_t first = 0; first < total_rays; first += chunk_rays) {
    const std::size_t n_rays = std::min(chunk_rays, total_rays - first);
    const ChunkGeometry g = build_chunk(cam, cfg, seed, first, n_rays);
    const std::size_t n_pts = n_rays * m;

    diff::Program program = [&](diff::Tape& t) {
      diff::Node s = f.sdf_program(t, g.points, n_pts);
      diff::Node sigma = f.density_program(t, s);
      diff::Node sd = t.mul(sigma, t.constant(g.deltas));
      diff::Node cum = t.cumsum_rows(sd, n_rays, m);
      diff::Node transmittance = t.exp(t.affine_scalar(cum, -1.0, 0.0));
      diff::Node absorb = t.affine_scalar(t.exp(t.affine_scalar(sd, -1.0, 0.0)), -1.0, 1.0);
      diff::Node alpha = t.mul(transmittance, absorb);
      diff::Node acc = t.row_sum(alpha, n_rays, m);
      diff::Node c = f.color_program(t, g.points, g.dirs, n_pts);

      diff::Node loss{};
      for (std::size_t ch = 0; ch < 3; ++ch) {
        diff::Node c_ch = t.col(c, n_pts, 3, ch);
        diff::Node ray_color = t.row_sum(t.mul(alpha, c_ch), n_rays, m);
        const double bg = cfg.background[ch];
        // + (1 - acc) * bg, folded as bg - bg*acc.
        ray_color = t.add(ray_color, t.affine_scalar(acc, -bg, bg));
        std::vector<double> w_ch(n_rays);
        for (std::size_t r = 0; r < n_rays; ++r) w_ch[r] = weights[(first + r) * 3 + ch];
        diff::Node term = t.sum(t.mul(ray_color, t.constant(std::move(w_ch))));
        loss = ch == 0 ? term : t.add(loss, term);
      }
      return loss;
    };
    diff::GradResult part = diff::value_and_grad(program, f.params());
    total.value += part.value;
    for (std::size_t i = 0; i < total.gradient.size(); ++i) {
      total.gradient[i] += part.gradient[i];
    }
  }
  return total;
}

}  // namespace textmesh::render
