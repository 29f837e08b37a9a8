#include "textmesh/field.hpp"

#include "textmesh/optim.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace textmesh::field {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

[[noreturn]] void fail(const std::string& msg) { throw diff::TapeError(msg); }

double softplus_scalar(double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); }

double sigmoid_scalar(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

// Plain-path affine with the same Eigen kernel the tape uses, so both
// evaluation paths produce identical arithmetic.
void affine_forward(std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::size_t r, std::size_t k, std::size_t c,
                    std::span<double> out) {
  ConstMatMap X(x.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
  ConstMatMap W(w.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
  ConstVecMap B(b.data(), static_cast<Eigen::Index>(c));
  MatMap Out(out.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  Out.noalias() = X * W;
  Out.rowwise() += B.transpose();
}

void check_layer_finite(std::span<const double> values, const std::string& layer) {
  for (double v : values) {
    if (!std::isfinite(v)) fail("non-finite value produced by layer '" + layer + "'");
  }
}

// Clamp points into the scene cube; returns the clamped copy and fills
// `extra` with the distance each point was moved (zero for interior points).
std::vector<double> clamp_points(std::span<const double> xyz, std::size_t n, double bound,
                                 std::vector<double>& extra, bool& any_outside) {
  std::vector<double> clamped(xyz.begin(), xyz.begin() + static_cast<std::ptrdiff_t>(3 * n));
  extra.assign(n, 0.0);
  any_outside = false;
  for (std::size_t i = 0; i < n; ++i) {
    double d2 = 0.0;
    for (std::size_t a = 0; a < 3; ++a) {
      double& v = clamped[3 * i + a];
      const double orig = v;
      v = std::clamp(v, -bound, bound);
      const double dd = orig - v;
      d2 += dd * dd;
    }
    if (d2 > 0.0) {
      extra[i] = std::sqrt(d2);
      any_outside = true;
    }
  }
  return clamped;
}

}  // namespace

std::size_t encoding_dim(const FieldConfig& cfg) {
  return 3u * (cfg.include_input ? 1u : 0u) + 6u * static_cast<std::size_t>(cfg.num_frequencies);
}

std::vector<double> encode(std::span<const double> xyz, std::size_t n, const FieldConfig& cfg) {
  const std::size_t d = encoding_dim(cfg);
  std::vector<double> out(n * d);
  const int L = cfg.num_frequencies;
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * d;
    std::size_t col = 0;
    if (cfg.include_input) {
      for (std::size_t a = 0; a < 3; ++a) row[col++] = xyz[3 * i + a];
    }
    double freq = M_PI;  // 2^0 * pi
    for (int k = 0; k < L; ++k) {
      for (std::size_t a = 0; a < 3; ++a) row[col++] = std::sin(freq * xyz[3 * i + a]);
      for (std::size_t a = 0; a < 3; ++a) row[col++] = std::cos(freq * xyz[3 * i + a]);
      freq *= 2.0;
    }
  }
  return out;
}

double psi_beta(double u, double beta) {
  if (!(beta > 0.0)) fail("psi_beta requires positive beta");
  return u <= 0.0 ? 0.5 * std::exp(u / beta) : 1.0 - 0.5 * std::exp(-u / beta);
}

// ---------------------------------------------------------------------------
// Field

Field::Field(FieldConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.num_frequencies < 0 || cfg_.num_frequencies > 10) {
    fail("positional encoding octaves must lie in [0, 10]");
  }
  if (cfg_.hidden_width < 1 || cfg_.hidden_layers < 1 || cfg_.color_hidden_width < 1 ||
      cfg_.bound <= 0.0) {
    fail("field configuration is degenerate");
  }
  build_segments(seed);
}

Field Field::from_params(FieldConfig cfg, diff::ParamVector params) {
  Field f(cfg, 0);
  if (params.size() != f.params_.size()) fail("checkpoint parameter count does not match configuration");
  for (const auto& seg : f.params_.segments()) {
    if (!params.has_segment(seg.name) || params.segment_info(seg.name).size != seg.size ||
        params.segment_info(seg.name).offset != seg.offset) {
      fail("checkpoint segment table does not match configuration at '" + seg.name + "'");
    }
  }
  f.params_ = std::move(params);
  return f;
}

void Field::build_segments(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = encoding_dim(cfg_);
  const std::size_t h = static_cast<std::size_t>(cfg_.hidden_width);
  const std::size_t hc = static_cast<std::size_t>(cfg_.color_hidden_width);

  auto add_layer = [&](const std::string& prefix, std::size_t fan_in, std::size_t fan_out) {
    params_.add_segment(prefix + ".w", fan_in * fan_out);
    params_.add_segment(prefix + ".b", fan_out);
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : params_.segment(prefix + ".w")) v = rng.uniform(-a, a);
  };

  std::size_t fan = d;
  for (int l = 0; l < cfg_.hidden_layers; ++l) {
    add_layer("sdf.l" + std::to_string(l), fan, h);
    fan = h;
  }
  add_layer("sdf.out", h, 1);
  add_layer("color.l0", d + 3, hc);
  add_layer("color.out", hc, 3);
  params_.add_segment("density.log_alpha", 1, std::log(10.0));
  params_.add_segment("density.log_beta", 1, std::log(0.1));
}

double Field::alpha() const { return std::exp(params_.segment("density.log_alpha")[0]); }
double Field::beta() const { return std::exp(params_.segment("density.log_beta")[0]); }

double Field::density_of_sdf(double s) const { return psi_beta(-s, beta()) * alpha(); }

diff::Node Field::sdf_program(diff::Tape& t, std::span<const double> xyz, std::size_t n) const {
  std::vector<double> extra;
  bool any_outside = false;
  std::vector<double> clamped = clamp_points(xyz, n, cfg_.bound, extra, any_outside);
  const std::size_t d = encoding_dim(cfg_);
  const std::size_t h = static_cast<std::size_t>(cfg_.hidden_width);

  diff::Node cur = t.constant(encode(clamped, n, cfg_));
  std::size_t fan = d;
  for (int l = 0; l < cfg_.hidden_layers; ++l) {
    const std::string p = "sdf.l" + std::to_string(l);
    cur = t.softplus(t.affine(cur, t.param(p + ".w"), t.param(p + ".b"), n, fan, h));
    fan = h;
  }
  diff::Node out = t.affine(cur, t.param("sdf.out.w"), t.param("sdf.out.b"), n, h, 1);
  if (any_outside) out = t.add(out, t.constant(extra));
  return out;
}

diff::Node Field::color_program(diff::Tape& t, std::span<const double> xyz,
                                std::span<const double> dirs, std::size_t n) const {
  std::vector<double> extra;
  bool any_outside = false;
  std::vector<double> clamped = clamp_points(xyz, n, cfg_.bound, extra, any_outside);
  const std::size_t d = encoding_dim(cfg_);
  const std::size_t hc = static_cast<std::size_t>(cfg_.color_hidden_width);

  std::vector<double> enc = encode(clamped, n, cfg_);
  std::vector<double> input(n * (d + 3));
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(input.data() + i * (d + 3), enc.data() + i * d, d * sizeof(double));
    std::memcpy(input.data() + i * (d + 3) + d, dirs.data() + 3 * i, 3 * sizeof(double));
  }
  diff::Node cur = t.constant(std::move(input));
  cur = t.softplus(t.affine(cur, t.param("color.l0.w"), t.param("color.l0.b"), n, d + 3, hc));
  return t.sigmoid(t.affine(cur, t.param("color.out.w"), t.param("color.out.b"), n, hc, 3));
}

diff::Node Field::density_program(diff::Tape& t, diff::Node sdf_values) const {
  diff::Node alpha_node = t.exp(t.param("density.log_alpha"));
  diff::Node beta_node = t.exp(t.param("density.log_beta"));
  diff::Node u = t.affine_scalar(sdf_values, -1.0, 0.0);
  return t.mul(t.psi(u, beta_node), alpha_node);
}

void Field::eval_sdf(std::span<const double> xyz, std::size_t n, std::span<double> out) const {
  if (out.size() < n) fail("eval_sdf output span too small");
  std::vector<double> extra;
  bool any_outside = false;
  std::vector<double> clamped = clamp_points(xyz, n, cfg_.bound, extra, any_outside);
  const std::size_t d = encoding_dim(cfg_);
  const std::size_t h = static_cast<std::size_t>(cfg_.hidden_width);

  std::vector<double> cur = encode(clamped, n, cfg_);
  std::vector<double> next;
  std::size_t fan = d;
  for (int l = 0; l < cfg_.hidden_layers; ++l) {
    const std::string p = "sdf.l" + std::to_string(l);
    next.assign(n * h, 0.0);
    affine_forward(cur, params_.segment(p + ".w"), params_.segment(p + ".b"), n, fan, h, next);
    for (auto& v : next) v = softplus_scalar(v);
    check_layer_finite(next, p);
    cur.swap(next);
    fan = h;
  }
  std::vector<double> final_out(n, 0.0);
  affine_forward(cur, params_.segment("sdf.out.w"), params_.segment("sdf.out.b"), n, h, 1,
                 final_out);
  check_layer_finite(final_out, "sdf.out");
  for (std::size_t i = 0; i < n; ++i) out[i] = final_out[i] + extra[i];
}

void Field::eval_color(std::span<const double> xyz, std::span<const double> dirs, std::size_t n,
                       std::span<double> out) const {
  if (out.size() < 3 * n) fail("eval_color output span too small");
  std::vector<double> extra;
  bool any_outside = false;
  std::vector<double> clamped = clamp_points(xyz, n, cfg_.bound, extra, any_outside);
  const std::size_t d = encoding_dim(cfg_);
  const std::size_t hc = static_cast<std::size_t>(cfg_.color_hidden_width);

  std::vector<double> enc = encode(clamped, n, cfg_);
  std::vector<double> input(n * (d + 3));
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(input.data() + i * (d + 3), enc.data() + i * d, d * sizeof(double));
    std::memcpy(input.data() + i * (d + 3) + d, dirs.data() + 3 * i, 3 * sizeof(double));
  }
  std::vector<double> hidden(n * hc, 0.0);
  affine_forward(input, params_.segment("color.l0.w"), params_.segment("color.l0.b"), n, d + 3,
                 hc, hidden);
  for (auto& v : hidden) v = softplus_scalar(v);
  check_layer_finite(hidden, "color.l0");
  std::vector<double> rgb(n * 3, 0.0);
  affine_forward(hidden, params_.segment("color.out.w"), params_.segment("color.out.b"), n, hc,
                 3, rgb);
  for (auto& v : rgb) v = sigmoid_scalar(v);
  check_layer_finite(rgb, "color.out");
  std::memcpy(out.data(), rgb.data(), 3 * n * sizeof(double));
}

double Field::sdf_at(double x, double y, double z) const {
  const double p[3] = {x, y, z};
  double s = 0.0;
  eval_sdf(std::span<const double>(p, 3), 1, std::span<double>(&s, 1));
  return s;
}

Field::Sample Field::eval_sample(const std::array<double, 3>& x,
                                 const std::array<double, 3>& d) const {
  const double norm = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
  if (std::abs(norm - 1.0) > 1e-6) fail("eval_sample requires a unit direction");
  Sample s;
  eval_sdf(std::span<const double>(x.data(), 3), 1, std::span<double>(&s.s, 1));
  eval_color(std::span<const double>(x.data(), 3), std::span<const double>(d.data(), 3), 1,
             std::span<double>(s.c.data(), 3));
  s.sigma = density_of_sdf(s.s);
  return s;
}

double Field::init_sphere(double radius, int steps, Rng& rng) {
  if (!(radius > 0.0) || radius >= cfg_.bound * std::sqrt(3.0)) {
    fail("sphere radius must be positive and lie within the scene bounds");
  }
  if (steps < 1) fail("init_sphere requires at least one step");

  const std::size_t batch = 128;
  const std::size_t holdout_n = 512;

  // Batches mix three regimes: uniform over the cube (volume coverage),
  // radially uniform (dense near the center), and a band hugging the target
  // level set (where downstream accuracy matters most).
  auto draw_points = [&](Rng& r, std::size_t count) {
    std::vector<double> pts(count * 3);
    for (std::size_t i = 0; i < count; ++i) {
      if (i % 3 == 0) {
        for (std::size_t a = 0; a < 3; ++a) pts[3 * i + a] = r.uniform(-cfg_.bound, cfg_.bound);
        continue;
      }
      double d[3] = {r.normal(), r.normal(), r.normal()};
      const double nn = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) + 1e-12;
      const double rad = i % 3 == 1
                             ? r.uniform(0.0, cfg_.bound)
                             : std::clamp(radius + 0.15 * r.normal(), 0.0, cfg_.bound);
      for (std::size_t a = 0; a < 3; ++a) pts[3 * i + a] = rad * d[a] / nn;
    }
    return pts;
  };

  Rng holdout_rng = rng.split("init_sphere.holdout");
  std::vector<double> holdout(holdout_n * 3);
  for (auto& v : holdout) v = holdout_rng.uniform(-cfg_.bound, cfg_.bound);

  auto holdout_mae = [&]() {
    std::vector<double> s(holdout_n, 0.0);
    eval_sdf(holdout, holdout_n, s);
    double acc = 0.0;
    for (std::size_t i = 0; i < holdout_n; ++i) {
      const double* p = holdout.data() + 3 * i;
      const double target = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) - radius;
      acc += std::abs(s[i] - target);
    }
    return acc / static_cast<double>(holdout_n);
  };

  // Pointwise probes at the center and on the surface; the fit is only
  // accepted once these are tight too, not just the volume average.
  auto probe_err = [&]() {
    std::vector<double> probes = {0.0, 0.0, 0.0};
    Rng pr(0x5095u);
    for (int i = 0; i < 96; ++i) {
      double d[3] = {pr.normal(), pr.normal(), pr.normal()};
      const double nn = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) + 1e-12;
      for (std::size_t a = 0; a < 3; ++a) probes.push_back(radius * d[a] / nn);
    }
    const std::size_t np = probes.size() / 3;
    std::vector<double> s(np, 0.0);
    eval_sdf(probes, np, s);
    double worst = std::abs(s[0] + radius);
    for (std::size_t i = 1; i < np; ++i) worst = std::max(worst, std::abs(s[i]));
    return worst;
  };

  // Only the SDF trunk is regressed; color and density transform stay put.
  std::vector<unsigned char> mask(params_.size(), 0);
  for (const auto& seg : params_.segments()) {
    if (seg.name.rfind("sdf.", 0) == 0) {
      std::fill(mask.begin() + static_cast<std::ptrdiff_t>(seg.offset),
                mask.begin() + static_cast<std::ptrdiff_t>(seg.offset + seg.size), 1);
    }
  }

  optim::Adam adam(params_.size(), 3e-3);
  double mae = holdout_mae();
  for (int step = 0; step < steps; ++step) {
    if (step == steps / 2) adam.set_lr(1e-3);
    if (step == (steps * 4) / 5) adam.set_lr(3e-4);
    std::vector<double> pts = draw_points(rng, batch);
    std::vector<double> target(batch), weight(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      const double* p = pts.data() + 3 * i;
      target[i] = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) - radius;
      // Emphasize the band around the level set; the far corners only need
      // a loose fit for the average error to stay in budget.
      weight[i] = std::abs(target[i]) <= 0.7 ? 1.0 : 0.3;
    }
    diff::Program loss = [&](diff::Tape& t) {
      diff::Node s = sdf_program(t, pts, batch);
      diff::Node d = t.sub(s, t.constant(target));
      diff::Node sq = t.mul(t.mul(d, d), t.constant(weight));
      return t.affine_scalar(t.sum(sq), 1.0 / static_cast<double>(batch), 0.0);
    };
    diff::GradResult g = diff::value_and_grad(loss, params_);
    adam.step(params_.values(), g.gradient, mask);

    if ((step + 1) % 50 == 0 || step + 1 == steps) {
      mae = holdout_mae();
      // Comfortably under the acceptance bar, pointwise probes included.
      if (mae < 0.012 && probe_err() < 0.010) return mae;
    }
  }
  mae = holdout_mae();
  if (mae >= 0.02) {
    std::ostringstream os;
    os << "init_sphere did not converge: held-out mean absolute error " << mae
       << " after " << steps << " steps (threshold 0.02)";
    fail(os.str());
  }
  return mae;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_params(const std::string& path, const diff::ParamVector& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot open checkpoint for writing: " + path);
  f << "TXMPARAMS v1\n";
  f << "segments " << params.segments().size() << "\n";
  for (const auto& seg : params.segments()) {
    f << seg.name << " " << seg.offset << " " << seg.size << "\n";
  }
  f << "payload f32le " << params.size() << "\n";
  std::vector<float> payload(params.size());
  auto vals = params.values();
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<float>(vals[i]);
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) fail("short write while saving checkpoint: " + path);
}

diff::ParamVector load_params(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open checkpoint for reading: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "TXMPARAMS v1") fail("bad checkpoint magic in " + path);
  std::size_t n_segments = 0;
  {
    std::string tag;
    if (!std::getline(f, line)) fail("truncated checkpoint header in " + path);
    std::istringstream is(line);
    if (!(is >> tag >> n_segments) || tag != "segments") fail("bad segment count in " + path);
  }
  std::vector<diff::ParamVector::Segment> segs(n_segments);
  for (auto& seg : segs) {
    if (!std::getline(f, line)) fail("truncated segment table in " + path);
    std::istringstream is(line);
    if (!(is >> seg.name >> seg.offset >> seg.size)) fail("bad segment row in " + path);
  }
  std::size_t total = 0;
  {
    std::string tag, fmt;
    if (!std::getline(f, line)) fail("truncated checkpoint header in " + path);
    std::istringstream is(line);
    if (!(is >> tag >> fmt >> total) || tag != "payload" || fmt != "f32le") {
      fail("bad payload declaration in " + path);
    }
  }
  std::vector<float> payload(total);
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(total * sizeof(float)));
  if (f.gcount() != static_cast<std::streamsize>(total * sizeof(float))) {
    fail("truncated checkpoint payload in " + path);
  }
  std::vector<double> values(total);
  for (std::size_t i = 0; i < total; ++i) values[i] = static_cast<double>(payload[i]);
  return diff::ParamVector::from_parts(std::move(segs), std::move(values));
}

void quantize_to_f32(diff::ParamVector& params) {
  for (auto& v : params.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace textmesh::field
