#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "textmesh/diffengine.hpp"
#include "textmesh/field.hpp"
#include "textmesh/rng.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

using namespace textmesh;
using namespace textmesh::field;

namespace {

FieldConfig small_config() {
  FieldConfig cfg;
  cfg.num_frequencies = 2;
  cfg.hidden_width = 16;
  cfg.hidden_layers = 2;
  cfg.color_hidden_width = 8;
  return cfg;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("positional encoding layout and analytic values") {
  FieldConfig cfg;
  cfg.include_input = true;

  SUBCASE("origin with one octave") {
    cfg.num_frequencies = 1;
    const double x[3] = {0.0, 0.0, 0.0};
    auto enc = encode(std::span<const double>(x, 3), 1, cfg);
    REQUIRE(enc.size() == 9);
    const std::vector<double> want = {0, 0, 0, 0, 0, 0, 1, 1, 1};
    for (std::size_t i = 0; i < 9; ++i) CHECK(enc[i] == doctest::Approx(want[i]).epsilon(1e-15));
  }

  SUBCASE("zero octaves passes the input through") {
    cfg.num_frequencies = 0;
    const double x[3] = {0.3, -0.7, 1.1};
    auto enc = encode(std::span<const double>(x, 3), 1, cfg);
    REQUIRE(enc.size() == 3);
    CHECK(enc[0] == 0.3);
    CHECK(enc[1] == -0.7);
    CHECK(enc[2] == 1.1);
  }

  SUBCASE("half-unit coordinate hits the sine peak") {
    cfg.num_frequencies = 2;
    const double x[3] = {0.5, 0.0, 0.0};
    auto enc = encode(std::span<const double>(x, 3), 1, cfg);
    REQUIRE(enc.size() == 3 + 12);
    CHECK(enc[3] == doctest::Approx(1.0).epsilon(1e-15));  // sin(pi/2)
  }

  SUBCASE("output dimension formula holds for all octave counts") {
    for (int L = 0; L <= 10; ++L) {
      for (bool inc : {false, true}) {
        cfg.num_frequencies = L;
        cfg.include_input = inc;
        const double x[3] = {0.1, 0.2, 0.3};
        auto enc = encode(std::span<const double>(x, 3), 1, cfg);
        CHECK(enc.size() == 3u * (inc ? 1 : 0) + 6u * static_cast<std::size_t>(L));
        CHECK(enc.size() == encoding_dim(cfg));
      }
    }
  }
}

TEST_CASE("psi is a valid cdf") {
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    const double beta = std::exp(rng.uniform(std::log(1e-3), std::log(10.0)));
    CHECK(psi_beta(0.0, beta) == 0.5);
    // Monotone increasing on random ordered pairs.
    double a = rng.uniform(-5.0, 5.0), b = rng.uniform(-5.0, 5.0);
    if (a > b) std::swap(a, b);
    CHECK(psi_beta(a, beta) <= psi_beta(b, beta));
    // Limits saturate without error.
    CHECK(psi_beta(1e6 * beta, beta) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(psi_beta(-1e6 * beta, beta) == doctest::Approx(0.0).epsilon(1e-12));
    // Values stay inside (0,1) boundaries inclusive of saturation.
    const double v = psi_beta(rng.uniform(-20.0, 20.0), beta);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(psi_beta(-1.0, 1.0) == doctest::Approx(0.5 * std::exp(-1.0)).epsilon(1e-15));
}

TEST_CASE("sdf to density transform") {
  Field f(small_config(), 7);
  const double alpha = f.alpha();
  const double beta = f.beta();
  CHECK(alpha == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(beta == doctest::Approx(0.1).epsilon(1e-12));

  CHECK(f.density_of_sdf(0.0) == doctest::Approx(alpha / 2.0).epsilon(1e-12));
  CHECK(f.density_of_sdf(10.0 * beta) <= alpha * 1e-4);
  CHECK(f.density_of_sdf(-10.0 * beta) == doctest::Approx(alpha).epsilon(1e-3));

  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    double a = rng.uniform(-1.0, 1.0), b = rng.uniform(-1.0, 1.0);
    if (a > b) std::swap(a, b);
    CHECK(f.density_of_sdf(a) >= f.density_of_sdf(b));  // non-increasing in s
    const double sigma = f.density_of_sdf(rng.uniform(-2.0, 2.0));
    CHECK(sigma >= 0.0);
    CHECK(sigma <= alpha);
  }
}

TEST_CASE("field evaluation basics") {
  Field f(small_config(), 99);

  SUBCASE("zeroed color head yields mid-gray") {
    for (auto& v : f.params().segment("color.out.w")) v = 0.0;
    for (auto& v : f.params().segment("color.out.b")) v = 0.0;
    auto s = f.eval_sample({0.2, -0.1, 0.3}, {0.0, 0.0, 1.0});
    CHECK(s.c[0] == 0.5);
    CHECK(s.c[1] == 0.5);
    CHECK(s.c[2] == 0.5);
  }

  SUBCASE("determinism and the density invariant") {
    auto a = f.eval_sample({0.1, 0.2, -0.3}, {0.0, 1.0, 0.0});
    auto b = f.eval_sample({0.1, 0.2, -0.3}, {0.0, 1.0, 0.0});
    CHECK(a.s == b.s);
    CHECK(a.sigma == b.sigma);
    CHECK(a.c == b.c);
    CHECK(a.sigma == f.density_of_sdf(a.s));  // exact, same code path
    for (double ci : a.c) {
      CHECK(ci >= 0.0);
      CHECK(ci <= 1.0);
    }
  }

  SUBCASE("non-unit direction is rejected") {
    CHECK_THROWS_AS((void)f.eval_sample({0, 0, 0}, {0.0, 0.0, 2.0}), diff::TapeError);
  }

  SUBCASE("plain path matches the tape program") {
    Rng rng(3);
    const std::size_t n = 17;
    std::vector<double> pts(3 * n), dirs(3 * n);
    for (auto& v : pts) v = rng.uniform(-1.4, 1.4);  // includes out-of-bounds points
    for (std::size_t i = 0; i < n; ++i) {
      double d[3] = {rng.normal(), rng.normal(), rng.normal()};
      const double nn = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
      for (int a = 0; a < 3; ++a) dirs[3 * i + a] = d[a] / nn;
    }
    std::vector<double> s_plain(n), c_plain(3 * n);
    f.eval_sdf(pts, n, s_plain);
    f.eval_color(pts, dirs, n, c_plain);

    diff::Tape t(f.params());
    auto s_node = f.sdf_program(t, pts, n);
    auto c_node = f.color_program(t, pts, dirs, n);
    auto s_tape = t.value(s_node);
    auto c_tape = t.value(c_node);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(s_plain[i] == doctest::Approx(s_tape[i]).epsilon(1e-13));
    }
    for (std::size_t i = 0; i < 3 * n; ++i) {
      CHECK(c_plain[i] == doctest::Approx(c_tape[i]).epsilon(1e-13));
    }
  }

  SUBCASE("field is continuous across the scene boundary") {
    const double eps = 1e-6;
    const double inside = f.sdf_at(1.0 - eps, 0.3, -0.2);
    const double outside = f.sdf_at(1.0 + eps, 0.3, -0.2);
    CHECK(std::abs(inside - outside) < 1e-3);
    // Far outside grows like distance to the cube.
    const double far1 = f.sdf_at(3.0, 0.0, 0.0);
    const double far2 = f.sdf_at(4.0, 0.0, 0.0);
    CHECK(far2 - far1 == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("field gradients match finite differences") {
  FieldConfig cfg = small_config();
  Field f(cfg, 11);
  Rng rng(21);
  const std::size_t n = 4;
  std::vector<double> pts(3 * n), dirs(3 * n), w_s(n), w_c(3 * n);
  for (auto& v : pts) v = rng.uniform(-0.9, 0.9);
  for (std::size_t i = 0; i < n; ++i) {
    double d[3] = {rng.normal(), rng.normal(), rng.normal()};
    const double nn = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    for (int a = 0; a < 3; ++a) dirs[3 * i + a] = d[a] / nn;
  }
  for (auto& v : w_s) v = rng.uniform(-1.0, 1.0);
  for (auto& v : w_c) v = rng.uniform(-1.0, 1.0);

  // Scalarized probe touching sdf, color, and the density transform.
  diff::Program probe = [&](diff::Tape& t) {
    diff::Node s = f.sdf_program(t, pts, n);
    diff::Node c = f.color_program(t, pts, dirs, n);
    diff::Node sig = f.density_program(t, s);
    diff::Node total = t.sum(t.mul(s, t.constant(w_s)));
    total = t.add(total, t.sum(t.mul(c, t.constant(w_c))));
    return t.add(total, t.affine_scalar(t.sum(sig), 0.05, 0.0));
  };

  diff::GradResult ad = diff::value_and_grad(probe, f.params());
  std::vector<double> fd = diff::finite_difference_gradient(probe, f.params(), 1e-5);
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double err =
        std::abs(ad.gradient[i] - fd[i]) / std::max({1.0, std::abs(ad.gradient[i]), std::abs(fd[i])});
    worst = std::max(worst, err);
  }
  INFO("worst relative error " << worst);
  CHECK(worst <= 1e-4);
}

TEST_CASE("sphere pretraining reaches the analytic sphere") {
  FieldConfig cfg;
  cfg.num_frequencies = 6;
  cfg.hidden_width = 64;
  cfg.hidden_layers = 3;
  cfg.color_hidden_width = 16;
  Field f(cfg, 2024);
  Rng rng(2024);

  CHECK_THROWS_AS((void)f.init_sphere(0.0, 10, rng), diff::TapeError);

  const double mae = f.init_sphere(0.5, 8000, rng);
  CHECK(mae < 0.02);
  CHECK(std::abs(f.sdf_at(0.0, 0.0, 0.0) - (-0.5)) < 0.02);
  // Points on the sphere surface are near the zero level set.
  Rng surf(77);
  double worst = 0.0;
  for (int i = 0; i < 32; ++i) {
    double d[3] = {surf.normal(), surf.normal(), surf.normal()};
    const double nn = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    const double s = f.sdf_at(0.5 * d[0] / nn, 0.5 * d[1] / nn, 0.5 * d[2] / nn);
    worst = std::max(worst, std::abs(s));
  }
  CHECK(worst < 0.02);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  FieldConfig cfg = small_config();
  Field f(cfg, 31);
  const std::string path = temp_path("textmesh_field_ckpt.bin");

  // Values are float32 at the persistence boundary: quantize, save, load.
  quantize_to_f32(f.params());
  save_params(path, f.params());
  diff::ParamVector loaded = load_params(path);

  REQUIRE(loaded.size() == f.params().size());
  auto a = f.params().values();
  auto b = loaded.values();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);  // exact

  REQUIRE(loaded.segments().size() == f.params().segments().size());
  for (std::size_t i = 0; i < loaded.segments().size(); ++i) {
    CHECK(loaded.segments()[i].name == f.params().segments()[i].name);
    CHECK(loaded.segments()[i].offset == f.params().segments()[i].offset);
    CHECK(loaded.segments()[i].size == f.params().segments()[i].size);
  }

  // Rehydrating a field from a checkpoint validates the layout.
  Field g = Field::from_params(cfg, std::move(loaded));
  CHECK(g.sdf_at(0.1, 0.2, 0.3) == f.sdf_at(0.1, 0.2, 0.3));

  FieldConfig other = cfg;
  other.hidden_width = 8;
  CHECK_THROWS_AS((void)Field::from_params(other, load_params(path)), diff::TapeError);

  std::remove(path.c_str());
}
