#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "textmesh/camera.hpp"
#include "textmesh/guidance.hpp"
#include "textmesh/guidance_server.hpp"
#include "textmesh/image.hpp"
#include "textmesh/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <thread>
#include <vector>

using namespace textmesh;
using namespace textmesh::guidance;

namespace {

std::vector<double> random_values(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> out(n);
  for (auto& v : out) v = rng.uniform(lo, hi);
  return out;
}

std::vector<double> random_normals(Rng& rng, std::size_t n) {
  std::vector<double> out(n);
  for (auto& v : out) v = rng.normal();
  return out;
}

render::Camera orbit_camera(double azimuth_deg, double elevation_deg) {
  const auto pos = render::orbit_position(azimuth_deg, elevation_deg, 2.0);
  return render::make_lookat_camera(pos, {0.0, 0.0, 0.0}, 76.8, 64, 64, 0.25, 3.75);
}

// Self-normalized importance-sampling estimate of E[eps | noisy] for scalar
// data x ~ N(mu, s^2), eps ~ N(0, 1), noisy = alpha x + sigma eps. Written
// from the likelihood directly, independent of the closed form under test:
// p(eps | noisy) is proportional to N((noisy - sigma eps) / alpha; mu, s^2).
double posterior_noise_oracle(double noisy, double mu, double s, double alpha, double sigma,
                              std::size_t draws, Rng& rng) {
  double weight_sum = 0.0;
  double weighted_eps = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    const double eps = rng.normal();
    const double x = (noisy - sigma * eps) / alpha;
    const double z = (x - mu) / s;
    const double w = std::exp(-0.5 * z * z);
    weight_sum += w;
    weighted_eps += w * eps;
  }
  REQUIRE(weight_sum > 0.0);
  return weighted_eps / weight_sum;
}

}  // namespace

TEST_CASE("noise schedule: alpha^2 + sigma^2 == 1 across the whole range") {
  NoiseSchedule schedule;
  schedule.validate();
  Rng rng(401);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double t = schedule.sample_t(rng);
    const double a = schedule.alpha(t);
    const double s = schedule.sigma(t);
    worst = std::max(worst, std::abs(a * a + s * s - 1.0));
  }
  CHECK(worst <= 1e-15);
}

TEST_CASE("noise schedule: sigma is the identity on the clamped domain") {
  NoiseSchedule schedule;
  CHECK(schedule.sigma(0.5) == 0.5);
  CHECK(schedule.sigma(0.02) == 0.02);
  CHECK(schedule.sigma(0.98) == 0.98);
  // Clamping: outside the domain the schedule pins to the endpoints, so the
  // noise level is near zero at the start and near one at the end.
  CHECK(schedule.sigma(0.0) == 0.02);
  CHECK(schedule.sigma(1.0) == 0.98);
  CHECK(schedule.sigma(0.001) == 0.02);
  // Monotone over sorted samples.
  Rng rng(402);
  std::vector<double> ts = random_values(rng, 200, 0.0, 1.0);
  std::sort(ts.begin(), ts.end());
  for (std::size_t i = 1; i < ts.size(); ++i) {
    CHECK(schedule.sigma(ts[i]) >= schedule.sigma(ts[i - 1]));
  }
}

TEST_CASE("noise schedule: weighting modes") {
  NoiseSchedule schedule;
  CHECK(schedule.weight(0.73) == 1.0);
  schedule.weighting = SdsWeighting::sigma2;
  CHECK(schedule.weight(0.73) == doctest::Approx(0.73 * 0.73).epsilon(1e-15));
  schedule.weighting = SdsWeighting::sigma3;
  CHECK(schedule.weight(0.73) == doctest::Approx(0.73 * 0.73 * 0.73).epsilon(1e-15));
}

TEST_CASE("noise schedule: sample_t stays in range and is deterministic") {
  NoiseSchedule schedule;
  Rng a(7), b(7);
  for (int i = 0; i < 500; ++i) {
    const double ta = schedule.sample_t(a);
    CHECK(ta >= schedule.t_min);
    CHECK(ta <= schedule.t_max);
    CHECK(ta == schedule.sample_t(b));
  }
}

TEST_CASE("noise schedule: invalid ranges are rejected") {
  NoiseSchedule schedule;
  schedule.t_min = 0.0;
  CHECK_THROWS_AS(schedule.validate(), GuidanceError);
  schedule = NoiseSchedule{};
  schedule.t_max = 1.0;
  CHECK_THROWS_AS(schedule.validate(), GuidanceError);
  schedule = NoiseSchedule{};
  schedule.t_min = 0.6;
  schedule.t_max = 0.4;
  CHECK_THROWS_AS(schedule.validate(), GuidanceError);
}

TEST_CASE("add_noise: endpoint behavior") {
  NoiseSchedule schedule;
  Rng rng(403);
  const auto image = random_values(rng, 48, 0.0, 1.0);
  const auto eps = random_normals(rng, 48);

  SUBCASE("zero noise leaves exactly the attenuated image") {
    const std::vector<double> zero(image.size(), 0.0);
    const auto out = add_noise(image, zero, 0.31, schedule);
    const double a_t = schedule.alpha(0.31);
    for (std::size_t i = 0; i < image.size(); ++i) {
      CHECK(out[i] == a_t * image[i]);
    }
  }

  SUBCASE("vanishing sigma returns the image") {
    NoiseSchedule tiny;
    tiny.t_min = 1e-12;
    tiny.validate();
    const auto out = add_noise(image, eps, 1e-12, tiny);
    for (std::size_t i = 0; i < image.size(); ++i) {
      CHECK(out[i] == doctest::Approx(image[i]).epsilon(1e-10));
    }
  }

  SUBCASE("shape mismatch is rejected") {
    const std::vector<double> short_eps(image.size() - 1, 0.0);
    CHECK_THROWS_AS((void)add_noise(image, short_eps, 0.5, schedule), GuidanceShapeError);
  }
}

TEST_CASE("add_noise: sample variance over draws matches sigma^2") {
  NoiseSchedule schedule;
  const double t = 0.7;
  const double image_value = 0.3;
  const std::vector<double> image{image_value};
  Rng rng(404);
  const std::size_t draws = 10000;
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    const std::vector<double> eps{rng.normal()};
    const double v = add_noise(image, eps, t, schedule)[0];
    sum += v;
    sum_sq += v * v;
  }
  const double mean = sum / draws;
  const double var = sum_sq / draws - mean * mean;
  const double expected = schedule.sigma(t) * schedule.sigma(t);
  CHECK(var == doctest::Approx(expected).epsilon(0.03));
  CHECK(mean == doctest::Approx(schedule.alpha(t) * image_value).epsilon(0.05));
}

TEST_CASE("cfg_combine: endpoints and affinity") {
  Rng rng(405);
  const auto cond = random_normals(rng, 64);
  const auto uncond = random_normals(rng, 64);

  SUBCASE("weight one returns the conditional prediction exactly") {
    const auto out = cfg_combine(cond, uncond, 1.0);
    CHECK(out == cond);
  }
  SUBCASE("weight zero returns the unconditional prediction exactly") {
    const auto out = cfg_combine(cond, uncond, 0.0);
    CHECK(out == uncond);
  }
  SUBCASE("equal predictions are a fixed point for any weight") {
    for (double w : {0.0, 0.3, 1.0, 7.5, 100.0}) {
      const auto out = cfg_combine(cond, cond, w);
      CHECK(out == cond);
    }
  }
  SUBCASE("affine in the weight: midpoint of weights is midpoint of outputs") {
    for (int trial = 0; trial < 20; ++trial) {
      const double wa = rng.uniform(0.0, 30.0);
      const double wb = rng.uniform(0.0, 30.0);
      const auto lo = cfg_combine(cond, uncond, wa);
      const auto hi = cfg_combine(cond, uncond, wb);
      const auto mid = cfg_combine(cond, uncond, 0.5 * (wa + wb));
      for (std::size_t i = 0; i < mid.size(); ++i) {
        CHECK(mid[i] == doctest::Approx(0.5 * (lo[i] + hi[i])).epsilon(1e-12));
      }
    }
  }
  SUBCASE("shape mismatch and negative weights are rejected") {
    const std::vector<double> short_u(uncond.begin(), uncond.end() - 1);
    CHECK_THROWS_AS((void)cfg_combine(cond, short_u, 1.0), GuidanceShapeError);
    CHECK_THROWS_AS((void)cfg_combine(cond, uncond, -0.1), GuidanceError);
  }
}

TEST_CASE("gaussian prior: on-mean input predicts exactly zero noise") {
  NoiseSchedule schedule;
  Rng rng(406);
  const ImageShape shape{4, 5, 3};
  const auto mu = random_values(rng, shape.size(), 0.0, 1.0);
  GaussianPriorScore model(mu, shape, 0.7, schedule);

  const double t = 0.44;
  const double a_t = schedule.alpha(t);
  std::vector<double> noisy(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) noisy[i] = a_t * mu[i];
  const auto eps = model.predict_noise(noisy, shape, t, Conditioning{});
  for (double v : eps) CHECK(v == 0.0);
}

TEST_CASE("gaussian prior: delta prior recovers the injected noise") {
  NoiseSchedule schedule;
  Rng rng(407);
  const ImageShape shape{3, 3, 3};
  const auto mu = random_values(rng, shape.size(), 0.0, 1.0);
  GaussianPriorScore model(mu, shape, 1e-9, schedule);

  for (double t : {0.05, 0.3, 0.6, 0.95}) {
    const auto eps0 = random_normals(rng, shape.size());
    const auto noisy = add_noise(mu, eps0, t, schedule);
    const auto eps = model.predict_noise(noisy, shape, t, Conditioning{});
    for (std::size_t i = 0; i < eps.size(); ++i) {
      CHECK(eps[i] == doctest::Approx(eps0[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("gaussian prior: closed form matches the importance-sampled posterior") {
  NoiseSchedule schedule;
  Rng rng(408);
  const ImageShape shape{1, 1, 1};
  for (int trial = 0; trial < 5; ++trial) {
    const double mu = rng.uniform(-0.5, 0.5);
    const double s = rng.uniform(0.4, 1.5);
    const double t = rng.uniform(0.25, 0.85);
    const double alpha = schedule.alpha(t);
    const double sigma = schedule.sigma(t);
    // Off-mean observation so the expected noise is order one.
    const double noisy = alpha * mu + sigma * 1.3 + 0.2;

    GaussianPriorScore model({mu}, shape, s, schedule);
    const double predicted =
        model.predict_noise(std::vector<double>{noisy}, shape, t, Conditioning{})[0];
    const double estimated = posterior_noise_oracle(noisy, mu, s, alpha, sigma, 100000, rng);
    CHECK(predicted == doctest::Approx(estimated).epsilon(0.02));
  }
}

TEST_CASE("gaussian prior: construction and shape validation") {
  const ImageShape shape{2, 2, 1};
  const std::vector<double> mu(4, 0.5);
  CHECK_THROWS_AS(GaussianPriorScore(mu, shape, 0.0), GuidanceError);
  CHECK_THROWS_AS(GaussianPriorScore(mu, shape, -1.0), GuidanceError);
  CHECK_THROWS_AS(GaussianPriorScore(std::vector<double>(3, 0.5), shape, 1.0),
                  GuidanceShapeError);

  GaussianPriorScore model(mu, shape, 1.0);
  CHECK_FALSE(model.caps().accepts_depth);
  CHECK_FALSE(model.caps().oracle_true_noise);
  const std::vector<double> wrong(5, 0.0);
  CHECK_THROWS_AS((void)model.predict_noise(wrong, ImageShape{5, 1, 1}, 0.5, Conditioning{}),
                  GuidanceShapeError);
}

TEST_CASE("gaussian prior: concurrent predictions agree with serial ones") {
  NoiseSchedule schedule;
  Rng rng(409);
  const ImageShape shape{8, 8, 3};
  const auto mu = random_values(rng, shape.size(), 0.0, 1.0);
  GaussianPriorScore model(mu, shape, 0.5, schedule);

  std::vector<std::vector<double>> inputs;
  std::vector<std::vector<double>> serial;
  for (int i = 0; i < 4; ++i) {
    inputs.push_back(random_values(rng, shape.size(), -1.0, 2.0));
    serial.push_back(model.predict_noise(inputs.back(), shape, 0.5, Conditioning{}));
  }
  std::vector<std::vector<double>> parallel(4);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) {
    threads.emplace_back([&, i] {
      parallel[i] = model.predict_noise(inputs[i], shape, 0.5, Conditioning{});
    });
  }
  for (auto& th : threads) th.join();
  for (int i = 0; i < 4; ++i) CHECK(parallel[i] == serial[i]);
}

TEST_CASE("true-noise oracle echoes the observed noise") {
  TrueNoiseScore model;
  CHECK(model.caps().oracle_true_noise);
  const ImageShape shape{2, 3, 1};
  Rng rng(410);
  const auto eps = random_normals(rng, shape.size());
  const auto noisy = random_values(rng, shape.size(), -1.0, 1.0);

  CHECK_THROWS_AS((void)model.predict_noise(noisy, shape, 0.5, Conditioning{}), GuidanceError);
  model.observe_true_noise(eps);
  CHECK(model.predict_noise(noisy, shape, 0.5, Conditioning{}) == eps);
}

TEST_CASE("view conditioning: quadrants, overhead, and unconditional prompts") {
  const std::string prompt = "a ceramic mug";

  SUBCASE("front quadrant") {
    const auto cond = view_conditioning(prompt, orbit_camera(0.0, 30.0));
    CHECK(cond.view_tag == ViewTag::front);
    CHECK(cond.prompt == "a ceramic mug, front view");
    CHECK(view_conditioning(prompt, orbit_camera(-44.0, 0.0)).view_tag == ViewTag::front);
    CHECK(view_conditioning(prompt, orbit_camera(44.0, -50.0)).view_tag == ViewTag::front);
  }
  SUBCASE("side quadrants on both sides") {
    CHECK(view_conditioning(prompt, orbit_camera(90.0, 10.0)).view_tag == ViewTag::side);
    CHECK(view_conditioning(prompt, orbit_camera(-90.0, 10.0)).view_tag == ViewTag::side);
    CHECK(view_conditioning(prompt, orbit_camera(46.0, 10.0)).view_tag == ViewTag::side);
    CHECK(view_conditioning(prompt, orbit_camera(-134.0, 10.0)).view_tag == ViewTag::side);
    CHECK(view_conditioning(prompt, orbit_camera(90.0, 10.0)).prompt ==
          "a ceramic mug, side view");
  }
  SUBCASE("back quadrant") {
    const auto cond = view_conditioning(prompt, orbit_camera(180.0, 20.0));
    CHECK(cond.view_tag == ViewTag::back);
    CHECK(cond.prompt == "a ceramic mug, back view");
    CHECK(view_conditioning(prompt, orbit_camera(-150.0, 20.0)).view_tag == ViewTag::back);
    CHECK(view_conditioning(prompt, orbit_camera(150.0, 20.0)).view_tag == ViewTag::back);
  }
  SUBCASE("high elevation wins over any azimuth") {
    for (double az : {0.0, 90.0, 180.0, -120.0}) {
      const auto cond = view_conditioning(prompt, orbit_camera(az, 75.0));
      CHECK(cond.view_tag == ViewTag::overhead);
      CHECK(cond.prompt == "a ceramic mug, overhead view");
    }
    CHECK(view_conditioning(prompt, orbit_camera(0.0, 59.0)).view_tag == ViewTag::front);
  }
  SUBCASE("unconditional turns the prompt empty") {
    auto cond = view_conditioning(prompt, orbit_camera(0.0, 0.0));
    CHECK(cond.effective_prompt() == "a ceramic mug, front view");
    const auto un = cond.as_uncond();
    CHECK(un.uncond);
    CHECK(un.effective_prompt().empty());
  }
}

TEST_CASE("depth normalization maps the finite range onto [0, 1]") {
  const std::vector<double> depth{2.0, 3.0, 2.5, 4.0};
  const auto unit = normalize_depth_unit(depth);
  CHECK(unit[0] == 0.0);
  CHECK(unit[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(unit[2] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(unit[3] == 1.0);

  const std::vector<double> flat{1.5, 1.5, 1.5};
  for (double v : normalize_depth_unit(flat)) CHECK(v == 0.0);

  const std::vector<double> holes{std::nan(""), 1.0, 3.0};
  const auto filled = normalize_depth_unit(holes);
  CHECK(filled[0] == 0.0);
  CHECK(filled[1] == 0.0);
  CHECK(filled[2] == 1.0);
}

TEST_CASE("base64 matches the reference vectors") {
  auto enc = [](std::string_view s) {
    return base64_encode(
        std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
  };
  CHECK(enc("") == "");
  CHECK(enc("f") == "Zg==");
  CHECK(enc("fo") == "Zm8=");
  CHECK(enc("foo") == "Zm9v");
  CHECK(enc("foob") == "Zm9vYg==");
  CHECK(enc("fooba") == "Zm9vYmE=");
  CHECK(enc("foobar") == "Zm9vYmFy");

  auto dec = [](std::string_view s) {
    const auto bytes = base64_decode(s);
    return std::string(bytes.begin(), bytes.end());
  };
  CHECK(dec("Zm9vYmFy") == "foobar");
  CHECK(dec("Zg==") == "f");
  CHECK(dec("") == "");

  CHECK_THROWS_AS((void)base64_decode("abc"), GuidanceProtocolError);
  CHECK_THROWS_AS((void)base64_decode("ab!d"), GuidanceProtocolError);
  CHECK_THROWS_AS((void)base64_decode("=abc"), GuidanceProtocolError);
  CHECK_THROWS_AS((void)base64_decode("Zg=a"), GuidanceProtocolError);
}

TEST_CASE("base64 round-trips random byte strings") {
  Rng rng(411);
  for (std::size_t n = 0; n <= 65; ++n) {
    std::vector<unsigned char> bytes(n);
    for (auto& b : bytes) b = static_cast<unsigned char>(rng.below(256));
    const auto text = base64_encode(bytes);
    CHECK(base64_decode(text) == bytes);
  }
}

TEST_CASE("float payloads use little-endian 32-bit encoding") {
  // 1.0f is 3F800000, little-endian bytes 00 00 80 3F.
  CHECK(encode_f32le_base64(std::vector<double>{1.0}) == "AACAPw==");
  // 0.5f is 3F000000, little-endian bytes 00 00 00 3F.
  CHECK(encode_f32le_base64(std::vector<double>{0.5}) == "AAAAPw==");

  Rng rng(412);
  const auto values = random_values(rng, 113, -4.0, 4.0);
  const auto decoded = decode_f32le_base64(encode_f32le_base64(values));
  REQUIRE(decoded.size() == values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    CHECK(decoded[i] == round_to_float32(values[i]));
  }
}

TEST_CASE("remote client: zero-noise loopback round-trips the shape") {
  MockGuidanceServer server;
  server.start();

  RemoteClientOptions opt;
  opt.endpoint = server.url();
  opt.timeout_seconds = 5.0;
  RemoteGuidanceClient client(opt);
  CHECK(client.caps().accepts_depth);

  Rng rng(413);
  const ImageShape shape{8, 6, 3};
  const auto image = random_values(rng, shape.size(), -1.0, 2.0);
  const auto eps = client.predict_noise(image, shape, 0.5, Conditioning{"a mug"});
  REQUIRE(eps.size() == shape.size());
  for (double v : eps) CHECK(v == 0.0);
  CHECK(server.request_count() == 1);
  CHECK(client.stats().requests == 1);
  CHECK(client.stats().retries == 0);
}

TEST_CASE("remote client: prior mode matches the local closed form bit for bit") {
  MockServerConfig cfg;
  cfg.mode = MockServerConfig::Mode::prior;
  cfg.prior_mu = 0.5;
  cfg.prior_s = 0.2;
  MockGuidanceServer server(cfg);
  server.start();

  RemoteClientOptions opt;
  opt.endpoint = server.url();
  RemoteGuidanceClient client(opt);

  Rng rng(414);
  const ImageShape shape{4, 4, 3};
  const auto image = random_values(rng, shape.size(), -0.5, 1.5);
  const double t = 0.37;
  const auto remote = client.predict_noise(image, shape, t, Conditioning{"a mug"});

  // The wire quantizes to 32-bit floats on both legs; reproduce that exactly.
  std::vector<double> quantized(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) quantized[i] = round_to_float32(image[i]);
  GaussianPriorScore local(std::vector<double>(shape.size(), cfg.prior_mu), shape, cfg.prior_s);
  const auto expected = local.predict_noise(quantized, shape, t, Conditioning{});
  REQUIRE(remote.size() == expected.size());
  for (std::size_t i = 0; i < remote.size(); ++i) {
    CHECK(remote[i] == round_to_float32(expected[i]));
  }
}

TEST_CASE("remote client: depth is transmitted and validated") {
  MockGuidanceServer server;
  server.start();
  RemoteClientOptions opt;
  opt.endpoint = server.url();
  RemoteGuidanceClient client(opt);

  Rng rng(415);
  const ImageShape shape{4, 4, 3};
  const auto image = random_values(rng, shape.size(), 0.0, 1.0);
  const auto raw_depth = random_values(rng, shape.height * shape.width, 0.8, 2.9);
  const auto depth = normalize_depth_unit(raw_depth);
  const auto eps = client.predict_noise(image, shape, 0.5, Conditioning{"a mug"}, depth);
  CHECK(eps.size() == shape.size());

  const std::vector<double> bad_depth(7, 0.5);
  CHECK_THROWS_AS(
      (void)client.predict_noise(image, shape, 0.5, Conditioning{"a mug"}, bad_depth),
      GuidanceShapeError);
}

TEST_CASE("remote client: out-of-domain pixels are clamped before transmission") {
  MockGuidanceServer server;
  server.start();
  RemoteClientOptions opt;
  opt.endpoint = server.url();
  RemoteGuidanceClient client(opt);

  const ImageShape shape{1, 2, 1};
  // The mock rejects any image value outside [-4, 4] with HTTP 400, so a
  // successful round-trip proves the client clipped these.
  const std::vector<double> image{9.0, -7.5};
  const auto eps = client.predict_noise(image, shape, 0.5, Conditioning{});
  CHECK(eps.size() == shape.size());
  CHECK(client.stats().clamped_values == 2);
}

TEST_CASE("remote client: wrong response shape raises a typed shape error") {
  MockServerConfig cfg;
  cfg.wrong_shape = true;
  MockGuidanceServer server(cfg);
  server.start();

  RemoteClientOptions opt;
  opt.endpoint = server.url();
  RemoteGuidanceClient client(opt);

  const ImageShape shape{2, 2, 3};
  const std::vector<double> image(shape.size(), 0.25);
  CHECK_THROWS_AS((void)client.predict_noise(image, shape, 0.5, Conditioning{}),
                  GuidanceShapeError);
}

TEST_CASE("remote client: malformed response raises a typed protocol error") {
  MockServerConfig cfg;
  cfg.malformed = true;
  MockGuidanceServer server(cfg);
  server.start();

  RemoteClientOptions opt;
  opt.endpoint = server.url();
  RemoteGuidanceClient client(opt);

  const ImageShape shape{2, 2, 1};
  const std::vector<double> image(shape.size(), 0.25);
  CHECK_THROWS_AS((void)client.predict_noise(image, shape, 0.5, Conditioning{}),
                  GuidanceProtocolError);
}

TEST_CASE("remote client: transient failures are retried with backoff") {
  MockServerConfig cfg;
  cfg.fail_first = 2;
  MockGuidanceServer server(cfg);
  server.start();

  RemoteClientOptions opt;
  opt.endpoint = server.url();
  opt.max_retries = 3;
  opt.backoff_seconds = 0.01;
  RemoteGuidanceClient client(opt);

  const ImageShape shape{2, 2, 1};
  const std::vector<double> image(shape.size(), 0.25);
  const auto eps = client.predict_noise(image, shape, 0.5, Conditioning{});
  CHECK(eps.size() == shape.size());
  CHECK(client.stats().retries == 2);
  CHECK(server.request_count() == 3);
}

TEST_CASE("remote client: persistent server failures surface as transport errors") {
  MockServerConfig cfg;
  cfg.fail_first = 10;
  MockGuidanceServer server(cfg);
  server.start();

  RemoteClientOptions opt;
  opt.endpoint = server.url();
  opt.max_retries = 2;
  opt.backoff_seconds = 0.005;
  RemoteGuidanceClient client(opt);

  const ImageShape shape{1, 1, 1};
  const std::vector<double> image{0.5};
  CHECK_THROWS_AS((void)client.predict_noise(image, shape, 0.5, Conditioning{}),
                  GuidanceTransportError);
  CHECK(server.request_count() == 3);  // initial attempt plus two retries
}

TEST_CASE("remote client: a silent server raises a typed timeout error") {
  MockServerConfig cfg;
  cfg.delay_seconds = 0.8;
  MockGuidanceServer server(cfg);
  server.start();

  RemoteClientOptions opt;
  opt.endpoint = server.url();
  opt.timeout_seconds = 0.15;
  opt.max_retries = 0;
  RemoteGuidanceClient client(opt);

  const ImageShape shape{1, 1, 1};
  const std::vector<double> image{0.5};
  const auto start = std::chrono::steady_clock::now();
  CHECK_THROWS_AS((void)client.predict_noise(image, shape, 0.5, Conditioning{}),
                  GuidanceTimeoutError);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(elapsed < 0.7);  // gave up at the timeout, not at the server's leisure
}

TEST_CASE("remote client: unreachable endpoints surface as transport errors") {
  RemoteClientOptions opt;
  opt.endpoint = "http://127.0.0.1:1";  // reserved port, nothing listens here
  opt.timeout_seconds = 0.5;
  opt.max_retries = 0;
  RemoteGuidanceClient client(opt);

  const ImageShape shape{1, 1, 1};
  const std::vector<double> image{0.5};
  CHECK_THROWS((void)client.predict_noise(image, shape, 0.5, Conditioning{}));
}

TEST_CASE("remote client: concurrent requests under the in-flight cap") {
  MockGuidanceServer server;
  server.start();

  RemoteClientOptions opt;
  opt.endpoint = server.url();
  opt.max_in_flight = 2;
  RemoteGuidanceClient client(opt);

  const ImageShape shape{4, 4, 3};
  std::vector<int> ok(4, 0);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) {
    threads.emplace_back([&, i] {
      const std::vector<double> image(shape.size(), 0.1 * (i + 1));
      const auto eps = client.predict_noise(image, shape, 0.5, Conditioning{"a mug"});
      ok[i] = eps.size() == shape.size() &&
              std::all_of(eps.begin(), eps.end(), [](double v) { return v == 0.0; });
    });
  }
  for (auto& th : threads) th.join();
  for (int i = 0; i < 4; ++i) CHECK(ok[i] == 1);
  CHECK(server.request_count() == 4);
  CHECK(client.stats().requests == 4);
}

TEST_CASE("remote client: option validation") {
  RemoteClientOptions opt;
  CHECK_THROWS_AS(RemoteGuidanceClient{opt}, GuidanceError);  // empty endpoint
  opt.endpoint = "http://127.0.0.1:80";
  opt.timeout_seconds = 0.0;
  CHECK_THROWS_AS(RemoteGuidanceClient{opt}, GuidanceError);
  opt.timeout_seconds = 1.0;
  opt.max_in_flight = 0;
  CHECK_THROWS_AS(RemoteGuidanceClient{opt}, GuidanceError);
}

TEST_CASE("guidance errors share the library error taxonomy") {
  try {
    throw GuidanceShapeError("boom");
  } catch (const GuidanceError& e) {
    CHECK(std::string(e.what()) == "boom");
  }
  try {
    throw GuidanceTimeoutError("slow");
  } catch (const Error& e) {
    CHECK(std::string(e.what()) == "slow");
  }
}
