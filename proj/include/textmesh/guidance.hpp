#pragma once

#include "textmesh/camera.hpp"
#include "textmesh/error.hpp"
#include "textmesh/rng.hpp"

#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

namespace textmesh::guidance {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class GuidanceError : public Error {
 public:
  using Error::Error;
};

// The remote backend did not answer within the configured timeout.
class GuidanceTimeoutError : public GuidanceError {
 public:
  using GuidanceError::GuidanceError;
};

// The connection itself failed (refused, reset, unreachable).
class GuidanceTransportError : public GuidanceError {
 public:
  using GuidanceError::GuidanceError;
};

// The peer answered but the payload violates the wire contract
// (unparseable JSON, missing fields, bad base64, mismatched request id,
// non-finite values, HTTP error status).
class GuidanceProtocolError : public GuidanceError {
 public:
  using GuidanceError::GuidanceError;
};

// An array shape does not match what the operation requires.
class GuidanceShapeError : public GuidanceError {
 public:
  using GuidanceError::GuidanceError;
};

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

enum class SdsWeighting { one, sigma2, sigma3 };

// Continuous-time schedule sigma(t) = t restricted to [t_min, t_max], so the
// noise level is near zero at the start of the diffusion range and near one
// at the end. alpha(t) = sqrt(1 - sigma(t)^2), so alpha^2 + sigma^2 == 1.
struct NoiseSchedule {
  double t_min = 0.02;
  double t_max = 0.98;
  SdsWeighting weighting = SdsWeighting::one;
  double weight_scale = 1.0;  // constant multiplier on w(t); 0 disables SDS

  // 0 < t_min < t_max < 1; weight_scale finite and non-negative.
  void validate() const;
  // Clamps an arbitrary t into the schedule domain.
  double clamp_t(double t) const;
  double sigma(double t) const;
  double alpha(double t) const;
  // Per-step weighting w(t): weight_scale times 1, sigma^2, or sigma^3.
  double weight(double t) const;
  // Uniform draw over [t_min, t_max].
  double sample_t(Rng& rng) const;
};

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

enum class ViewTag { front, side, back, overhead };

const char* view_tag_name(ViewTag tag);

struct Conditioning {
  std::string prompt;
  ViewTag view_tag = ViewTag::front;
  bool uncond = false;

  // The prompt actually transmitted: empty when uncond is set.
  std::string effective_prompt() const { return uncond ? std::string() : prompt; }
  Conditioning as_uncond() const {
    Conditioning c = *this;
    c.uncond = true;
    return c;
  }
};

// Appends a view-dependent suffix to the prompt based on where the camera
// sits on the viewing sphere (the camera is assumed to look at the origin).
// Quadrant boundaries at +/-45 and +/-135 degrees of azimuth; elevations
// above 60 degrees count as overhead regardless of azimuth.
Conditioning view_conditioning(const std::string& prompt, const render::Camera& camera);

// ---------------------------------------------------------------------------
// Score models
// ---------------------------------------------------------------------------

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t size() const { return height * width * channels; }
  bool operator==(const ImageShape&) const = default;
};

struct ScoreModelCaps {
  bool accepts_depth = false;
  // True for test oracles that echo back the exact noise previously passed
  // to observe_true_noise.
  bool oracle_true_noise = false;
};

// Pluggable noise predictor: given a noised image and the diffusion time,
// estimate the noise component. Output length always equals input length.
class ScoreModel {
 public:
  virtual ~ScoreModel() = default;

  virtual ScoreModelCaps caps() const = 0;

  // `noisy` is row-major height*width*channels; `depth` is either empty or
  // height*width values in [0, 1].
  virtual std::vector<double> predict_noise(std::span<const double> noisy,
                                            const ImageShape& shape, double t,
                                            const Conditioning& cond,
                                            std::span<const double> depth = {}) = 0;

  // Test seam: called with the freshly drawn noise before predict_noise so
  // oracle models can echo it. Real backends ignore it.
  virtual void observe_true_noise(std::span<const double> /*eps*/) {}
};

// Closed-form optimal denoiser for data distributed as N(mu, s^2 I):
// predicted noise = sigma_t (noisy - alpha_t mu) / (alpha_t^2 s^2 + sigma_t^2).
// Pure and thread-safe; ignores conditioning and depth.
class GaussianPriorScore : public ScoreModel {
 public:
  GaussianPriorScore(std::vector<double> mu, ImageShape shape, double s,
                     NoiseSchedule schedule = {});

  ScoreModelCaps caps() const override { return {}; }
  std::vector<double> predict_noise(std::span<const double> noisy, const ImageShape& shape,
                                    double t, const Conditioning& cond,
                                    std::span<const double> depth = {}) override;

  const std::vector<double>& mu() const { return mu_; }
  const ImageShape& shape() const { return shape_; }
  double prior_std() const { return s_; }

 private:
  std::vector<double> mu_;
  ImageShape shape_;
  double s_ = 1.0;
  NoiseSchedule schedule_;
};

// Test oracle: predicts exactly the noise most recently observed via
// observe_true_noise, making the SDS residual identically zero.
class TrueNoiseScore : public ScoreModel {
 public:
  ScoreModelCaps caps() const override { return {.accepts_depth = false, .oracle_true_noise = true}; }
  void observe_true_noise(std::span<const double> eps) override;
  std::vector<double> predict_noise(std::span<const double> noisy, const ImageShape& shape,
                                    double t, const Conditioning& cond,
                                    std::span<const double> depth = {}) override;

 private:
  std::vector<double> last_;
  std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

// Forward diffusion: alpha(t) * image + sigma(t) * eps, elementwise.
std::vector<double> add_noise(std::span<const double> image, std::span<const double> eps,
                              double t, const NoiseSchedule& schedule);

// Classifier-free guidance: eps_uncond + w_g * (eps_cond - eps_uncond).
std::vector<double> cfg_combine(std::span<const double> eps_cond,
                                std::span<const double> eps_uncond, double w_g);

// Min-max normalization over the finite entries, mapping them to [0, 1].
// Non-finite entries and degenerate (constant) inputs map to 0.
std::vector<double> normalize_depth_unit(std::span<const double> depth);

// ---------------------------------------------------------------------------
// Wire encoding (shared by client and mock server)
// ---------------------------------------------------------------------------

std::string base64_encode(std::span<const unsigned char> bytes);
// Throws GuidanceProtocolError on characters outside the alphabet or bad
// padding.
std::vector<unsigned char> base64_decode(std::string_view text);

// Arrays travel as base64-encoded little-endian 32-bit floats.
std::string encode_f32le_base64(std::span<const double> values);
std::vector<double> decode_f32le_base64(std::string_view text);

// ---------------------------------------------------------------------------
// Remote client
// ---------------------------------------------------------------------------

struct RemoteClientOptions {
  std::string endpoint;  // e.g. "http://127.0.0.1:8731"
  double timeout_seconds = 10.0;
  int max_retries = 3;            // additional attempts after the first
  double backoff_seconds = 0.05;  // doubled after every failed attempt
  int max_in_flight = 4;          // concurrent request cap

  void validate() const;
};

// HTTP bridge to a real diffusion backend. One POST per prediction; image
// pixels are clamped into the protocol domain [-4, 4] before transmission;
// transient failures (transport, 5xx) are retried with exponential backoff,
// contract violations (shape, malformed payload) are raised immediately and
// never papered over with zeros.
class RemoteGuidanceClient : public ScoreModel {
 public:
  explicit RemoteGuidanceClient(RemoteClientOptions options);
  ~RemoteGuidanceClient() override;

  ScoreModelCaps caps() const override { return {.accepts_depth = true, .oracle_true_noise = false}; }
  std::vector<double> predict_noise(std::span<const double> noisy, const ImageShape& shape,
                                    double t, const Conditioning& cond,
                                    std::span<const double> depth = {}) override;

  struct Stats {
    std::uint64_t requests = 0;        // predictions attempted
    std::uint64_t retries = 0;         // extra attempts beyond the first
    std::uint64_t clamped_values = 0;  // pixels clipped into [-4, 4]
  };
  Stats stats() const;

  const RemoteClientOptions& options() const { return options_; }

 private:
  struct InFlightGate;

  RemoteClientOptions options_;
  std::unique_ptr<InFlightGate> gate_;
  mutable std::mutex stats_mutex_;
  Stats stats_;
  std::uint64_t next_request_id_ = 1;
};

}  // namespace textmesh::guidance
