#include "textmesh/guidance.hpp"

#include <httplib.h>

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <limits>
#include <sstream>
#include <thread>

namespace textmesh::guidance {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

void NoiseSchedule::validate() const {
  if (!(t_min > 0.0) || !(t_max < 1.0) || !(t_min < t_max)) {
    std::ostringstream os;
    os << "noise schedule requires 0 < t_min < t_max < 1, got [" << t_min << ", " << t_max << "]";
    throw GuidanceError(os.str());
  }
  if (!std::isfinite(weight_scale) || weight_scale < 0.0) {
    throw GuidanceError("noise schedule: weight scale must be finite and non-negative");
  }
}

double NoiseSchedule::clamp_t(double t) const {
  if (!std::isfinite(t)) throw GuidanceError("noise schedule: non-finite t");
  return std::clamp(t, t_min, t_max);
}

double NoiseSchedule::sigma(double t) const { return clamp_t(t); }

double NoiseSchedule::alpha(double t) const {
  const double s = sigma(t);
  return std::sqrt(1.0 - s * s);
}

double NoiseSchedule::weight(double t) const {
  const double s = sigma(t);
  switch (weighting) {
    case SdsWeighting::one:
      return weight_scale;
    case SdsWeighting::sigma2:
      return weight_scale * s * s;
    case SdsWeighting::sigma3:
      return weight_scale * s * s * s;
  }
  throw GuidanceError("noise schedule: unknown weighting mode");
}

double NoiseSchedule::sample_t(Rng& rng) const { return rng.uniform(t_min, t_max); }

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

const char* view_tag_name(ViewTag tag) {
  switch (tag) {
    case ViewTag::front:
      return "front";
    case ViewTag::side:
      return "side";
    case ViewTag::back:
      return "back";
    case ViewTag::overhead:
      return "overhead";
  }
  throw GuidanceError("unknown view tag");
}

Conditioning view_conditioning(const std::string& prompt, const render::Camera& camera) {
  const double azimuth = render::azimuth_deg_of(camera.t);
  const double elevation = render::elevation_deg_of(camera.t);

  ViewTag tag = ViewTag::side;
  if (elevation > 60.0) {
    tag = ViewTag::overhead;
  } else if (std::abs(azimuth) < 45.0) {
    tag = ViewTag::front;
  } else if (std::abs(azimuth) > 135.0) {
    tag = ViewTag::back;
  }

  Conditioning cond;
  cond.view_tag = tag;
  cond.prompt = prompt + ", " + view_tag_name(tag) + " view";
  return cond;
}

// ---------------------------------------------------------------------------
// Score models
// ---------------------------------------------------------------------------

GaussianPriorScore::GaussianPriorScore(std::vector<double> mu, ImageShape shape, double s,
                                       NoiseSchedule schedule)
    : mu_(std::move(mu)), shape_(shape), s_(s), schedule_(schedule) {
  schedule_.validate();
  if (!(s_ > 0.0) || !std::isfinite(s_)) {
    throw GuidanceError("gaussian prior: standard deviation must be positive");
  }
  if (shape_.size() == 0 || mu_.size() != shape_.size()) {
    std::ostringstream os;
    os << "gaussian prior: mean has " << mu_.size() << " values but shape wants "
       << shape_.size();
    throw GuidanceShapeError(os.str());
  }
}

std::vector<double> GaussianPriorScore::predict_noise(std::span<const double> noisy,
                                                      const ImageShape& shape, double t,
                                                      const Conditioning& /*cond*/,
                                                      std::span<const double> /*depth*/) {
  if (!(shape == shape_) || noisy.size() != shape_.size()) {
    throw GuidanceShapeError("gaussian prior: image shape does not match the prior mean");
  }
  const double s_t = schedule_.sigma(t);
  const double a_t = schedule_.alpha(t);
  const double denom = a_t * a_t * s_ * s_ + s_t * s_t;
  std::vector<double> eps(noisy.size());
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    eps[i] = s_t * (noisy[i] - a_t * mu_[i]) / denom;
  }
  return eps;
}

void TrueNoiseScore::observe_true_noise(std::span<const double> eps) {
  std::lock_guard<std::mutex> lock(mutex_);
  last_.assign(eps.begin(), eps.end());
}

std::vector<double> TrueNoiseScore::predict_noise(std::span<const double> noisy,
                                                  const ImageShape& shape, double /*t*/,
                                                  const Conditioning& /*cond*/,
                                                  std::span<const double> /*depth*/) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (last_.size() != noisy.size() || noisy.size() != shape.size()) {
    throw GuidanceError("true-noise oracle: no observed noise matching the image size");
  }
  return last_;
}

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

std::vector<double> add_noise(std::span<const double> image, std::span<const double> eps,
                              double t, const NoiseSchedule& schedule) {
  if (image.size() != eps.size()) {
    std::ostringstream os;
    os << "add_noise: image has " << image.size() << " values, noise has " << eps.size();
    throw GuidanceShapeError(os.str());
  }
  const double a_t = schedule.alpha(t);
  const double s_t = schedule.sigma(t);
  std::vector<double> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    out[i] = a_t * image[i] + s_t * eps[i];
  }
  return out;
}

std::vector<double> cfg_combine(std::span<const double> eps_cond,
                                std::span<const double> eps_uncond, double w_g) {
  if (eps_cond.size() != eps_uncond.size()) {
    std::ostringstream os;
    os << "cfg_combine: conditional has " << eps_cond.size() << " values, unconditional has "
       << eps_uncond.size();
    throw GuidanceShapeError(os.str());
  }
  if (!(w_g >= 0.0) || !std::isfinite(w_g)) {
    throw GuidanceError("cfg_combine: guidance weight must be finite and non-negative");
  }
  // The endpoints are semantic identities (weight one IS the conditional
  // prediction); return them untouched by rounding.
  if (w_g == 1.0) return {eps_cond.begin(), eps_cond.end()};
  if (w_g == 0.0) return {eps_uncond.begin(), eps_uncond.end()};
  std::vector<double> out(eps_cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = eps_uncond[i] + w_g * (eps_cond[i] - eps_uncond[i]);
  }
  return out;
}

std::vector<double> normalize_depth_unit(std::span<const double> depth) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : depth) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<double> out(depth.size(), 0.0);
  if (!(hi > lo)) return out;  // no finite spread: everything maps to 0
  const double scale = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (!std::isfinite(depth[i])) continue;
    out[i] = std::clamp((depth[i] - lo) * scale, 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Wire encoding
// ---------------------------------------------------------------------------

namespace {

constexpr char kBase64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

const std::array<int, 256>& base64_inverse() {
  static const std::array<int, 256> table = [] {
    std::array<int, 256> t{};
    t.fill(-1);
    for (int i = 0; i < 64; ++i) {
      t[static_cast<unsigned char>(kBase64Alphabet[i])] = i;
    }
    return t;
  }();
  return table;
}

}  // namespace

std::string base64_encode(std::span<const unsigned char> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    const unsigned v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kBase64Alphabet[(v >> 18) & 63];
    out += kBase64Alphabet[(v >> 12) & 63];
    out += kBase64Alphabet[(v >> 6) & 63];
    out += kBase64Alphabet[v & 63];
  }
  const std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    const unsigned v = bytes[i] << 16;
    out += kBase64Alphabet[(v >> 18) & 63];
    out += kBase64Alphabet[(v >> 12) & 63];
    out += "==";
  } else if (rem == 2) {
    const unsigned v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kBase64Alphabet[(v >> 18) & 63];
    out += kBase64Alphabet[(v >> 12) & 63];
    out += kBase64Alphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<unsigned char> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) {
    throw GuidanceProtocolError("base64: length is not a multiple of four");
  }
  std::vector<unsigned char> out;
  out.reserve(text.size() / 4 * 3);
  const auto& inv = base64_inverse();
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int vals[4];
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = text[i + j];
      if (c == '=') {
        // Padding is legal only in the last two slots of the final group.
        if (i + 4 != text.size() || j < 2) {
          throw GuidanceProtocolError("base64: misplaced padding");
        }
        vals[j] = 0;
        ++pad;
      } else {
        if (pad > 0) throw GuidanceProtocolError("base64: data after padding");
        const int v = inv[static_cast<unsigned char>(c)];
        if (v < 0) throw GuidanceProtocolError("base64: character outside the alphabet");
        vals[j] = v;
      }
    }
    const unsigned v = (static_cast<unsigned>(vals[0]) << 18) |
                       (static_cast<unsigned>(vals[1]) << 12) |
                       (static_cast<unsigned>(vals[2]) << 6) | static_cast<unsigned>(vals[3]);
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<unsigned char>(v & 0xff));
  }
  return out;
}

std::string encode_f32le_base64(std::span<const double> values) {
  std::vector<unsigned char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    bytes[4 * i + 0] = static_cast<unsigned char>(bits & 0xff);
    bytes[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
    bytes[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
    bytes[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
  }
  return base64_encode(bytes);
}

std::vector<double> decode_f32le_base64(std::string_view text) {
  const std::vector<unsigned char> bytes = base64_decode(text);
  if (bytes.size() % 4 != 0) {
    throw GuidanceProtocolError("float payload: byte count is not a multiple of four");
  }
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t bits = static_cast<std::uint32_t>(bytes[4 * i + 0]) |
                               (static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8) |
                               (static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16) |
                               (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Remote client
// ---------------------------------------------------------------------------

void RemoteClientOptions::validate() const {
  if (endpoint.empty()) throw GuidanceError("remote guidance: endpoint must be set");
  if (!(timeout_seconds > 0.0)) throw GuidanceError("remote guidance: timeout must be positive");
  if (max_retries < 0) throw GuidanceError("remote guidance: retry count must be non-negative");
  if (!(backoff_seconds >= 0.0)) throw GuidanceError("remote guidance: backoff must be non-negative");
  if (max_in_flight < 1) throw GuidanceError("remote guidance: in-flight cap must be at least 1");
}

struct RemoteGuidanceClient::InFlightGate {
  explicit InFlightGate(int cap) : available(cap) {}

  void acquire() {
    std::unique_lock<std::mutex> lock(mutex);
    cv.wait(lock, [&] { return available > 0; });
    --available;
  }
  void release() {
    {
      std::lock_guard<std::mutex> lock(mutex);
      ++available;
    }
    cv.notify_one();
  }

  std::mutex mutex;
  std::condition_variable cv;
  int available;
};

namespace {

bool is_timeout_error(httplib::Error err) {
  return err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read ||
         err == httplib::Error::Write;
}

json shape_to_json(const ImageShape& shape) {
  return json::array({shape.height, shape.width, shape.channels});
}

std::string shape_to_string(const ImageShape& shape) {
  std::ostringstream os;
  os << "[" << shape.height << ", " << shape.width << ", " << shape.channels << "]";
  return os.str();
}

// Parses and validates a prediction response; throws typed guidance errors.
std::vector<double> parse_prediction_response(const std::string& body,
                                              const std::string& expected_id,
                                              const ImageShape& expected_shape) {
  json rsp;
  try {
    rsp = json::parse(body);
  } catch (const json::exception& e) {
    throw GuidanceProtocolError(std::string("malformed response: ") + e.what());
  }
  if (!rsp.is_object()) throw GuidanceProtocolError("malformed response: not a JSON object");
  try {
    const std::string id = rsp.at("request_id").get<std::string>();
    if (id != expected_id) {
      throw GuidanceProtocolError("response request_id \"" + id + "\" does not match \"" +
                                  expected_id + "\"");
    }
    const json& jshape = rsp.at("shape");
    if (!jshape.is_array() || jshape.size() != 3) {
      throw GuidanceProtocolError("malformed response: shape must be a three-element array");
    }
    ImageShape got{jshape.at(0).get<std::size_t>(), jshape.at(1).get<std::size_t>(),
                   jshape.at(2).get<std::size_t>()};
    if (!(got == expected_shape)) {
      throw GuidanceShapeError("response shape " + shape_to_string(got) +
                               " does not match request shape " +
                               shape_to_string(expected_shape));
    }
    std::vector<double> eps = decode_f32le_base64(rsp.at("epsilon").get<std::string>());
    if (eps.size() != expected_shape.size()) {
      std::ostringstream os;
      os << "response carries " << eps.size() << " noise values but the shape "
         << shape_to_string(expected_shape) << " wants " << expected_shape.size();
      throw GuidanceShapeError(os.str());
    }
    for (double v : eps) {
      if (!std::isfinite(v)) {
        throw GuidanceProtocolError("response carries non-finite noise values");
      }
    }
    return eps;
  } catch (const json::exception& e) {
    throw GuidanceProtocolError(std::string("malformed response: ") + e.what());
  }
}

}  // namespace

RemoteGuidanceClient::RemoteGuidanceClient(RemoteClientOptions options)
    : options_(std::move(options)) {
  options_.validate();
  gate_ = std::make_unique<InFlightGate>(options_.max_in_flight);
}

RemoteGuidanceClient::~RemoteGuidanceClient() = default;

RemoteGuidanceClient::Stats RemoteGuidanceClient::stats() const {
  std::lock_guard<std::mutex> lock(stats_mutex_);
  return stats_;
}

std::vector<double> RemoteGuidanceClient::predict_noise(std::span<const double> noisy,
                                                        const ImageShape& shape, double t,
                                                        const Conditioning& cond,
                                                        std::span<const double> depth) {
  if (shape.size() == 0 || noisy.size() != shape.size()) {
    std::ostringstream os;
    os << "remote guidance: image has " << noisy.size() << " values but the shape "
       << shape_to_string(shape) << " wants " << shape.size();
    throw GuidanceShapeError(os.str());
  }
  if (!depth.empty() && depth.size() != shape.height * shape.width) {
    std::ostringstream os;
    os << "remote guidance: depth has " << depth.size() << " values but the shape wants "
       << shape.height * shape.width;
    throw GuidanceShapeError(os.str());
  }

  // Clamp pixels into the protocol domain and refuse non-finite payloads.
  std::vector<double> clipped(noisy.begin(), noisy.end());
  std::uint64_t clamped = 0;
  for (double& v : clipped) {
    if (!std::isfinite(v)) throw GuidanceError("remote guidance: non-finite pixel value");
    if (v < -4.0) {
      v = -4.0;
      ++clamped;
    } else if (v > 4.0) {
      v = 4.0;
      ++clamped;
    }
  }

  std::string request_id;
  {
    std::lock_guard<std::mutex> lock(stats_mutex_);
    request_id = "req-" + std::to_string(next_request_id_++);
    ++stats_.requests;
    stats_.clamped_values += clamped;
  }

  json req;
  req["request_id"] = request_id;
  req["image"] = encode_f32le_base64(clipped);
  req["shape"] = shape_to_json(shape);
  req["t"] = t;
  req["prompt"] = cond.effective_prompt();
  req["uncond"] = cond.uncond;
  if (!depth.empty()) {
    std::vector<double> d(depth.begin(), depth.end());
    for (double& v : d) {
      if (!std::isfinite(v)) throw GuidanceError("remote guidance: non-finite depth value");
      v = std::clamp(v, 0.0, 1.0);
    }
    req["depth"] = encode_f32le_base64(d);
  }
  const std::string body = req.dump();

  gate_->acquire();
  struct GateRelease {
    InFlightGate* gate;
    ~GateRelease() { gate->release(); }
  } gate_release{gate_.get()};

  std::string last_failure = "no attempt made";
  bool last_was_timeout = false;
  for (int attempt = 0; attempt <= options_.max_retries; ++attempt) {
    if (attempt > 0) {
      const double delay = options_.backoff_seconds * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
      std::lock_guard<std::mutex> lock(stats_mutex_);
      ++stats_.retries;
    }

    httplib::Client client(options_.endpoint);
    const auto timeout = std::chrono::duration<double>(options_.timeout_seconds);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    auto result = client.Post("/predict", body, "application/json");
    if (!result) {
      last_was_timeout = is_timeout_error(result.error());
      last_failure = httplib::to_string(result.error());
      continue;  // transport problems are transient: retry
    }
    if (result->status >= 500) {
      last_was_timeout = false;
      last_failure = "HTTP " + std::to_string(result->status);
      continue;  // server-side failures are transient: retry
    }
    if (result->status != 200) {
      throw GuidanceProtocolError("guidance endpoint answered HTTP " +
                                  std::to_string(result->status) + ": " + result->body);
    }
    return parse_prediction_response(result->body, request_id, shape);
  }

  std::ostringstream os;
  os << "guidance endpoint " << options_.endpoint << " failed after " << (options_.max_retries + 1)
     << " attempt(s): " << last_failure;
  if (last_was_timeout) throw GuidanceTimeoutError(os.str());
  throw GuidanceTransportError(os.str());
}

}  // namespace textmesh::guidance
