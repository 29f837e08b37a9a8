#include "textmesh/guidance_server.hpp"

#include <httplib.h>

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <sstream>
#include <thread>

namespace textmesh::guidance {

using nlohmann::json;

namespace {

struct ParsedRequest {
  std::string request_id;
  ImageShape shape;
  std::vector<double> image;
  std::vector<double> depth;  // empty when absent
  double t = 0.0;
  std::string prompt;
  bool uncond = false;
};

// Validates an incoming prediction request against the wire contract; throws
// GuidanceError subtypes with messages suitable for a 400 body.
ParsedRequest parse_request(const std::string& body) {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception& e) {
    throw GuidanceProtocolError(std::string("request is not valid JSON: ") + e.what());
  }
  if (!req.is_object()) throw GuidanceProtocolError("request must be a JSON object");

  ParsedRequest out;
  try {
    out.request_id = req.at("request_id").get<std::string>();
    const json& jshape = req.at("shape");
    if (!jshape.is_array() || jshape.size() != 3) {
      throw GuidanceProtocolError("shape must be a three-element array");
    }
    out.shape = ImageShape{jshape.at(0).get<std::size_t>(), jshape.at(1).get<std::size_t>(),
                           jshape.at(2).get<std::size_t>()};
    if (out.shape.size() == 0) throw GuidanceShapeError("shape must be positive");
    out.image = decode_f32le_base64(req.at("image").get<std::string>());
    out.t = req.at("t").get<double>();
    out.prompt = req.at("prompt").get<std::string>();
    out.uncond = req.at("uncond").get<bool>();
    if (req.contains("depth") && !req.at("depth").is_null()) {
      out.depth = decode_f32le_base64(req.at("depth").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw GuidanceProtocolError(std::string("request is missing required fields: ") + e.what());
  }

  if (out.image.size() != out.shape.size()) {
    std::ostringstream os;
    os << "image carries " << out.image.size() << " values but shape wants " << out.shape.size();
    throw GuidanceShapeError(os.str());
  }
  for (double v : out.image) {
    if (!std::isfinite(v) || v < -4.0 || v > 4.0) {
      throw GuidanceProtocolError("image values must lie in [-4, 4]");
    }
  }
  if (!out.depth.empty()) {
    if (out.depth.size() != out.shape.height * out.shape.width) {
      std::ostringstream os;
      os << "depth carries " << out.depth.size() << " values but shape wants "
         << out.shape.height * out.shape.width;
      throw GuidanceShapeError(os.str());
    }
    for (double v : out.depth) {
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
        throw GuidanceProtocolError("depth values must lie in [0, 1]");
      }
    }
  }
  if (!std::isfinite(out.t) || out.t <= 0.0 || out.t >= 1.0) {
    throw GuidanceProtocolError("t must lie in (0, 1)");
  }
  return out;
}

}  // namespace

struct MockGuidanceServer::Impl {
  MockServerConfig config;
  httplib::Server server;
  std::thread worker;
  int port = 0;
  std::atomic<std::uint64_t> request_count{0};
  std::atomic<int> fail_remaining{0};

  void handle_predict(const httplib::Request& req, httplib::Response& res) {
    request_count.fetch_add(1);

    if (config.delay_seconds > 0.0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(config.delay_seconds));
    }
    if (fail_remaining.load() > 0) {
      fail_remaining.fetch_sub(1);
      res.status = 500;
      res.set_content("injected transient failure", "text/plain");
      return;
    }
    if (config.malformed) {
      res.set_content("this is not a JSON object {", "application/json");
      return;
    }

    ParsedRequest parsed;
    try {
      parsed = parse_request(req.body);
    } catch (const GuidanceError& e) {
      res.status = 400;
      res.set_content(e.what(), "text/plain");
      return;
    }

    ImageShape out_shape = parsed.shape;
    if (config.wrong_shape) out_shape.channels += 1;

    std::vector<double> eps(out_shape.size(), 0.0);
    if (config.mode == MockServerConfig::Mode::prior && !config.wrong_shape) {
      const double s_t = config.schedule.sigma(parsed.t);
      const double a_t = config.schedule.alpha(parsed.t);
      const double denom = a_t * a_t * config.prior_s * config.prior_s + s_t * s_t;
      for (std::size_t i = 0; i < eps.size(); ++i) {
        eps[i] = s_t * (parsed.image[i] - a_t * config.prior_mu) / denom;
      }
    }

    json rsp;
    rsp["request_id"] = parsed.request_id;
    rsp["epsilon"] = encode_f32le_base64(eps);
    rsp["shape"] = json::array({out_shape.height, out_shape.width, out_shape.channels});
    res.set_content(rsp.dump(), "application/json");
  }
};

MockGuidanceServer::MockGuidanceServer(MockServerConfig config)
    : impl_(std::make_unique<Impl>()) {
  impl_->config = config;
  impl_->config.schedule.validate();
  impl_->fail_remaining.store(config.fail_first);
}

MockGuidanceServer::~MockGuidanceServer() { stop(); }

void MockGuidanceServer::start() {
  if (impl_->server.is_running()) return;

  impl_->server.Get("/health",
                    [](const httplib::Request&, httplib::Response& res) {
                      res.set_content("ok", "text/plain");
                    });
  impl_->server.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) {
    impl_->handle_predict(req, res);
  });

  if (impl_->config.port > 0) {
    if (!impl_->server.bind_to_port("127.0.0.1", impl_->config.port)) {
      throw GuidanceTransportError("mock guidance server: failed to bind port " +
                                   std::to_string(impl_->config.port));
    }
    impl_->port = impl_->config.port;
  } else {
    impl_->port = impl_->server.bind_to_any_port("127.0.0.1");
    if (impl_->port <= 0) {
      throw GuidanceTransportError("mock guidance server: no free loopback port");
    }
  }

  impl_->worker = std::thread([impl = impl_.get()] { impl->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void MockGuidanceServer::stop() {
  if (impl_->worker.joinable()) {
    impl_->server.stop();
    impl_->worker.join();
  }
}

bool MockGuidanceServer::running() const { return impl_->server.is_running(); }

int MockGuidanceServer::port() const { return impl_->port; }

std::string MockGuidanceServer::url() const {
  return "http://127.0.0.1:" + std::to_string(impl_->port);
}

std::uint64_t MockGuidanceServer::request_count() const { return impl_->request_count.load(); }

}  // namespace textmesh::guidance
