#pragma once

#include "textmesh/guidance.hpp"

#include <cstdint>
#include <memory>
#include <string>

namespace textmesh::guidance {

// Behavior knobs for the loopback test server. The default configuration is
// an echo server that answers every prediction with zeros of the request
// shape; "prior" mode instead serves a flat-image Gaussian prior so the
// remote path can drive a full optimization.
struct MockServerConfig {
  enum class Mode { zeros, prior };

  Mode mode = Mode::zeros;
  int port = 0;           // 0 picks any free loopback port
  double prior_mu = 0.5;  // flat prior image value (prior mode)
  double prior_s = 0.2;   // prior standard deviation (prior mode)
  NoiseSchedule schedule;

  // Failure injection for client tests.
  int fail_first = 0;           // answer HTTP 500 to this many requests
  double delay_seconds = 0.0;   // sleep before answering
  bool wrong_shape = false;     // answer with an incompatible shape
  bool malformed = false;       // answer with unparseable JSON
};

// In-process HTTP server speaking the guidance wire protocol on 127.0.0.1.
// start() picks a free port; the server runs on a background thread until
// stop() or destruction.
class MockGuidanceServer {
 public:
  explicit MockGuidanceServer(MockServerConfig config = {});
  ~MockGuidanceServer();

  MockGuidanceServer(const MockGuidanceServer&) = delete;
  MockGuidanceServer& operator=(const MockGuidanceServer&) = delete;

  // Binds and serves; throws GuidanceTransportError if no port is available.
  void start();
  void stop();

  bool running() const;
  int port() const;
  std::string url() const;  // "http://127.0.0.1:<port>"

  std::uint64_t request_count() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace textmesh::guidance
