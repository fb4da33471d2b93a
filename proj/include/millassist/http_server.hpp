#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <thread>

#include "millassist/api.hpp"

namespace millassist::api {

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  ///< 0 picks a free port
};

/// HTTP binding of ApiService. `/api/v1/events/stream` is a chunked response
/// carrying one stream event per line; every other path is a JSON envelope.
class HttpServer {
 public:
  HttpServer(ApiService& service, ServerConfig config);
  ~HttpServer();

  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds the port; throws Error(unavailable) naming the reason. Returns the port.
  int bind();
  /// Serves until stop(); binds first when needed.
  void run();
  /// run() on a background thread.
  void start();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  ServerConfig config_;
  std::atomic<bool> stopping_{false};
  bool bound_ = false;
  std::thread thread_;
};

}  // namespace millassist::api
