#include "millassist/http_server.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>

#include <httplib.h>

namespace millassist::api {

namespace {

constexpr const char* kStreamPath = "/api/v1/events/stream";

Request to_request(const httplib::Request& req) {
  Request r;
  r.method = req.method;
  r.path = req.path;
  for (const auto& [k, v] : req.params) r.query[k] = v;
  for (const auto& [k, v] : req.headers) {
    std::string name = k;
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
    r.headers[name] = v;
  }
  r.body = req.body;
  return r;
}

}  // namespace

struct HttpServer::Impl {
  explicit Impl(ApiService& s) : service(s) {}
  ApiService& service;
  httplib::Server server;
};

HttpServer::HttpServer(ApiService& service, ServerConfig config)
    : impl_(std::make_unique<Impl>(service)), config_(std::move(config)) {
  auto& server = impl_->server;
  auto& api = impl_->service;

  const auto handle = [&api](const httplib::Request& req, httplib::Response& res) {
    const auto out = api.handle(to_request(req));
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  };
  const auto stream = [this, &api](const httplib::Request& req, httplib::Response& res) {
    std::uint64_t after = 0;
    std::uint64_t max = 0;  // 0 = unbounded
    try {
      if (req.has_param("after")) after = std::stoull(req.get_param_value("after"));
      if (req.has_param("max")) max = std::stoull(req.get_param_value("max"));
    } catch (const std::exception&) {
      res.status = 400;
      res.set_content(error_envelope("stream", "validation", "after and max must be non-negative integers").dump(),
                      "application/json");
      return;
    }
    auto sent = std::make_shared<std::uint64_t>(0);
    auto cursor = std::make_shared<std::uint64_t>(after);
    res.set_chunked_content_provider(
        "application/x-ndjson", [this, &api, sent, cursor, max](std::size_t, httplib::DataSink& sink) {
          if (stopping_) return false;
          for (const auto& e : api.pipeline().wait_events(*cursor, std::chrono::milliseconds(200))) {
            const auto line = assist::to_json(e).dump() + "\n";
            if (!sink.write(line.data(), line.size())) return false;
            *cursor = e.seq;
            if (max && ++*sent >= max) {
              sink.done();
              return true;
            }
          }
          return !stopping_;
        });
  };

  // Without SO_REUSEPORT so that a second server on a busy port fails to bind.
  server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  server.Get(kStreamPath, stream);
  server.Get(R"(/.*)", handle);
  server.Post(R"(/.*)", handle);
  server.Put(R"(/.*)", handle);
  server.Delete(R"(/.*)", handle);
  server.Patch(R"(/.*)", handle);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind() {
  if (bound_) return config_.port;
  auto& server = impl_->server;
  if (config_.port < 0 || config_.port > 65535)
    throw Error(ErrorCode::validation, "port " + std::to_string(config_.port) + " is out of range");
  if (config_.port == 0) {
    const int port = server.bind_to_any_port(config_.host);
    if (port < 0) throw Error(ErrorCode::unavailable, "cannot bind to " + config_.host);
    config_.port = port;
  } else if (!server.bind_to_port(config_.host, config_.port)) {
    throw Error(ErrorCode::unavailable,
                "cannot bind " + config_.host + ":" + std::to_string(config_.port) + " (port busy or not permitted)");
  }
  bound_ = true;
  return config_.port;
}

void HttpServer::run() {
  bind();
  impl_->server.listen_after_bind();
}

void HttpServer::start() {
  bind();
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void HttpServer::stop() {
  stopping_ = true;
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace millassist::api
