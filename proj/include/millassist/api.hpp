#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "millassist/assist.hpp"
#include "millassist/datastore.hpp"
#include "millassist/knowledge_base.hpp"
#include "millassist/pipeline.hpp"

namespace millassist::api {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kPrefix = "/api/v1";

struct Request {
  std::string method;
  std::string path;  ///< without query string
  std::map<std::string, std::string> query;
  std::map<std::string, std::string> headers;  ///< lower-case names
  std::string body;
};

struct Response {
  int status = 200;
  nlohmann::json body;  ///< the envelope
};

/// HTTP status for a library error code.
int http_status(ErrorCode code);

struct ServiceOptions {
  /// Static bearer tokens: token -> user id.
  std::map<std::string, std::string> tokens;
  /// Accept an `X-User` header as identity (desk setups without tokens).
  bool allow_user_header = true;
  /// Knowledge-base directory saved after every knowledge mutation.
  std::optional<std::filesystem::path> kb_dir;
};

/// Transport-independent endpoint surface. Every response is an envelope
/// {schema_version, request_id, payload} or {schema_version, request_id,
/// error: {code, message}}.
class ApiService {
 public:
  ApiService(store::DataStore& store, kb::KnowledgeBase& base, assist::AssistEngine& engine,
             assist::Pipeline& pipeline, ServiceOptions options = {});

  Response handle(const Request& request);

  assist::Pipeline& pipeline() { return pipeline_; }

  /// Routes and methods, for the API reference and tests.
  static std::vector<std::pair<std::string, std::string>> routes();

 private:
  nlohmann::json dispatch(const Request& request, int& status);
  std::string user_of(const Request& request) const;
  void persist_kb();

  store::DataStore& store_;
  kb::KnowledgeBase& base_;
  assist::AssistEngine& engine_;
  assist::Pipeline& pipeline_;
  ServiceOptions options_;
  std::atomic<std::uint64_t> next_request_{1};
};

/// Envelope helpers shared with the HTTP layer.
nlohmann::json envelope(const std::string& request_id, nlohmann::json payload);
nlohmann::json error_envelope(const std::string& request_id, std::string_view code, const std::string& message);

}  // namespace millassist::api
