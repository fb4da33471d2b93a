#include "millassist/api.hpp"

#include <algorithm>
#include <sstream>

namespace millassist::api {

using nlohmann::json;

namespace {

/// Transport-level failures without a library error code (401, 405).
struct HttpFailure {
  int status;
  std::string code;
  std::string message;
};

HttpFailure unauthenticated(std::string message) { return {401, "authentication", std::move(message)}; }

std::vector<std::string> segments(const std::string& path) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : path) {
    if (c == '/') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Matches "/a/{id}/b" style patterns; a `{...}` segment captures one segment.
bool match(const std::vector<std::string>& segs, const std::string& pattern, std::vector<std::string>& params) {
  const auto want = segments(pattern);
  if (want.size() != segs.size()) return false;
  std::vector<std::string> caught;
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i].front() == '{') caught.push_back(segs[i]);
    else if (want[i] != segs[i]) return false;
  }
  params = std::move(caught);
  return true;
}

json body_json(const Request& r) {
  if (r.body.find_first_not_of(" \t\r\n") == std::string::npos) return json::object();
  try {
    auto j = json::parse(r.body);
    if (!j.is_object()) throw Error(ErrorCode::validation, "request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::validation, std::string("request body is not JSON: ") + e.what());
  }
}

std::optional<std::string> query_of(const Request& r, const std::string& key) {
  const auto it = r.query.find(key);
  if (it == r.query.end() || it->second.empty()) return std::nullopt;
  return it->second;
}

std::optional<std::int64_t> query_int(const Request& r, const std::string& key) {
  const auto v = query_of(r, key);
  if (!v) return std::nullopt;
  std::size_t used = 0;
  std::int64_t out = 0;
  try {
    out = std::stoll(*v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v->size()) throw Error(ErrorCode::validation, "query parameter " + key + " must be an integer");
  return out;
}

std::optional<bool> query_bool(const Request& r, const std::string& key) {
  const auto v = query_of(r, key);
  if (!v) return std::nullopt;
  if (*v == "true" || *v == "1") return true;
  if (*v == "false" || *v == "0") return false;
  throw Error(ErrorCode::validation, "query parameter " + key + " must be true or false");
}

json list(const auto& items) {
  json out = json::array();
  for (const auto& x : items) out.push_back(to_json(x));
  return out;
}

kb::ProposalState parse_state(const std::string& s) {
  for (auto st : {kb::ProposalState::open, kb::ProposalState::approved, kb::ProposalState::rejected})
    if (kb::to_string(st) == s) return st;
  throw Error(ErrorCode::validation, "unknown proposal state " + s);
}

json card_summary(const kb::Card& c) {
  const auto* approved = c.approved();
  json j{{"card_id", c.card_id},
         {"latest_version", c.versions.size()},
         {"deprecated", c.deprecated},
         {"description", c.versions.back().content.malfunction.description}};
  j["approved_version"] = approved ? json(approved->version) : json(nullptr);
  return j;
}

}  // namespace

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::validation: return 400;
    case ErrorCode::range: return 400;
    case ErrorCode::authorization: return 403;
    case ErrorCode::not_found: return 404;
    case ErrorCode::conflict: return 409;
    case ErrorCode::state: return 409;
    case ErrorCode::cycle: return 409;
    case ErrorCode::ordering: return 422;
    case ErrorCode::contract: return 422;
    case ErrorCode::training: return 422;
    case ErrorCode::unavailable: return 503;
    case ErrorCode::io: return 500;
  }
  return 500;
}

json envelope(const std::string& request_id, json payload) {
  return json{{"schema_version", kSchemaVersion}, {"request_id", request_id}, {"payload", std::move(payload)}};
}

json error_envelope(const std::string& request_id, std::string_view code, const std::string& message) {
  return json{{"schema_version", kSchemaVersion},
              {"request_id", request_id},
              {"error", json{{"code", code}, {"message", message}}}};
}

ApiService::ApiService(store::DataStore& store, kb::KnowledgeBase& base, assist::AssistEngine& engine,
                       assist::Pipeline& pipeline, ServiceOptions options)
    : store_(store), base_(base), engine_(engine), pipeline_(pipeline), options_(std::move(options)) {}

std::vector<std::pair<std::string, std::string>> ApiService::routes() {
  return {
      {"GET", "/health"},
      {"GET", "/whoami"},
      {"GET", "/alarm-groups"},
      {"GET", "/alarm-groups/{id}"},
      {"POST", "/alarm-groups/{id}/ack"},
      {"GET", "/events"},
      {"GET", "/events/stream"},
      {"GET", "/forecasts"},
      {"GET", "/change-points"},
      {"GET", "/metrics"},
      {"GET", "/cards"},
      {"POST", "/cards"},
      {"GET", "/cards/{id}"},
      {"POST", "/cards/{id}/submit"},
      {"POST", "/cards/{id}/proposals"},
      {"POST", "/cards/{id}/comments"},
      {"POST", "/cards/{id}/deprecate"},
      {"GET", "/cards/{id}/links"},
      {"GET", "/links"},
      {"POST", "/links"},
      {"GET", "/proposals"},
      {"GET", "/proposals/{id}"},
      {"POST", "/proposals/{id}/approve"},
      {"POST", "/proposals/{id}/reject"},
      {"POST", "/proposals/{id}/rebase"},
      {"GET", "/recommendations"},
      {"GET", "/recommendations/{id}"},
      {"POST", "/triggers"},
      {"POST", "/feedback"},
      {"GET", "/feedback-stats"},
      {"POST", "/ingest"},
  };
}

std::string ApiService::user_of(const Request& r) const {
  const auto auth = r.headers.find("authorization");
  if (auth != r.headers.end()) {
    const std::string prefix = "Bearer ";
    if (auth->second.rfind(prefix, 0) != 0) throw unauthenticated("authorization header must be a bearer token");
    const auto it = options_.tokens.find(auth->second.substr(prefix.size()));
    if (it == options_.tokens.end()) throw unauthenticated("unknown token");
    return it->second;
  }
  if (options_.allow_user_header) {
    const auto user = r.headers.find("x-user");
    if (user != r.headers.end() && !user->second.empty()) {
      base_.role_of(user->second);  // unknown users are refused
      return user->second;
    }
  }
  throw unauthenticated("authentication required");
}

void ApiService::persist_kb() {
  if (options_.kb_dir) base_.save(*options_.kb_dir);
}

Response ApiService::handle(const Request& request) {
  const auto rid = request.headers.find("x-request-id");
  const std::string request_id =
      rid != request.headers.end() && !rid->second.empty() ? rid->second : "req-" + std::to_string(next_request_++);
  Response out;
  try {
    int status = 200;
    auto payload = dispatch(request, status);
    out.status = status;
    out.body = envelope(request_id, std::move(payload));
  } catch (const HttpFailure& e) {
    out.status = e.status;
    out.body = error_envelope(request_id, e.code, e.message);
  } catch (const Error& e) {
    out.status = http_status(e.code());
    out.body = error_envelope(request_id, to_string(e.code()), e.what());
  } catch (const json::exception& e) {
    out.status = 400;
    out.body = error_envelope(request_id, to_string(ErrorCode::validation), e.what());
  }
  return out;
}

json ApiService::dispatch(const Request& r, int& status) {
  auto segs = segments(r.path);
  const auto prefix = segments(kPrefix);
  if (segs.size() < prefix.size() || !std::equal(prefix.begin(), prefix.end(), segs.begin()))
    throw Error(ErrorCode::not_found, "no route for " + r.path);
  segs.erase(segs.begin(), segs.begin() + static_cast<std::ptrdiff_t>(prefix.size()));
  const bool get = r.method == "GET";
  const bool post = r.method == "POST";
  std::vector<std::string> p;
  auto on = [&](bool method, const char* pattern) { return method && match(segs, pattern, p); };

  // --- service ---
  if (on(get, "/health"))
    return json{{"status", "ok"},
                {"schema_version", kSchemaVersion},
                {"records", store_.size()},
                {"now", pipeline_.now()},
                {"parameters", pipeline_.parameters()}};
  if (on(get, "/whoami")) {
    const auto user = user_of(r);
    return json{{"user", user}, {"role", kb::to_string(base_.role_of(user))}};
  }

  // --- alarms and stream ---
  if (on(get, "/alarm-groups")) {
    const auto link = query_of(r, "status");
    const auto acked = query_bool(r, "acknowledged");
    const auto limit = query_int(r, "limit");
    json out = json::array();
    for (const auto& g : pipeline_.groups()) {
      if (link && alarms::to_string(g.linked.status) != *link) continue;
      if (acked && g.ack.has_value() != *acked) continue;
      out.push_back(assist::to_json(g));
    }
    if (limit && *limit >= 0 && out.size() > static_cast<std::size_t>(*limit))
      out.erase(out.begin(), out.end() - *limit);  // most recent
    return out;
  }
  if (on(get, "/alarm-groups/{}")) return assist::to_json(pipeline_.group(p[0]));
  if (on(post, "/alarm-groups/{}/ack")) {
    const auto user = user_of(r);
    const auto body = body_json(r);
    return assist::to_json(pipeline_.acknowledge(p[0], user, body.value("at", pipeline_.now())));
  }
  if (on(get, "/events")) {
    const auto after = query_int(r, "after").value_or(0);
    const auto limit = query_int(r, "limit").value_or(1000);
    if (after < 0 || limit <= 0) throw Error(ErrorCode::validation, "after must be >= 0 and limit > 0");
    return list(pipeline_.events_after(static_cast<std::uint64_t>(after), static_cast<std::size_t>(limit)));
  }
  if (on(get, "/events/stream"))
    throw Error(ErrorCode::unavailable, "the live stream is served by the HTTP transport only");
  if (on(get, "/forecasts")) {
    const auto parameter = query_of(r, "parameter");
    return list(pipeline_.forecasts(query_int(r, "reel"), parameter));
  }
  if (on(get, "/change-points")) return list(pipeline_.change_points());
  if (on(get, "/metrics")) {
    const auto t0 = query_int(r, "t0").value_or(0);
    const auto t1 = query_int(r, "t1").value_or(pipeline_.now() + 1);
    auto j = alarms::to_json(pipeline_.metrics(t0, t1));
    j["t0"] = t0;
    j["t1"] = t1;
    return j;
  }

  // --- knowledge ---
  if (on(get, "/cards")) {
    std::optional<kb::Query> q;
    for (auto kind : {kb::QueryKind::error_code, kb::QueryKind::location, kb::QueryKind::situation})
      if (const auto v = query_of(r, std::string(kb::to_string(kind)))) q = kb::Query{kind, *v};
    if (q) return list(base_.find_cards(*q));
    json out = json::array();
    for (const auto& id : base_.card_ids()) out.push_back(card_summary(base_.card(id)));
    return out;
  }
  if (on(post, "/cards")) {
    const auto user = user_of(r);
    const auto body = body_json(r);
    const auto id = base_.create_card(kb::content_from_json(body.at("content")), user);
    persist_kb();
    status = 201;
    return kb::to_json(base_.card(id), true);
  }
  if (on(get, "/cards/{}")) {
    if (query_bool(r, "history").value_or(false)) return kb::to_json(base_.card(p[0]), true);
    const auto view = base_.visible_card(p[0]);
    if (!view) throw Error(ErrorCode::not_found, "card " + p[0] + " has no visible version");
    auto j = kb::to_json(*view);
    j["causes"] = base_.causes_of(p[0]);
    j["effects"] = base_.effects_of(p[0]);
    return j;
  }
  if (on(post, "/cards/{}/submit")) {
    const auto id = base_.submit_draft(p[0], user_of(r));
    persist_kb();
    return kb::to_json(base_.proposal(id));
  }
  if (on(post, "/cards/{}/proposals")) {
    const auto user = user_of(r);
    const auto body = body_json(r);
    const auto id = base_.propose_change(p[0], kb::diff_from_json(body.at("diff")), user, body.value("note", ""));
    persist_kb();
    status = 201;
    return kb::to_json(base_.proposal(id));
  }
  if (on(post, "/cards/{}/comments")) {
    const auto user = user_of(r);
    const auto body = body_json(r);
    base_.comment(p[0], user, body.at("text").get<std::string>());
    persist_kb();
    return kb::to_json(base_.card(p[0]), false);
  }
  if (on(post, "/cards/{}/deprecate")) {
    base_.deprecate(p[0], user_of(r));
    persist_kb();
    return kb::to_json(base_.card(p[0]), false);
  }
  if (on(get, "/cards/{}/links")) {
    base_.card(p[0]);
    return json{{"card_id", p[0]}, {"causes", base_.causes_of(p[0])}, {"effects", base_.effects_of(p[0])}};
  }
  if (on(get, "/links")) {
    json out = json::array();
    for (const auto& l : base_.links()) out.push_back(json{{"from", l.from}, {"to", l.to}, {"note", l.note}});
    return out;
  }
  if (on(post, "/links")) {
    const auto user = user_of(r);
    const auto body = body_json(r);
    const auto from = body.at("from").get<std::string>();
    const auto to = body.at("to").get<std::string>();
    base_.link_causal(from, to, user, body.value("note", ""));
    persist_kb();
    status = 201;
    return json{{"from", from}, {"to", to}, {"note", body.value("note", "")}};
  }
  if (on(get, "/proposals")) {
    std::optional<kb::ProposalState> state;
    if (const auto s = query_of(r, "state")) state = parse_state(*s);
    return list(base_.proposals(state));
  }
  if (on(get, "/proposals/{}")) return kb::to_json(base_.proposal(p[0]));
  if (on(post, "/proposals/{}/approve")) {
    base_.approve(p[0], user_of(r));
    persist_kb();
    return kb::to_json(base_.proposal(p[0]));
  }
  if (on(post, "/proposals/{}/reject")) {
    const auto user = user_of(r);
    base_.reject(p[0], user, body_json(r).value("reason", ""));
    persist_kb();
    return kb::to_json(base_.proposal(p[0]));
  }
  if (on(post, "/proposals/{}/rebase")) {
    base_.rebase(p[0], user_of(r));
    persist_kb();
    return kb::to_json(base_.proposal(p[0]));
  }

  // --- assistance ---
  if (on(get, "/recommendations")) {
    const auto disposition = query_of(r, "disposition");
    json out = json::array();
    for (const auto& rec : engine_.recommendations())
      if (!disposition || assist::to_string(rec.disposition) == *disposition) out.push_back(assist::to_json(rec));
    return out;
  }
  if (on(get, "/recommendations/{}")) {
    auto j = assist::to_json(engine_.recommendation(p[0]));
    j["feedback"] = list(engine_.feedback_for(p[0]));
    return j;
  }
  if (on(post, "/triggers")) {
    user_of(r);
    auto body = body_json(r);
    if (!body.contains("timestamp")) body["timestamp"] = pipeline_.now();
    const auto rec = pipeline_.trigger(assist::trigger_from_json(body));
    status = 201;
    return assist::to_json(rec);
  }
  if (on(post, "/feedback")) {
    auto body = body_json(r);
    body["author"] = user_of(r);
    if (!body.contains("timestamp")) body["timestamp"] = pipeline_.now();
    const auto outcome = engine_.record_feedback(assist::feedback_from_json(body));
    if (outcome.proposal_id) persist_kb();
    return assist::to_json(outcome);
  }
  if (on(get, "/feedback-stats")) {
    const auto card = query_of(r, "card_id");
    const auto situation = query_of(r, "situation");
    assist::FeedbackStats stats;
    for (const auto& [key, c] : engine_.stats())
      if ((!card || key.first == *card) && (!situation || key.second == *situation)) stats[key] = c;
    return assist::to_json(stats);
  }
  if (on(post, "/ingest")) {
    user_of(r);
    std::vector<Record> records;
    std::istringstream in(r.body);
    try {
      records = read_log(in);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::validation, std::string("ingest body is not an emission log: ") + e.what());
    }
    json events = json::array();
    std::size_t accepted = 0;
    for (const auto& rec : records) {
      for (const auto& e : pipeline_.ingest(rec)) events.push_back(assist::to_json(e));
      ++accepted;
    }
    return json{{"accepted", accepted}, {"events", std::move(events)}};
  }

  for (const auto& [method, pattern] : routes())
    if (match(segs, pattern, p)) throw HttpFailure{405, "method_not_allowed", r.method + " is not allowed on " + r.path};
  throw Error(ErrorCode::not_found, "no route for " + r.method + " " + r.path);
}

}  // namespace millassist::api
