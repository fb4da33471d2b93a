#include "millassist/knowledge_base.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <deque>
#include <fstream>
#include <istream>
#include <ostream>

namespace millassist::kb {

using nlohmann::json;

namespace {

constexpr int kSchema = 1;

std::string make_id(const char* prefix, std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%04llu", prefix, static_cast<unsigned long long>(n));
  return buf;
}

bool contains(const std::vector<std::string>& v, const std::string& x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

json malfunction_json(const Malfunction& m) {
  return json{{"description", m.description},
              {"cause", m.cause},
              {"locations", m.locations},
              {"error_codes", m.error_codes},
              {"situations", m.situations}};
}

Malfunction malfunction_from_json(const json& j) {
  Malfunction m;
  m.description = j.at("description").get<std::string>();
  m.cause = j.value("cause", std::string{});
  m.locations = j.value("locations", std::vector<std::string>{});
  m.error_codes = j.value("error_codes", std::vector<std::string>{});
  m.situations = j.value("situations", std::vector<std::string>{});
  return m;
}

json solutions_json(const std::vector<SolutionStep>& steps) {
  json out = json::array();
  for (const auto& s : steps) {
    json step{{"text", s.text}};
    if (s.media) step["media"] = *s.media;
    out.push_back(std::move(step));
  }
  return out;
}

std::vector<SolutionStep> solutions_from_json(const json& j) {
  std::vector<SolutionStep> out;
  for (const auto& s : j) {
    SolutionStep step{s.at("text").get<std::string>(), std::nullopt};
    if (s.contains("media") && !s.at("media").is_null()) step.media = s.at("media").get<std::string>();
    out.push_back(std::move(step));
  }
  return out;
}

void validate_content(const CardContent& c) {
  if (c.malfunction.description.find_first_not_of(" \t\r\n") == std::string::npos)
    throw Error(ErrorCode::validation, "malfunction description must not be empty");
  for (const auto& s : c.solutions)
    if (s.text.empty()) throw Error(ErrorCode::validation, "solution steps need text");
}

VersionStatus parse_status(const std::string& s) {
  if (s == "draft") return VersionStatus::draft;
  if (s == "proposed") return VersionStatus::proposed;
  if (s == "approved") return VersionStatus::approved;
  if (s == "deprecated") return VersionStatus::deprecated;
  throw Error(ErrorCode::validation, "unknown version status " + s);
}

ProposalState parse_proposal_state(const std::string& s) {
  if (s == "open") return ProposalState::open;
  if (s == "approved") return ProposalState::approved;
  if (s == "rejected") return ProposalState::rejected;
  throw Error(ErrorCode::validation, "unknown proposal state " + s);
}

CardVersion version_from_json(const json& j) {
  CardVersion v;
  v.version = j.at("version").get<int>();
  v.status = parse_status(j.at("status").get<std::string>());
  v.content = content_from_json(j.at("content"));
  v.author = j.at("author").get<std::string>();
  if (j.contains("editor_of_record") && !j.at("editor_of_record").is_null())
    v.editor_of_record = j.at("editor_of_record").get<std::string>();
  v.content_hash = j.value("content_hash", std::string{});
  v.approval_seq = j.value("approval_seq", std::uint64_t{0});
  return v;
}

json diff_json(const Diff& d) {
  json out = json::object();
  if (d.malfunction) out["malfunction"] = malfunction_json(*d.malfunction);
  if (d.solutions) out["solutions"] = solutions_json(*d.solutions);
  return out;
}

Diff parse_diff(const json& j) {
  Diff d;
  if (j.contains("malfunction")) d.malfunction = malfunction_from_json(j.at("malfunction"));
  if (j.contains("solutions")) d.solutions = solutions_from_json(j.at("solutions"));
  return d;
}

ChangeProposal proposal_from_json(const json& j) {
  ChangeProposal p;
  p.proposal_id = j.at("proposal_id").get<std::string>();
  p.card_id = j.at("card_id").get<std::string>();
  p.base_version = j.at("base_version").get<int>();
  p.diff = parse_diff(j.at("diff"));
  p.proposer = j.at("proposer").get<std::string>();
  p.note = j.value("note", std::string{});
  p.state = parse_proposal_state(j.at("state").get<std::string>());
  if (j.contains("decided_by") && !j.at("decided_by").is_null()) p.decided_by = j.at("decided_by").get<std::string>();
  if (j.contains("resulting_version") && !j.at("resulting_version").is_null())
    p.resulting_version = j.at("resulting_version").get<int>();
  return p;
}

std::string object_hash(const json& doc) { return to_hex(fnv1a64(doc.dump())); }

/// Kahn's algorithm.
bool links_acyclic(const std::map<std::string, Card>& cards, const std::vector<CausalLink>& links) {
  std::map<std::string, int> indegree;
  for (const auto& [id, _] : cards) indegree[id] = 0;
  for (const auto& l : links) ++indegree[l.to];
  std::deque<std::string> ready;
  for (const auto& [id, d] : indegree)
    if (d == 0) ready.push_back(id);
  std::size_t visited = 0;
  while (!ready.empty()) {
    const auto cur = ready.front();
    ready.pop_front();
    ++visited;
    for (const auto& l : links)
      if (l.from == cur && --indegree[l.to] == 0) ready.push_back(l.to);
  }
  return visited == indegree.size();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot write " + tmp);
    out << text;
    if (!out) throw Error(ErrorCode::io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::not_found, "missing " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::validation, path.string() + ": " + e.what());
  }
}

}  // namespace

std::string_view to_string(Role r) { return r == Role::editor ? "editor" : "operator"; }

Role parse_role(std::string_view s) {
  if (s == "editor") return Role::editor;
  if (s == "operator") return Role::operator_role;
  throw Error(ErrorCode::validation, "unknown role " + std::string(s));
}

std::string_view to_string(VersionStatus s) {
  switch (s) {
    case VersionStatus::draft: return "draft";
    case VersionStatus::proposed: return "proposed";
    case VersionStatus::approved: return "approved";
    case VersionStatus::deprecated: return "deprecated";
  }
  return "unknown";
}

std::string_view to_string(ProposalState s) {
  switch (s) {
    case ProposalState::open: return "open";
    case ProposalState::approved: return "approved";
    case ProposalState::rejected: return "rejected";
  }
  return "unknown";
}

std::string_view to_string(QueryKind k) {
  switch (k) {
    case QueryKind::error_code: return "error_code";
    case QueryKind::location: return "location";
    case QueryKind::situation: return "situation";
  }
  return "unknown";
}

json to_json(const Diff& d) { return diff_json(d); }

Diff diff_from_json(const json& j) {
  try {
    return parse_diff(j);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed diff: ") + e.what());
  }
}

json to_json(const CardContent& c) {
  return json{{"malfunction", malfunction_json(c.malfunction)}, {"solutions", solutions_json(c.solutions)}};
}

CardContent content_from_json(const json& j) {
  try {
    return CardContent{malfunction_from_json(j.at("malfunction")), solutions_from_json(j.value("solutions", json::array()))};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed card content: ") + e.what());
  }
}

std::string content_hash(const CardContent& c) { return to_hex(fnv1a64(to_json(c).dump())); }

const CardVersion* Card::approved() const {
  for (auto it = versions.rbegin(); it != versions.rend(); ++it)
    if (it->status == VersionStatus::approved) return &*it;
  return nullptr;
}

json to_json(const CardVersion& v) {
  return json{{"version", v.version},
              {"status", to_string(v.status)},
              {"content", to_json(v.content)},
              {"author", v.author},
              {"editor_of_record", v.editor_of_record ? json(*v.editor_of_record) : json(nullptr)},
              {"content_hash", v.content_hash},
              {"approval_seq", v.approval_seq}};
}

json to_json(const Card& c, bool with_history) {
  json comments = json::array();
  for (const auto& cm : c.comments) comments.push_back({{"author", cm.author}, {"at", cm.at}, {"text", cm.text}});
  const auto* approved = c.approved();
  std::string status = c.deprecated ? "deprecated" : std::string(to_string(c.versions.back().status));
  json out{{"card_id", c.card_id},
           {"status", status},
           {"latest_version", c.versions.back().version},
           {"approved_version", approved ? json(approved->version) : json(nullptr)},
           {"deprecated", c.deprecated},
           {"comments", std::move(comments)}};
  if (with_history) {
    json versions = json::array();
    for (const auto& v : c.versions) versions.push_back(to_json(v));
    out["versions"] = std::move(versions);
  }
  return out;
}

json to_json(const ChangeProposal& p) {
  return json{{"proposal_id", p.proposal_id},
              {"card_id", p.card_id},
              {"base_version", p.base_version},
              {"diff", diff_json(p.diff)},
              {"proposer", p.proposer},
              {"note", p.note},
              {"state", to_string(p.state)},
              {"decided_by", p.decided_by ? json(*p.decided_by) : json(nullptr)},
              {"resulting_version", p.resulting_version ? json(*p.resulting_version) : json(nullptr)}};
}

json to_json(const CardView& v) {
  return json{{"card_id", v.card_id},
              {"version", v.version},
              {"content", to_json(v.content)},
              {"approval_seq", v.approval_seq},
              {"score", v.score}};
}

// ---------------------------------------------------------------------------

KnowledgeBase::KnowledgeBase()
    : clock_([] {
        return static_cast<Millis>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                       std::chrono::system_clock::now().time_since_epoch())
                                       .count());
      }) {}

void KnowledgeBase::add_user(const std::string& user_id, Role role) {
  if (user_id.empty()) throw Error(ErrorCode::validation, "user id must not be empty");
  std::lock_guard lock(mutex_);
  users_[user_id] = role;
}

Role KnowledgeBase::role_of(const std::string& user_id) const {
  std::lock_guard lock(mutex_);
  return role_locked(user_id);
}

std::map<std::string, Role> KnowledgeBase::users() const {
  std::lock_guard lock(mutex_);
  return users_;
}

void KnowledgeBase::set_clock(std::function<Millis()> clock) {
  std::lock_guard lock(mutex_);
  clock_ = std::move(clock);
}

Role KnowledgeBase::role_locked(const std::string& user_id) const {
  const auto it = users_.find(user_id);
  if (it == users_.end()) throw Error(ErrorCode::authorization, "unknown user " + user_id);
  return it->second;
}

void KnowledgeBase::require_editor(const std::string& user_id) const {
  if (role_locked(user_id) != Role::editor)
    throw Error(ErrorCode::authorization, user_id + " does not have the editor role");
}

Card& KnowledgeBase::card_locked(const std::string& card_id) {
  const auto it = cards_.find(card_id);
  if (it == cards_.end()) throw Error(ErrorCode::not_found, "unknown card " + card_id);
  return it->second;
}

const Card& KnowledgeBase::card_locked(const std::string& card_id) const {
  const auto it = cards_.find(card_id);
  if (it == cards_.end()) throw Error(ErrorCode::not_found, "unknown card " + card_id);
  return it->second;
}

ChangeProposal& KnowledgeBase::proposal_locked(const std::string& proposal_id) {
  const auto it = proposals_.find(proposal_id);
  if (it == proposals_.end()) throw Error(ErrorCode::not_found, "unknown proposal " + proposal_id);
  return it->second;
}

std::string KnowledgeBase::create_card(const CardContent& draft, const std::string& author) {
  validate_content(draft);
  std::lock_guard lock(mutex_);
  role_locked(author);
  Card card;
  card.card_id = make_id("KC", next_card_++);
  CardVersion v;
  v.version = 1;
  v.status = VersionStatus::draft;
  v.content = draft;
  v.author = author;
  card.versions.push_back(std::move(v));
  const auto id = card.card_id;
  cards_.emplace(id, std::move(card));
  return id;
}

std::string KnowledgeBase::submit_draft(const std::string& card_id, const std::string& user) {
  std::lock_guard lock(mutex_);
  role_locked(user);
  auto& card = card_locked(card_id);
  auto& first = card.versions.front();
  if (card.versions.size() != 1 || first.status != VersionStatus::draft)
    throw Error(ErrorCode::state, card_id + " has no draft awaiting submission");
  first.status = VersionStatus::proposed;
  ChangeProposal p;
  p.proposal_id = make_id("PR", next_proposal_++);
  p.card_id = card_id;
  p.base_version = 0;
  p.proposer = user;
  p.note = "new card";
  const auto id = p.proposal_id;
  proposals_.emplace(id, std::move(p));
  return id;
}

std::string KnowledgeBase::propose_change(const std::string& card_id, const Diff& diff, const std::string& proposer,
                                          const std::string& note) {
  if (diff.empty()) throw Error(ErrorCode::validation, "proposal changes nothing");
  if (diff.malfunction) validate_content({*diff.malfunction, {}});
  if (diff.solutions)
    for (const auto& s : *diff.solutions)
      if (s.text.empty()) throw Error(ErrorCode::validation, "solution steps need text");
  std::lock_guard lock(mutex_);
  role_locked(proposer);
  const auto& card = card_locked(card_id);
  const auto* approved = card.approved();
  if (!approved) throw Error(ErrorCode::state, card_id + " has no approved version to change");
  if (card.deprecated) throw Error(ErrorCode::state, card_id + " is deprecated");
  ChangeProposal p;
  p.proposal_id = make_id("PR", next_proposal_++);
  p.card_id = card_id;
  p.base_version = approved->version;
  p.diff = diff;
  p.proposer = proposer;
  p.note = note;
  const auto id = p.proposal_id;
  proposals_.emplace(id, std::move(p));
  return id;
}

int KnowledgeBase::approve(const std::string& proposal_id, const std::string& editor) {
  std::lock_guard lock(mutex_);
  require_editor(editor);
  auto& p = proposal_locked(proposal_id);
  if (p.state != ProposalState::open)
    throw Error(ErrorCode::state, proposal_id + " is " + std::string(to_string(p.state)) + ", not open");
  if (p.proposer == editor) throw Error(ErrorCode::authorization, "four-eyes rule: proposer cannot approve " + proposal_id);
  auto& card = card_locked(p.card_id);
  if (card.deprecated) throw Error(ErrorCode::state, p.card_id + " is deprecated");

  CardVersion* result = nullptr;
  if (p.base_version == 0) {
    result = &card.versions.front();
    if (result->status != VersionStatus::proposed) throw Error(ErrorCode::state, p.card_id + " draft is not proposed");
  } else {
    const auto* latest = card.approved();
    if (!latest || latest->version != p.base_version)
      throw Error(ErrorCode::conflict, proposal_id + " is based on version " + std::to_string(p.base_version) +
                                           " but the latest approved version is " +
                                           std::to_string(latest ? latest->version : 0) + "; rebase required");
    CardVersion next;
    next.version = card.versions.back().version + 1;
    next.content = latest->content;
    if (p.diff.malfunction) next.content.malfunction = *p.diff.malfunction;
    if (p.diff.solutions) next.content.solutions = *p.diff.solutions;
    next.author = p.proposer;
    card.versions.push_back(std::move(next));
    result = &card.versions.back();
  }
  result->status = VersionStatus::approved;
  result->editor_of_record = editor;
  result->content_hash = content_hash(result->content);
  result->approval_seq = ++approvals_;
  p.state = ProposalState::approved;
  p.decided_by = editor;
  p.resulting_version = result->version;
  return result->version;
}

void KnowledgeBase::reject(const std::string& proposal_id, const std::string& editor, const std::string& reason) {
  std::lock_guard lock(mutex_);
  require_editor(editor);
  auto& p = proposal_locked(proposal_id);
  if (p.state != ProposalState::open)
    throw Error(ErrorCode::state, proposal_id + " is " + std::string(to_string(p.state)) + ", not open");
  if (p.base_version == 0) card_locked(p.card_id).versions.front().status = VersionStatus::draft;
  p.state = ProposalState::rejected;
  p.decided_by = editor;
  if (!reason.empty()) p.note += (p.note.empty() ? "" : " | ") + std::string("rejected: ") + reason;
}

void KnowledgeBase::rebase(const std::string& proposal_id, const std::string& user) {
  std::lock_guard lock(mutex_);
  const Role role = role_locked(user);
  auto& p = proposal_locked(proposal_id);
  if (p.proposer != user && role != Role::editor)
    throw Error(ErrorCode::authorization, "only the proposer or an editor may rebase " + proposal_id);
  if (p.state != ProposalState::open) throw Error(ErrorCode::state, proposal_id + " is not open");
  if (p.base_version == 0) throw Error(ErrorCode::state, "creation proposals cannot be rebased");
  const auto* latest = card_locked(p.card_id).approved();
  p.base_version = latest->version;
}

void KnowledgeBase::deprecate(const std::string& card_id, const std::string& editor) {
  std::lock_guard lock(mutex_);
  require_editor(editor);
  card_locked(card_id).deprecated = true;
}

void KnowledgeBase::comment(const std::string& card_id, const std::string& author, const std::string& text) {
  if (text.empty()) throw Error(ErrorCode::validation, "comment text must not be empty");
  std::lock_guard lock(mutex_);
  role_locked(author);
  card_locked(card_id).comments.push_back({author, clock_(), text});
}

std::optional<std::vector<std::string>> KnowledgeBase::path_locked(const std::string& from,
                                                                   const std::string& to) const {
  std::map<std::string, std::string> parent;
  std::deque<std::string> queue{from};
  parent[from] = from;
  while (!queue.empty()) {
    const auto cur = queue.front();
    queue.pop_front();
    if (cur == to) {
      std::vector<std::string> path{to};
      for (auto n = to; n != from;) {
        n = parent[n];
        path.push_back(n);
      }
      std::reverse(path.begin(), path.end());
      return path;
    }
    for (const auto& l : links_)
      if (l.from == cur && !parent.count(l.to)) {
        parent[l.to] = cur;
        queue.push_back(l.to);
      }
  }
  return std::nullopt;
}

void KnowledgeBase::link_causal(const std::string& from, const std::string& to, const std::string& editor,
                                const std::string& note) {
  std::lock_guard lock(mutex_);
  require_editor(editor);
  card_locked(from);
  card_locked(to);
  if (from == to) throw Error(ErrorCode::cycle, "causal cycle: " + from + " -> " + to);
  for (const auto& l : links_)
    if (l.from == from && l.to == to) throw Error(ErrorCode::conflict, "link " + from + " -> " + to + " exists");
  if (const auto back = path_locked(to, from)) {
    std::string msg = "causal cycle: " + from;
    for (const auto& n : *back) msg += " -> " + n;
    throw Error(ErrorCode::cycle, msg);
  }
  links_.push_back({from, to, note});
}

std::vector<std::string> KnowledgeBase::reach_locked(const std::string& start, bool forward) const {
  card_locked(start);
  std::set<std::string> seen;
  std::deque<std::string> queue{start};
  while (!queue.empty()) {
    const auto cur = queue.front();
    queue.pop_front();
    for (const auto& l : links_) {
      const auto& src = forward ? l.from : l.to;
      const auto& dst = forward ? l.to : l.from;
      if (src == cur && dst != start && seen.insert(dst).second) queue.push_back(dst);
    }
  }
  return {seen.begin(), seen.end()};
}

std::vector<std::string> KnowledgeBase::causes_of(const std::string& card_id) const {
  std::lock_guard lock(mutex_);
  return reach_locked(card_id, false);
}

std::vector<std::string> KnowledgeBase::effects_of(const std::string& card_id) const {
  std::lock_guard lock(mutex_);
  return reach_locked(card_id, true);
}

std::vector<CausalLink> KnowledgeBase::links() const {
  std::lock_guard lock(mutex_);
  return links_;
}

std::vector<CardView> KnowledgeBase::find_cards(const Query& query, const Scorer& scorer) const {
  std::vector<CardView> out;
  {
    std::lock_guard lock(mutex_);
    for (const auto& [id, card] : cards_) {
      if (card.deprecated) continue;
      const auto* v = card.approved();
      if (!v) continue;
      const auto& m = v->content.malfunction;
      const bool hit = (query.kind == QueryKind::error_code && contains(m.error_codes, query.value)) ||
                       (query.kind == QueryKind::location && contains(m.locations, query.value)) ||
                       (query.kind == QueryKind::situation && contains(m.situations, query.value));
      if (hit) out.push_back({id, v->version, v->content, v->approval_seq, 0.0});
    }
  }
  // The scorer may consult other components; call it without holding the lock.
  if (scorer)
    for (auto& c : out) c.score = scorer(c.card_id);
  std::sort(out.begin(), out.end(), [](const CardView& a, const CardView& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.approval_seq != b.approval_seq) return a.approval_seq > b.approval_seq;
    return a.card_id < b.card_id;
  });
  return out;
}

std::optional<CardView> KnowledgeBase::visible_card(const std::string& card_id) const {
  std::lock_guard lock(mutex_);
  const auto& card = card_locked(card_id);
  const auto* v = card.approved();
  if (card.deprecated || !v) return std::nullopt;
  return CardView{card_id, v->version, v->content, v->approval_seq, 0.0};
}

Card KnowledgeBase::card(const std::string& card_id) const {
  std::lock_guard lock(mutex_);
  return card_locked(card_id);
}

CardVersion KnowledgeBase::version(const std::string& card_id, int version) const {
  std::lock_guard lock(mutex_);
  const auto& card = card_locked(card_id);
  if (version < 1 || version > static_cast<int>(card.versions.size()))
    throw Error(ErrorCode::not_found, card_id + " has no version " + std::to_string(version));
  return card.versions[static_cast<std::size_t>(version - 1)];
}

std::vector<std::string> KnowledgeBase::card_ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [id, _] : cards_) out.push_back(id);
  return out;
}

ChangeProposal KnowledgeBase::proposal(const std::string& proposal_id) const {
  std::lock_guard lock(mutex_);
  const auto it = proposals_.find(proposal_id);
  if (it == proposals_.end()) throw Error(ErrorCode::not_found, "unknown proposal " + proposal_id);
  return it->second;
}

std::vector<ChangeProposal> KnowledgeBase::proposals(std::optional<ProposalState> state) const {
  std::lock_guard lock(mutex_);
  std::vector<ChangeProposal> out;
  for (const auto& [_, p] : proposals_)
    if (!state || p.state == *state) out.push_back(p);
  return out;
}

bool KnowledgeBase::verify_integrity() const {
  std::lock_guard lock(mutex_);
  for (const auto& [_, card] : cards_)
    for (const auto& v : card.versions)
      if (v.status == VersionStatus::approved && v.content_hash != content_hash(v.content)) return false;
  return true;
}

bool KnowledgeBase::acyclic() const {
  std::lock_guard lock(mutex_);
  return links_acyclic(cards_, links_);
}

// ---------------------------------------------------------------------------
// Serialization

json KnowledgeBase::to_json_locked() const {
  json users = json::object();
  for (const auto& [id, role] : users_) users[id] = to_string(role);
  json cards = json::array();
  for (const auto& [_, c] : cards_) cards.push_back(kb::to_json(c, true));
  json proposals = json::array();
  for (const auto& [_, p] : proposals_) proposals.push_back(kb::to_json(p));
  json links = json::array();
  for (const auto& l : links_) links.push_back({{"from", l.from}, {"to", l.to}, {"note", l.note}});
  return json{{"kb_schema", kSchema},
              {"users", std::move(users)},
              {"cards", std::move(cards)},
              {"proposals", std::move(proposals)},
              {"links", std::move(links)},
              {"next_card", next_card_},
              {"next_proposal", next_proposal_},
              {"approvals", approvals_}};
}

json KnowledgeBase::to_json() const {
  std::lock_guard lock(mutex_);
  return to_json_locked();
}

void KnowledgeBase::load_json(const json& j) {
  std::map<std::string, Role> users;
  std::map<std::string, Card> cards;
  std::map<std::string, ChangeProposal> proposals;
  std::vector<CausalLink> links;
  std::uint64_t next_card = 1, next_proposal = 1, approvals = 0;
  try {
    if (j.at("kb_schema").get<int>() != kSchema) throw Error(ErrorCode::validation, "unsupported kb_schema");
    for (const auto& [id, role] : j.at("users").items()) users[id] = parse_role(role.get<std::string>());
    for (const auto& jc : j.at("cards")) {
      Card c;
      c.card_id = jc.at("card_id").get<std::string>();
      c.deprecated = jc.value("deprecated", false);
      for (const auto& jv : jc.at("versions")) c.versions.push_back(version_from_json(jv));
      for (const auto& cm : jc.value("comments", json::array()))
        c.comments.push_back({cm.at("author").get<std::string>(), cm.at("at").get<Millis>(), cm.at("text").get<std::string>()});
      if (c.versions.empty()) throw Error(ErrorCode::validation, c.card_id + " has no versions");
      for (std::size_t i = 0; i < c.versions.size(); ++i) {
        const auto& v = c.versions[i];
        if (v.version != static_cast<int>(i) + 1) throw Error(ErrorCode::validation, c.card_id + " version history has gaps");
        if (v.status == VersionStatus::approved && v.content_hash != content_hash(v.content))
          throw Error(ErrorCode::validation, c.card_id + " v" + std::to_string(v.version) + " content hash mismatch");
      }
      cards.emplace(c.card_id, std::move(c));
    }
    for (const auto& jp : j.at("proposals")) {
      auto p = proposal_from_json(jp);
      if (!cards.count(p.card_id)) throw Error(ErrorCode::validation, p.proposal_id + " references unknown card");
      proposals.emplace(p.proposal_id, std::move(p));
    }
    for (const auto& jl : j.at("links")) {
      CausalLink l{jl.at("from").get<std::string>(), jl.at("to").get<std::string>(), jl.value("note", std::string{})};
      if (!cards.count(l.from) || !cards.count(l.to)) throw Error(ErrorCode::validation, "link references unknown card");
      links.push_back(std::move(l));
    }
    next_card = j.at("next_card").get<std::uint64_t>();
    next_proposal = j.at("next_proposal").get<std::uint64_t>();
    approvals = j.at("approvals").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed knowledge base: ") + e.what());
  }
  std::lock_guard lock(mutex_);
  users_ = std::move(users);
  cards_ = std::move(cards);
  proposals_ = std::move(proposals);
  links_ = std::move(links);
  next_card_ = next_card;
  next_proposal_ = next_proposal;
  approvals_ = approvals;
  // Links were validated one by one when created; a hand-edited file could still close a cycle.
  if (!links_acyclic(cards_, links_)) {
    users_.clear();
    cards_.clear();
    proposals_.clear();
    links_.clear();
    throw Error(ErrorCode::cycle, "stored causal links contain a cycle");
  }
}

void KnowledgeBase::save(const std::filesystem::path& dir) const {
  json index;
  {
    std::lock_guard lock(mutex_);
    index = to_json_locked();
  }
  std::filesystem::create_directories(dir / "objects");
  for (auto& jc : index["cards"]) {
    json hashes = json::array();
    for (auto& jv : jc["versions"]) {
      json doc = jv;
      doc["card_id"] = jc["card_id"];
      const auto hash = object_hash(doc);
      const auto path = dir / "objects" / (hash + ".json");
      if (!std::filesystem::exists(path)) write_file(path, doc.dump(2) + "\n");
      hashes.push_back(hash);
    }
    jc["versions"] = std::move(hashes);
  }
  write_file(dir / "index.json", index.dump(2) + "\n");
}

void KnowledgeBase::load(const std::filesystem::path& dir) {
  auto index = read_json_file(dir / "index.json");
  try {
    for (auto& jc : index.at("cards")) {
      json versions = json::array();
      for (const auto& h : jc.at("versions")) {
        const auto hash = h.get<std::string>();
        auto doc = read_json_file(dir / "objects" / (hash + ".json"));
        if (object_hash(doc) != hash) throw Error(ErrorCode::validation, "object " + hash + " does not match its hash");
        doc.erase("card_id");
        versions.push_back(std::move(doc));
      }
      jc["versions"] = std::move(versions);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed index: ") + e.what());
  }
  load_json(index);
}

void KnowledgeBase::export_archive(std::ostream& out) const { out << to_json().dump() << '\n'; }

void KnowledgeBase::import_archive(std::istream& in) {
  try {
    load_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::validation, std::string("archive is not JSON: ") + e.what());
  }
}

}  // namespace millassist::kb
