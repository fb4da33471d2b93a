#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "millassist/common.hpp"

namespace millassist::kb {

// --- users -----------------------------------------------------------------------

enum class Role { operator_role, editor };
std::string_view to_string(Role r);
Role parse_role(std::string_view s);

// --- content -----------------------------------------------------------------------

struct SolutionStep {
  std::string text;
  std::optional<std::string> media;  ///< opaque reference, e.g. a file name

  bool operator==(const SolutionStep&) const = default;
};

struct Malfunction {
  std::string description;
  std::string cause;
  std::vector<std::string> locations;
  std::vector<std::string> error_codes;
  std::vector<std::string> situations;  ///< recognized-situation labels

  bool operator==(const Malfunction&) const = default;
};

struct CardContent {
  Malfunction malfunction;
  std::vector<SolutionStep> solutions;

  bool operator==(const CardContent&) const = default;
};

nlohmann::json to_json(const CardContent& c);
CardContent content_from_json(const nlohmann::json& j);
/// Hash of the canonical serialization.
std::string content_hash(const CardContent& c);

struct Comment {
  std::string author;
  Millis at = 0;
  std::string text;

  bool operator==(const Comment&) const = default;
};

enum class VersionStatus { draft, proposed, approved, deprecated };
std::string_view to_string(VersionStatus s);

struct CardVersion {
  int version = 1;
  VersionStatus status = VersionStatus::draft;
  CardContent content;
  std::string author;
  std::optional<std::string> editor_of_record;
  std::string content_hash;       ///< fixed on approval
  std::uint64_t approval_seq = 0;  ///< 0 = never approved; larger = more recent

  bool operator==(const CardVersion&) const = default;
};

struct Card {
  std::string card_id;
  std::vector<CardVersion> versions;  ///< versions[i].version == i + 1
  std::vector<Comment> comments;
  bool deprecated = false;

  /// Latest approved version, if any.
  const CardVersion* approved() const;
};

nlohmann::json to_json(const CardVersion& v);
nlohmann::json to_json(const Card& c, bool with_history);

// --- proposals -----------------------------------------------------------------------

/// Section-level replacement: each present section replaces the card's.
struct Diff {
  std::optional<Malfunction> malfunction;
  std::optional<std::vector<SolutionStep>> solutions;

  bool empty() const { return !malfunction && !solutions; }
};

nlohmann::json to_json(const Diff& d);
Diff diff_from_json(const nlohmann::json& j);

enum class ProposalState { open, approved, rejected };
std::string_view to_string(ProposalState s);

struct ChangeProposal {
  std::string proposal_id;
  std::string card_id;
  int base_version = 0;  ///< 0 = creation proposal for the draft
  Diff diff;
  std::string proposer;
  std::string note;
  ProposalState state = ProposalState::open;
  std::optional<std::string> decided_by;
  std::optional<int> resulting_version;
};

nlohmann::json to_json(const ChangeProposal& p);

struct CausalLink {
  std::string from;
  std::string to;
  std::string note;
};

// --- queries -----------------------------------------------------------------------

enum class QueryKind { error_code, location, situation };
std::string_view to_string(QueryKind k);

struct Query {
  QueryKind kind = QueryKind::error_code;
  std::string value;
};

/// Operator-visible card: the latest approved version of a non-deprecated card.
struct CardView {
  std::string card_id;
  int version = 0;
  CardContent content;
  std::uint64_t approval_seq = 0;
  double score = 0.0;
};

nlohmann::json to_json(const CardView& v);

/// Ranking score per card id; higher ranks first.
using Scorer = std::function<double(const std::string& card_id)>;

// --- store -----------------------------------------------------------------------

class KnowledgeBase {
 public:
  KnowledgeBase();

  KnowledgeBase(const KnowledgeBase&) = delete;
  KnowledgeBase& operator=(const KnowledgeBase&) = delete;

  void add_user(const std::string& user_id, Role role);
  /// Throws Error(authorization) for unknown users.
  Role role_of(const std::string& user_id) const;
  std::map<std::string, Role> users() const;

  /// Timestamp source for comments; defaults to wall-clock milliseconds.
  void set_clock(std::function<Millis()> clock);

  std::string create_card(const CardContent& draft, const std::string& author);
  /// Submits the version-1 draft for approval; returns the proposal id.
  std::string submit_draft(const std::string& card_id, const std::string& user);
  std::string propose_change(const std::string& card_id, const Diff& diff, const std::string& proposer,
                             const std::string& note = {});
  /// Returns the resulting version number.
  int approve(const std::string& proposal_id, const std::string& editor);
  void reject(const std::string& proposal_id, const std::string& editor, const std::string& reason = {});
  /// Moves a stale open proposal onto the latest approved version.
  void rebase(const std::string& proposal_id, const std::string& user);
  void deprecate(const std::string& card_id, const std::string& editor);
  void comment(const std::string& card_id, const std::string& author, const std::string& text);

  /// Editor role required. Throws Error(cycle) naming the cycle path.
  void link_causal(const std::string& from, const std::string& to, const std::string& editor,
                   const std::string& note = {});
  std::vector<std::string> causes_of(const std::string& card_id) const;
  std::vector<std::string> effects_of(const std::string& card_id) const;
  std::vector<CausalLink> links() const;

  /// Operator query: approved, non-deprecated cards only, ranked by `scorer`
  /// (descending), then most recently approved, then id.
  std::vector<CardView> find_cards(const Query& query, const Scorer& scorer = {}) const;
  std::optional<CardView> visible_card(const std::string& card_id) const;

  /// Full editor view including drafts and history.
  Card card(const std::string& card_id) const;
  CardVersion version(const std::string& card_id, int version) const;
  std::vector<std::string> card_ids() const;
  ChangeProposal proposal(const std::string& proposal_id) const;
  std::vector<ChangeProposal> proposals(std::optional<ProposalState> state = {}) const;

  /// Recomputes approved-version hashes; false if any content changed.
  bool verify_integrity() const;
  /// Kahn's algorithm over the causal links.
  bool acyclic() const;

  /// Whole state as one JSON document, and back.
  nlohmann::json to_json() const;
  void load_json(const nlohmann::json& j);

  /// Content-addressed directory: objects/<hash>.json per card version plus
  /// index.json with cards, proposals, links and users.
  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

  void export_archive(std::ostream& out) const;
  void import_archive(std::istream& in);

 private:
  Card& card_locked(const std::string& card_id);
  const Card& card_locked(const std::string& card_id) const;
  ChangeProposal& proposal_locked(const std::string& proposal_id);
  Role role_locked(const std::string& user_id) const;
  void require_editor(const std::string& user_id) const;
  std::optional<std::vector<std::string>> path_locked(const std::string& from, const std::string& to) const;
  std::vector<std::string> reach_locked(const std::string& start, bool forward) const;
  nlohmann::json to_json_locked() const;

  mutable std::mutex mutex_;
  std::function<Millis()> clock_;
  std::map<std::string, Role> users_;
  std::map<std::string, Card> cards_;
  std::map<std::string, ChangeProposal> proposals_;
  std::vector<CausalLink> links_;
  std::uint64_t next_card_ = 1;
  std::uint64_t next_proposal_ = 1;
  std::uint64_t approvals_ = 0;
};

}  // namespace millassist::kb
