#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "millassist/common.hpp"
#include "millassist/records.hpp"

namespace millassist::alarms {

enum class GroupKind { chatter, sequence, singleton };
std::string_view to_string(GroupKind k);

/// One presentation unit for the operator.
struct AlarmGroup {
  std::string group_id;
  GroupKind kind = GroupKind::singleton;
  AlarmEvent representative;
  std::vector<std::string> members;  ///< alarm ids, timestamp order
  std::size_t count = 0;
  Millis first = 0;
  Millis last = 0;
  Severity max_severity = Severity::info;

  bool operator==(const AlarmGroup&) const = default;
};

nlohmann::json to_json(const AlarmGroup& g);

struct AlarmPattern {
  std::vector<std::string> sequence;
  std::size_t support = 0;
  double max_gap_s = 0.0;

  bool operator==(const AlarmPattern&) const = default;
};

nlohmann::json to_json(const AlarmPattern& p);
AlarmPattern pattern_from_json(const nlohmann::json& j);
void write_patterns(std::ostream& out, const std::vector<AlarmPattern>& patterns);
std::vector<AlarmPattern> read_patterns(std::istream& in);

// --- online stages ---------------------------------------------------------
// Each stage consumes a timestamp-ordered stream and appends finished units to
// `out`. `advance(now)` closes whatever can no longer change at time `now`.

/// Collapses consecutive raised alarms of one (tag, error_code) whose
/// inter-arrival is <= window into a chatter group. Cleared events are ignored.
/// A window of 0 disables collapsing.
class ChatterSuppressor {
 public:
  explicit ChatterSuppressor(double window_s);

  void push(const AlarmEvent& alarm, std::vector<AlarmGroup>& out);
  void advance(Millis now, std::vector<AlarmGroup>& out);
  void flush(std::vector<AlarmGroup>& out);

  Millis window() const { return window_; }

 private:
  void close_if(const std::function<bool(const AlarmGroup&)>& pred, std::vector<AlarmGroup>& out);

  Millis window_;
  std::map<std::pair<std::string, std::string>, AlarmGroup> open_;
};

/// Online matcher that merges singleton units forming a known pattern into
/// one sequence group (representative = first alarm). Longest match wins; a
/// group is emitted when its pattern completes or the gap expires. Units that
/// are not singletons pass through unchanged.
class SequenceGrouper {
 public:
  explicit SequenceGrouper(std::vector<AlarmPattern> patterns);

  void push(const AlarmGroup& unit, std::vector<AlarmGroup>& out);
  void advance(Millis now, std::vector<AlarmGroup>& out);
  void flush(std::vector<AlarmGroup>& out);

 private:
  struct Partial {
    std::vector<AlarmGroup> units;
  };

  bool can_extend(const Partial& p, const std::string& code, Millis t) const;
  bool could_grow(const Partial& p, Millis now) const;
  bool is_complete(const std::vector<std::string>& codes) const;
  bool has_longer(const std::vector<std::string>& codes) const;
  void resolve(Partial& p, std::vector<AlarmGroup>& out) const;

  std::vector<AlarmPattern> patterns_;
  std::vector<Partial> partials_;
};

/// Chatter suppression followed by sequence grouping.
class FilterChain {
 public:
  FilterChain(double chatter_window_s, std::vector<AlarmPattern> patterns);

  void push(const AlarmEvent& alarm, std::vector<AlarmGroup>& out);
  void advance(Millis now, std::vector<AlarmGroup>& out);
  void flush(std::vector<AlarmGroup>& out);

 private:
  ChatterSuppressor chatter_;
  SequenceGrouper sequences_;
  std::vector<AlarmGroup> scratch_;
};

// --- batch forms -------------------------------------------------------------

std::vector<AlarmGroup> suppress_chatter(std::span<const AlarmEvent> stream, double window_s);
std::vector<AlarmGroup> group_by_pattern(std::span<const AlarmEvent> stream, const std::vector<AlarmPattern>& patterns);
std::vector<AlarmGroup> filter_stream(std::span<const AlarmEvent> stream, double chatter_window_s,
                                      const std::vector<AlarmPattern>& patterns);

/// Gap-bounded contiguous n-gram mining over raised alarms, lengths
/// 2..max_len, no code repeated consecutively. Patterns that are a prefix of
/// another returned pattern with equal support are dropped.
std::vector<AlarmPattern> mine_sequences(std::span<const AlarmEvent> history, std::size_t min_support,
                                         double max_gap_s, std::size_t max_len);

/// Representatives of singleton units in time order; the history used for
/// mining once chattering repeats are collapsed.
std::vector<AlarmEvent> singleton_history(std::span<const AlarmEvent> stream, double chatter_window_s);

// --- knowledge linkage --------------------------------------------------------

enum class LinkStatus { pass, hold, unfiltered };
std::string_view to_string(LinkStatus s);

struct LinkedGroup {
  AlarmGroup group;
  std::vector<std::string> card_ids;
  LinkStatus status = LinkStatus::pass;
};

/// Error code -> ranked approved card ids. May throw to signal outage.
using CardLookup = std::function<std::vector<std::string>(const std::string& error_code)>;

/// Attaches cards for the representative's error code. No card -> hold,
/// except critical groups which always pass. Lookup failure -> unfiltered.
LinkedGroup knowledge_link_filter(const AlarmGroup& group, const CardLookup& lookup);

// --- repetition ---------------------------------------------------------------

enum class Importance { critical, normal, info };
std::string_view to_string(Importance i);
Importance importance_of(Severity s);

struct RepetitionPolicy {
  Importance importance = Importance::normal;
  std::vector<double> schedule_s;  ///< re-notify offsets after the first notification
  int max_repeats = 0;
};

void validate(const RepetitionPolicy& policy);
RepetitionPolicy default_policy(Importance importance);

struct Notification {
  Millis at = 0;
  bool push = true;  ///< false: listed only, no notification
  int repeat = 0;    ///< 0 = first
};

std::vector<Notification> schedule_repetition(const AlarmGroup& group, const RepetitionPolicy& policy,
                                              Millis presented_at, std::optional<Millis> acknowledged_at = {});

// --- metrics -------------------------------------------------------------------

struct FloodMetrics {
  std::size_t raw_alarms = 0;
  std::size_t presentation_units = 0;
  std::size_t groups_formed = 0;  ///< chatter + sequence units
  double alarm_rate_per_10min = 0.0;
  double suppression_ratio = 0.0;
};

nlohmann::json to_json(const FloodMetrics& m);

/// Raised alarms and units whose first alarm fall in [t0, t1).
FloodMetrics flood_metrics(std::span<const AlarmEvent> raw, std::span<const AlarmGroup> units, Millis t0, Millis t1);

}  // namespace millassist::alarms
