#include "millassist/alarm_filter.hpp"

#include <algorithm>
#include <istream>
#include <ostream>

namespace millassist::alarms {

using nlohmann::json;

namespace {

std::string group_id_for(const AlarmEvent& first) { return "grp-" + first.alarm_id; }

AlarmGroup start_group(const AlarmEvent& a) {
  AlarmGroup g;
  g.group_id = group_id_for(a);
  g.kind = GroupKind::singleton;
  g.representative = a;
  g.members = {a.alarm_id};
  g.count = 1;
  g.first = g.last = a.timestamp;
  g.max_severity = a.severity;
  return g;
}

AlarmGroup merge_sequence(std::span<const AlarmGroup> units) {
  AlarmGroup g = units.front();
  g.kind = GroupKind::sequence;
  for (const auto& u : units.subspan(1)) {
    g.members.insert(g.members.end(), u.members.begin(), u.members.end());
    g.count += u.count;
    g.last = std::max(g.last, u.last);
    g.max_severity = std::max(g.max_severity, u.max_severity);
  }
  return g;
}

bool is_prefix(const std::vector<std::string>& prefix, const std::vector<std::string>& of) {
  return prefix.size() <= of.size() && std::equal(prefix.begin(), prefix.end(), of.begin());
}

std::vector<std::string> codes_of(const std::vector<AlarmGroup>& units) {
  std::vector<std::string> out;
  out.reserve(units.size());
  for (const auto& u : units) out.push_back(u.representative.error_code);
  return out;
}

}  // namespace

std::string_view to_string(GroupKind k) {
  switch (k) {
    case GroupKind::chatter: return "chatter";
    case GroupKind::sequence: return "sequence";
    case GroupKind::singleton: return "singleton";
  }
  return "unknown";
}

json to_json(const AlarmGroup& g) {
  return json{{"group_id", g.group_id},
              {"kind", to_string(g.kind)},
              {"representative", to_json(Record{g.representative})},
              {"members", g.members},
              {"count", g.count},
              {"first", g.first},
              {"last", g.last},
              {"max_severity", to_string(g.max_severity)}};
}

json to_json(const AlarmPattern& p) {
  return json{{"sequence", p.sequence}, {"support", p.support}, {"max_gap_s", p.max_gap_s}};
}

AlarmPattern pattern_from_json(const json& j) {
  AlarmPattern p;
  try {
    p.sequence = j.at("sequence").get<std::vector<std::string>>();
    p.support = j.value("support", std::size_t{0});
    p.max_gap_s = j.at("max_gap_s").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed pattern record: ") + e.what());
  }
  if (p.sequence.size() < 2) throw Error(ErrorCode::validation, "pattern needs at least two error codes");
  for (std::size_t i = 1; i < p.sequence.size(); ++i)
    if (p.sequence[i] == p.sequence[i - 1]) throw Error(ErrorCode::validation, "pattern repeats a code consecutively");
  if (!(p.max_gap_s >= 0.0)) throw Error(ErrorCode::validation, "pattern max_gap_s must be >= 0");
  return p;
}

void write_patterns(std::ostream& out, const std::vector<AlarmPattern>& patterns) {
  for (const auto& p : patterns) out << to_json(p).dump() << '\n';
}

std::vector<AlarmPattern> read_patterns(std::istream& in) {
  std::vector<AlarmPattern> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(pattern_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::validation, std::string("malformed pattern line: ") + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Chatter

ChatterSuppressor::ChatterSuppressor(double window_s) : window_(seconds_to_millis(window_s)) {
  if (!(window_s >= 0.0)) throw Error(ErrorCode::validation, "chatter window must be >= 0");
}

void ChatterSuppressor::close_if(const std::function<bool(const AlarmGroup&)>& pred, std::vector<AlarmGroup>& out) {
  std::vector<AlarmGroup> closed;
  for (auto it = open_.begin(); it != open_.end();) {
    if (pred(it->second)) {
      closed.push_back(std::move(it->second));
      it = open_.erase(it);
    } else {
      ++it;
    }
  }
  std::sort(closed.begin(), closed.end(), [](const AlarmGroup& a, const AlarmGroup& b) {
    if (a.last != b.last) return a.last < b.last;
    if (a.first != b.first) return a.first < b.first;
    return a.representative.alarm_id < b.representative.alarm_id;
  });
  for (auto& g : closed) {
    g.kind = g.count > 1 ? GroupKind::chatter : GroupKind::singleton;
    out.push_back(std::move(g));
  }
}

void ChatterSuppressor::push(const AlarmEvent& alarm, std::vector<AlarmGroup>& out) {
  if (alarm.state != AlarmState::raised) return;
  if (window_ == 0) {
    out.push_back(start_group(alarm));
    return;
  }
  advance(alarm.timestamp, out);
  const auto key = std::make_pair(alarm.tag, alarm.error_code);
  const auto it = open_.find(key);
  if (it != open_.end()) {
    auto& g = it->second;
    g.members.push_back(alarm.alarm_id);
    ++g.count;
    g.last = alarm.timestamp;
    g.max_severity = std::max(g.max_severity, alarm.severity);
  } else {
    open_.emplace(key, start_group(alarm));
  }
}

void ChatterSuppressor::advance(Millis now, std::vector<AlarmGroup>& out) {
  close_if([&](const AlarmGroup& g) { return now - g.last > window_; }, out);
}

void ChatterSuppressor::flush(std::vector<AlarmGroup>& out) {
  close_if([](const AlarmGroup&) { return true; }, out);
}

// ---------------------------------------------------------------------------
// Sequences

SequenceGrouper::SequenceGrouper(std::vector<AlarmPattern> patterns) : patterns_(std::move(patterns)) {
  for (const auto& p : patterns_)
    if (p.sequence.size() < 2) throw Error(ErrorCode::validation, "pattern needs at least two error codes");
}

bool SequenceGrouper::can_extend(const Partial& p, const std::string& code, Millis t) const {
  auto codes = codes_of(p.units);
  codes.push_back(code);
  const Millis last = p.units.back().last;
  return std::any_of(patterns_.begin(), patterns_.end(), [&](const AlarmPattern& q) {
    return is_prefix(codes, q.sequence) && t - last <= seconds_to_millis(q.max_gap_s);
  });
}

bool SequenceGrouper::could_grow(const Partial& p, Millis now) const {
  const auto codes = codes_of(p.units);
  const Millis last = p.units.back().last;
  return std::any_of(patterns_.begin(), patterns_.end(), [&](const AlarmPattern& q) {
    return q.sequence.size() > codes.size() && is_prefix(codes, q.sequence) &&
           now - last <= seconds_to_millis(q.max_gap_s);
  });
}

bool SequenceGrouper::is_complete(const std::vector<std::string>& codes) const {
  return std::any_of(patterns_.begin(), patterns_.end(), [&](const AlarmPattern& q) { return q.sequence == codes; });
}

bool SequenceGrouper::has_longer(const std::vector<std::string>& codes) const {
  return std::any_of(patterns_.begin(), patterns_.end(), [&](const AlarmPattern& q) {
    return q.sequence.size() > codes.size() && is_prefix(codes, q.sequence);
  });
}

void SequenceGrouper::resolve(Partial& p, std::vector<AlarmGroup>& out) const {
  auto codes = codes_of(p.units);
  std::size_t matched = 0;
  for (std::size_t k = codes.size(); k >= 2; --k) {
    if (is_complete(std::vector<std::string>(codes.begin(), codes.begin() + static_cast<std::ptrdiff_t>(k)))) {
      matched = k;
      break;
    }
  }
  std::size_t i = 0;
  if (matched >= 2) {
    out.push_back(merge_sequence(std::span<const AlarmGroup>(p.units.data(), matched)));
    i = matched;
  }
  for (; i < p.units.size(); ++i) out.push_back(std::move(p.units[i]));
}

void SequenceGrouper::push(const AlarmGroup& unit, std::vector<AlarmGroup>& out) {
  if (unit.kind != GroupKind::singleton || patterns_.empty()) {
    out.push_back(unit);
    return;
  }
  const Millis t = unit.first;
  const auto& code = unit.representative.error_code;
  advance(t, out);
  for (auto it = partials_.begin(); it != partials_.end(); ++it) {
    if (!can_extend(*it, code, t)) continue;
    it->units.push_back(unit);
    const auto codes = codes_of(it->units);
    if (is_complete(codes) && !has_longer(codes)) {
      resolve(*it, out);
      partials_.erase(it);
    }
    return;
  }
  const bool starts = std::any_of(patterns_.begin(), patterns_.end(),
                                  [&](const AlarmPattern& q) { return q.sequence.front() == code; });
  if (starts) {
    partials_.push_back({{unit}});
  } else {
    out.push_back(unit);
  }
}

void SequenceGrouper::advance(Millis now, std::vector<AlarmGroup>& out) {
  for (auto it = partials_.begin(); it != partials_.end();) {
    if (!could_grow(*it, now)) {
      resolve(*it, out);
      it = partials_.erase(it);
    } else {
      ++it;
    }
  }
}

void SequenceGrouper::flush(std::vector<AlarmGroup>& out) {
  for (auto& p : partials_) resolve(p, out);
  partials_.clear();
}

// ---------------------------------------------------------------------------
// Chain

FilterChain::FilterChain(double chatter_window_s, std::vector<AlarmPattern> patterns)
    : chatter_(chatter_window_s), sequences_(std::move(patterns)) {}

// The sequence stage runs one chatter window behind: singleton units leave the
// chatter stage only once their window has passed.
void FilterChain::push(const AlarmEvent& alarm, std::vector<AlarmGroup>& out) {
  scratch_.clear();
  chatter_.push(alarm, scratch_);
  for (const auto& u : scratch_) sequences_.push(u, out);
  sequences_.advance(alarm.timestamp - chatter_.window(), out);
}

void FilterChain::advance(Millis now, std::vector<AlarmGroup>& out) {
  scratch_.clear();
  chatter_.advance(now, scratch_);
  for (const auto& u : scratch_) sequences_.push(u, out);
  sequences_.advance(now - chatter_.window(), out);
}

void FilterChain::flush(std::vector<AlarmGroup>& out) {
  scratch_.clear();
  chatter_.flush(scratch_);
  for (const auto& u : scratch_) sequences_.push(u, out);
  sequences_.flush(out);
}

std::vector<AlarmGroup> suppress_chatter(std::span<const AlarmEvent> stream, double window_s) {
  ChatterSuppressor stage(window_s);
  std::vector<AlarmGroup> out;
  for (const auto& a : stream) stage.push(a, out);
  stage.flush(out);
  return out;
}

std::vector<AlarmGroup> group_by_pattern(std::span<const AlarmEvent> stream, const std::vector<AlarmPattern>& patterns) {
  SequenceGrouper stage(patterns);
  std::vector<AlarmGroup> out;
  for (const auto& a : stream)
    if (a.state == AlarmState::raised) stage.push(start_group(a), out);
  stage.flush(out);
  return out;
}

std::vector<AlarmGroup> filter_stream(std::span<const AlarmEvent> stream, double chatter_window_s,
                                      const std::vector<AlarmPattern>& patterns) {
  FilterChain chain(chatter_window_s, patterns);
  std::vector<AlarmGroup> out;
  for (const auto& a : stream) chain.push(a, out);
  chain.flush(out);
  return out;
}

std::vector<AlarmEvent> singleton_history(std::span<const AlarmEvent> stream, double chatter_window_s) {
  std::vector<AlarmEvent> out;
  for (const auto& g : suppress_chatter(stream, chatter_window_s))
    if (g.kind == GroupKind::singleton) out.push_back(g.representative);
  std::stable_sort(out.begin(), out.end(), [](const AlarmEvent& a, const AlarmEvent& b) {
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    return a.alarm_id < b.alarm_id;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Mining

std::vector<AlarmPattern> mine_sequences(std::span<const AlarmEvent> history, std::size_t min_support,
                                         double max_gap_s, std::size_t max_len) {
  if (min_support < 1) throw Error(ErrorCode::validation, "min_support must be >= 1");
  if (!(max_gap_s >= 0.0)) throw Error(ErrorCode::validation, "max_gap_s must be >= 0");
  std::vector<const AlarmEvent*> raised;
  for (const auto& a : history) {
    if (a.state != AlarmState::raised) continue;
    if (!raised.empty() && a.timestamp < raised.back()->timestamp)
      throw Error(ErrorCode::ordering, "alarm history must be timestamp-ordered (at " + a.alarm_id + ")");
    raised.push_back(&a);
  }
  const Millis gap = seconds_to_millis(max_gap_s);

  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i < raised.size(); ++i) {
    std::vector<std::string> seq{raised[i]->error_code};
    for (std::size_t j = i + 1; j < raised.size() && seq.size() < max_len; ++j) {
      if (raised[j]->timestamp - raised[j - 1]->timestamp > gap) break;
      if (raised[j]->error_code == raised[j - 1]->error_code) break;
      seq.push_back(raised[j]->error_code);
      ++counts[seq];
    }
  }

  // Support never grows with extension, so a longer pattern with equal
  // support exists iff some one-step extension has equal support.
  std::map<std::vector<std::string>, std::size_t> frequent;
  for (const auto& [seq, n] : counts)
    if (n >= min_support) frequent.emplace(seq, n);
  std::vector<AlarmPattern> out;
  for (const auto& [seq, n] : frequent) {
    bool dominated = false;
    for (auto it = frequent.upper_bound(seq); it != frequent.end() && is_prefix(seq, it->first); ++it) {
      if (it->first.size() == seq.size() + 1 && it->second == n) {
        dominated = true;
        break;
      }
    }
    if (!dominated) out.push_back({seq, n, max_gap_s});
  }
  std::sort(out.begin(), out.end(), [](const AlarmPattern& a, const AlarmPattern& b) {
    if (a.support != b.support) return a.support > b.support;
    return a.sequence < b.sequence;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Knowledge linkage, repetition, metrics

std::string_view to_string(LinkStatus s) {
  switch (s) {
    case LinkStatus::pass: return "pass";
    case LinkStatus::hold: return "hold";
    case LinkStatus::unfiltered: return "unfiltered";
  }
  return "unknown";
}

LinkedGroup knowledge_link_filter(const AlarmGroup& group, const CardLookup& lookup) {
  LinkedGroup linked{group, {}, LinkStatus::pass};
  try {
    if (!lookup) throw Error(ErrorCode::unavailable, "no knowledge base");
    linked.card_ids = lookup(group.representative.error_code);
  } catch (...) {
    // Fail open: the group is shown as-is.
    linked.card_ids.clear();
    linked.status = LinkStatus::unfiltered;
    return linked;
  }
  const bool critical = importance_of(group.max_severity) == Importance::critical;
  linked.status = linked.card_ids.empty() && !critical ? LinkStatus::hold : LinkStatus::pass;
  return linked;
}

std::string_view to_string(Importance i) {
  switch (i) {
    case Importance::critical: return "critical";
    case Importance::normal: return "normal";
    case Importance::info: return "info";
  }
  return "unknown";
}

Importance importance_of(Severity s) {
  switch (s) {
    case Severity::alarm: return Importance::critical;
    case Severity::warning: return Importance::normal;
    case Severity::info: return Importance::info;
  }
  return Importance::normal;
}

void validate(const RepetitionPolicy& policy) {
  for (std::size_t i = 0; i < policy.schedule_s.size(); ++i) {
    if (!(policy.schedule_s[i] > 0.0)) throw Error(ErrorCode::validation, "re-notify offsets must be > 0");
    if (i > 0 && !(policy.schedule_s[i] > policy.schedule_s[i - 1]))
      throw Error(ErrorCode::validation, "re-notify offsets must be strictly increasing");
  }
  if (policy.importance == Importance::info && !policy.schedule_s.empty())
    throw Error(ErrorCode::validation, "info policy must not re-notify");
  if (policy.max_repeats < 0) throw Error(ErrorCode::validation, "max_repeats must be >= 0");
}

RepetitionPolicy default_policy(Importance importance) {
  if (importance == Importance::critical) return {importance, {300.0, 900.0}, 2};
  return {importance, {}, 0};
}

std::vector<Notification> schedule_repetition(const AlarmGroup& group, const RepetitionPolicy& policy,
                                              Millis presented_at, std::optional<Millis> acknowledged_at) {
  validate(policy);
  (void)group;
  std::vector<Notification> plan;
  if (policy.importance == Importance::info) {
    plan.push_back({presented_at, false, 0});
    return plan;
  }
  plan.push_back({presented_at, true, 0});
  if (policy.importance != Importance::critical) return plan;
  const auto repeats = std::min<std::size_t>(policy.schedule_s.size(), static_cast<std::size_t>(policy.max_repeats));
  for (std::size_t i = 0; i < repeats; ++i) {
    const Millis at = presented_at + seconds_to_millis(policy.schedule_s[i]);
    if (acknowledged_at && at > *acknowledged_at) break;
    plan.push_back({at, true, static_cast<int>(i + 1)});
  }
  return plan;
}

json to_json(const FloodMetrics& m) {
  return json{{"raw_alarms", m.raw_alarms},
              {"presentation_units", m.presentation_units},
              {"groups_formed", m.groups_formed},
              {"alarm_rate_per_10min", m.alarm_rate_per_10min},
              {"suppression_ratio", m.suppression_ratio}};
}

FloodMetrics flood_metrics(std::span<const AlarmEvent> raw, std::span<const AlarmGroup> units, Millis t0, Millis t1) {
  if (!(t0 < t1)) throw Error(ErrorCode::range, "metrics window must be non-empty");
  FloodMetrics m;
  for (const auto& a : raw)
    if (a.state == AlarmState::raised && a.timestamp >= t0 && a.timestamp < t1) ++m.raw_alarms;
  for (const auto& u : units) {
    if (u.first < t0 || u.first >= t1) continue;
    ++m.presentation_units;
    if (u.kind != GroupKind::singleton) ++m.groups_formed;
  }
  m.alarm_rate_per_10min = static_cast<double>(m.raw_alarms) / (static_cast<double>(t1 - t0) / 600'000.0);
  m.suppression_ratio =
      m.raw_alarms == 0 ? 0.0 : 1.0 - static_cast<double>(m.presentation_units) / static_cast<double>(m.raw_alarms);
  return m;
}

}  // namespace millassist::alarms
