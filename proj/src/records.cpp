#include "millassist/records.hpp"

#include <istream>
#include <ostream>

namespace millassist {

using nlohmann::json;

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

[[noreturn]] void bad_enum(std::string_view what, std::string_view value) {
  throw Error(ErrorCode::validation, "unknown " + std::string(what) + " '" + std::string(value) + "'");
}

template <class T>
T required(const json& j, const char* field) {
  const auto it = j.find(field);
  if (it == j.end()) throw Error(ErrorCode::validation, std::string("missing field '") + field + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::validation, std::string("field '") + field + "' has wrong type");
  }
}

}  // namespace

RecordKind kind_of(const Record& r) { return static_cast<RecordKind>(r.index()); }

Millis timestamp_of(const Record& r) {
  return std::visit(overloaded{
                        [](const AlarmEvent& a) { return a.timestamp; },
                        [](const LabMeasurement& l) { return l.measured_at; },
                        [](const ReelRecord& reel) { return reel.end; },
                        [](const SensorReading& s) { return s.timestamp; },
                        [](const SortingBatch& b) { return b.sorted_at; },
                    },
                    r);
}

std::string tag_of(const Record& r) {
  return std::visit(overloaded{
                        [](const AlarmEvent& a) { return a.tag; },
                        [](const LabMeasurement& l) { return l.parameter; },
                        [](const ReelRecord& reel) { return std::to_string(reel.reel_id); },
                        [](const SensorReading& s) { return s.tag; },
                        [](const SortingBatch& b) { return b.delivery_id; },
                    },
                    r);
}

std::string_view to_string(RecordKind k) {
  switch (k) {
    case RecordKind::alarm: return "alarm";
    case RecordKind::lab: return "lab";
    case RecordKind::reel: return "reel";
    case RecordKind::sensor: return "sensor";
    case RecordKind::sorting: return "sorting";
  }
  return "unknown";
}

std::string_view to_string(QualityFlag f) { return f == QualityFlag::good ? "good" : "suspect"; }

std::string_view to_string(Severity s) {
  switch (s) {
    case Severity::info: return "info";
    case Severity::warning: return "warning";
    case Severity::alarm: return "alarm";
  }
  return "unknown";
}

std::string_view to_string(AlarmState s) { return s == AlarmState::raised ? "raised" : "cleared"; }

RecordKind parse_record_kind(std::string_view s) {
  if (s == "alarm") return RecordKind::alarm;
  if (s == "lab") return RecordKind::lab;
  if (s == "reel") return RecordKind::reel;
  if (s == "sensor") return RecordKind::sensor;
  if (s == "sorting") return RecordKind::sorting;
  bad_enum("record kind", s);
}

QualityFlag parse_quality_flag(std::string_view s) {
  if (s == "good") return QualityFlag::good;
  if (s == "suspect") return QualityFlag::suspect;
  bad_enum("quality flag", s);
}

Severity parse_severity(std::string_view s) {
  if (s == "info") return Severity::info;
  if (s == "warning") return Severity::warning;
  if (s == "alarm") return Severity::alarm;
  bad_enum("severity", s);
}

AlarmState parse_alarm_state(std::string_view s) {
  if (s == "raised") return AlarmState::raised;
  if (s == "cleared") return AlarmState::cleared;
  bad_enum("alarm state", s);
}

bool emission_less(const Record& a, const Record& b) {
  const Millis ta = timestamp_of(a);
  const Millis tb = timestamp_of(b);
  if (ta != tb) return ta < tb;
  if (a.index() != b.index()) return a.index() < b.index();
  return tag_of(a) < tag_of(b);
}

json to_json(const Record& r) {
  return std::visit(
      overloaded{
          [](const AlarmEvent& a) {
            return json{{"kind", "alarm"},
                        {"alarm_id", a.alarm_id},
                        {"tag", a.tag},
                        {"error_code", a.error_code},
                        {"severity", to_string(a.severity)},
                        {"state", to_string(a.state)},
                        {"timestamp", a.timestamp}};
          },
          [](const LabMeasurement& l) {
            return json{{"kind", "lab"},         {"reel_id", l.reel_id},   {"parameter", l.parameter},
                        {"value", l.value},      {"spec_low", l.spec_low}, {"spec_high", l.spec_high},
                        {"measured_at", l.measured_at}};
          },
          [](const ReelRecord& reel) {
            return json{{"kind", "reel"}, {"reel_id", reel.reel_id}, {"start", reel.start}, {"end", reel.end}};
          },
          [](const SensorReading& s) {
            return json{{"kind", "sensor"}, {"tag", s.tag},   {"timestamp", s.timestamp},
                        {"value", s.value}, {"unit", s.unit}, {"quality", to_string(s.quality)}};
          },
          [](const SortingBatch& b) {
            json comp = json::object();
            for (const auto& [name, ratio] : b.composition) comp[name] = ratio;
            return json{{"kind", "sorting"},         {"delivery_id", b.delivery_id},
                        {"en643_grade", b.en643_grade}, {"composition", comp},
                        {"delivered_at", b.delivered_at}, {"sorted_at", b.sorted_at}};
          },
      },
      r);
}

Record record_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::validation, "record must be a JSON object");
  switch (parse_record_kind(required<std::string>(j, "kind"))) {
    case RecordKind::alarm:
      return AlarmEvent{required<std::string>(j, "alarm_id"),
                        required<std::string>(j, "tag"),
                        required<std::string>(j, "error_code"),
                        parse_severity(required<std::string>(j, "severity")),
                        parse_alarm_state(required<std::string>(j, "state")),
                        required<Millis>(j, "timestamp")};
    case RecordKind::lab:
      return LabMeasurement{required<std::int64_t>(j, "reel_id"), required<std::string>(j, "parameter"),
                            required<double>(j, "value"),         required<double>(j, "spec_low"),
                            required<double>(j, "spec_high"),     required<Millis>(j, "measured_at")};
    case RecordKind::reel:
      return ReelRecord{required<std::int64_t>(j, "reel_id"), required<Millis>(j, "start"),
                        required<Millis>(j, "end")};
    case RecordKind::sensor:
      return SensorReading{required<std::string>(j, "tag"), required<Millis>(j, "timestamp"),
                           required<double>(j, "value"), j.value("unit", std::string{}),
                           parse_quality_flag(j.value("quality", std::string{"good"}))};
    case RecordKind::sorting: {
      SortingBatch b;
      b.delivery_id = required<std::string>(j, "delivery_id");
      b.en643_grade = required<std::string>(j, "en643_grade");
      const auto comp = required<json>(j, "composition");
      if (!comp.is_object()) throw Error(ErrorCode::validation, "field 'composition' must be an object");
      for (const auto& [name, ratio] : comp.items()) b.composition.emplace_back(name, ratio.get<double>());
      b.delivered_at = required<Millis>(j, "delivered_at");
      b.sorted_at = required<Millis>(j, "sorted_at");
      return b;
    }
  }
  throw Error(ErrorCode::validation, "unreachable record kind");
}

std::string to_line(const Record& r) { return to_json(r).dump(); }

Record parse_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::validation, std::string("malformed record line: ") + e.what());
  }
  return record_from_json(j);
}

void write_log(std::ostream& out, const std::vector<Record>& records) {
  for (const auto& r : records) out << to_line(r) << '\n';
}

std::vector<Record> read_log(std::istream& in) {
  std::vector<Record> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(parse_line(line));
    } catch (const Error& e) {
      throw Error(e.code(), "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace millassist
