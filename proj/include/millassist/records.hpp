#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "millassist/common.hpp"

namespace millassist {

enum class QualityFlag { good, suspect };
enum class Severity { info, warning, alarm };
enum class AlarmState { raised, cleared };

struct SensorReading {
  std::string tag;
  Millis timestamp = 0;
  double value = 0.0;
  std::string unit;
  QualityFlag quality = QualityFlag::good;

  bool operator==(const SensorReading&) const = default;
};

struct LabMeasurement {
  std::int64_t reel_id = 0;
  std::string parameter;
  double value = 0.0;
  double spec_low = 0.0;
  double spec_high = 0.0;
  Millis measured_at = 0;

  bool operator==(const LabMeasurement&) const = default;
};

struct AlarmEvent {
  std::string alarm_id;
  std::string tag;
  std::string error_code;
  Severity severity = Severity::warning;
  AlarmState state = AlarmState::raised;
  Millis timestamp = 0;

  bool operator==(const AlarmEvent&) const = default;
};

struct SortingBatch {
  std::string delivery_id;
  std::string en643_grade;
  /// fraction name -> ratio, kept in name order
  std::vector<std::pair<std::string, double>> composition;
  Millis delivered_at = 0;
  Millis sorted_at = 0;

  bool operator==(const SortingBatch&) const = default;
};

/// Completion marker for one mother reel, emitted at `end`.
struct ReelRecord {
  std::int64_t reel_id = 0;
  Millis start = 0;
  Millis end = 0;

  bool operator==(const ReelRecord&) const = default;
};

using Record = std::variant<AlarmEvent, LabMeasurement, ReelRecord, SensorReading, SortingBatch>;

/// Record kinds, ordered alphabetically by wire name; this order is the
/// tie-break for equal timestamps.
enum class RecordKind { alarm = 0, lab = 1, reel = 2, sensor = 3, sorting = 4 };

RecordKind kind_of(const Record& r);
Millis timestamp_of(const Record& r);
/// Secondary ordering key: sensor/alarm tag, lab parameter, reel id, delivery id.
std::string tag_of(const Record& r);

std::string_view to_string(RecordKind k);
std::string_view to_string(QualityFlag f);
std::string_view to_string(Severity s);
std::string_view to_string(AlarmState s);
RecordKind parse_record_kind(std::string_view s);
QualityFlag parse_quality_flag(std::string_view s);
Severity parse_severity(std::string_view s);
AlarmState parse_alarm_state(std::string_view s);

/// Strict ordering used for emission logs and query results:
/// (timestamp, kind, tag). Callers keep stability for full ties.
bool emission_less(const Record& a, const Record& b);

nlohmann::json to_json(const Record& r);
Record record_from_json(const nlohmann::json& j);

/// One JSON object per line, no trailing whitespace.
std::string to_line(const Record& r);
Record parse_line(std::string_view line);

void write_log(std::ostream& out, const std::vector<Record>& records);
std::vector<Record> read_log(std::istream& in);

}  // namespace millassist
