#include "millassist/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>

namespace millassist::store {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kSortingPrefix = "sorting:";

bool is_sorting_source(const std::string& source) { return source.rfind(kSortingPrefix, 0) == 0; }

std::string segment_name(std::size_t index) {
  std::ostringstream os;
  os << "segment-" << std::setw(6) << std::setfill('0') << index << ".log";
  return os.str();
}

[[noreturn]] void reject(const std::string& why) { throw Error(ErrorCode::validation, why); }

std::optional<double> aggregate(Aggregation agg, const double* first, const double* last) {
  const auto n = static_cast<std::size_t>(last - first);
  if (n == 0) return std::nullopt;
  switch (agg) {
    case Aggregation::mean: return std::accumulate(first, last, 0.0) / static_cast<double>(n);
    case Aggregation::min: return *std::min_element(first, last);
    case Aggregation::max: return *std::max_element(first, last);
    case Aggregation::last: return *(last - 1);
    case Aggregation::stddev: {
      const double mean = std::accumulate(first, last, 0.0) / static_cast<double>(n);
      double ss = 0.0;
      for (auto p = first; p != last; ++p) ss += (*p - mean) * (*p - mean);
      return std::sqrt(ss / static_cast<double>(n));
    }
  }
  return std::nullopt;
}

}  // namespace

std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::mean: return "mean";
    case Aggregation::min: return "min";
    case Aggregation::max: return "max";
    case Aggregation::last: return "last";
    case Aggregation::stddev: return "stddev";
  }
  return "unknown";
}

Aggregation parse_aggregation(std::string_view s) {
  for (auto a : {Aggregation::mean, Aggregation::min, Aggregation::max, Aggregation::last, Aggregation::stddev})
    if (to_string(a) == s) return a;
  throw Error(ErrorCode::validation, "unknown aggregation '" + std::string(s) + "'");
}

std::string feature_name(const FeatureDef& def) {
  std::ostringstream os;
  os << def.source << '.' << to_string(def.aggregation);
  if (def.trailing_s) os << "@" << *def.trailing_s << 's';
  return os.str();
}

json to_json(const FeatureSpec& spec) {
  json out = json::array();
  for (const auto& d : spec) {
    json e{{"source", d.source}, {"aggregation", to_string(d.aggregation)}};
    e["trailing_s"] = d.trailing_s ? json(*d.trailing_s) : json(nullptr);
    out.push_back(std::move(e));
  }
  return out;
}

FeatureSpec feature_spec_from_json(const json& j) {
  FeatureSpec spec;
  for (const auto& e : j) {
    FeatureDef d;
    d.source = e.at("source").get<std::string>();
    d.aggregation = parse_aggregation(e.at("aggregation").get<std::string>());
    if (e.contains("trailing_s") && !e["trailing_s"].is_null()) d.trailing_s = e["trailing_s"].get<double>();
    spec.push_back(std::move(d));
  }
  return spec;
}

FeatureSpec reel_feature_spec(const std::vector<std::string>& tags, bool with_stddev) {
  FeatureSpec spec;
  for (const auto& t : tags) {
    spec.push_back({t, Aggregation::mean, std::nullopt});
    if (with_stddev) spec.push_back({t, Aggregation::stddev, std::nullopt});
  }
  return spec;
}

std::size_t FeatureVector::missing_count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::nullopt));
}

Selector Selector::parse(std::string_view text) {
  Selector s;
  if (text.rfind("kind:", 0) == 0) {
    s.kind = parse_record_kind(text.substr(5));
  } else if (!text.empty()) {
    s.tag = std::string(text);
  }
  return s;
}

// ---------------------------------------------------------------------------

DataStore::DataStore(StoreConfig config) : config_(std::move(config)) {
  if (config_.segment_records == 0) throw Error(ErrorCode::validation, "segment_records must be > 0");
  if (config_.data_dir) {
    std::error_code ec;
    fs::create_directories(*config_.data_dir, ec);
    if (ec) throw Error(ErrorCode::io, "cannot create data dir " + config_.data_dir->string() + ": " + ec.message());
    replay_segments();
  }
}

DataStore::~DataStore() = default;

void DataStore::replay_segments() {
  std::vector<fs::path> segments;
  for (const auto& entry : fs::directory_iterator(*config_.data_dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("segment-", 0) == 0 && entry.path().extension() == ".log") segments.push_back(entry.path());
  }
  std::sort(segments.begin(), segments.end());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    std::ifstream in(segments[i], std::ios::binary);
    std::string line;
    std::uintmax_t good_bytes = 0;
    std::size_t lines = 0;
    bool torn = false;
    while (std::getline(in, line)) {
      // A final line without newline is a torn write from a crash; drop it.
      if (in.eof()) {
        torn = true;
        break;
      }
      if (!line.empty()) {
        append_locked(parse_line(line), false);
        ++lines;
      }
      good_bytes += line.size() + 1;
    }
    in.close();
    if (torn) fs::resize_file(segments[i], good_bytes);
    segment_index_ = i + 1;
    segment_lines_ = lines;
  }
}

void DataStore::persist_locked(const Record& record) {
  if (!config_.data_dir) return;
  if (!segment_.is_open() || segment_lines_ >= config_.segment_records) {
    if (segment_.is_open()) segment_.close();
    if (segment_index_ == 0 || segment_lines_ >= config_.segment_records) {
      ++segment_index_;
      segment_lines_ = 0;
    }
    segment_.open(*config_.data_dir / segment_name(segment_index_), std::ios::app | std::ios::binary);
    if (!segment_) throw Error(ErrorCode::io, "cannot open segment in " + config_.data_dir->string());
  }
  // Whole line in one write so a crash leaves at most one torn trailing line.
  const std::string line = to_line(record) + '\n';
  segment_.write(line.data(), static_cast<std::streamsize>(line.size()));
  segment_.flush();
  if (!segment_) throw Error(ErrorCode::io, "write to segment failed");
  ++segment_lines_;
}

void DataStore::validate_locked(const Record& record) const {
  std::visit(
      [&](const auto& r) {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, SensorReading>) {
          if (r.tag.empty()) reject("sensor reading without tag");
          if (!std::isfinite(r.value)) reject("sensor " + r.tag + ": value must be finite");
          const auto it = sensors_.find(r.tag);
          if (it != sensors_.end()) {
            if (!it->second.timestamps.empty() && r.timestamp <= it->second.timestamps.back())
              throw Error(ErrorCode::ordering, "sensor " + r.tag + ": timestamp " + std::to_string(r.timestamp) +
                                                   " not after previous " +
                                                   std::to_string(it->second.timestamps.back()));
            if (it->second.unit != r.unit)
              reject("sensor " + r.tag + ": unit '" + r.unit + "' differs from '" + it->second.unit + "'");
          }
        } else if constexpr (std::is_same_v<T, LabMeasurement>) {
          if (r.parameter.empty()) reject("lab measurement without parameter");
          if (!(r.spec_low < r.spec_high)) reject("lab " + r.parameter + ": spec_low must be < spec_high");
          if (!std::isfinite(r.value)) reject("lab " + r.parameter + ": value must be finite");
          const auto reel = reels_.find(r.reel_id);
          if (reel == reels_.end()) reject("lab " + r.parameter + ": unknown reel " + std::to_string(r.reel_id));
          if (r.measured_at < reel->second.record.end)
            reject("lab " + r.parameter + ": measured_at precedes end of reel " + std::to_string(r.reel_id));
        } else if constexpr (std::is_same_v<T, AlarmEvent>) {
          if (r.alarm_id.empty() || r.error_code.empty()) reject("alarm needs alarm_id and error_code");
          if (r.state == AlarmState::raised && raised_ids_.count(r.alarm_id))
            throw Error(ErrorCode::conflict, "alarm " + r.alarm_id + " already raised");
          if (r.state == AlarmState::cleared && !raised_ids_.count(r.alarm_id))
            reject("cleared alarm " + r.alarm_id + " was never raised");
        } else if constexpr (std::is_same_v<T, ReelRecord>) {
          if (!(r.start < r.end)) reject("reel " + std::to_string(r.reel_id) + ": start must be < end");
          if (reels_.count(r.reel_id)) throw Error(ErrorCode::conflict, "reel " + std::to_string(r.reel_id) + " exists");
        } else if constexpr (std::is_same_v<T, SortingBatch>) {
          if (r.delivery_id.empty()) reject("sorting batch without delivery_id");
          if (delivery_ids_.count(r.delivery_id))
            throw Error(ErrorCode::conflict, "delivery " + r.delivery_id + " already has a sorting batch");
          double sum = 0.0;
          for (const auto& [name, ratio] : r.composition) {
            if (!(ratio >= 0.0)) reject("delivery " + r.delivery_id + ": ratio of '" + name + "' must be >= 0");
            sum += ratio;
          }
          if (std::abs(sum - 1.0) > 1e-9)
            reject("delivery " + r.delivery_id + ": composition ratios sum to " + std::to_string(sum) + ", not 1");
          if (r.sorted_at < r.delivered_at) reject("delivery " + r.delivery_id + ": sorted_at precedes delivered_at");
        }
      },
      record);
}

std::uint64_t DataStore::append(const Record& record) {
  std::unique_lock lock(mutex_);
  return append_locked(record, true);
}

std::uint64_t DataStore::append_locked(const Record& record, bool persist) {
  validate_locked(record);
  if (persist) persist_locked(record);
  const std::uint64_t seq = ++seq_;
  std::visit(
      [&](const auto& r) {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, SensorReading>) {
          auto& s = sensors_[r.tag];
          if (s.timestamps.empty()) s.unit = r.unit;
          s.timestamps.push_back(r.timestamp);
          s.values.push_back(r.value);
          s.flags.push_back(r.quality);
          s.seqs.push_back(seq);
        } else if constexpr (std::is_same_v<T, LabMeasurement>) {
          labs_.push_back({r, seq});
        } else if constexpr (std::is_same_v<T, AlarmEvent>) {
          if (r.state == AlarmState::raised) raised_ids_.insert(r.alarm_id);
          alarms_.push_back({r, seq});
        } else if constexpr (std::is_same_v<T, ReelRecord>) {
          reels_.emplace(r.reel_id, Stored<ReelRecord>{r, seq});
        } else if constexpr (std::is_same_v<T, SortingBatch>) {
          delivery_ids_.insert(r.delivery_id);
          sorting_.push_back({r, seq});
        }
      },
      record);
  return seq;
}

std::vector<Record> DataStore::query_window(const Selector& sel, Millis t0, Millis t1) const {
  if (t0 > t1) throw Error(ErrorCode::range, "query window start " + std::to_string(t0) + " after end " + std::to_string(t1));
  std::shared_lock lock(mutex_);
  std::vector<std::pair<std::uint64_t, Record>> hits;
  auto wants = [&](RecordKind k) { return !sel.kind || *sel.kind == k; };
  auto in_window = [&](Millis t) { return t >= t0 && t < t1; };

  if (wants(RecordKind::sensor)) {
    auto take_series = [&](const std::string& tag, const Series& s) {
      const auto lo = std::lower_bound(s.timestamps.begin(), s.timestamps.end(), t0) - s.timestamps.begin();
      const auto hi = std::lower_bound(s.timestamps.begin(), s.timestamps.end(), t1) - s.timestamps.begin();
      for (auto i = lo; i < hi; ++i) {
        const auto k = static_cast<std::size_t>(i);
        hits.emplace_back(s.seqs[k], SensorReading{tag, s.timestamps[k], s.values[k], s.unit, s.flags[k]});
      }
    };
    if (sel.tag) {
      if (const auto it = sensors_.find(*sel.tag); it != sensors_.end()) take_series(it->first, it->second);
    } else {
      for (const auto& [tag, s] : sensors_) take_series(tag, s);
    }
  }
  auto take = [&](const auto& stored, RecordKind kind) {
    if (!wants(kind)) return;
    for (const auto& s : stored) {
      const Record r = s.record;
      if (in_window(timestamp_of(r)) && (!sel.tag || tag_of(r) == *sel.tag)) hits.emplace_back(s.seq, r);
    }
  };
  take(alarms_, RecordKind::alarm);
  take(labs_, RecordKind::lab);
  if (wants(RecordKind::reel)) {
    for (const auto& [id, s] : reels_) {
      const Record r = s.record;
      if (in_window(s.record.end) && (!sel.tag || tag_of(r) == *sel.tag)) hits.emplace_back(s.seq, r);
    }
  }
  take(sorting_, RecordKind::sorting);

  std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
    if (emission_less(a.second, b.second)) return true;
    if (emission_less(b.second, a.second)) return false;
    return a.first < b.first;
  });
  std::vector<Record> out;
  out.reserve(hits.size());
  for (auto& h : hits) out.push_back(std::move(h.second));
  return out;
}

SortingAssociation DataStore::association_locked(const SortingBatch& batch) const {
  SortingAssociation a;
  a.delivery_id = batch.delivery_id;
  a.window_begin = batch.sorted_at + seconds_to_millis(config_.consumption_lag_s);
  a.window_end = a.window_begin + seconds_to_millis(config_.consumption_span_s);
  for (const auto& [id, reel] : reels_)
    if (reel.record.start < a.window_end && reel.record.end > a.window_begin) a.reel_ids.push_back(id);
  return a;
}

SortingAssociation DataStore::attach_sorting_batch(const std::string& delivery_id, const SortingBatch& batch) {
  if (delivery_id != batch.delivery_id)
    throw Error(ErrorCode::validation, "delivery id '" + delivery_id + "' does not match batch '" + batch.delivery_id + "'");
  std::unique_lock lock(mutex_);
  append_locked(batch, true);
  return association_locked(batch);
}

std::vector<SortingAssociation> DataStore::sorting_for_reel(std::int64_t reel_id) const {
  std::shared_lock lock(mutex_);
  std::vector<SortingAssociation> out;
  for (const auto& s : sorting_) {
    auto a = association_locked(s.record);
    if (std::find(a.reel_ids.begin(), a.reel_ids.end(), reel_id) != a.reel_ids.end()) out.push_back(std::move(a));
  }
  return out;
}

std::optional<double> DataStore::aggregate_locked(const FeatureDef& def, Millis t0, Millis t1) const {
  if (is_sorting_source(def.source)) {
    const std::string fraction = def.source.substr(kSortingPrefix.size());
    std::vector<std::pair<Millis, double>> ratios;
    for (const auto& s : sorting_) {
      const auto a = association_locked(s.record);
      if (!(a.window_begin < t1 && a.window_end > t0)) continue;
      for (const auto& [name, ratio] : s.record.composition)
        if (name == fraction) ratios.emplace_back(s.record.sorted_at, ratio);
    }
    std::stable_sort(ratios.begin(), ratios.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<double> values;
    for (const auto& r : ratios) values.push_back(r.second);
    return aggregate(def.aggregation, values.data(), values.data() + values.size());
  }
  const auto it = sensors_.find(def.source);
  if (it == sensors_.end()) throw Error(ErrorCode::not_found, "unknown tag '" + def.source + "' in feature spec");
  const auto& s = it->second;
  const auto lo = std::lower_bound(s.timestamps.begin(), s.timestamps.end(), t0) - s.timestamps.begin();
  const auto hi = std::lower_bound(s.timestamps.begin(), s.timestamps.end(), t1) - s.timestamps.begin();
  return aggregate(def.aggregation, s.values.data() + lo, s.values.data() + hi);
}

FeatureVector DataStore::align_locked(const FeatureSpec& spec, Millis anchor,
                                      std::optional<std::pair<Millis, Millis>> reel_span) const {
  FeatureVector fv;
  for (const auto& def : spec) {
    Millis t0 = 0;
    Millis t1 = anchor;
    if (def.trailing_s) {
      if (!(*def.trailing_s > 0.0)) throw Error(ErrorCode::validation, feature_name(def) + ": trailing window must be > 0");
      t0 = anchor - seconds_to_millis(*def.trailing_s);
    } else if (reel_span) {
      std::tie(t0, t1) = *reel_span;
    } else {
      throw Error(ErrorCode::contract, feature_name(def) + ": reel-span window needs a reel anchor");
    }
    fv.names.push_back(feature_name(def));
    fv.values.push_back(aggregate_locked(def, t0, t1));
  }
  return fv;
}

FeatureVector DataStore::align_features(std::int64_t reel_id, const FeatureSpec& spec) const {
  std::shared_lock lock(mutex_);
  const auto it = reels_.find(reel_id);
  if (it == reels_.end()) throw Error(ErrorCode::not_found, "unknown reel " + std::to_string(reel_id));
  const auto& reel = it->second.record;
  return align_locked(spec, reel.end, std::make_pair(reel.start, reel.end));
}

FeatureVector DataStore::align_at(Millis at, const FeatureSpec& spec) const {
  std::shared_lock lock(mutex_);
  return align_locked(spec, at, std::nullopt);
}

std::optional<ReelRecord> DataStore::reel(std::int64_t reel_id) const {
  std::shared_lock lock(mutex_);
  const auto it = reels_.find(reel_id);
  if (it == reels_.end()) return std::nullopt;
  return it->second.record;
}

std::vector<ReelRecord> DataStore::reels() const {
  std::shared_lock lock(mutex_);
  std::vector<ReelRecord> out;
  for (const auto& [id, r] : reels_) out.push_back(r.record);
  return out;
}

std::vector<LabMeasurement> DataStore::labs(const std::string& parameter) const {
  std::shared_lock lock(mutex_);
  std::vector<LabMeasurement> out;
  for (const auto& l : labs_)
    if (parameter.empty() || l.record.parameter == parameter) out.push_back(l.record);
  return out;
}

std::vector<std::string> DataStore::sensor_tags() const {
  std::shared_lock lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [tag, _] : sensors_) out.push_back(tag);
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t DataStore::size() const {
  std::shared_lock lock(mutex_);
  return static_cast<std::size_t>(seq_);
}

std::uint64_t DataStore::last_sequence() const {
  std::shared_lock lock(mutex_);
  return seq_;
}

void DataStore::export_window(std::ostream& out, Millis t0, Millis t1) const {
  write_log(out, query_window(Selector{}, t0, t1));
}

}  // namespace millassist::store
