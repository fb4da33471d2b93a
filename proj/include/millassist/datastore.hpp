#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "millassist/common.hpp"
#include "millassist/records.hpp"

namespace millassist::store {

struct StoreConfig {
  /// When set, records are persisted to append-only segment files here and
  /// replayed on construction.
  std::optional<std::filesystem::path> data_dir;
  std::size_t segment_records = 100'000;
  /// Estimated consumption window of a sorted batch, relative to sorted_at.
  double consumption_lag_s = 2.0 * 3600.0;
  double consumption_span_s = 24.0 * 3600.0;
};

enum class Aggregation { mean, min, max, last, stddev };

std::string_view to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view s);

/// One feature: a sensor tag, or `sorting:<fraction>` for the composition
/// ratio of batches whose consumption window overlaps the feature window.
struct FeatureDef {
  std::string source;
  Aggregation aggregation = Aggregation::mean;
  /// Window = trailing k seconds ending at the anchor; unset = whole reel span.
  std::optional<double> trailing_s;

  bool operator==(const FeatureDef&) const = default;
};

using FeatureSpec = std::vector<FeatureDef>;

std::string feature_name(const FeatureDef& def);
nlohmann::json to_json(const FeatureSpec& spec);
FeatureSpec feature_spec_from_json(const nlohmann::json& j);

/// Mean over the reel span (and population stddev) for each tag.
FeatureSpec reel_feature_spec(const std::vector<std::string>& tags, bool with_stddev = false);

/// Aligned features. A missing value is std::nullopt, never a number.
struct FeatureVector {
  std::vector<std::string> names;
  std::vector<std::optional<double>> values;

  std::size_t missing_count() const;
  bool all_missing() const { return missing_count() == values.size(); }
  bool operator==(const FeatureVector&) const = default;
};

/// Query selector: a record kind, a tag (sensor/alarm tag, lab parameter,
/// reel id, delivery id), or both. Empty selector matches everything.
struct Selector {
  std::optional<RecordKind> kind;
  std::optional<std::string> tag;

  /// "kind:<name>" selects a kind; anything else is a tag.
  static Selector parse(std::string_view text);
};

struct SortingAssociation {
  std::string delivery_id;
  Millis window_begin = 0;
  Millis window_end = 0;
  std::vector<std::int64_t> reel_ids;
  bool estimated = true;
};

class DataStore {
 public:
  explicit DataStore(StoreConfig config = {});
  ~DataStore();

  DataStore(const DataStore&) = delete;
  DataStore& operator=(const DataStore&) = delete;

  /// Validates and stores one record; returns its sequence number (1, 2, ...).
  /// Throws Error(validation | ordering | conflict) on rejection.
  std::uint64_t append(const Record& record);

  /// Records with t0 <= timestamp < t1 in emission order.
  std::vector<Record> query_window(const Selector& selector, Millis t0, Millis t1) const;

  FeatureVector align_features(std::int64_t reel_id, const FeatureSpec& spec) const;
  /// Trailing-window features anchored at `at` (the process image at a trigger).
  FeatureVector align_at(Millis at, const FeatureSpec& spec) const;

  /// Stores a sorting batch and associates it with its estimated consumption
  /// window. `delivery_id` must match the batch.
  SortingAssociation attach_sorting_batch(const std::string& delivery_id, const SortingBatch& batch);
  std::vector<SortingAssociation> sorting_for_reel(std::int64_t reel_id) const;

  std::optional<ReelRecord> reel(std::int64_t reel_id) const;
  std::vector<ReelRecord> reels() const;
  std::vector<LabMeasurement> labs(const std::string& parameter = {}) const;
  std::vector<std::string> sensor_tags() const;

  std::size_t size() const;
  std::uint64_t last_sequence() const;

  /// Writes [t0, t1) in the emission-log line format.
  void export_window(std::ostream& out, Millis t0, Millis t1) const;

  const StoreConfig& config() const { return config_; }

 private:
  struct Series {
    std::string unit;
    std::vector<Millis> timestamps;
    std::vector<double> values;
    std::vector<QualityFlag> flags;
    std::vector<std::uint64_t> seqs;
  };
  template <class T>
  struct Stored {
    T record;
    std::uint64_t seq;
  };

  std::uint64_t append_locked(const Record& record, bool persist);
  void validate_locked(const Record& record) const;
  void persist_locked(const Record& record);
  void replay_segments();
  SortingAssociation association_locked(const SortingBatch& batch) const;
  std::optional<double> aggregate_locked(const FeatureDef& def, Millis t0, Millis t1) const;
  FeatureVector align_locked(const FeatureSpec& spec, Millis anchor, std::optional<std::pair<Millis, Millis>> reel_span) const;

  StoreConfig config_;
  mutable std::shared_mutex mutex_;
  std::uint64_t seq_ = 0;

  std::unordered_map<std::string, Series> sensors_;
  std::vector<Stored<AlarmEvent>> alarms_;
  std::unordered_set<std::string> raised_ids_;
  std::vector<Stored<LabMeasurement>> labs_;
  std::map<std::int64_t, Stored<ReelRecord>> reels_;
  std::vector<Stored<SortingBatch>> sorting_;
  std::unordered_set<std::string> delivery_ids_;

  std::ofstream segment_;
  std::size_t segment_index_ = 0;
  std::size_t segment_lines_ = 0;
};

}  // namespace millassist::store
