#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "millassist/alarm_filter.hpp"
#include "millassist/assist.hpp"
#include "millassist/datastore.hpp"
#include "millassist/forecast.hpp"
#include "millassist/knowledge_base.hpp"

namespace millassist::assist {

struct PipelineConfig {
  double chatter_window_s = 60.0;
  std::vector<alarms::AlarmPattern> patterns;
  /// Alarm codes that mark a web break; a group containing one triggers web_break.
  std::vector<std::string> web_break_codes{"WEB_BREAK"};
  /// Quality parameter -> location identifier for quality_deviation triggers.
  std::map<std::string, std::string> parameter_locations;
  /// Period of situation recognition on the process image; 0 disables it.
  double situation_interval_s = 300.0;
  std::string situation_location = "PLANT";
};

/// Location identifiers of the scenario's quality parameters.
std::map<std::string, std::string> parameter_locations(const sim::ScenarioConfig& config);

/// One entry of the live event stream; payloads equal the REST payloads.
struct StreamEvent {
  std::uint64_t seq = 0;
  std::string type;  ///< alarm_group, forecast, change_point, recommendation
  Millis at = 0;
  std::string location;
  nlohmann::json payload;
};

nlohmann::json to_json(const StreamEvent& e);

struct Acknowledgement {
  std::string user;
  Millis at = 0;
};

struct GroupEntry {
  alarms::LinkedGroup linked;
  std::optional<std::string> recommendation_id;
  std::optional<Acknowledgement> ack;
};

nlohmann::json to_json(const GroupEntry& g);

struct ForecastEntry {
  std::string forecast_id;  ///< FC-<reel>-<parameter>
  forecast::QualityForecast forecast;
  Millis issued_at = 0;
  std::optional<double> lab_value;
};

nlohmann::json to_json(const ForecastEntry& f);

/// Ingest path: records go to the store, alarms through the filter chain and
/// knowledge linkage, finished reels through the forecast models, lab results
/// into change detection, and every trigger into the assist engine. Output is
/// an ordered event stream.
class Pipeline {
 public:
  Pipeline(store::DataStore& store, kb::KnowledgeBase& base, AssistEngine& engine, PipelineConfig config = {});

  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  /// One detector per model, sigma = the model's residual standard deviation.
  void add_model(forecast::ForecastModel model);
  std::vector<std::string> parameters() const;

  /// Records must arrive in emission order. Returns the events it caused.
  std::vector<StreamEvent> ingest(const Record& record);
  /// Closes open alarm groups.
  std::vector<StreamEvent> flush();
  /// Manual trigger (operator request).
  Recommendation trigger(const TriggerEvent& event);

  std::vector<GroupEntry> groups() const;
  GroupEntry group(const std::string& group_id) const;
  GroupEntry acknowledge(const std::string& group_id, const std::string& user, Millis at);

  std::vector<ForecastEntry> forecasts(std::optional<std::int64_t> reel_id = {},
                                       const std::optional<std::string>& parameter = {}) const;
  std::vector<forecast::ChangePointEvent> change_points() const;
  alarms::FloodMetrics metrics(Millis t0, Millis t1) const;

  /// Events with seq > after, at most `limit`.
  std::vector<StreamEvent> events_after(std::uint64_t after, std::size_t limit = 1000) const;
  /// Blocks until an event with seq > after exists or the timeout passes.
  std::vector<StreamEvent> wait_events(std::uint64_t after, std::chrono::milliseconds timeout,
                                       std::size_t limit = 1000) const;
  std::uint64_t last_seq() const;
  /// Timestamp of the latest ingested record.
  Millis now() const;

 private:
  struct Model {
    forecast::ForecastModel model;
    forecast::ChangeDetector detector;
  };

  void publish_locked(const std::string& type, Millis at, const std::string& location, nlohmann::json payload,
                      std::vector<StreamEvent>& out);
  void on_units_locked(std::vector<alarms::AlarmGroup>& units, std::vector<StreamEvent>& out);
  void on_reel_locked(const ReelRecord& reel, std::vector<StreamEvent>& out);
  void on_lab_locked(const LabMeasurement& lab, std::vector<StreamEvent>& out);
  void recognize_locked(Millis until, std::vector<StreamEvent>& out);
  void recommend_locked(const TriggerEvent& trigger, std::optional<store::FeatureVector> image,
                        std::vector<StreamEvent>& out);
  std::optional<store::FeatureVector> image_locked(Millis at) const;

  store::DataStore& store_;
  kb::KnowledgeBase& base_;
  AssistEngine& engine_;
  PipelineConfig config_;
  alarms::FilterChain chain_;

  mutable std::mutex mutex_;
  mutable std::condition_variable changed_;
  std::map<std::string, Model> models_;
  std::map<std::string, AlarmEvent> raised_;
  std::vector<std::string> group_order_;
  std::map<std::string, GroupEntry> groups_;
  std::vector<ForecastEntry> forecasts_;
  std::map<std::string, std::size_t> forecast_index_;
  std::vector<forecast::ChangePointEvent> change_points_;
  std::vector<StreamEvent> events_;
  Millis now_ = 0;
  Millis next_recognition_ = 0;
  std::string last_situation_ = kNominalSituation;
};

}  // namespace millassist::assist
