#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "millassist/common.hpp"
#include "millassist/records.hpp"

namespace millassist::sim {

constexpr int kScenarioSchema = 1;

/// Latent process variables. Stock properties (ash, fiber) and machine
/// settings (speed, moisture, refiner load) drive quality; steam and tension
/// are perturbed by faults and visible through sensors.
enum class LatentVar { ash, fiber, speed, moisture, refiner, steam, tension };
constexpr int kLatentCount = 7;

std::string_view to_string(LatentVar v);
LatentVar parse_latent_var(std::string_view s);

enum class FaultKind { web_break_precursor, dryer_steam_drop, stock_quality_shift, chattering_sensor };

std::string_view to_string(FaultKind k);
FaultKind parse_fault_kind(std::string_view s);

struct LatentSpec {
  LatentVar var = LatentVar::ash;
  double mean = 0.0;
  double sd = 0.0;        ///< stationary reel-to-reel standard deviation
  double ar_coef = 0.8;   ///< AR(1) coefficient between consecutive reels
};

struct AlarmBand {
  double low = 0.0;
  double high = 0.0;
  double hysteresis = 0.0;
  std::string error_code;
  Severity severity = Severity::warning;
};

struct SensorSpec {
  std::string tag;
  std::string unit;
  double position_m = 0.0;
  std::optional<LatentVar> source;  ///< latent variable observed; none = pure noise around base
  double base = 0.0;
  double gain = 1.0;
  double noise_sd = 0.0;
  double min_interval_s = 5.0;
  double max_interval_s = 15.0;
  std::optional<AlarmBand> alarm;
};

struct Interaction {
  LatentVar a = LatentVar::speed;
  LatentVar b = LatentVar::moisture;
  double coef = 0.0;
};

/// Quality as a linear-with-interactions function of latent deviations from
/// their means, plus Gaussian noise.
struct QualityModel {
  std::string parameter;
  std::string unit;
  std::string location;  ///< location identifier used for knowledge lookups
  double intercept = 0.0;
  std::map<LatentVar, double> linear;
  std::vector<Interaction> interactions;
  double noise_sd = 0.0;
  double spec_low = 0.0;
  double spec_high = 1.0;
};

enum class LabRuleKind { every_reel, every_nth, on_demand };

struct LabRule {
  std::string parameter;
  LabRuleKind rule = LabRuleKind::every_reel;
  int n = 1;                         ///< for every_nth
  double on_demand_probability = 0.1;
  int daily_cap = 50;                ///< 0 disables the cap
  double delay_min_s = 1800.0;
  double delay_max_s = 7200.0;
};

struct CascadeStep {
  std::string error_code;
  double offset_s = 0.0;
  Severity severity = Severity::alarm;
};

struct FaultInjection {
  FaultKind kind = FaultKind::stock_quality_shift;
  double start_s = 0.0;
  double duration_s = 0.0;  ///< 0 = active until scenario end
  double magnitude = 0.0;
  std::string tag;          ///< alarm tag; the chattering sensor for chattering_sensor
  double period_s = 2.0;    ///< chattering_sensor only
  std::string chatter_code = "CHATTER";
  std::vector<CascadeStep> cascade;
};

struct BackgroundAlarms {
  double nuisance_alarm_fraction = 0.5;
  double genuine_rate_per_hour = 2.0;
  int burst_min = 3;
  int burst_max = 9;
  double burst_spacing_min_s = 2.0;
  double burst_spacing_max_s = 20.0;
};

struct SortingPlan {
  double delivery_interval_s = 8.0 * 3600.0;
  double delay_min_h = 1.0;
  double delay_max_h = 72.0;
};

struct ScenarioConfig {
  std::uint64_t seed = 1;
  double duration_s = 86400.0;
  double reel_duration_s = 1800.0;
  std::vector<LatentSpec> latent;
  std::vector<SensorSpec> sensors;
  std::vector<QualityModel> quality_model;
  std::vector<LabRule> lab_plan;
  std::vector<FaultInjection> fault_plan;
  BackgroundAlarms alarms;
  SortingPlan sorting;
};

/// Mill with eight sensors, two quality parameters, daily-capped lab sampling
/// and no faults.
ScenarioConfig default_config();

/// Throws Error(validation) naming the offending field.
void validate(const ScenarioConfig& config);

ScenarioConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ScenarioConfig& config);

enum class AlarmLabel { nuisance, fault_causal, threshold_genuine };
std::string_view to_string(AlarmLabel l);

struct GroundTruth {
  /// parameter -> true value per reel (index reel_id - 1)
  std::map<std::string, std::vector<double>> quality;
  /// raised alarm_id -> label
  std::map<std::string, AlarmLabel> alarm_labels;
  /// fault index -> alarm_ids of its cascade, in emission order
  std::vector<std::vector<std::string>> fault_causal_alarms;
  /// per reel (index reel_id - 1): fault kinds active for at least half the reel
  std::vector<std::vector<FaultKind>> reel_faults;

  bool operator==(const GroundTruth&) const = default;
};

nlohmann::json to_json(const GroundTruth& truth);

struct SensorSample {
  Millis timestamp = 0;
  double value = 0.0;
  QualityFlag quality = QualityFlag::good;

  bool operator==(const SensorSample&) const = default;
};

/// Fully scheduled, immutable emission plan.
struct ScenarioPlan {
  ScenarioConfig config;
  std::vector<std::vector<SensorSample>> sensor_samples;  ///< parallel to config.sensors
  std::vector<AlarmEvent> alarms;
  std::vector<LabMeasurement> labs;
  std::vector<ReelRecord> reels;
  std::vector<SortingBatch> sorting;
  GroundTruth truth;

  Millis end() const { return seconds_to_millis(config.duration_s); }
  std::size_t record_count() const;
};

ScenarioPlan build_scenario(const ScenarioConfig& config);

/// Per-parameter true quality of one reel; throws not_found for unknown reels.
std::map<std::string, double> true_quality(const ScenarioPlan& plan, std::int64_t reel_id);

using EmissionBatch = std::vector<Record>;

/// Read cursor over a plan. Several emitters may share one plan.
class Emitter {
 public:
  explicit Emitter(const ScenarioPlan& plan);

  /// All not-yet-emitted records with timestamp <= until, in emission order.
  /// Throws Error(ordering) when `until` precedes the previous call.
  EmissionBatch step(Millis until);

  bool exhausted() const;

 private:
  const ScenarioPlan* plan_;
  std::vector<std::size_t> sensor_pos_;
  std::size_t alarm_pos_ = 0;
  std::size_t lab_pos_ = 0;
  std::size_t reel_pos_ = 0;
  std::size_t sorting_pos_ = 0;
  std::optional<Millis> last_until_;
};

/// Whole plan in emission order.
EmissionBatch emit_all(const ScenarioPlan& plan);

}  // namespace millassist::sim
