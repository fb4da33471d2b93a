#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "millassist/common.hpp"
#include "millassist/datastore.hpp"
#include "millassist/forest.hpp"

namespace millassist::forecast {

// --- classes -------------------------------------------------------------------

enum class QualityClass { low, in_specification, high };
std::string_view to_string(QualityClass c);

/// Closed interval [spec_low, spec_high] is in specification. `guard_band` is
/// validated and reported but does not move the boundaries.
QualityClass classify(double estimate, double spec_low, double spec_high, double guard_band = 0.0);

// --- datasets ------------------------------------------------------------------

struct Dataset {
  std::string parameter;
  store::FeatureSpec spec;
  std::vector<std::string> names;
  std::vector<Row> rows;
  std::vector<double> targets;
  std::vector<std::int64_t> reel_ids;
  double spec_low = 0.0;
  double spec_high = 0.0;

  std::size_t size() const { return rows.size(); }
};

/// One sample per reel with a lab result for `parameter` (first result wins),
/// features aligned over the reel span.
Dataset build_dataset(const store::DataStore& store, const std::string& parameter, const store::FeatureSpec& spec);

/// Seeded partition by reel id: (train, holdout).
std::pair<Dataset, Dataset> split_by_reel(const Dataset& data, double holdout_fraction, std::uint64_t seed);

/// Rows whose reel id satisfies `keep`.
Dataset subset(const Dataset& data, const std::function<bool(std::int64_t)>& keep);

// --- anomaly reference ---------------------------------------------------------

/// Per-feature median and raw median absolute deviation of the training rows.
struct ReferenceDistribution {
  std::vector<std::string> names;
  std::vector<double> medians;
  std::vector<double> mads;
};

ReferenceDistribution fit_reference(const std::vector<std::string>& names, const std::vector<Row>& rows);

struct ExtremeResult {
  double score = 0.0;  ///< max over features of |x - median| / MAD
  bool flag = false;
  std::optional<std::string> driver;   ///< feature attaining the score
  std::vector<std::string> excluded;   ///< zero-MAD features left out of the score
};

ExtremeResult detect_extreme(const store::FeatureVector& features, const ReferenceDistribution& ref,
                             double threshold = 4.0);

// --- model -----------------------------------------------------------------------

struct TrainingReport {
  std::size_t samples = 0;
  double oob_mape = 0.0;
  double oob_rmse = 0.0;
  double oob_within_10 = 0.0;
  std::size_t oob_covered = 0;  ///< samples with at least one out-of-bag tree
};

nlohmann::json to_json(const TrainingReport& r);

struct ForecastModel {
  std::string parameter;
  Hyperparams hyperparams;
  store::FeatureSpec spec;
  std::vector<std::string> names;
  Forest forest;
  ReferenceDistribution reference;
  double spec_low = 0.0;
  double spec_high = 0.0;
  double residual_sd = 0.0;  ///< out-of-bag residual standard deviation
  double anomaly_threshold = 4.0;
  std::vector<std::int64_t> training_reels;
  std::string model_version;  ///< hash of the serialized document
};

struct TrainResult {
  ForecastModel model;
  TrainingReport report;
};

inline constexpr std::size_t kMinTrainingSamples = 50;

/// Throws Error(training) for fewer than 50 samples or a constant target
/// (unless hyperparams allow it).
TrainResult train(const Dataset& data, const Hyperparams& hyperparams = {});

struct QualityForecast {
  std::int64_t reel_id = 0;
  std::string parameter;
  double point = 0.0;
  double p10 = 0.0;
  double p90 = 0.0;
  QualityClass quality_class = QualityClass::in_specification;
  bool anomaly_flag = false;
  double anomaly_score = 0.0;
  std::string model_version;
};

nlohmann::json to_json(const QualityForecast& f);

/// Throws Error(contract) when feature names differ from the model's.
QualityForecast predict(const ForecastModel& model, const store::FeatureVector& features, std::int64_t reel_id = 0);

nlohmann::json to_json(const ForecastModel& model);
ForecastModel model_from_json(const nlohmann::json& j);
void save_model(const ForecastModel& model, const std::filesystem::path& path);
ForecastModel load_model(const std::filesystem::path& path);

// --- evaluation -------------------------------------------------------------------

struct EvalReport {
  std::string parameter;
  std::string model_version;
  std::size_t samples = 0;
  double mape = 0.0;
  double rmse = 0.0;
  double within_10 = 0.0;
  /// Rows: true class, columns: predicted class (low, in_spec, high).
  std::array<std::array<std::size_t, 3>, 3> confusion{};
  std::array<std::optional<double>, 3> recall{};
  std::vector<std::int64_t> reel_ids;
  std::vector<double> targets;
  std::vector<double> predictions;
};

/// Metrics of arbitrary predictions against targets.
EvalReport score_predictions(const std::vector<double>& targets, const std::vector<double>& predictions, double spec_low,
                             double spec_high);

/// Throws Error(contract) when a holdout reel was used in training.
EvalReport evaluate(const ForecastModel& model, const Dataset& holdout);

/// One summary record followed by one record per sample.
void write_report(std::ostream& out, const EvalReport& report);

// --- change detection ---------------------------------------------------------------

enum class Direction { up, down };
std::string_view to_string(Direction d);

struct ChangePointEvent {
  std::string parameter;
  Millis detected_at = 0;
  double statistic = 0.0;
  Direction direction = Direction::up;
};

nlohmann::json to_json(const ChangePointEvent& e);

struct CusumConfig {
  double mean = 0.0;
  double sigma = 1.0;
  double drift = 0.5;      ///< delta, in sigma units
  double threshold = 5.0;  ///< h, in sigma units
};

/// Two-sided CUSUM over standardized residuals, reset on alarm.
class ChangeDetector {
 public:
  ChangeDetector(std::string parameter, CusumConfig config = {});

  std::optional<ChangePointEvent> update(double residual, Millis at);
  void reset();

  double upper() const { return upper_; }
  double lower() const { return lower_; }
  const CusumConfig& config() const { return config_; }

 private:
  std::string parameter_;
  CusumConfig config_;
  double upper_ = 0.0;
  double lower_ = 0.0;
};

// --- web segment tracking -----------------------------------------------------------

/// Piecewise-constant speed in m/s: each sample holds until the next one.
struct SpeedSample {
  Millis at = 0;
  double speed = 0.0;
};

/// Time (fractional ms) at which the web segment born at `birth` reaches each
/// position; nullopt when it does not arrive before `horizon_end`.
std::map<std::string, std::optional<double>> track_web_segment(const std::vector<SpeedSample>& speeds,
                                                               Millis horizon_end,
                                                               const std::map<std::string, double>& positions,
                                                               Millis birth);

}  // namespace millassist::forecast
