#include "millassist/forecast.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

namespace millassist::forecast {

using nlohmann::json;

namespace {

constexpr int kModelSchema = 1;

bool within_10(double prediction, double target) { return std::abs(prediction - target) <= 0.1 * std::abs(target); }

void check_names(const std::vector<std::string>& expected, const std::vector<std::string>& got) {
  if (expected == got) return;
  std::string msg = "feature spec mismatch: model expects " + std::to_string(expected.size()) + " features";
  for (std::size_t i = 0; i < std::min(expected.size(), got.size()); ++i) {
    if (expected[i] != got[i]) {
      msg += ", first difference at " + std::to_string(i) + " (" + expected[i] + " vs " + got[i] + ")";
      break;
    }
  }
  if (expected.size() != got.size()) msg += ", got " + std::to_string(got.size());
  throw Error(ErrorCode::contract, msg);
}

json reference_json(const ReferenceDistribution& r) {
  return json{{"names", r.names}, {"medians", r.medians}, {"mads", r.mads}};
}

json model_document(const ForecastModel& m) {
  return json{{"model_schema", kModelSchema},
              {"parameter", m.parameter},
              {"hyperparams", to_json(m.hyperparams)},
              {"feature_spec", store::to_json(m.spec)},
              {"names", m.names},
              {"forest", m.forest.to_json()},
              {"reference", reference_json(m.reference)},
              {"spec_low", m.spec_low},
              {"spec_high", m.spec_high},
              {"residual_sd", m.residual_sd},
              {"anomaly_threshold", m.anomaly_threshold},
              {"training_reels", m.training_reels}};
}

std::string version_of(const json& document) { return to_hex(fnv1a64(document.dump())); }

}  // namespace

std::string_view to_string(QualityClass c) {
  switch (c) {
    case QualityClass::low: return "low";
    case QualityClass::in_specification: return "in_specification";
    case QualityClass::high: return "high";
  }
  return "unknown";
}

QualityClass classify(double estimate, double spec_low, double spec_high, double guard_band) {
  if (!std::isfinite(spec_low) || !std::isfinite(spec_high) || !(spec_low < spec_high))
    throw Error(ErrorCode::validation, "spec_low must be below spec_high");
  if (!(guard_band >= 0.0) || !std::isfinite(guard_band)) throw Error(ErrorCode::validation, "guard_band must be >= 0");
  if (!std::isfinite(estimate)) throw Error(ErrorCode::validation, "estimate must be finite");
  if (estimate < spec_low) return QualityClass::low;
  if (estimate > spec_high) return QualityClass::high;
  return QualityClass::in_specification;
}

// ---------------------------------------------------------------------------
// Datasets

Dataset build_dataset(const store::DataStore& store, const std::string& parameter, const store::FeatureSpec& spec) {
  Dataset d;
  d.parameter = parameter;
  d.spec = spec;
  for (const auto& def : spec) d.names.push_back(store::feature_name(def));
  std::set<std::int64_t> seen;
  bool first = true;
  for (const auto& lab : store.labs(parameter)) {
    if (!seen.insert(lab.reel_id).second) continue;
    auto fv = store.align_features(lab.reel_id, spec);
    d.rows.push_back(std::move(fv.values));
    d.targets.push_back(lab.value);
    d.reel_ids.push_back(lab.reel_id);
    if (first) {
      d.spec_low = lab.spec_low;
      d.spec_high = lab.spec_high;
      first = false;
    }
  }
  return d;
}

Dataset subset(const Dataset& data, const std::function<bool(std::int64_t)>& keep) {
  Dataset out = data;
  out.rows.clear();
  out.targets.clear();
  out.reel_ids.clear();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!keep(data.reel_ids[i])) continue;
    out.rows.push_back(data.rows[i]);
    out.targets.push_back(data.targets[i]);
    out.reel_ids.push_back(data.reel_ids[i]);
  }
  return out;
}

std::pair<Dataset, Dataset> split_by_reel(const Dataset& data, double holdout_fraction, std::uint64_t seed) {
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0))
    throw Error(ErrorCode::validation, "holdout_fraction must be in [0, 1)");
  std::vector<std::int64_t> ids(data.reel_ids);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Rng rng(fnv1a64(std::to_string(seed) + ":split"));
  for (std::size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  const auto k = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(ids.size())));
  const std::set<std::int64_t> held(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
  return {subset(data, [&](std::int64_t id) { return !held.count(id); }),
          subset(data, [&](std::int64_t id) { return held.count(id) > 0; })};
}

// ---------------------------------------------------------------------------
// Anomaly reference

ReferenceDistribution fit_reference(const std::vector<std::string>& names, const std::vector<Row>& rows) {
  ReferenceDistribution ref;
  ref.names = names;
  for (std::size_t f = 0; f < names.size(); ++f) {
    std::vector<double> values;
    for (const auto& r : rows)
      if (f < r.size() && r[f]) values.push_back(*r[f]);
    if (values.empty()) {
      ref.medians.push_back(0.0);
      ref.mads.push_back(0.0);
      continue;
    }
    const double med = quantile(values, 0.5);
    for (auto& v : values) v = std::abs(v - med);
    ref.medians.push_back(med);
    ref.mads.push_back(quantile(values, 0.5));
  }
  return ref;
}

ExtremeResult detect_extreme(const store::FeatureVector& features, const ReferenceDistribution& ref,
                             double threshold) {
  check_names(ref.names, features.names);
  if (!(threshold > 0.0)) throw Error(ErrorCode::validation, "anomaly threshold must be > 0");
  ExtremeResult out;
  for (std::size_t f = 0; f < ref.names.size(); ++f) {
    if (!(ref.mads[f] > 0.0)) {
      out.excluded.push_back(ref.names[f]);
      continue;
    }
    const auto& v = features.values[f];
    if (!v) continue;
    const double z = std::abs(*v - ref.medians[f]) / ref.mads[f];
    if (!out.driver || z > out.score) {
      out.score = z;
      out.driver = ref.names[f];
    }
  }
  out.flag = out.score > threshold;
  return out;
}

// ---------------------------------------------------------------------------
// Model

json to_json(const TrainingReport& r) {
  return json{{"samples", r.samples},
              {"oob_mape", r.oob_mape},
              {"oob_rmse", r.oob_rmse},
              {"oob_within_10", r.oob_within_10},
              {"oob_covered", r.oob_covered}};
}

TrainResult train(const Dataset& data, const Hyperparams& hyperparams) {
  validate(hyperparams);
  if (data.size() < kMinTrainingSamples)
    throw Error(ErrorCode::training, "training needs at least " + std::to_string(kMinTrainingSamples) +
                                         " samples, got " + std::to_string(data.size()));
  const bool constant = std::all_of(data.targets.begin(), data.targets.end(),
                                    [&](double y) { return y == data.targets.front(); });
  if (constant && !hyperparams.allow_degenerate_target)
    throw Error(ErrorCode::training, "degenerate target: every " + data.parameter + " value is equal");

  auto fit = Forest::fit(data.rows, data.targets, hyperparams);

  TrainResult out;
  auto& r = out.report;
  r.samples = data.size();
  double abs_pct = 0.0, sq = 0.0;
  std::size_t pct_n = 0, hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!fit.oob[i]) continue;
    const double y = data.targets[i], p = fit.oob[i]->front();
    ++r.oob_covered;
    sq += (p - y) * (p - y);
    hits += within_10(p, y);
    if (y != 0.0) {
      abs_pct += std::abs(p - y) / std::abs(y);
      ++pct_n;
    }
  }
  if (r.oob_covered > 0) {
    r.oob_rmse = std::sqrt(sq / static_cast<double>(r.oob_covered));
    r.oob_within_10 = static_cast<double>(hits) / static_cast<double>(r.oob_covered);
  }
  if (pct_n > 0) r.oob_mape = abs_pct / static_cast<double>(pct_n);

  auto& m = out.model;
  m.parameter = data.parameter;
  m.hyperparams = hyperparams;
  m.spec = data.spec;
  m.names = data.names;
  m.forest = std::move(fit.forest);
  m.reference = fit_reference(data.names, data.rows);
  m.spec_low = data.spec_low;
  m.spec_high = data.spec_high;
  m.residual_sd = r.oob_rmse;
  m.training_reels = data.reel_ids;
  m.model_version = version_of(model_document(m));
  return out;
}

json to_json(const QualityForecast& f) {
  return json{{"reel_id", f.reel_id},
              {"parameter", f.parameter},
              {"point", f.point},
              {"p10", f.p10},
              {"p90", f.p90},
              {"class", to_string(f.quality_class)},
              {"anomaly_flag", f.anomaly_flag},
              {"anomaly_score", f.anomaly_score},
              {"model_version", f.model_version}};
}

QualityForecast predict(const ForecastModel& model, const store::FeatureVector& features, std::int64_t reel_id) {
  check_names(model.names, features.names);
  const auto outputs = model.forest.tree_predictions(features.values);
  QualityForecast f;
  f.reel_id = reel_id;
  f.parameter = model.parameter;
  double sum = 0.0;
  for (double v : outputs) sum += v;
  f.point = sum / static_cast<double>(outputs.size());
  f.p10 = quantile(outputs, 0.1);
  f.p90 = quantile(outputs, 0.9);
  f.quality_class = classify(f.point, model.spec_low, model.spec_high);
  const auto extreme = detect_extreme(features, model.reference, model.anomaly_threshold);
  f.anomaly_flag = extreme.flag;
  f.anomaly_score = extreme.score;
  f.model_version = model.model_version;
  return f;
}

json to_json(const ForecastModel& model) {
  auto doc = model_document(model);
  doc["model_version"] = model.model_version;
  return doc;
}

ForecastModel model_from_json(const json& j) {
  ForecastModel m;
  try {
    if (j.at("model_schema").get<int>() != kModelSchema)
      throw Error(ErrorCode::validation, "unsupported model_schema " + j.at("model_schema").dump());
    m.parameter = j.at("parameter").get<std::string>();
    m.hyperparams = hyperparams_from_json(j.at("hyperparams"));
    m.spec = store::feature_spec_from_json(j.at("feature_spec"));
    m.names = j.at("names").get<std::vector<std::string>>();
    m.forest = Forest::from_json(j.at("forest"));
    const auto& ref = j.at("reference");
    m.reference.names = ref.at("names").get<std::vector<std::string>>();
    m.reference.medians = ref.at("medians").get<std::vector<double>>();
    m.reference.mads = ref.at("mads").get<std::vector<double>>();
    m.spec_low = j.at("spec_low").get<double>();
    m.spec_high = j.at("spec_high").get<double>();
    m.residual_sd = j.at("residual_sd").get<double>();
    m.anomaly_threshold = j.at("anomaly_threshold").get<double>();
    m.training_reels = j.at("training_reels").get<std::vector<std::int64_t>>();
    m.model_version = j.at("model_version").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed model document: ") + e.what());
  }
  if (m.forest.feature_count() != m.names.size() || m.reference.names != m.names ||
      m.reference.medians.size() != m.names.size() || m.reference.mads.size() != m.names.size())
    throw Error(ErrorCode::validation, "model document is inconsistent");
  if (version_of(model_document(m)) != m.model_version)
    throw Error(ErrorCode::validation, "model_version does not match the document content");
  return m;
}

void save_model(const ForecastModel& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out << to_json(model).dump() << '\n';
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

ForecastModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::not_found, "no model at " + path.string());
  try {
    return model_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::validation, std::string("model file is not JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport score_predictions(const std::vector<double>& targets, const std::vector<double>& predictions, double spec_low,
                             double spec_high) {
  if (targets.size() != predictions.size())
    throw Error(ErrorCode::validation, "targets and predictions differ in length");
  EvalReport r;
  r.samples = targets.size();
  r.targets = targets;
  r.predictions = predictions;
  if (targets.empty()) return r;
  double abs_pct = 0.0, sq = 0.0;
  std::size_t pct_n = 0, hits = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double y = targets[i], p = predictions[i];
    sq += (p - y) * (p - y);
    hits += within_10(p, y);
    if (y != 0.0) {
      abs_pct += std::abs(p - y) / std::abs(y);
      ++pct_n;
    }
    const auto t = static_cast<std::size_t>(classify(y, spec_low, spec_high));
    const auto c = static_cast<std::size_t>(classify(p, spec_low, spec_high));
    ++r.confusion[t][c];
  }
  const auto n = static_cast<double>(targets.size());
  r.rmse = std::sqrt(sq / n);
  r.within_10 = static_cast<double>(hits) / n;
  r.mape = pct_n > 0 ? abs_pct / static_cast<double>(pct_n) : 0.0;
  for (std::size_t t = 0; t < 3; ++t) {
    std::size_t row = 0;
    for (auto v : r.confusion[t]) row += v;
    if (row > 0) r.recall[t] = static_cast<double>(r.confusion[t][t]) / static_cast<double>(row);
  }
  return r;
}

EvalReport evaluate(const ForecastModel& model, const Dataset& holdout) {
  const std::set<std::int64_t> trained(model.training_reels.begin(), model.training_reels.end());
  for (auto id : holdout.reel_ids)
    if (trained.count(id))
      throw Error(ErrorCode::contract, "holdout reel " + std::to_string(id) + " was used in training");
  check_names(model.names, holdout.names);
  std::vector<double> predictions;
  predictions.reserve(holdout.size());
  for (std::size_t i = 0; i < holdout.size(); ++i)
    predictions.push_back(predict(model, {holdout.names, holdout.rows[i]}, holdout.reel_ids[i]).point);
  auto r = score_predictions(holdout.targets, predictions, model.spec_low, model.spec_high);
  r.parameter = model.parameter;
  r.model_version = model.model_version;
  r.reel_ids = holdout.reel_ids;
  return r;
}

void write_report(std::ostream& out, const EvalReport& r) {
  json recall = json::object();
  json confusion = json::array();
  for (std::size_t c = 0; c < 3; ++c) {
    const std::string name(to_string(static_cast<QualityClass>(c)));
    recall[name] = r.recall[c] ? json(*r.recall[c]) : json(nullptr);
    confusion.push_back(r.confusion[c]);
  }
  out << json{{"kind", "evaluation"},
              {"parameter", r.parameter},
              {"model_version", r.model_version},
              {"samples", r.samples},
              {"mape", r.mape},
              {"rmse", r.rmse},
              {"within_10", r.within_10},
              {"recall", recall},
              {"confusion", confusion}}
             .dump()
      << '\n';
  for (std::size_t i = 0; i < r.targets.size(); ++i) {
    json line{{"kind", "prediction"}, {"target", r.targets[i]}, {"prediction", r.predictions[i]}};
    if (i < r.reel_ids.size()) line["reel_id"] = r.reel_ids[i];
    out << line.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Change detection

std::string_view to_string(Direction d) { return d == Direction::up ? "up" : "down"; }

json to_json(const ChangePointEvent& e) {
  return json{{"parameter", e.parameter},
              {"detected_at", e.detected_at},
              {"statistic", e.statistic},
              {"direction", to_string(e.direction)}};
}

ChangeDetector::ChangeDetector(std::string parameter, CusumConfig config)
    : parameter_(std::move(parameter)), config_(config) {
  if (!std::isfinite(config_.mean)) throw Error(ErrorCode::validation, "cusum mean must be finite");
  if (!(config_.sigma > 0.0) || !std::isfinite(config_.sigma)) throw Error(ErrorCode::validation, "cusum sigma must be > 0");
  if (!(config_.drift >= 0.0)) throw Error(ErrorCode::validation, "cusum drift must be >= 0");
  if (!(config_.threshold > 0.0)) throw Error(ErrorCode::validation, "cusum threshold must be > 0");
}

std::optional<ChangePointEvent> ChangeDetector::update(double residual, Millis at) {
  if (!std::isfinite(residual)) throw Error(ErrorCode::validation, "residual must be finite");
  const double z = (residual - config_.mean) / config_.sigma;
  upper_ = std::max(0.0, upper_ + z - config_.drift);
  lower_ = std::max(0.0, lower_ - z - config_.drift);
  std::optional<ChangePointEvent> event;
  if (upper_ > config_.threshold) {
    event = ChangePointEvent{parameter_, at, upper_, Direction::up};
  } else if (lower_ > config_.threshold) {
    event = ChangePointEvent{parameter_, at, lower_, Direction::down};
  }
  if (event) reset();
  return event;
}

void ChangeDetector::reset() { upper_ = lower_ = 0.0; }

// ---------------------------------------------------------------------------
// Web segment tracking

std::map<std::string, std::optional<double>> track_web_segment(const std::vector<SpeedSample>& speeds,
                                                               Millis horizon_end,
                                                               const std::map<std::string, double>& positions,
                                                               Millis birth) {
  if (speeds.empty()) throw Error(ErrorCode::validation, "speed series is empty");
  for (std::size_t i = 0; i < speeds.size(); ++i) {
    if (!(speeds[i].speed > 0.0) || !std::isfinite(speeds[i].speed))
      throw Error(ErrorCode::validation, "speeds must be > 0 (sample " + std::to_string(i) + ")");
    if (i > 0 && speeds[i].at <= speeds[i - 1].at)
      throw Error(ErrorCode::validation, "speed samples must have increasing timestamps");
  }
  if (birth < speeds.front().at) throw Error(ErrorCode::validation, "speed series starts after the segment birth");
  if (horizon_end < birth) throw Error(ErrorCode::validation, "horizon ends before the segment birth");

  // Sample in force at birth.
  std::size_t start = 0;
  while (start + 1 < speeds.size() && speeds[start + 1].at <= birth) ++start;

  std::map<std::string, std::optional<double>> out;
  for (const auto& [sensor, x] : positions) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw Error(ErrorCode::validation, "position of " + sensor + " must be >= 0");
    std::optional<double> arrival;
    double travelled = 0.0;
    double t = static_cast<double>(birth);
    for (std::size_t k = start; k < speeds.size(); ++k) {
      const double end = static_cast<double>(k + 1 < speeds.size() ? std::min(speeds[k + 1].at, horizon_end) : horizon_end);
      const double v = speeds[k].speed;
      const double length = v * (end - t) / 1000.0;
      if (travelled + length >= x) {
        arrival = t + (x - travelled) / v * 1000.0;
        break;
      }
      travelled += length;
      t = end;
      if (t >= static_cast<double>(horizon_end)) break;
    }
    out.emplace(sensor, arrival);
  }
  return out;
}

}  // namespace millassist::forecast
