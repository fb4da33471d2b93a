#include "millassist/plant_sim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

namespace millassist::sim {

using nlohmann::json;

namespace {

[[noreturn]] void invalid(const std::string& field, const std::string& why) {
  throw Error(ErrorCode::validation, field + ": " + why);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  return fnv1a64(std::to_string(seed) + ":" + std::string(purpose));
}

/// Latent variables perturbed by each fault kind, per unit magnitude.
struct Effect {
  LatentVar var;
  double per_magnitude;
};

std::vector<Effect> fault_effects(FaultKind kind) {
  switch (kind) {
    case FaultKind::stock_quality_shift: return {{LatentVar::ash, 1.0}};
    case FaultKind::dryer_steam_drop: return {{LatentVar::steam, -1.0}, {LatentVar::moisture, 0.8}};
    case FaultKind::web_break_precursor: return {{LatentVar::tension, -1.0}};
    case FaultKind::chattering_sensor: return {};
  }
  return {};
}

struct Window {
  Millis begin;
  Millis end;
};

Window active_window(const FaultInjection& f, Millis scenario_end) {
  const Millis begin = seconds_to_millis(f.start_s);
  const Millis end = f.duration_s > 0.0 ? std::min(scenario_end, begin + seconds_to_millis(f.duration_s)) : scenario_end;
  return {begin, end};
}

Millis overlap(Window a, Window b) { return std::max<Millis>(0, std::min(a.end, b.end) - std::max(a.begin, b.begin)); }

struct PendingAlarm {
  Millis timestamp;
  std::string tag;
  std::string code;
  Severity severity;
  AlarmState state;
  AlarmLabel label;
  std::size_t gen;           // generation order, final tie-break
  int fault_index = -1;
  std::size_t raise_gen = 0;  // for cleared events: gen of the matching raise
};

double latent_mean(const ScenarioConfig& c, LatentVar v) {
  for (const auto& l : c.latent)
    if (l.var == v) return l.mean;
  return 0.0;
}

template <class Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::array<std::string_view, N>& names, std::string_view what) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<Enum>(i);
  throw Error(ErrorCode::validation, "unknown " + std::string(what) + " '" + std::string(s) + "'");
}

constexpr std::array<std::string_view, kLatentCount> kLatentNames{"ash",      "fiber", "speed",  "moisture",
                                                                  "refiner", "steam", "tension"};
constexpr std::array<std::string_view, 4> kFaultNames{"web_break_precursor", "dryer_steam_drop",
                                                      "stock_quality_shift", "chattering_sensor"};
constexpr std::array<std::string_view, 3> kLabRuleNames{"every_reel", "every_nth", "on_demand"};

}  // namespace

std::string_view to_string(LatentVar v) { return kLatentNames[static_cast<std::size_t>(v)]; }
LatentVar parse_latent_var(std::string_view s) { return parse_enum<LatentVar>(s, kLatentNames, "latent variable"); }
std::string_view to_string(FaultKind k) { return kFaultNames[static_cast<std::size_t>(k)]; }
FaultKind parse_fault_kind(std::string_view s) { return parse_enum<FaultKind>(s, kFaultNames, "fault kind"); }

std::string_view to_string(AlarmLabel l) {
  switch (l) {
    case AlarmLabel::nuisance: return "nuisance";
    case AlarmLabel::fault_causal: return "fault_causal";
    case AlarmLabel::threshold_genuine: return "threshold_genuine";
  }
  return "unknown";
}

ScenarioConfig default_config() {
  ScenarioConfig c;
  c.latent = {
      {LatentVar::ash, 15.0, 2.0, 0.8},     {LatentVar::fiber, 1.2, 0.15, 0.8},
      {LatentVar::speed, 900.0, 30.0, 0.9}, {LatentVar::moisture, 7.5, 0.3, 0.7},
      {LatentVar::refiner, 120.0, 10.0, 0.8}, {LatentVar::steam, 4.0, 0.15, 0.7},
      {LatentVar::tension, 3.0, 0.1, 0.7},
  };
  auto sensor = [](std::string tag, std::string unit, double pos, std::optional<LatentVar> src, double base,
                   double noise) {
    SensorSpec s;
    s.tag = std::move(tag);
    s.unit = std::move(unit);
    s.position_m = pos;
    s.source = src;
    s.base = base;
    s.noise_sd = noise;
    return s;
  };
  c.sensors = {
      sensor("STOCK.ASH", "%", 0.0, LatentVar::ash, 15.0, 0.5),
      sensor("STOCK.FIBER", "mm", 0.0, LatentVar::fiber, 1.2, 0.05),
      sensor("REFINER.LOAD", "kWh/t", 0.0, LatentVar::refiner, 120.0, 2.0),
      sensor("PM.SPEED", "m/min", 20.0, LatentVar::speed, 900.0, 3.0),
      sensor("VAC.PRESSURE", "kPa", 30.0, std::nullopt, -40.0, 0.5),
      sensor("PRESS.TENSION", "kN/m", 60.0, LatentVar::tension, 3.0, 0.05),
      sensor("DRYER.STEAM", "bar", 120.0, LatentVar::steam, 4.0, 0.05),
      sensor("SCANNER.MOIST", "%", 240.0, LatentVar::moisture, 7.5, 0.1),
  };
  c.sensors[0].alarm = AlarmBand{-1e9, 24.0, 0.5, "ASH_HIGH", Severity::warning};
  c.sensors[5].alarm = AlarmBand{2.4, 1e9, 0.1, "TENSION_LOW", Severity::alarm};
  c.sensors[6].alarm = AlarmBand{3.3, 1e9, 0.1, "STEAM_LOW", Severity::warning};
  c.sensors[7].alarm = AlarmBand{-1e9, 9.0, 0.1, "MOIST_HIGH", Severity::warning};

  QualityModel tensile;
  tensile.parameter = "tensile_strength";
  tensile.unit = "kN/m";
  tensile.location = "QC.TENSILE";
  tensile.intercept = 35.0;
  tensile.linear = {{LatentVar::ash, -1.5},
                    {LatentVar::fiber, 12.0},
                    {LatentVar::moisture, -1.0},
                    {LatentVar::refiner, 0.02},
                    {LatentVar::speed, -0.01}};
  tensile.interactions = {{LatentVar::speed, LatentVar::moisture, -0.01}};
  tensile.noise_sd = 0.5;
  tensile.spec_low = 28.0;
  tensile.spec_high = 42.0;

  QualityModel scott;
  scott.parameter = "scott_bond";
  scott.unit = "J/m2";
  scott.location = "QC.SCOTT";
  scott.intercept = 250.0;
  scott.linear = {{LatentVar::ash, -8.0}, {LatentVar::fiber, 40.0}, {LatentVar::refiner, 1.5},
                  {LatentVar::moisture, -5.0}};
  scott.interactions = {{LatentVar::refiner, LatentVar::fiber, 0.5}};
  scott.noise_sd = 8.0;
  scott.spec_low = 200.0;
  scott.spec_high = 300.0;
  c.quality_model = {tensile, scott};

  LabRule tensile_rule;
  tensile_rule.parameter = "tensile_strength";
  LabRule scott_rule;
  scott_rule.parameter = "scott_bond";
  scott_rule.rule = LabRuleKind::every_nth;
  scott_rule.n = 3;
  c.lab_plan = {tensile_rule, scott_rule};
  return c;
}

void validate(const ScenarioConfig& c) {
  if (!(c.duration_s >= 0.0) || !std::isfinite(c.duration_s)) invalid("duration_s", "must be a finite value >= 0");
  if (!(c.reel_duration_s > 0.0)) invalid("reel_duration_s", "must be > 0");
  for (std::size_t i = 0; i < c.latent.size(); ++i) {
    const auto& l = c.latent[i];
    const std::string f = "latent[" + std::to_string(i) + "]";
    if (!(l.sd >= 0.0)) invalid(f + ".sd", "must be >= 0");
    if (!(std::abs(l.ar_coef) < 1.0)) invalid(f + ".ar", "must be in (-1, 1)");
  }
  std::set<std::string> tags;
  for (std::size_t i = 0; i < c.sensors.size(); ++i) {
    const auto& s = c.sensors[i];
    const std::string f = "sensors[" + std::to_string(i) + "]";
    if (s.tag.empty()) invalid(f + ".tag", "must be non-empty");
    if (!tags.insert(s.tag).second) invalid(f + ".tag", "duplicate tag '" + s.tag + "'");
    if (!(s.min_interval_s >= 1.0 && s.max_interval_s <= 3600.0 && s.min_interval_s <= s.max_interval_s))
      invalid(f + ".interval_s", "bounds must lie within [1, 3600] s with low <= high");
    if (!(s.noise_sd >= 0.0)) invalid(f + ".noise_sd", "must be >= 0");
    if (!(s.position_m >= 0.0)) invalid(f + ".position_m", "must be >= 0");
    if (s.alarm) {
      if (!(s.alarm->low < s.alarm->high)) invalid(f + ".alarm", "low must be < high");
      if (s.alarm->error_code.empty()) invalid(f + ".alarm.code", "must be non-empty");
      if (!(s.alarm->hysteresis >= 0.0)) invalid(f + ".alarm.hysteresis", "must be >= 0");
    }
  }
  std::set<std::string> params;
  for (std::size_t i = 0; i < c.quality_model.size(); ++i) {
    const auto& q = c.quality_model[i];
    const std::string f = "quality_model[" + std::to_string(i) + "]";
    if (q.parameter.empty()) invalid(f + ".parameter", "must be non-empty");
    if (!params.insert(q.parameter).second) invalid(f + ".parameter", "duplicate parameter");
    if (!(q.spec_low < q.spec_high)) invalid(f + ".spec", "spec_low must be < spec_high");
    if (!(q.noise_sd >= 0.0)) invalid(f + ".noise_sd", "must be >= 0");
  }
  for (std::size_t i = 0; i < c.lab_plan.size(); ++i) {
    const auto& r = c.lab_plan[i];
    const std::string f = "lab_plan[" + std::to_string(i) + "]";
    if (!params.count(r.parameter)) invalid(f + ".parameter", "no quality_model entry for '" + r.parameter + "'");
    if (r.n < 1) invalid(f + ".n", "must be >= 1");
    if (!(r.on_demand_probability >= 0.0 && r.on_demand_probability <= 1.0))
      invalid(f + ".probability", "must be in [0, 1]");
    if (r.daily_cap < 0) invalid(f + ".daily_cap", "must be >= 0");
    if (!(r.delay_min_s >= 0.0 && r.delay_min_s <= r.delay_max_s))
      invalid(f + ".delay_s", "bounds must satisfy 0 <= low <= high");
  }
  for (std::size_t i = 0; i < c.fault_plan.size(); ++i) {
    const auto& fi = c.fault_plan[i];
    const std::string f = "fault_plan[" + std::to_string(i) + "]";
    if (!(fi.start_s >= 0.0)) invalid(f + ".start_s", "must be >= 0");
    if (!(fi.duration_s >= 0.0)) invalid(f + ".duration_s", "must be >= 0");
    if (!std::isfinite(fi.magnitude)) invalid(f + ".magnitude", "must be finite");
    if (fi.kind == FaultKind::chattering_sensor) {
      if (!(fi.period_s > 0.0)) invalid(f + ".period_s", "must be > 0");
      if (!tags.count(fi.tag)) invalid(f + ".tag", "chattering_sensor must name a configured sensor");
      if (!(fi.duration_s > 0.0)) invalid(f + ".duration_s", "chattering_sensor needs a duration");
    }
    for (std::size_t k = 0; k < fi.cascade.size(); ++k) {
      const auto& step = fi.cascade[k];
      if (step.error_code.empty()) invalid(f + ".cascade[" + std::to_string(k) + "].code", "must be non-empty");
      if (!(step.offset_s >= 0.0)) invalid(f + ".cascade[" + std::to_string(k) + "].offset_s", "must be >= 0");
      if (k > 0 && !(step.offset_s > fi.cascade[k - 1].offset_s))
        invalid(f + ".cascade[" + std::to_string(k) + "].offset_s", "offsets must be strictly increasing");
    }
  }
  const auto& a = c.alarms;
  if (!(a.nuisance_alarm_fraction >= 0.0 && a.nuisance_alarm_fraction <= 1.0))
    invalid("alarms.nuisance_alarm_fraction", "must be in [0, 1]");
  if (!(a.genuine_rate_per_hour >= 0.0)) invalid("alarms.genuine_rate_per_hour", "must be >= 0");
  if (a.burst_min < 1 || a.burst_max < a.burst_min) invalid("alarms.burst_size", "need 1 <= low <= high");
  if (!(a.burst_spacing_min_s >= 0.0 && a.burst_spacing_min_s <= a.burst_spacing_max_s))
    invalid("alarms.burst_spacing_s", "need 0 <= low <= high");
  if (!(c.sorting.delivery_interval_s > 0.0)) invalid("sorting.delivery_interval_s", "must be > 0");
  if (!(c.sorting.delay_min_h >= 0.0 && c.sorting.delay_min_h <= c.sorting.delay_max_h))
    invalid("sorting.delay_h", "need 0 <= low <= high");
}

// ---------------------------------------------------------------------------
// Config (de)serialization. Unknown keys are rejected so typos surface.

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) invalid(where, "must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      invalid(where.empty() ? key : where + "." + key, "unknown key");
  }
}

template <class T>
T get_or(const json& j, const char* key, const std::string& where, T fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    invalid(where.empty() ? key : where + "." + key, "wrong type");
  }
}

std::pair<double, double> get_range(const json& j, const char* key, const std::string& where,
                                    std::pair<double, double> fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_array() || it->size() != 2) invalid(where + "." + key, "must be a [low, high] pair");
  try {
    return {(*it)[0].get<double>(), (*it)[1].get<double>()};
  } catch (const json::exception&) {
    invalid(where + "." + key, "must be numeric");
  }
}

}  // namespace

ScenarioConfig config_from_json(const json& j) {
  check_keys(j, "", {"scenario_schema", "seed", "duration_s", "reel_duration_s", "latent", "sensors", "quality_model",
                     "lab_plan", "faults", "alarms", "sorting"});
  const auto schema = j.find("scenario_schema");
  if (schema == j.end() || !schema->is_number_integer() || schema->get<int>() != kScenarioSchema)
    invalid("scenario_schema", "must be " + std::to_string(kScenarioSchema));

  ScenarioConfig c = default_config();
  c.seed = get_or<std::uint64_t>(j, "seed", "", c.seed);
  c.duration_s = get_or<double>(j, "duration_s", "", c.duration_s);
  c.reel_duration_s = get_or<double>(j, "reel_duration_s", "", c.reel_duration_s);

  if (j.contains("latent")) {
    c.latent.clear();
    for (std::size_t i = 0; i < j["latent"].size(); ++i) {
      const auto& e = j["latent"][i];
      const std::string w = "latent[" + std::to_string(i) + "]";
      check_keys(e, w, {"var", "mean", "sd", "ar"});
      LatentSpec l;
      l.var = parse_latent_var(get_or<std::string>(e, "var", w, ""));
      l.mean = get_or<double>(e, "mean", w, 0.0);
      l.sd = get_or<double>(e, "sd", w, 0.0);
      l.ar_coef = get_or<double>(e, "ar", w, 0.8);
      c.latent.push_back(l);
    }
  }
  if (j.contains("sensors")) {
    c.sensors.clear();
    for (std::size_t i = 0; i < j["sensors"].size(); ++i) {
      const auto& e = j["sensors"][i];
      const std::string w = "sensors[" + std::to_string(i) + "]";
      check_keys(e, w, {"tag", "unit", "position_m", "source", "base", "gain", "noise_sd", "interval_s", "alarm"});
      SensorSpec s;
      s.tag = get_or<std::string>(e, "tag", w, "");
      s.unit = get_or<std::string>(e, "unit", w, "");
      s.position_m = get_or<double>(e, "position_m", w, 0.0);
      if (e.contains("source") && !e["source"].is_null())
        s.source = parse_latent_var(get_or<std::string>(e, "source", w, ""));
      s.base = get_or<double>(e, "base", w, 0.0);
      s.gain = get_or<double>(e, "gain", w, 1.0);
      s.noise_sd = get_or<double>(e, "noise_sd", w, 0.0);
      std::tie(s.min_interval_s, s.max_interval_s) = get_range(e, "interval_s", w, {5.0, 15.0});
      if (e.contains("alarm")) {
        const auto& a = e["alarm"];
        check_keys(a, w + ".alarm", {"low", "high", "hysteresis", "code", "severity"});
        AlarmBand band;
        band.low = get_or<double>(a, "low", w + ".alarm", -1e9);
        band.high = get_or<double>(a, "high", w + ".alarm", 1e9);
        band.hysteresis = get_or<double>(a, "hysteresis", w + ".alarm", 0.0);
        band.error_code = get_or<std::string>(a, "code", w + ".alarm", "");
        band.severity = parse_severity(get_or<std::string>(a, "severity", w + ".alarm", "warning"));
        s.alarm = band;
      }
      c.sensors.push_back(std::move(s));
    }
  }
  if (j.contains("quality_model")) {
    c.quality_model.clear();
    for (std::size_t i = 0; i < j["quality_model"].size(); ++i) {
      const auto& e = j["quality_model"][i];
      const std::string w = "quality_model[" + std::to_string(i) + "]";
      check_keys(e, w, {"parameter", "unit", "location", "intercept", "linear", "interactions", "noise_sd", "spec"});
      QualityModel q;
      q.parameter = get_or<std::string>(e, "parameter", w, "");
      q.unit = get_or<std::string>(e, "unit", w, "");
      q.location = get_or<std::string>(e, "location", w, "");
      q.intercept = get_or<double>(e, "intercept", w, 0.0);
      if (e.contains("linear")) {
        for (const auto& [var, coef] : e["linear"].items()) q.linear[parse_latent_var(var)] = coef.get<double>();
      }
      if (e.contains("interactions")) {
        for (const auto& it : e["interactions"]) {
          check_keys(it, w + ".interactions", {"a", "b", "coef"});
          q.interactions.push_back({parse_latent_var(it.at("a").get<std::string>()),
                                    parse_latent_var(it.at("b").get<std::string>()), it.at("coef").get<double>()});
        }
      }
      q.noise_sd = get_or<double>(e, "noise_sd", w, 0.0);
      std::tie(q.spec_low, q.spec_high) = get_range(e, "spec", w, {0.0, 1.0});
      c.quality_model.push_back(std::move(q));
    }
  }
  if (j.contains("lab_plan")) {
    c.lab_plan.clear();
    for (std::size_t i = 0; i < j["lab_plan"].size(); ++i) {
      const auto& e = j["lab_plan"][i];
      const std::string w = "lab_plan[" + std::to_string(i) + "]";
      check_keys(e, w, {"parameter", "rule", "n", "probability", "daily_cap", "delay_s"});
      LabRule r;
      r.parameter = get_or<std::string>(e, "parameter", w, "");
      r.rule = parse_enum<LabRuleKind>(get_or<std::string>(e, "rule", w, "every_reel"), kLabRuleNames, "lab rule");
      r.n = get_or<int>(e, "n", w, 1);
      r.on_demand_probability = get_or<double>(e, "probability", w, 0.1);
      r.daily_cap = get_or<int>(e, "daily_cap", w, 50);
      std::tie(r.delay_min_s, r.delay_max_s) = get_range(e, "delay_s", w, {1800.0, 7200.0});
      c.lab_plan.push_back(std::move(r));
    }
  }
  if (j.contains("faults")) {
    for (std::size_t i = 0; i < j["faults"].size(); ++i) {
      const auto& e = j["faults"][i];
      const std::string w = "faults[" + std::to_string(i) + "]";
      check_keys(e, w, {"kind", "start_s", "duration_s", "magnitude", "tag", "period_s", "chatter_code", "cascade"});
      FaultInjection f;
      f.kind = parse_fault_kind(get_or<std::string>(e, "kind", w, ""));
      f.start_s = get_or<double>(e, "start_s", w, 0.0);
      f.duration_s = get_or<double>(e, "duration_s", w, 0.0);
      f.magnitude = get_or<double>(e, "magnitude", w, 0.0);
      f.tag = get_or<std::string>(e, "tag", w, "");
      f.period_s = get_or<double>(e, "period_s", w, 2.0);
      f.chatter_code = get_or<std::string>(e, "chatter_code", w, "CHATTER");
      if (e.contains("cascade")) {
        for (const auto& s : e["cascade"]) {
          check_keys(s, w + ".cascade", {"code", "offset_s", "severity"});
          f.cascade.push_back({s.at("code").get<std::string>(), s.value("offset_s", 0.0),
                               parse_severity(s.value("severity", std::string{"alarm"}))});
        }
      }
      c.fault_plan.push_back(std::move(f));
    }
  }
  if (j.contains("alarms")) {
    const auto& a = j["alarms"];
    check_keys(a, "alarms", {"nuisance_alarm_fraction", "genuine_rate_per_hour", "burst_size", "burst_spacing_s"});
    c.alarms.nuisance_alarm_fraction =
        get_or<double>(a, "nuisance_alarm_fraction", "alarms", c.alarms.nuisance_alarm_fraction);
    c.alarms.genuine_rate_per_hour = get_or<double>(a, "genuine_rate_per_hour", "alarms", c.alarms.genuine_rate_per_hour);
    const auto burst = get_range(a, "burst_size", "alarms", {c.alarms.burst_min, c.alarms.burst_max});
    c.alarms.burst_min = static_cast<int>(burst.first);
    c.alarms.burst_max = static_cast<int>(burst.second);
    std::tie(c.alarms.burst_spacing_min_s, c.alarms.burst_spacing_max_s) =
        get_range(a, "burst_spacing_s", "alarms", {c.alarms.burst_spacing_min_s, c.alarms.burst_spacing_max_s});
  }
  if (j.contains("sorting")) {
    const auto& s = j["sorting"];
    check_keys(s, "sorting", {"delivery_interval_s", "delay_h"});
    c.sorting.delivery_interval_s = get_or<double>(s, "delivery_interval_s", "sorting", c.sorting.delivery_interval_s);
    std::tie(c.sorting.delay_min_h, c.sorting.delay_max_h) =
        get_range(s, "delay_h", "sorting", {c.sorting.delay_min_h, c.sorting.delay_max_h});
  }
  validate(c);
  return c;
}

json to_json(const ScenarioConfig& c) {
  json j;
  j["scenario_schema"] = kScenarioSchema;
  j["seed"] = c.seed;
  j["duration_s"] = c.duration_s;
  j["reel_duration_s"] = c.reel_duration_s;
  j["latent"] = json::array();
  for (const auto& l : c.latent)
    j["latent"].push_back({{"var", to_string(l.var)}, {"mean", l.mean}, {"sd", l.sd}, {"ar", l.ar_coef}});
  j["sensors"] = json::array();
  for (const auto& s : c.sensors) {
    json e{{"tag", s.tag},   {"unit", s.unit}, {"position_m", s.position_m},
           {"base", s.base}, {"gain", s.gain}, {"noise_sd", s.noise_sd},
           {"interval_s", {s.min_interval_s, s.max_interval_s}}};
    e["source"] = s.source ? json(to_string(*s.source)) : json(nullptr);
    if (s.alarm)
      e["alarm"] = {{"low", s.alarm->low},
                    {"high", s.alarm->high},
                    {"hysteresis", s.alarm->hysteresis},
                    {"code", s.alarm->error_code},
                    {"severity", to_string(s.alarm->severity)}};
    j["sensors"].push_back(std::move(e));
  }
  j["quality_model"] = json::array();
  for (const auto& q : c.quality_model) {
    json lin = json::object();
    for (const auto& [v, coef] : q.linear) lin[std::string(to_string(v))] = coef;
    json inter = json::array();
    for (const auto& it : q.interactions) inter.push_back({{"a", to_string(it.a)}, {"b", to_string(it.b)}, {"coef", it.coef}});
    j["quality_model"].push_back({{"parameter", q.parameter},
                                  {"unit", q.unit},
                                  {"location", q.location},
                                  {"intercept", q.intercept},
                                  {"linear", lin},
                                  {"interactions", inter},
                                  {"noise_sd", q.noise_sd},
                                  {"spec", {q.spec_low, q.spec_high}}});
  }
  j["lab_plan"] = json::array();
  for (const auto& r : c.lab_plan)
    j["lab_plan"].push_back({{"parameter", r.parameter},
                             {"rule", kLabRuleNames[static_cast<std::size_t>(r.rule)]},
                             {"n", r.n},
                             {"probability", r.on_demand_probability},
                             {"daily_cap", r.daily_cap},
                             {"delay_s", {r.delay_min_s, r.delay_max_s}}});
  j["faults"] = json::array();
  for (const auto& f : c.fault_plan) {
    json cascade = json::array();
    for (const auto& s : f.cascade)
      cascade.push_back({{"code", s.error_code}, {"offset_s", s.offset_s}, {"severity", to_string(s.severity)}});
    j["faults"].push_back({{"kind", to_string(f.kind)},
                           {"start_s", f.start_s},
                           {"duration_s", f.duration_s},
                           {"magnitude", f.magnitude},
                           {"tag", f.tag},
                           {"period_s", f.period_s},
                           {"chatter_code", f.chatter_code},
                           {"cascade", cascade}});
  }
  j["alarms"] = {{"nuisance_alarm_fraction", c.alarms.nuisance_alarm_fraction},
                 {"genuine_rate_per_hour", c.alarms.genuine_rate_per_hour},
                 {"burst_size", {c.alarms.burst_min, c.alarms.burst_max}},
                 {"burst_spacing_s", {c.alarms.burst_spacing_min_s, c.alarms.burst_spacing_max_s}}};
  j["sorting"] = {{"delivery_interval_s", c.sorting.delivery_interval_s},
                  {"delay_h", {c.sorting.delay_min_h, c.sorting.delay_max_h}}};
  return j;
}

json to_json(const GroundTruth& t) {
  json j;
  j["quality"] = t.quality;
  json labels = json::object();
  for (const auto& [id, label] : t.alarm_labels) labels[id] = to_string(label);
  j["alarm_labels"] = labels;
  j["fault_causal_alarms"] = t.fault_causal_alarms;
  json reels = json::array();
  for (const auto& kinds : t.reel_faults) {
    json k = json::array();
    for (const auto kind : kinds) k.push_back(to_string(kind));
    reels.push_back(std::move(k));
  }
  j["reel_faults"] = reels;
  return j;
}

// ---------------------------------------------------------------------------
// Plan construction

std::size_t ScenarioPlan::record_count() const {
  std::size_t n = alarms.size() + labs.size() + reels.size() + sorting.size();
  for (const auto& s : sensor_samples) n += s.size();
  return n;
}

namespace {

class PlanBuilder {
 public:
  explicit PlanBuilder(const ScenarioConfig& config) : c_(config), end_(seconds_to_millis(config.duration_s)) {
    reel_ms_ = seconds_to_millis(c_.reel_duration_s);
    reel_count_ = end_ / reel_ms_;
    for (const auto& f : c_.fault_plan) windows_.push_back(active_window(f, end_));
  }

  ScenarioPlan build() {
    ScenarioPlan plan;
    plan.config = c_;
    if (end_ <= 0) {
      plan.sensor_samples.resize(c_.sensors.size());
      return plan;
    }
    generate_latent();
    build_reels(plan);
    build_quality(plan);
    build_sensors(plan);
    build_fault_alarms();
    build_background_alarms();
    finalize_alarms(plan);
    build_labs(plan);
    build_sorting(plan);
    return plan;
  }

 private:
  // Reel-level latent base values: AR(1) around each variable's mean.
  void generate_latent() {
    Rng rng(derive_seed(c_.seed, "latent"));
    const std::size_t reels = static_cast<std::size_t>(reel_count_) + 1;
    base_.assign(reels, {});
    for (auto& row : base_) row.fill(0.0);
    for (const auto& l : c_.latent) {
      const auto v = static_cast<std::size_t>(l.var);
      const double innov = l.sd * std::sqrt(1.0 - l.ar_coef * l.ar_coef);
      double dev = l.sd * rng.normal();
      for (std::size_t r = 0; r < reels; ++r) {
        if (r > 0) dev = l.ar_coef * dev + innov * rng.normal();
        base_[r][v] = l.mean + dev;
      }
    }
    for (int v = 0; v < kLatentCount; ++v) means_[static_cast<std::size_t>(v)] = latent_mean(c_, static_cast<LatentVar>(v));
  }

  std::size_t reel_index(Millis t) const {
    return static_cast<std::size_t>(std::min<Millis>(t / reel_ms_, reel_count_));
  }

  double latent_at(LatentVar var, Millis t) const {
    double value = base_[reel_index(t)][static_cast<std::size_t>(var)];
    for (std::size_t i = 0; i < c_.fault_plan.size(); ++i) {
      if (t < windows_[i].begin || t >= windows_[i].end) continue;
      for (const auto& e : fault_effects(c_.fault_plan[i].kind))
        if (e.var == var) value += e.per_magnitude * c_.fault_plan[i].magnitude;
    }
    return value;
  }

  double latent_reel_mean(LatentVar var, std::size_t r) const {
    double value = base_[r][static_cast<std::size_t>(var)];
    const Window reel{static_cast<Millis>(r) * reel_ms_, static_cast<Millis>(r + 1) * reel_ms_};
    for (std::size_t i = 0; i < c_.fault_plan.size(); ++i) {
      const double frac = static_cast<double>(overlap(reel, windows_[i])) / static_cast<double>(reel_ms_);
      if (frac <= 0.0) continue;
      for (const auto& e : fault_effects(c_.fault_plan[i].kind))
        if (e.var == var) value += e.per_magnitude * c_.fault_plan[i].magnitude * frac;
    }
    return value;
  }

  void build_reels(ScenarioPlan& plan) {
    plan.truth.reel_faults.resize(static_cast<std::size_t>(reel_count_));
    for (Millis r = 0; r < reel_count_; ++r) {
      const Window w{r * reel_ms_, (r + 1) * reel_ms_};
      plan.reels.push_back({r + 1, w.begin, w.end});
      auto& kinds = plan.truth.reel_faults[static_cast<std::size_t>(r)];
      for (std::size_t i = 0; i < c_.fault_plan.size(); ++i) {
        if (2 * overlap(w, windows_[i]) >= reel_ms_ &&
            std::find(kinds.begin(), kinds.end(), c_.fault_plan[i].kind) == kinds.end())
          kinds.push_back(c_.fault_plan[i].kind);
      }
    }
  }

  void build_quality(ScenarioPlan& plan) {
    if (reel_count_ == 0) return;
    for (const auto& q : c_.quality_model) {
      Rng rng(derive_seed(c_.seed, "quality:" + q.parameter));
      auto& values = plan.truth.quality[q.parameter];
      for (std::size_t r = 0; r < static_cast<std::size_t>(reel_count_); ++r) {
        auto dev = [&](LatentVar v) { return latent_reel_mean(v, r) - means_[static_cast<std::size_t>(v)]; };
        double y = q.intercept;
        for (const auto& [v, coef] : q.linear) y += coef * dev(v);
        for (const auto& it : q.interactions) y += it.coef * dev(it.a) * dev(it.b);
        // Always draw so the noise sequence does not depend on noise_sd.
        y += q.noise_sd * rng.normal();
        values.push_back(y);
      }
    }
  }

  void build_sensors(ScenarioPlan& plan) {
    plan.sensor_samples.resize(c_.sensors.size());
    for (std::size_t i = 0; i < c_.sensors.size(); ++i) {
      const auto& s = c_.sensors[i];
      Rng rng(derive_seed(c_.seed, "sensor:" + s.tag));
      const Millis lo = seconds_to_millis(s.min_interval_s);
      const Millis hi = seconds_to_millis(s.max_interval_s);
      std::vector<std::size_t> chatter;
      for (std::size_t f = 0; f < c_.fault_plan.size(); ++f)
        if (c_.fault_plan[f].kind == FaultKind::chattering_sensor && c_.fault_plan[f].tag == s.tag) chatter.push_back(f);

      auto& out = plan.sensor_samples[i];
      bool flip = false;
      bool alarm_active = false;
      std::size_t raise_gen = 0;
      for (Millis t = rng.uniform_int(0, hi); t < end_; t += rng.uniform_int(lo, hi)) {
        double value = s.base + s.noise_sd * rng.normal();
        if (s.source) value += s.gain * (latent_at(*s.source, t) - means_[static_cast<std::size_t>(*s.source)]);
        QualityFlag flag = QualityFlag::good;
        for (const auto f : chatter) {
          if (t >= windows_[f].begin && t < windows_[f].end) {
            value += (flip ? -1.0 : 1.0) * c_.fault_plan[f].magnitude;
            flip = !flip;
            flag = QualityFlag::suspect;
          }
        }
        out.push_back({t, value, flag});

        if (!s.alarm) continue;
        const auto& band = *s.alarm;
        if (!alarm_active && (value < band.low || value > band.high)) {
          alarm_active = true;
          raise_gen = next_gen_;
          push_alarm(t, s.tag, band.error_code, band.severity, AlarmState::raised, AlarmLabel::threshold_genuine);
          ++threshold_raised_;
        } else if (alarm_active && value >= band.low + band.hysteresis && value <= band.high - band.hysteresis) {
          alarm_active = false;
          push_alarm(t, s.tag, band.error_code, band.severity, AlarmState::cleared, AlarmLabel::threshold_genuine)
              .raise_gen = raise_gen;
        }
      }
    }
  }

  PendingAlarm& push_alarm(Millis t, const std::string& tag, const std::string& code, Severity sev, AlarmState state,
                           AlarmLabel label) {
    pending_.push_back({t, tag, code, sev, state, label, next_gen_++});
    return pending_.back();
  }

  void build_fault_alarms() {
    for (std::size_t i = 0; i < c_.fault_plan.size(); ++i) {
      const auto& f = c_.fault_plan[i];
      const std::string tag = f.tag.empty() ? std::string("PCS.") + std::string(to_string(f.kind)) : f.tag;
      for (const auto& step : f.cascade) {
        const Millis t = windows_[i].begin + seconds_to_millis(step.offset_s);
        if (t >= end_) continue;
        push_alarm(t, tag, step.error_code, step.severity, AlarmState::raised, AlarmLabel::fault_causal).fault_index =
            static_cast<int>(i);
        ++causal_;
      }
      if (f.kind == FaultKind::chattering_sensor) {
        const Millis period = seconds_to_millis(f.period_s);
        for (Millis t = windows_[i].begin; t < windows_[i].end; t += period) {
          push_alarm(t, tag, f.chatter_code, Severity::info, AlarmState::raised, AlarmLabel::nuisance);
          ++nuisance_;
        }
      }
    }
  }

  std::string random_tag(Rng& rng) const {
    if (c_.sensors.empty()) return "PCS.MISC";
    return c_.sensors[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(c_.sensors.size()) - 1))].tag;
  }

  static std::string code(std::string_view prefix, std::int64_t n) {
    std::ostringstream os;
    os << prefix << (n < 10 ? "0" : "") << n;
    return os.str();
  }

  // Genuine single alarms at a fixed rate, then nuisance bursts sized so the
  // overall nuisance share of raised alarms matches the configured fraction.
  void build_background_alarms() {
    const auto& a = c_.alarms;
    Rng rng(derive_seed(c_.seed, "background-alarms"));
    const double hours = static_cast<double>(end_) / 3.6e6;
    const auto genuine = static_cast<std::int64_t>(std::llround(a.genuine_rate_per_hour * hours));
    const double f = a.nuisance_alarm_fraction;
    for (std::int64_t k = 0; k < genuine && f < 1.0; ++k) {
      const Millis t = rng.uniform_int(0, end_ - 1);
      const Severity sev = rng.bernoulli(0.2) ? Severity::alarm : Severity::warning;
      push_alarm(t, random_tag(rng), code("PCS_", rng.uniform_int(0, 19)), sev, AlarmState::raised,
                 AlarmLabel::threshold_genuine);
    }
    const std::int64_t non_nuisance = causal_ + threshold_raised_ + (f < 1.0 ? genuine : 0);
    std::int64_t target = 0;
    if (f >= 1.0) {
      target = std::llround(a.genuine_rate_per_hour * hours * 0.5 * (a.burst_min + a.burst_max));
    } else {
      target = std::llround(f * static_cast<double>(non_nuisance) / (1.0 - f));
    }
    std::int64_t remaining = target - nuisance_;
    const Millis span = seconds_to_millis(a.burst_spacing_max_s) * a.burst_max;
    const Millis latest_start = std::max<Millis>(0, end_ - 1 - span);
    while (remaining > 0) {
      const Millis start = rng.uniform_int(0, latest_start);
      const std::string tag = random_tag(rng);
      const std::string c = code("NUI_", rng.uniform_int(0, 11));
      const Severity sev = rng.bernoulli(0.7) ? Severity::info : Severity::warning;
      const std::int64_t size = std::min<std::int64_t>(remaining, rng.uniform_int(a.burst_min, a.burst_max));
      Millis t = start;
      for (std::int64_t k = 0; k < size; ++k) {
        if (k > 0) t += seconds_to_millis(rng.uniform(a.burst_spacing_min_s, a.burst_spacing_max_s));
        push_alarm(std::min(t, end_ - 1), tag, c, sev, AlarmState::raised, AlarmLabel::nuisance);
      }
      remaining -= size;
    }
  }

  void finalize_alarms(ScenarioPlan& plan) {
    std::stable_sort(pending_.begin(), pending_.end(), [](const PendingAlarm& x, const PendingAlarm& y) {
      if (x.timestamp != y.timestamp) return x.timestamp < y.timestamp;
      if (x.tag != y.tag) return x.tag < y.tag;
      return x.gen < y.gen;
    });
    std::map<std::size_t, std::string> id_by_gen;
    plan.truth.fault_causal_alarms.resize(c_.fault_plan.size());
    std::size_t next_id = 1;
    for (const auto& p : pending_) {
      std::string id;
      if (p.state == AlarmState::raised) {
        std::ostringstream os;
        os << "AL" << std::setw(7) << std::setfill('0') << next_id++;
        id = os.str();
        id_by_gen[p.gen] = id;
        plan.truth.alarm_labels[id] = p.label;
        if (p.fault_index >= 0) plan.truth.fault_causal_alarms[static_cast<std::size_t>(p.fault_index)].push_back(id);
      } else {
        id = id_by_gen.at(p.raise_gen);
      }
      plan.alarms.push_back({id, p.tag, p.code, p.severity, p.state, p.timestamp});
    }
  }

  void build_labs(ScenarioPlan& plan) {
    for (const auto& rule : c_.lab_plan) {
      const auto model = std::find_if(c_.quality_model.begin(), c_.quality_model.end(),
                                      [&](const QualityModel& q) { return q.parameter == rule.parameter; });
      Rng rng(derive_seed(c_.seed, "lab:" + rule.parameter));
      std::map<Millis, int> per_day;
      for (const auto& reel : plan.reels) {
        bool take = false;
        switch (rule.rule) {
          case LabRuleKind::every_reel: take = true; break;
          case LabRuleKind::every_nth: take = reel.reel_id % rule.n == 0; break;
          case LabRuleKind::on_demand: take = rng.bernoulli(rule.on_demand_probability); break;
        }
        const Millis delay = rng.uniform_int(seconds_to_millis(rule.delay_min_s), seconds_to_millis(rule.delay_max_s));
        if (!take) continue;
        int& count = per_day[reel.start / kMillisPerDay];
        if (rule.daily_cap > 0 && count >= rule.daily_cap) continue;
        const Millis measured = reel.end + delay;
        if (measured > end_) continue;
        ++count;
        const double value = plan.truth.quality.at(rule.parameter)[static_cast<std::size_t>(reel.reel_id - 1)];
        plan.labs.push_back({reel.reel_id, rule.parameter, value, model->spec_low, model->spec_high, measured});
      }
    }
    std::stable_sort(plan.labs.begin(), plan.labs.end(), [](const LabMeasurement& x, const LabMeasurement& y) {
      if (x.measured_at != y.measured_at) return x.measured_at < y.measured_at;
      if (x.parameter != y.parameter) return x.parameter < y.parameter;
      return x.reel_id < y.reel_id;
    });
  }

  void build_sorting(ScenarioPlan& plan) {
    static constexpr std::array<std::string_view, 4> kGrades{"1.02", "1.04", "1.05", "1.11"};
    static constexpr std::array<std::string_view, 4> kFractions{"board", "corrugated", "mixed", "newsprint"};
    Rng rng(derive_seed(c_.seed, "sorting"));
    const Millis interval = seconds_to_millis(c_.sorting.delivery_interval_s);
    int n = 0;
    for (Millis delivered = 0; delivered < end_; delivered += interval) {
      ++n;
      const Millis delay = rng.uniform_int(static_cast<Millis>(std::llround(c_.sorting.delay_min_h * 3.6e6)),
                                           static_cast<Millis>(std::llround(c_.sorting.delay_max_h * 3.6e6)));
      SortingBatch b;
      std::ostringstream id;
      id << "D" << std::setw(5) << std::setfill('0') << n;
      b.delivery_id = id.str();
      b.en643_grade = std::string(kGrades[static_cast<std::size_t>(rng.uniform_int(0, 3))]);
      std::array<double, 4> w{};
      double sum = 0.0;
      for (auto& x : w) sum += (x = rng.uniform(0.1, 1.0));
      for (std::size_t k = 0; k < w.size(); ++k) b.composition.emplace_back(std::string(kFractions[k]), w[k] / sum);
      b.delivered_at = delivered;
      b.sorted_at = delivered + delay;
      if (b.sorted_at > end_) continue;
      plan.sorting.push_back(std::move(b));
    }
    std::stable_sort(plan.sorting.begin(), plan.sorting.end(),
                     [](const SortingBatch& x, const SortingBatch& y) { return x.sorted_at < y.sorted_at; });
  }

  const ScenarioConfig& c_;
  Millis end_;
  Millis reel_ms_ = 1;
  Millis reel_count_ = 0;
  std::vector<Window> windows_;
  std::vector<std::array<double, kLatentCount>> base_;
  std::array<double, kLatentCount> means_{};
  std::vector<PendingAlarm> pending_;
  std::size_t next_gen_ = 0;
  std::int64_t causal_ = 0;
  std::int64_t nuisance_ = 0;
  std::int64_t threshold_raised_ = 0;
};

}  // namespace

ScenarioPlan build_scenario(const ScenarioConfig& config) {
  validate(config);
  return PlanBuilder(config).build();
}

std::map<std::string, double> true_quality(const ScenarioPlan& plan, std::int64_t reel_id) {
  if (reel_id < 1 || reel_id > static_cast<std::int64_t>(plan.reels.size()))
    throw Error(ErrorCode::not_found, "unknown reel " + std::to_string(reel_id));
  std::map<std::string, double> out;
  for (const auto& [param, values] : plan.truth.quality) out[param] = values[static_cast<std::size_t>(reel_id - 1)];
  return out;
}

// ---------------------------------------------------------------------------
// Emission

Emitter::Emitter(const ScenarioPlan& plan) : plan_(&plan), sensor_pos_(plan.sensor_samples.size(), 0) {}

bool Emitter::exhausted() const {
  for (std::size_t i = 0; i < sensor_pos_.size(); ++i)
    if (sensor_pos_[i] < plan_->sensor_samples[i].size()) return false;
  return alarm_pos_ == plan_->alarms.size() && lab_pos_ == plan_->labs.size() && reel_pos_ == plan_->reels.size() &&
         sorting_pos_ == plan_->sorting.size();
}

EmissionBatch Emitter::step(Millis until) {
  if (last_until_ && until < *last_until_)
    throw Error(ErrorCode::ordering, "step(" + std::to_string(until) + ") precedes previous step(" +
                                         std::to_string(*last_until_) + ")");
  last_until_ = until;

  // Stream heads: kind index, tag, timestamp. Ties resolve by (kind, tag);
  // records within one stream keep their plan order.
  struct Head {
    Millis t;
    RecordKind kind;
    const std::string* tag;
    int stream;  // -1 alarm, -2 lab, -3 reel, -4 sorting, >= 0 sensor index
  };
  const auto& p = *plan_;
  std::string reel_tag;
  EmissionBatch out;
  for (;;) {
    std::optional<Head> best;
    auto consider = [&](const Head& h) {
      if (h.t > until) return;
      if (!best || h.t < best->t || (h.t == best->t && (h.kind < best->kind || (h.kind == best->kind && *h.tag < *best->tag))))
        best = h;
    };
    if (alarm_pos_ < p.alarms.size())
      consider({p.alarms[alarm_pos_].timestamp, RecordKind::alarm, &p.alarms[alarm_pos_].tag, -1});
    if (lab_pos_ < p.labs.size())
      consider({p.labs[lab_pos_].measured_at, RecordKind::lab, &p.labs[lab_pos_].parameter, -2});
    if (reel_pos_ < p.reels.size()) {
      reel_tag = std::to_string(p.reels[reel_pos_].reel_id);
      consider({p.reels[reel_pos_].end, RecordKind::reel, &reel_tag, -3});
    }
    for (std::size_t i = 0; i < sensor_pos_.size(); ++i)
      if (sensor_pos_[i] < p.sensor_samples[i].size())
        consider({p.sensor_samples[i][sensor_pos_[i]].timestamp, RecordKind::sensor, &p.config.sensors[i].tag,
                  static_cast<int>(i)});
    if (sorting_pos_ < p.sorting.size())
      consider({p.sorting[sorting_pos_].sorted_at, RecordKind::sorting, &p.sorting[sorting_pos_].delivery_id, -4});
    if (!best) break;

    switch (best->stream) {
      case -1: out.emplace_back(p.alarms[alarm_pos_++]); break;
      case -2: out.emplace_back(p.labs[lab_pos_++]); break;
      case -3: out.emplace_back(p.reels[reel_pos_++]); break;
      case -4: out.emplace_back(p.sorting[sorting_pos_++]); break;
      default: {
        const auto i = static_cast<std::size_t>(best->stream);
        const auto& s = p.sensor_samples[i][sensor_pos_[i]++];
        out.emplace_back(SensorReading{p.config.sensors[i].tag, s.timestamp, s.value, p.config.sensors[i].unit, s.quality});
      }
    }
  }
  return out;
}

EmissionBatch emit_all(const ScenarioPlan& plan) {
  Emitter e(plan);
  return e.step(plan.end());
}

}  // namespace millassist::sim
