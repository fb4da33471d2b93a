#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <set>

#include "millassist/plant_sim.hpp"
#include "test_support.hpp"

using namespace millassist;
using namespace millassist::sim;
using millassist::testing::bare_config;
using millassist::testing::plain_sensor;

namespace {

QualityModel linear_model(std::string parameter, std::map<LatentVar, double> coefs) {
  QualityModel q;
  q.parameter = std::move(parameter);
  q.intercept = 35.0;
  q.linear = std::move(coefs);
  q.noise_sd = 0.0;
  q.spec_low = 20.0;
  q.spec_high = 50.0;
  return q;
}

/// Latent variables with zero spread: every reel sits exactly at the mean.
std::vector<LatentSpec> frozen_latent() {
  return {{LatentVar::ash, 15.0, 0.0, 0.5}, {LatentVar::moisture, 7.5, 0.0, 0.5}, {LatentVar::steam, 4.0, 0.0, 0.5}};
}

}  // namespace

TEST_CASE("sensor sample count follows the 5-15 s interval bounds", "[plant-sim]") {
  auto c = bare_config(3600.0);
  c.seed = 1;
  c.sensors = {plain_sensor("S1")};
  const auto plan = build_scenario(c);
  const auto n = plan.sensor_samples[0].size();
  CHECK(n >= 240);
  CHECK(n <= 720);
}

TEST_CASE("zero duration yields an empty plan", "[plant-sim]") {
  auto c = default_config();
  c.duration_s = 0.0;
  const auto plan = build_scenario(c);
  CHECK(plan.record_count() == 0);
  CHECK(plan.truth == GroundTruth{});
  CHECK(emit_all(plan).empty());
}

TEST_CASE("same config builds byte-identical plans", "[plant-sim]") {
  auto c = default_config();
  c.duration_s = 6 * 3600.0;
  c.fault_plan.push_back({FaultKind::dryer_steam_drop, 3600.0, 1800.0, 0.8, "DRYER.STEAM", 2.0, "CHATTER",
                          {{"E201", 0.0, Severity::alarm}, {"E202", 10.0, Severity::warning}}});
  const auto a = build_scenario(c);
  const auto b = build_scenario(c);
  CHECK(millassist::testing::log_text(a) == millassist::testing::log_text(b));
  CHECK(to_json(a.truth).dump() == to_json(b.truth).dump());

  c.seed += 1;
  CHECK(millassist::testing::log_text(build_scenario(c)) != millassist::testing::log_text(a));
}

TEST_CASE("stepping emits everything once, in order", "[plant-sim]") {
  auto c = default_config();
  c.duration_s = 4 * 3600.0;
  const auto plan = build_scenario(c);
  Emitter emitter(plan);

  const auto first = emitter.step(3600 * 1000);
  const auto rest = emitter.step(plan.end());
  CHECK(first.size() + rest.size() == plan.record_count());
  CHECK(emitter.exhausted());
  CHECK(emitter.step(plan.end()).empty());
  CHECK_THROWS_MATCHES(emitter.step(0), Error, Catch::Matchers::Predicate<Error>([](const Error& e) {
                         return e.code() == ErrorCode::ordering;
                       }));

  std::vector<Record> all = first;
  all.insert(all.end(), rest.begin(), rest.end());
  for (std::size_t i = 1; i < all.size(); ++i) {
    INFO("record " << i);
    REQUIRE_FALSE(emission_less(all[i], all[i - 1]));
  }
  for (const auto& r : first) CHECK(timestamp_of(r) <= 3600 * 1000);
}

TEST_CASE("lab plan honours every-reel rule and the daily cap", "[plant-sim]") {
  auto c = bare_config(86400.0);
  c.reel_duration_s = 1440.0;  // 60 reels per day
  c.latent = frozen_latent();
  c.quality_model = {linear_model("tensile_strength", {{LatentVar::ash, -1.5}})};
  LabRule rule;
  rule.parameter = "tensile_strength";
  rule.delay_min_s = rule.delay_max_s = 0.0;

  rule.daily_cap = 0;
  c.lab_plan = {rule};
  CHECK(build_scenario(c).labs.size() == 60);

  rule.daily_cap = 50;
  c.lab_plan = {rule};
  const auto capped = build_scenario(c);
  CHECK(capped.labs.size() == 50);
  for (const auto& lab : capped.labs) CHECK(lab.measured_at >= capped.reels[static_cast<std::size_t>(lab.reel_id - 1)].end);

  rule.rule = LabRuleKind::every_nth;
  rule.n = 4;
  rule.daily_cap = 0;
  c.lab_plan = {rule};
  CHECK(build_scenario(c).labs.size() == 15);
}

TEST_CASE("chattering sensor fault raises one nuisance alarm per period", "[plant-sim]") {
  auto c = bare_config(600.0);
  c.sensors = {plain_sensor("VAC.PRESSURE")};
  FaultInjection f;
  f.kind = FaultKind::chattering_sensor;
  f.start_s = 100.0;
  f.duration_s = 60.0;
  f.period_s = 2.0;
  f.magnitude = 1.0;
  f.tag = "VAC.PRESSURE";
  f.chatter_code = "VAC_CHATTER";
  c.fault_plan = {f};
  const auto plan = build_scenario(c);

  REQUIRE(plan.alarms.size() == 30);
  std::set<std::string> codes;
  for (const auto& a : plan.alarms) {
    codes.insert(a.error_code);
    CHECK(plan.truth.alarm_labels.at(a.alarm_id) == AlarmLabel::nuisance);
  }
  CHECK(codes == std::set<std::string>{"VAC_CHATTER"});

  // Readings inside the chatter window are flagged suspect.
  for (const auto& s : plan.sensor_samples[0]) {
    const bool inside = s.timestamp >= 100'000 && s.timestamp < 160'000;
    CHECK((s.quality == QualityFlag::suspect) == inside);
  }
}

TEST_CASE("true quality is a deterministic function of latent state", "[plant-sim]") {
  auto c = bare_config(20 * 1800.0);
  c.latent = frozen_latent();
  c.quality_model = {linear_model("tensile_strength", {{LatentVar::ash, -1.5}, {LatentVar::moisture, -1.0}})};

  SECTION("constant inputs, zero noise: every reel identical") {
    const auto plan = build_scenario(c);
    for (std::int64_t r = 1; r <= 20; ++r) CHECK(true_quality(plan, r).at("tensile_strength") == 35.0);
  }

  SECTION("stock quality shift of magnitude m shifts later reels by coefficient * m") {
    // Fault starts at the boundary of reel 6; ash coefficient -1.5, m = 4 -> 35 - 6 = 29.
    c.fault_plan = {{FaultKind::stock_quality_shift, 5 * 1800.0, 0.0, 4.0, "", 2.0, "CHATTER", {}}};
    const auto plan = build_scenario(c);
    for (std::int64_t r = 1; r <= 5; ++r) CHECK(true_quality(plan, r).at("tensile_strength") == 35.0);
    for (std::int64_t r = 6; r <= 20; ++r) CHECK(true_quality(plan, r).at("tensile_strength") == Catch::Approx(29.0));
  }

  SECTION("dryer steam drop lowers the moisture-linked parameter") {
    // Steam drop of 2 bar raises moisture by 0.8 * 2 = 1.6; coefficient -1 -> 33.4.
    c.fault_plan = {{FaultKind::dryer_steam_drop, 2 * 1800.0, 1800.0, 2.0, "", 2.0, "CHATTER", {}}};
    const auto plan = build_scenario(c);
    CHECK(true_quality(plan, 3).at("tensile_strength") == Catch::Approx(33.4));
    CHECK(true_quality(plan, 2).at("tensile_strength") == 35.0);
    CHECK(true_quality(plan, 4).at("tensile_strength") == 35.0);
    CHECK(plan.truth.reel_faults[2] == std::vector<FaultKind>{FaultKind::dryer_steam_drop});
  }

  SECTION("unknown reel") {
    const auto plan = build_scenario(c);
    CHECK_THROWS_AS(true_quality(plan, 21), Error);
    CHECK_THROWS_AS(true_quality(plan, 0), Error);
  }
}

TEST_CASE("sensor gaps stay within configured bounds", "[plant-sim][property]") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto c = bare_config(7200.0);
    c.seed = seed;
    Rng rng(seed);
    const double lo = rng.uniform(1.0, 30.0);
    const double hi = lo + rng.uniform(0.0, 60.0);
    c.sensors = {plain_sensor("A", lo, hi), plain_sensor("B")};
    const auto plan = build_scenario(c);
    const auto lo_ms = seconds_to_millis(lo);
    const auto hi_ms = seconds_to_millis(hi);
    const auto& samples = plan.sensor_samples[0];
    for (std::size_t i = 1; i < samples.size(); ++i) {
      const auto gap = samples[i].timestamp - samples[i - 1].timestamp;
      REQUIRE(gap >= lo_ms);
      REQUIRE(gap <= hi_ms);
    }
  }
}

TEST_CASE("nuisance share of alarms matches the configured fraction", "[plant-sim][property]") {
  for (const double fraction : {0.2, 0.5, 0.8}) {
    auto c = default_config();
    c.duration_s = 20 * 86400.0;
    c.alarms.nuisance_alarm_fraction = fraction;
    c.alarms.genuine_rate_per_hour = 3.0;
    for (int k = 0; k < 10; ++k)
      c.fault_plan.push_back({FaultKind::web_break_precursor, 86400.0 * (k + 1), 600.0, 0.2, "PRESS.TENSION", 2.0,
                              "CHATTER", {{"E101", 0, Severity::alarm}, {"E102", 5, Severity::alarm}}});
    const auto plan = build_scenario(c);
    std::size_t nuisance = 0;
    for (const auto& [id, label] : plan.truth.alarm_labels) nuisance += label == AlarmLabel::nuisance;
    const auto total = plan.truth.alarm_labels.size();
    INFO("fraction " << fraction << " total " << total);
    REQUIRE(total >= 1000);
    CHECK(std::abs(static_cast<double>(nuisance) / static_cast<double>(total) - fraction) <= 0.05);
  }
}

TEST_CASE("every raised alarm has exactly one ground-truth label; clears reference raises", "[plant-sim]") {
  auto c = default_config();
  c.duration_s = 2 * 86400.0;
  c.fault_plan = {{FaultKind::dryer_steam_drop, 20000.0, 3600.0, 1.2, "DRYER.STEAM", 2.0, "CHATTER",
                   {{"E201", 0, Severity::alarm}}}};
  const auto plan = build_scenario(c);
  std::set<std::string> raised;
  for (const auto& a : plan.alarms) {
    if (a.state == AlarmState::raised) {
      CHECK(raised.insert(a.alarm_id).second);
      CHECK(plan.truth.alarm_labels.count(a.alarm_id) == 1);
    } else {
      CHECK(raised.count(a.alarm_id) == 1);
    }
  }
  CHECK(raised.size() == plan.truth.alarm_labels.size());
  // The steam drop of 1.2 bar pushes DRYER.STEAM through its 3.3 bar limit.
  CHECK(std::any_of(plan.alarms.begin(), plan.alarms.end(),
                    [](const AlarmEvent& a) { return a.error_code == "STEAM_LOW"; }));
}

TEST_CASE("scenario config round-trips through its document form", "[plant-sim]") {
  auto c = default_config();
  c.duration_s = 3 * 3600.0;
  c.fault_plan = {{FaultKind::stock_quality_shift, 1800.0, 0.0, 3.0, "STOCK.ASH", 2.0, "CHATTER",
                   {{"E301", 0, Severity::warning}, {"E302", 12.5, Severity::alarm}}}};
  const auto doc = to_json(c);
  const auto back = config_from_json(nlohmann::json::parse(doc.dump()));
  const auto a = build_scenario(c);
  const auto b = build_scenario(back);
  CHECK(a.truth == b.truth);
  CHECK(millassist::testing::log_text(a) == millassist::testing::log_text(b));
}

TEST_CASE("invalid configs are rejected naming the field", "[plant-sim]") {
  auto expect_field = [](const ScenarioConfig& c, const std::string& field) {
    try {
      validate(c);
      FAIL("expected validation error for " << field);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::validation);
      CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring(field));
    }
  };
  auto c = bare_config(100.0);
  c.sensors = {plain_sensor("S", 20.0, 10.0)};
  expect_field(c, "sensors[0].interval_s");
  c.sensors = {plain_sensor("S", 0.5, 10.0)};
  expect_field(c, "sensors[0].interval_s");
  c.sensors = {plain_sensor("S", 10.0, 4000.0)};
  expect_field(c, "sensors[0].interval_s");

  c = bare_config(100.0);
  c.alarms.nuisance_alarm_fraction = 1.5;
  expect_field(c, "alarms.nuisance_alarm_fraction");

  c = bare_config(100.0);
  c.fault_plan = {{FaultKind::web_break_precursor, 0, 0, 1, "", 2, "C", {{"A", 5, Severity::alarm}, {"B", 5, Severity::alarm}}}};
  expect_field(c, "fault_plan[0].cascade[1].offset_s");

  nlohmann::json doc = to_json(default_config());
  doc["scenario_schema"] = 2;
  CHECK_THROWS_AS(config_from_json(doc), Error);
  doc["scenario_schema"] = 1;
  doc["bogus"] = 1;
  CHECK_THROWS_WITH(config_from_json(doc), Catch::Matchers::ContainsSubstring("bogus"));
}
