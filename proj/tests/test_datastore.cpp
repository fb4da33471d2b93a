#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "millassist/datastore.hpp"
#include "millassist/plant_sim.hpp"
#include "test_support.hpp"

using namespace millassist;
using namespace millassist::store;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::io;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("millassist-store-" + std::to_string(Rng(std::random_device{}()).next_u64()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

sim::ScenarioPlan small_scenario(std::uint64_t seed = 3) {
  auto c = sim::default_config();
  c.seed = seed;
  c.duration_s = 8 * 3600.0;
  c.alarms.genuine_rate_per_hour = 6.0;
  c.sorting.delivery_interval_s = 3600.0;
  c.sorting.delay_min_h = 0.5;
  c.sorting.delay_max_h = 2.0;
  c.lab_plan[0].delay_min_s = 60.0;
  c.lab_plan[0].delay_max_s = 600.0;
  return sim::build_scenario(c);
}

void load(DataStore& store, const std::vector<Record>& records) {
  for (const auto& r : records) store.append(r);
}

}  // namespace

TEST_CASE("append issues monotonically increasing sequence numbers", "[datastore]") {
  DataStore store;
  CHECK(store.append(SensorReading{"T1", 10, 1.0, "u", QualityFlag::good}) == 1);
  CHECK(store.append(SensorReading{"T1", 20, 2.0, "u", QualityFlag::good}) == 2);
  CHECK(store.size() == 2);
}

TEST_CASE("append enforces record invariants", "[datastore]") {
  DataStore store;
  store.append(SensorReading{"T1", 10, 1.0, "u", QualityFlag::good});
  CHECK(code_of([&] { store.append(SensorReading{"T1", 10, 1.0, "u", QualityFlag::good}); }) == ErrorCode::ordering);
  CHECK(code_of([&] { store.append(SensorReading{"T1", 5, 1.0, "u", QualityFlag::good}); }) == ErrorCode::ordering);
  CHECK(code_of([&] { store.append(SensorReading{"T1", 30, 1.0, "bar", QualityFlag::good}); }) == ErrorCode::validation);
  // Other tags are independent.
  CHECK_NOTHROW(store.append(SensorReading{"T2", 5, 1.0, "u", QualityFlag::good}));

  CHECK(code_of([&] { store.append(LabMeasurement{1, "tensile", 30.0, 20.0, 40.0, 5000}); }) == ErrorCode::validation);
  store.append(ReelRecord{1, 0, 1000});
  CHECK(code_of([&] { store.append(LabMeasurement{1, "tensile", 30.0, 20.0, 40.0, 999}); }) == ErrorCode::validation);
  CHECK(code_of([&] { store.append(LabMeasurement{1, "tensile", 30.0, 40.0, 40.0, 1000}); }) == ErrorCode::validation);
  CHECK_NOTHROW(store.append(LabMeasurement{1, "tensile", 30.0, 20.0, 40.0, 1000}));

  CHECK(code_of([&] { store.append(AlarmEvent{"A1", "T1", "E1", Severity::alarm, AlarmState::cleared, 5}); }) ==
        ErrorCode::validation);
  store.append(AlarmEvent{"A1", "T1", "E1", Severity::alarm, AlarmState::raised, 5});
  CHECK_NOTHROW(store.append(AlarmEvent{"A1", "T1", "E1", Severity::alarm, AlarmState::cleared, 9}));
  CHECK(code_of([&] { store.append(AlarmEvent{"A1", "T1", "E1", Severity::alarm, AlarmState::raised, 12}); }) ==
        ErrorCode::conflict);
  CHECK(store.size() == 6);
}

TEST_CASE("replaying an emission log acknowledges every record", "[datastore]") {
  const auto plan = small_scenario();
  const auto records = sim::emit_all(plan);
  DataStore store;
  std::size_t acks = 0;
  for (const auto& r : records) acks += store.append(r) > 0;
  CHECK(acks == records.size());
  CHECK(store.size() == records.size());
}

TEST_CASE("query_window uses half-open windows", "[datastore]") {
  DataStore store;
  CHECK(store.query_window({}, 0, 1000).empty());
  store.append(SensorReading{"T", 100, 1.0, "u", QualityFlag::good});
  CHECK(store.query_window({}, 100, 100).empty());
  CHECK(store.query_window({}, 100, 101).size() == 1);
  CHECK(store.query_window({}, 0, 100).empty());
  CHECK(code_of([&] { (void)store.query_window({}, 5, 4); }) == ErrorCode::range);
}

TEST_CASE("query_window equals a linear scan of the emission log", "[datastore]") {
  const auto plan = small_scenario();
  const auto records = sim::emit_all(plan);
  DataStore store;
  load(store, records);

  auto scan = [&](const Selector& sel, Millis t0, Millis t1) {
    std::vector<Record> out;
    for (const auto& r : records) {
      const Millis t = timestamp_of(r);
      if (t < t0 || t >= t1) continue;
      if (sel.kind && kind_of(r) != *sel.kind) continue;
      if (sel.tag && tag_of(r) != *sel.tag) continue;
      out.push_back(r);
    }
    return out;
  };

  Rng rng(99);
  const std::vector<std::string> selectors{"", "kind:alarm", "kind:sensor", "kind:lab", "kind:reel",
                                           "kind:sorting", "STOCK.ASH", "DRYER.STEAM", "tensile_strength"};
  for (int trial = 0; trial < 40; ++trial) {
    const Millis a = rng.uniform_int(0, plan.end());
    const Millis b = rng.uniform_int(a, std::min(plan.end() + 1, a + 3 * 3600 * 1000));
    for (const auto& text : selectors) {
      const auto sel = Selector::parse(text);
      INFO("selector '" << text << "' window [" << a << ", " << b << ")");
      REQUIRE(store.query_window(sel, a, b) == scan(sel, a, b));
    }
  }
}

TEST_CASE("records round-trip bit-exactly through the store", "[datastore][property]") {
  Rng rng(4242);
  DataStore store;
  Millis t = 0;
  for (int i = 0; i < 500; ++i) {
    t += rng.uniform_int(1, 1000);
    const double v = std::ldexp(rng.uniform(-1.0, 1.0), static_cast<int>(rng.uniform_int(-30, 30)));
    const SensorReading r{"T" + std::to_string(i % 7), t, v, "u", rng.bernoulli(0.1) ? QualityFlag::suspect : QualityFlag::good};
    store.append(r);
    const auto back = store.query_window(Selector::parse(r.tag), r.timestamp, r.timestamp + 1);
    REQUIRE(back.size() == 1);
    REQUIRE(std::get<SensorReading>(back[0]) == r);
    // Through the line format as well.
    REQUIRE(std::get<SensorReading>(parse_line(to_line(r))) == r);
  }
}

TEST_CASE("align_features aggregates raw in-window samples", "[datastore]") {
  DataStore store;
  for (Millis t = 0; t < 1000 * 1000; t += 10'000) store.append(SensorReading{"CONST", t, 4.25, "u", QualityFlag::good});
  store.append(SensorReading{"SPARSE", 5000, 1.0, "u", QualityFlag::good});
  store.append(ReelRecord{1, 0, 500 * 1000});
  store.append(ReelRecord{2, 500 * 1000, 1000 * 1000});

  const FeatureSpec spec{{"CONST", Aggregation::mean, std::nullopt},
                         {"CONST", Aggregation::stddev, std::nullopt},
                         {"SPARSE", Aggregation::last, std::nullopt},
                         {"CONST", Aggregation::max, 60.0}};
  const auto r1 = store.align_features(1, spec);
  CHECK(r1.values[0] == 4.25);
  CHECK(r1.values[1] == 0.0);
  CHECK(r1.values[2] == 1.0);
  CHECK(r1.values[3] == 4.25);
  const auto r2 = store.align_features(2, spec);
  CHECK(r2.values[2] == std::nullopt);  // no SPARSE sample in reel 2: missing, not zero
  CHECK(r2.missing_count() == 1);

  CHECK_THROWS_WITH(store.align_features(1, {{"NOPE", Aggregation::mean, std::nullopt}}),
                    Catch::Matchers::ContainsSubstring("NOPE"));
  CHECK(code_of([&] { (void)store.align_features(9, spec); }) == ErrorCode::not_found);
  CHECK(code_of([&] { (void)store.align_at(100, {{"CONST", Aggregation::mean, std::nullopt}}); }) == ErrorCode::contract);
}

TEST_CASE("reel-span mean equals an independent scan of the raw records", "[datastore][property]") {
  const auto plan = small_scenario(11);
  const auto records = sim::emit_all(plan);
  DataStore store;
  load(store, records);
  const auto tags = store.sensor_tags();
  const auto spec = reel_feature_spec(tags);

  for (const auto& reel : plan.reels) {
    const auto fv = store.align_features(reel.reel_id, spec);
    CHECK(fv == store.align_features(reel.reel_id, spec));  // pure function of store contents
    for (std::size_t k = 0; k < tags.size(); ++k) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& r : records) {
        const auto* s = std::get_if<SensorReading>(&r);
        if (s && s->tag == tags[k] && s->timestamp >= reel.start && s->timestamp < reel.end) {
          sum += s->value;
          ++n;
        }
      }
      REQUIRE(n > 0);
      const double oracle = sum / static_cast<double>(n);
      REQUIRE(fv.values[k].has_value());
      CHECK(std::abs(*fv.values[k] - oracle) <= 1e-9 * std::abs(oracle));
    }
  }
}

TEST_CASE("sorting batches associate with their consumption window", "[datastore]") {
  StoreConfig cfg;
  cfg.consumption_lag_s = 3600.0;
  cfg.consumption_span_s = 4 * 3600.0;
  DataStore store(cfg);
  constexpr Millis hour = 3600 * 1000;
  for (std::int64_t r = 1; r <= 60; ++r) store.append(ReelRecord{r, (r - 1) * hour, r * hour});

  SortingBatch b{"D1", "1.04", {{"board", 0.25}, {"mixed", 0.75}}, 0, 24 * hour};
  const auto assoc = store.attach_sorting_batch("D1", b);
  // Window = sorted_at + 1 h for 4 h = [25 h, 29 h) -> reels 26..29.
  CHECK(assoc.window_begin == 25 * hour);
  CHECK(assoc.window_end == 29 * hour);
  CHECK(assoc.reel_ids == std::vector<std::int64_t>{26, 27, 28, 29});
  CHECK(assoc.estimated);
  CHECK(store.sorting_for_reel(27).size() == 1);
  CHECK(store.sorting_for_reel(30).empty());

  const FeatureSpec spec{{"sorting:mixed", Aggregation::mean, std::nullopt}};
  CHECK(store.align_features(27, spec).values[0] == 0.75);
  CHECK(store.align_features(3, spec).values[0] == std::nullopt);

  CHECK(code_of([&] { store.attach_sorting_batch("D1", b); }) == ErrorCode::conflict);
  SortingBatch short_batch{"D2", "1.04", {{"board", 0.4}, {"mixed", 0.5}}, 0, hour};
  CHECK(code_of([&] { store.attach_sorting_batch("D2", short_batch); }) == ErrorCode::validation);
  SortingBatch early{"D3", "1.04", {{"board", 1.0}}, 5 * hour, 4 * hour};
  CHECK(code_of([&] { store.attach_sorting_batch("D3", early); }) == ErrorCode::validation);
}

TEST_CASE("persistent store rebuilds its index from segment files", "[datastore]") {
  TempDir dir;
  const auto records = sim::emit_all(small_scenario(5));
  StoreConfig cfg;
  cfg.data_dir = dir.path;
  cfg.segment_records = 1000;
  std::vector<Record> all;
  {
    DataStore store(cfg);
    load(store, records);
    all = store.query_window({}, 0, INT64_MAX);
  }
  std::size_t segments = 0;
  for (const auto& e : fs::directory_iterator(dir.path)) segments += e.path().extension() == ".log";
  CHECK(segments == (records.size() + 999) / 1000);

  {
    DataStore reopened(cfg);
    CHECK(reopened.size() == records.size());
    CHECK(reopened.query_window({}, 0, INT64_MAX) == all);
    // Appends continue the sequence.
    CHECK(reopened.append(SensorReading{"NEW", 1, 0.0, "u", QualityFlag::good}) == records.size() + 1);
  }

  // Simulate a torn trailing write.
  fs::path last;
  for (const auto& e : fs::directory_iterator(dir.path)) last = std::max(last, e.path());
  {
    std::ofstream out(last, std::ios::app);
    out << R"({"kind":"sensor","tag":"NEW","timest)";
  }
  DataStore recovered(cfg);
  CHECK(recovered.size() == records.size() + 1);
  CHECK_NOTHROW(recovered.append(SensorReading{"NEW", 2, 0.0, "u", QualityFlag::good}));
  DataStore again(cfg);
  CHECK(again.size() == records.size() + 2);
}

TEST_CASE("export writes the window in emission-log format", "[datastore]") {
  const auto records = sim::emit_all(small_scenario(2));
  DataStore store;
  load(store, records);
  std::ostringstream os;
  store.export_window(os, 0, INT64_MAX);
  std::istringstream in(os.str());
  CHECK(read_log(in) == records);
}
