#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>

#include "millassist/datastore.hpp"
#include "millassist/forecast.hpp"
#include "millassist/plant_sim.hpp"
#include "oracles.hpp"

using namespace millassist;
using namespace millassist::forecast;
using testing::brute_force_arrival;
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

/// y = 10 + x0, plus `noise_features` irrelevant uniform columns.
Dataset linear_dataset(std::size_t n, std::uint64_t seed, int noise_features = 0, double missing_rate = 0.0) {
  Dataset d;
  d.parameter = "linear";
  d.spec_low = 12.0;
  d.spec_high = 28.0;
  d.names.push_back("x0");
  for (int k = 0; k < noise_features; ++k) d.names.push_back("noise" + std::to_string(k));
  for (const auto& name : d.names) d.spec.push_back({name, store::Aggregation::mean, std::nullopt});
  d.names.clear();
  for (const auto& def : d.spec) d.names.push_back(store::feature_name(def));
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Row row;
    const double x = rng.uniform(0.0, 20.0);
    row.push_back(rng.bernoulli(missing_rate) ? std::nullopt : std::optional<double>(x));
    for (int k = 0; k < noise_features; ++k) row.push_back(rng.uniform(0.0, 1.0));
    d.rows.push_back(std::move(row));
    d.targets.push_back(10.0 + x);
    d.reel_ids.push_back(static_cast<std::int64_t>(i + 1));
  }
  return d;
}

store::FeatureVector features_of(const Dataset& d, std::size_t i) { return {d.names, d.rows[i]}; }

}  // namespace

TEST_CASE("classify uses a closed in-spec interval", "[forecast]") {
  CHECK(classify(35.0, 30.0, 40.0) == QualityClass::in_specification);
  CHECK(classify(30.0, 30.0, 40.0) == QualityClass::in_specification);
  CHECK(classify(40.0, 30.0, 40.0) == QualityClass::in_specification);
  CHECK(classify(29.9, 30.0, 40.0) == QualityClass::low);
  CHECK(classify(40.1, 30.0, 40.0) == QualityClass::high);
  CHECK(classify(30.0, 30.0, 40.0, 1.0) == QualityClass::in_specification);
  CHECK(code_of([] { classify(35.0, 40.0, 30.0); }) == ErrorCode::validation);
  CHECK(code_of([] { classify(35.0, 30.0, 40.0, -1.0); }) == ErrorCode::validation);

  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double e = rng.uniform(-100.0, 100.0);
    const auto c = classify(e, -10.0, 10.0);
    const int labels = (c == QualityClass::low) + (c == QualityClass::in_specification) + (c == QualityClass::high);
    REQUIRE(labels == 1);
    REQUIRE((c == QualityClass::low) == (e < -10.0));
    REQUIRE((c == QualityClass::high) == (e > 10.0));
  }
}

TEST_CASE("training rejects small or degenerate datasets", "[forecast]") {
  CHECK(code_of([] { train(linear_dataset(49, 1)); }) == ErrorCode::training);
  auto constant = linear_dataset(80, 1);
  std::fill(constant.targets.begin(), constant.targets.end(), 7.5);
  CHECK(code_of([&] { train(constant); }) == ErrorCode::training);

  Hyperparams h;
  h.allow_degenerate_target = true;
  h.tree_count = 20;
  const auto fit = train(constant, h);
  for (std::size_t i = 0; i < constant.size(); ++i) CHECK(predict(fit.model, features_of(constant, i)).point == 7.5);
}

TEST_CASE("linear target is learned with low out-of-bag error", "[forecast]") {
  Hyperparams h;
  h.tree_count = 200;
  h.max_depth = 20;
  h.min_leaf = 1;
  h.feature_ratio = 1.0;
  const auto fit = train(linear_dataset(500, 2), h);
  CHECK(fit.report.samples == 500);
  CHECK(fit.report.oob_covered == 500);
  CHECK(fit.report.oob_mape <= 0.05);
}

TEST_CASE("training is reproducible from data, hyperparams and seed", "[forecast]") {
  const auto data = linear_dataset(200, 3, 3);
  Hyperparams h;
  h.tree_count = 30;
  const auto a = train(data, h);
  const auto b = train(data, h);
  CHECK(to_json(a.model) == to_json(b.model));
  CHECK(a.model.model_version == b.model.model_version);
  h.seed = 2;
  CHECK(train(data, h).model.model_version != a.model.model_version);
}

TEST_CASE("prediction contract", "[forecast]") {
  const auto data = linear_dataset(120, 4, 2);
  Hyperparams h;
  h.tree_count = 1;
  const auto one = train(data, h).model;
  const auto f = predict(one, features_of(data, 0), 17);
  CHECK(f.p10 == f.point);
  CHECK(f.p90 == f.point);
  CHECK(f.reel_id == 17);
  CHECK(f.model_version == one.model_version);

  h.tree_count = 50;
  const auto many = train(data, h).model;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto g = predict(many, features_of(data, i));
    CHECK(g.p10 <= g.p90);
    CHECK(g.quality_class == classify(g.point, data.spec_low, data.spec_high));
    CHECK(predict(many, features_of(data, i)).point == g.point);
  }

  auto wrong = features_of(data, 0);
  wrong.names[1] = "other.mean";
  CHECK(code_of([&] { predict(many, wrong); }) == ErrorCode::contract);
  wrong.names.pop_back();
  wrong.values.pop_back();
  CHECK(code_of([&] { predict(many, wrong); }) == ErrorCode::contract);
}

TEST_CASE("missing values route to the majority branch", "[forecast]") {
  const auto data = linear_dataset(300, 5, 1, 0.2);
  Hyperparams h;
  h.tree_count = 40;
  const auto fit = train(data, h);
  store::FeatureVector blank{data.names, {std::nullopt, std::nullopt}};
  const auto f = predict(fit.model, blank);
  CHECK(std::isfinite(f.point));
  CHECK(f.point >= 10.0);
  CHECK(f.point <= 30.0);
}

TEST_CASE("model documents round-trip and detect tampering", "[forecast]") {
  const auto data = linear_dataset(100, 6, 2);
  Hyperparams h;
  h.tree_count = 10;
  const auto model = train(data, h).model;
  const auto path = fs::temp_directory_path() / ("millassist-model-" + model.model_version + ".json");
  save_model(model, path);
  const auto loaded = load_model(path);
  fs::remove(path);
  CHECK(loaded.model_version == model.model_version);
  CHECK(loaded.forest == model.forest);
  for (std::size_t i = 0; i < data.size(); ++i)
    CHECK(predict(loaded, features_of(data, i)).point == predict(model, features_of(data, i)).point);

  auto doc = to_json(model);
  doc["spec_high"] = 99.0;
  CHECK(code_of([&] { model_from_json(doc); }) == ErrorCode::validation);
  doc = to_json(model);
  doc["model_schema"] = 2;
  CHECK(code_of([&] { model_from_json(doc); }) == ErrorCode::validation);
  CHECK(code_of([] { load_model("/nonexistent/model.json"); }) == ErrorCode::not_found);
}

TEST_CASE("more trees do not raise out-of-bag error", "[forecast][property]") {
  std::vector<double> small, large;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto data = linear_dataset(300, 100 + seed, 4);
    Hyperparams h;
    h.seed = seed;
    h.tree_count = 10;
    small.push_back(train(data, h).report.oob_rmse);
    h.tree_count = 100;
    large.push_back(train(data, h).report.oob_rmse);
  }
  CHECK(quantile(large, 0.5) <= quantile(small, 0.5));
}

TEST_CASE("evaluation metrics", "[forecast]") {
  SECTION("perfect predictor") {
    const std::vector<double> y{20.0, 25.0, 35.0, 41.0};
    const auto r = score_predictions(y, y, 22.0, 40.0);
    CHECK(r.mape == 0.0);
    CHECK(r.within_10 == 1.0);
    CHECK(r.confusion[0][0] == 1);
    CHECK(r.confusion[1][1] == 2);
    CHECK(r.confusion[2][2] == 1);
    CHECK(r.recall[1] == 1.0);
  }
  SECTION("training-mean predictor on the linear target") {
    // y = 10 + x, x ~ U[0, 20]; predicting 20 is within 10 % iff
    // y in [20/1.1, 20/0.9], i.e. x in [8.18, 12.22]: rate 4.0404/20.
    const double expected = (20.0 / 0.9 - 20.0 / 1.1) / 20.0;
    std::vector<double> y, p;
    for (int i = 0; i <= 200000; ++i) {
      y.push_back(10.0 + 20.0 * i / 200000.0);
      p.push_back(20.0);
    }
    const auto r = score_predictions(y, p, 12.0, 28.0);
    CHECK(r.within_10 == Catch::Approx(expected).margin(1e-4));
    CHECK(r.within_10 < 0.9);
  }
  SECTION("confusion matrix counts") {
    const auto r = score_predictions({10.0, 10.0, 30.0, 50.0}, {25.0, 10.0, 50.0, 50.0}, 20.0, 40.0);
    CHECK(r.confusion[0][1] == 1);
    CHECK(r.confusion[0][0] == 1);
    CHECK(r.confusion[1][2] == 1);
    CHECK(r.confusion[2][2] == 1);
    CHECK(r.recall[0] == 0.5);
    CHECK(r.recall[1] == 0.0);
  }
  SECTION("holdout must be disjoint from training") {
    const auto data = linear_dataset(150, 7);
    const auto [tr, ho] = split_by_reel(data, 0.2, 1);
    Hyperparams h;
    h.tree_count = 20;
    const auto model = train(tr, h).model;
    const auto r = evaluate(model, ho);
    CHECK(r.samples == ho.size());
    CHECK(r.model_version == model.model_version);
    CHECK(code_of([&] { evaluate(model, tr); }) == ErrorCode::contract);

    std::ostringstream os;
    write_report(os, r);
    std::istringstream is(os.str());
    std::string line;
    std::size_t lines = 0;
    while (std::getline(is, line)) ++lines;
    CHECK(lines == 1 + ho.size());
    CHECK(os.str().find("\"kind\":\"evaluation\"") != std::string::npos);
  }
}

TEST_CASE("reel split is a seeded partition", "[forecast]") {
  const auto data = linear_dataset(500, 8);
  const auto [tr, ho] = split_by_reel(data, 0.2, 42);
  CHECK(ho.size() == 100);
  CHECK(tr.size() == 400);
  std::set<std::int64_t> a(tr.reel_ids.begin(), tr.reel_ids.end());
  for (auto id : ho.reel_ids) CHECK(a.count(id) == 0);
  CHECK(split_by_reel(data, 0.2, 42).second.reel_ids == ho.reel_ids);
  CHECK(split_by_reel(data, 0.2, 43).second.reel_ids != ho.reel_ids);
}

TEST_CASE("extreme detection uses median and MAD", "[forecast]") {
  const std::vector<std::string> names{"a", "b", "flat"};
  std::vector<Row> rows;
  for (int i = 0; i < 101; ++i) rows.push_back({double(i), 2.0 * i, 5.0});
  const auto ref = fit_reference(names, rows);
  CHECK(ref.medians[0] == 50.0);
  CHECK(ref.mads[0] == 25.0);

  const auto at_median = detect_extreme({names, {50.0, 100.0, 5.0}}, ref);
  CHECK(at_median.score == 0.0);
  CHECK_FALSE(at_median.flag);
  CHECK(at_median.excluded == std::vector<std::string>{"flat"});

  const auto far = detect_extreme({names, {50.0 + 10 * 25.0, 100.0, 9.0}}, ref);
  CHECK(far.score == Catch::Approx(10.0));
  CHECK(far.flag);
  CHECK(far.driver == "a");
  CHECK(code_of([&] { detect_extreme({{"a"}, {1.0}}, ref); }) == ErrorCode::contract);
}

TEST_CASE("change detector", "[forecast]") {
  SECTION("constant zero residuals never fire") {
    ChangeDetector d("p");
    for (int i = 0; i < 10000; ++i) REQUIRE_FALSE(d.update(0.0, i));
  }
  SECTION("large threshold stays silent on stationary noise") {
    int silent_runs = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      ChangeDetector d("p", {0.0, 1.0, 0.5, 15.0});
      Rng rng(seed);
      bool fired = false;
      for (int i = 0; i < 10000 && !fired; ++i) fired = d.update(rng.normal(), i).has_value();
      silent_runs += !fired;
    }
    CHECK(silent_runs >= 99);
  }
  SECTION("default detector false-alarm rate") {
    ChangeDetector d("p");
    Rng rng(9);
    int events = 0;
    for (int i = 0; i < 10000; ++i) events += d.update(rng.normal(), i).has_value();
    CHECK(events / 10000.0 <= 0.01);
  }
  SECTION("3 sigma shift detected within 20 samples, both directions") {
    for (double sign : {1.0, -1.0}) {
      for (std::uint64_t seed = 0; seed < 200; ++seed) {
        ChangeDetector d("p", {0.0, 2.0, 0.5, 5.0});
        Rng rng(seed + 1000);
        const int k = 100;
        for (int i = 0; i < k; ++i) d.update(rng.normal(0.0, 2.0), i);
        d.reset();
        std::optional<int> found;
        for (int i = k; i < k + 20 && !found; ++i)
          if (auto e = d.update(rng.normal(sign * 6.0, 2.0), i)) {
            found = i;
            CHECK(e->direction == (sign > 0 ? Direction::up : Direction::down));
          }
        REQUIRE(found);
      }
    }
  }
  SECTION("events reset the statistics") {
    ChangeDetector d("p");
    const auto e = [&] {
      std::optional<ChangePointEvent> out;
      for (int i = 0; !out; ++i) out = d.update(10.0, i);
      return out;
    }();
    CHECK(e->statistic > 5.0);
    CHECK(d.upper() == 0.0);
    CHECK(d.lower() == 0.0);
  }
  CHECK(code_of([] { ChangeDetector("p", {0.0, 0.0, 0.5, 5.0}); }) == ErrorCode::validation);
}

TEST_CASE("web segment tracking", "[forecast]") {
  SECTION("constant speed is x over v") {
    const auto t = track_web_segment({{0, 10.0}}, 60'000, {{"S", 100.0}, {"origin", 0.0}, {"far", 1e6}}, 5'000);
    CHECK(*t.at("S") == 15'000.0);
    CHECK(*t.at("origin") == 5'000.0);
    CHECK_FALSE(t.at("far"));
  }
  SECTION("speed doubling halfway") {
    // 10 m/s for 5 s (50 m), then 20 m/s: 100 m reached at 7.5 s.
    const std::vector<SpeedSample> v{{0, 10.0}, {5'000, 20.0}};
    const auto t = track_web_segment(v, 60'000, {{"S", 100.0}}, 0);
    CHECK(*t.at("S") == 7'500.0);
    CHECK(std::abs(*t.at("S") - static_cast<double>(*brute_force_arrival(v, 60'000, 100.0, 0))) <= 1.0);
  }
  SECTION("random piecewise profiles match the 1 ms integrator") {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<SpeedSample> v;
      Millis t = 0;
      const auto pieces = rng.uniform_int(1, 12);
      for (int i = 0; i < pieces; ++i) {
        v.push_back({t, rng.uniform(5.0, 20.0)});
        t += rng.uniform_int(200, 8'000);
      }
      const Millis horizon = t + 5'000;
      const Millis birth = rng.uniform_int(0, v.back().at);
      std::map<std::string, double> positions{{"a", rng.uniform(0.0, 50.0)}, {"b", rng.uniform(50.0, 400.0)}};
      const auto got = track_web_segment(v, horizon, positions, birth);
      for (const auto& [name, x] : positions) {
        const auto brute = brute_force_arrival(v, horizon, x, birth);
        INFO("trial " << trial << " sensor " << name);
        REQUIRE(got.at(name).has_value() == brute.has_value());
        if (brute) REQUIRE(std::abs(*got.at(name) - static_cast<double>(*brute)) <= 1.0);
      }
    }
  }
  CHECK(code_of([] { track_web_segment({{0, 0.0}}, 10, {}, 0); }) == ErrorCode::validation);
  CHECK(code_of([] { track_web_segment({{100, 1.0}}, 1000, {}, 0); }) == ErrorCode::validation);
  CHECK(code_of([] { track_web_segment({{0, 1.0}}, 1000, {{"x", -1.0}}, 0); }) == ErrorCode::validation);
}

TEST_CASE("datasets built from a simulated store", "[forecast]") {
  auto c = sim::default_config();
  c.seed = 21;
  c.duration_s = 4 * 86400.0;
  store::DataStore db;
  for (const auto& r : sim::emit_all(sim::build_scenario(c))) db.append(r);
  const auto spec = store::reel_feature_spec(db.sensor_tags());
  const auto data = build_dataset(db, "tensile_strength", spec);
  REQUIRE(data.size() >= 150);
  CHECK(data.spec_low == 28.0);
  CHECK(data.spec_high == 42.0);
  const auto [tr, ho] = split_by_reel(data, 0.2, 1);
  Hyperparams h;
  h.tree_count = 50;
  const auto fit = train(tr, h);
  const auto r = evaluate(fit.model, ho);
  CHECK(r.samples == ho.size());
  CHECK(r.within_10 >= 0.8);
}
