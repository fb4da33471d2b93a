// Command-line front end: scenario generation, replay, training, evaluation,
// pattern mining, the HTTP service and store export.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "millassist/alarm_filter.hpp"
#include "millassist/api.hpp"
#include "millassist/assist.hpp"
#include "millassist/datastore.hpp"
#include "millassist/forecast.hpp"
#include "millassist/http_server.hpp"
#include "millassist/knowledge_base.hpp"
#include "millassist/pipeline.hpp"
#include "millassist/plant_sim.hpp"

using namespace millassist;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::validation, path + ": " + e.what());
  }
}

std::vector<Record> read_log_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot read " + path);
  return read_log(in);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path);
  return out;
}

/// Store filled from a log and/or a persisted data directory.
std::unique_ptr<store::DataStore> open_store(const std::string& log, const std::string& data_dir) {
  if (log.empty() && data_dir.empty()) throw Error(ErrorCode::validation, "no data: pass --log or --data-dir");
  store::StoreConfig cfg;
  if (!data_dir.empty()) {
    if (!fs::exists(data_dir) && log.empty()) throw Error(ErrorCode::not_found, "data directory " + data_dir + " does not exist");
    cfg.data_dir = data_dir;
  }
  auto s = std::make_unique<store::DataStore>(cfg);
  if (!log.empty())
    for (const auto& r : read_log_file(log)) s->append(r);
  return s;
}

sim::ScenarioConfig scenario_config(const std::string& path, std::optional<std::uint64_t> seed, std::optional<double> days) {
  auto c = path.empty() ? sim::default_config() : sim::config_from_json(read_json_file(path));
  if (seed) c.seed = *seed;
  if (days) c.duration_s = *days * 86400.0;
  sim::validate(c);
  return c;
}

std::vector<alarms::AlarmPattern> read_patterns_file(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot read " + path);
  return alarms::read_patterns(in);
}

void print(bool jsonl, const json& record, const std::string& text) {
  if (jsonl) std::cout << record.dump() << '\n';
  else std::cout << text << '\n';
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

// --- commands ---------------------------------------------------------------------

struct SimArgs {
  std::string config, out, truth;
  std::optional<std::uint64_t> seed;
  std::optional<double> days;
};

int run_sim(const SimArgs& a, bool jsonl) {
  const auto config = scenario_config(a.config, a.seed, a.days);
  const auto plan = sim::build_scenario(config);
  const auto records = sim::emit_all(plan);
  if (a.out.empty() || a.out == "-") {
    write_log(std::cout, records);
  } else {
    auto out = open_out(a.out);
    write_log(out, records);
  }
  if (!a.truth.empty()) open_out(a.truth) << sim::to_json(plan.truth).dump() << '\n';
  if (!a.out.empty() && a.out != "-")
    print(jsonl,
          json{{"type", "sim"}, {"records", records.size()}, {"reels", plan.reels.size()}, {"alarms", plan.alarms.size()},
               {"labs", plan.labs.size()}, {"out", a.out}},
          "wrote " + std::to_string(records.size()) + " records (" + std::to_string(plan.reels.size()) + " reels) to " +
              a.out);
  return 0;
}

struct ReplayArgs {
  std::string log, data_dir, patterns, kb_dir, classifier;
  std::vector<std::string> models;
  double chatter_window_s = 60.0;
};

int run_replay(const ReplayArgs& a, bool jsonl) {
  store::StoreConfig cfg;
  if (!a.data_dir.empty()) cfg.data_dir = a.data_dir;
  store::DataStore store(cfg);
  kb::KnowledgeBase base;
  if (!a.kb_dir.empty()) base.load(a.kb_dir);
  assist::AssistEngine engine(base);
  if (!a.classifier.empty()) engine.set_classifier(assist::SituationClassifier::from_json(read_json_file(a.classifier)));
  assist::PipelineConfig pc;
  pc.chatter_window_s = a.chatter_window_s;
  pc.patterns = read_patterns_file(a.patterns);
  assist::Pipeline pipeline(store, base, engine, pc);
  for (const auto& m : a.models) pipeline.add_model(forecast::load_model(m));

  std::size_t records = 0;
  std::map<std::string, std::size_t> counts;
  auto emit = [&](const std::vector<assist::StreamEvent>& events) {
    for (const auto& e : events) {
      ++counts[e.type];
      if (jsonl) std::cout << assist::to_json(e).dump() << '\n';
    }
  };
  for (const auto& r : read_log_file(a.log)) {
    emit(pipeline.ingest(r));
    ++records;
  }
  emit(pipeline.flush());
  if (!jsonl) {
    std::cout << "replayed " << records << " records";
    for (const auto& [type, n] : counts) std::cout << ", " << n << ' ' << type;
    std::cout << '\n';
    const auto m = pipeline.metrics(0, pipeline.now() + 1);
    std::cout << "alarm suppression ratio " << fixed(m.suppression_ratio) << " (" << m.raw_alarms << " alarms -> "
              << m.presentation_units << " units)\n";
  }
  return 0;
}

struct TrainArgs {
  std::string log, data_dir, parameter, out, config;
  int trees = 100;
  int max_depth = 12;
  std::uint64_t seed = 1;
  double holdout = 0.2;
  bool with_stddev = false;
  bool situations = false;
  double stride_s = 300.0;
};

int run_train(const TrainArgs& a, bool jsonl) {
  auto store = open_store(a.log, a.data_dir);
  forecast::Hyperparams h;
  h.tree_count = a.trees;
  h.max_depth = a.max_depth;
  h.seed = a.seed;
  forecast::validate(h);

  if (a.situations) {
    const auto config = scenario_config(a.config, std::nullopt, std::nullopt);
    const auto spec = assist::situation_feature_spec(store->sensor_tags());
    const auto examples = assist::situation_examples(*store, config, spec, a.stride_s);
    const auto classifier = assist::SituationClassifier::train(examples, spec, h);
    open_out(a.out) << classifier.to_json().dump() << '\n';
    json labels = classifier.labels();
    print(jsonl, json{{"type", "situation_classifier"}, {"examples", examples.size()}, {"labels", labels}, {"out", a.out}},
          "trained situation classifier on " + std::to_string(examples.size()) + " images, labels " + labels.dump() +
              ", wrote " + a.out);
    return 0;
  }

  if (a.parameter.empty()) throw Error(ErrorCode::validation, "--parameter is required");
  const auto spec = store::reel_feature_spec(store->sensor_tags(), a.with_stddev);
  auto data = forecast::build_dataset(*store, a.parameter, spec);
  if (a.holdout > 0.0) data = forecast::split_by_reel(data, a.holdout, a.seed).first;
  const auto result = forecast::train(data, h);
  forecast::save_model(result.model, a.out);
  const auto& rep = result.report;
  print(jsonl,
        json{{"type", "training"}, {"parameter", a.parameter}, {"model_version", result.model.model_version},
             {"report", forecast::to_json(rep)}, {"out", a.out}},
        "trained " + a.parameter + " on " + std::to_string(rep.samples) + " reels: OOB MAPE " +
            fixed(rep.oob_mape * 100.0, 2) + " %, within ±10 % " + fixed(rep.oob_within_10) + ", model " +
            result.model.model_version + " -> " + a.out);
  return 0;
}

struct EvaluateArgs {
  std::string log, data_dir, model, report;
};

int run_evaluate(const EvaluateArgs& a, bool jsonl) {
  const auto model = forecast::load_model(a.model);
  auto store = open_store(a.log, a.data_dir);
  const auto data = forecast::build_dataset(*store, model.parameter, model.spec);
  const std::set<std::int64_t> trained(model.training_reels.begin(), model.training_reels.end());
  const auto holdout = forecast::subset(data, [&](std::int64_t reel) { return !trained.count(reel); });
  if (holdout.size() == 0) throw Error(ErrorCode::validation, "no reels outside the model's training set");
  const auto report = forecast::evaluate(model, holdout);
  if (!a.report.empty()) {
    auto out = open_out(a.report);
    forecast::write_report(out, report);
  }
  if (jsonl) {
    forecast::write_report(std::cout, report);
  } else {
    std::cout << report.parameter << ": " << report.samples << " holdout reels, within ±10 % rate "
              << fixed(report.within_10) << ", MAPE " << fixed(report.mape * 100.0, 2) << " %, RMSE "
              << fixed(report.rmse) << '\n';
    const char* names[] = {"low", "in_spec", "high"};
    std::cout << "confusion (true x predicted: low, in_spec, high)\n";
    for (int i = 0; i < 3; ++i)
      std::cout << "  " << names[i] << ": " << report.confusion[i][0] << ' ' << report.confusion[i][1] << ' '
                << report.confusion[i][2] << '\n';
  }
  return 0;
}

struct MineArgs {
  std::string log, out;
  std::size_t min_support = 5;
  double max_gap_s = 120.0;
  std::size_t max_len = 5;
  double chatter_window_s = 60.0;
};

int run_mine(const MineArgs& a, bool jsonl) {
  std::vector<AlarmEvent> alarms_seen;
  for (const auto& r : read_log_file(a.log))
    if (const auto* e = std::get_if<AlarmEvent>(&r)) alarms_seen.push_back(*e);
  const auto history = alarms::singleton_history(alarms_seen, a.chatter_window_s);
  const auto patterns = alarms::mine_sequences(history, a.min_support, a.max_gap_s, a.max_len);
  if (a.out.empty()) {
    alarms::write_patterns(std::cout, patterns);
    return 0;
  }
  auto out = open_out(a.out);
  alarms::write_patterns(out, patterns);
  print(jsonl, json{{"type", "patterns"}, {"count", patterns.size()}, {"history", history.size()}, {"out", a.out}},
        "mined " + std::to_string(patterns.size()) + " patterns from " + std::to_string(history.size()) +
            " alarms -> " + a.out);
  return 0;
}

struct ServeArgs {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string data_dir, log, config, patterns, classifier, tokens;
  std::vector<std::string> models;
  double speed = 0.0;
  double chatter_window_s = 60.0;
};

int run_serve(ServeArgs a, bool jsonl) {
  if (const char* p = std::getenv("MILLASSIST_PORT")) {
    try {
      a.port = std::stoi(p);
    } catch (const std::exception&) {
      throw Error(ErrorCode::validation, std::string("MILLASSIST_PORT is not a port: ") + p);
    }
  }
  if (const char* d = std::getenv("MILLASSIST_DATA_DIR")) a.data_dir = d;
  if (!a.log.empty() && !a.config.empty()) throw Error(ErrorCode::validation, "pass either --log or --config, not both");
  if (!(a.speed >= 0.0)) throw Error(ErrorCode::validation, "--speed must be >= 0");

  store::DataStore store;
  kb::KnowledgeBase base;
  api::ServiceOptions options;
  std::ofstream audit;
  if (!a.data_dir.empty()) {
    fs::create_directories(a.data_dir);
    const fs::path kb_dir = fs::path(a.data_dir) / "kb";
    if (fs::exists(kb_dir / "index.json")) base.load(kb_dir);
    options.kb_dir = kb_dir;
    audit.open(fs::path(a.data_dir) / "audit.jsonl", std::ios::app);
    if (!audit) throw Error(ErrorCode::io, "cannot open the audit log in " + a.data_dir);
  }
  if (base.users().empty()) {
    base.add_user("operator1", kb::Role::operator_role);
    base.add_user("operator2", kb::Role::operator_role);
    base.add_user("editor1", kb::Role::editor);
    base.add_user("editor2", kb::Role::editor);
  }
  if (!a.tokens.empty()) options.tokens = read_json_file(a.tokens).get<std::map<std::string, std::string>>();

  assist::AssistEngine engine(base);
  if (audit.is_open()) engine.set_audit_sink(&audit);
  if (!a.classifier.empty()) engine.set_classifier(assist::SituationClassifier::from_json(read_json_file(a.classifier)));
  assist::PipelineConfig pc;
  pc.chatter_window_s = a.chatter_window_s;
  pc.patterns = read_patterns_file(a.patterns);
  std::vector<Record> source;
  if (!a.log.empty()) source = read_log_file(a.log);
  if (!a.config.empty()) {
    const auto config = scenario_config(a.config, std::nullopt, std::nullopt);
    pc.parameter_locations = assist::parameter_locations(config);
    source = sim::emit_all(sim::build_scenario(config));
  }
  assist::Pipeline pipeline(store, base, engine, pc);
  for (const auto& m : a.models) pipeline.add_model(forecast::load_model(m));
  api::ApiService service(store, base, engine, pipeline, options);
  api::HttpServer server(service, {a.host, a.port});
  const int port = server.bind();
  print(jsonl, json{{"type", "serving"}, {"host", a.host}, {"port", port}},
        "serving on http://" + a.host + ":" + std::to_string(port) + api::kPrefix);
  std::cout.flush();

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::thread feeder([&] {
    const auto wall_start = std::chrono::steady_clock::now();
    for (const auto& r : source) {
      if (g_stop) return;
      if (a.speed > 0.0) {
        const auto due = wall_start + std::chrono::microseconds(static_cast<std::int64_t>(
                                          static_cast<double>(timestamp_of(r)) * 1000.0 / a.speed));
        while (!g_stop && std::chrono::steady_clock::now() < due) std::this_thread::sleep_for(std::chrono::milliseconds(20));
      }
      try {
        pipeline.ingest(r);
      } catch (const Error& e) {
        std::cerr << "replay: " << e.what() << '\n';
      }
    }
    if (!g_stop) pipeline.flush();
  });
  std::thread watcher([&] {
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  });
  server.run();
  g_stop = true;
  feeder.join();
  watcher.join();
  return 0;
}

struct ExportArgs {
  std::string log, data_dir, out, kb_dir, kb_out;
  Millis t0 = 0;
  std::optional<Millis> t1;
};

int run_export(const ExportArgs& a, bool jsonl) {
  if (!a.kb_dir.empty()) {
    kb::KnowledgeBase base;
    base.load(a.kb_dir);
    if (a.kb_out.empty()) {
      base.export_archive(std::cout);
    } else {
      auto out = open_out(a.kb_out);
      base.export_archive(out);
    }
    if (a.log.empty() && a.data_dir.empty()) return 0;
  }
  auto store = open_store(a.log, a.data_dir);
  Millis t1 = a.t1.value_or(0);
  if (!a.t1)
    for (const auto& r : store->query_window({}, a.t0, std::numeric_limits<Millis>::max())) t1 = std::max(t1, timestamp_of(r) + 1);
  if (a.out.empty() || a.out == "-") {
    store->export_window(std::cout, a.t0, t1);
  } else {
    auto out = open_out(a.out);
    store->export_window(out, a.t0, t1);
    print(jsonl, json{{"type", "export"}, {"t0", a.t0}, {"t1", t1}, {"out", a.out}},
          "exported [" + std::to_string(a.t0) + ", " + std::to_string(t1) + ") to " + a.out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"millassist: paper-mill assistance toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  bool jsonl = false;
  app.add_flag("--jsonl", jsonl, "Machine-readable output, one JSON record per line");

  SimArgs sim_args;
  auto* sim_cmd = app.add_subcommand("sim", "Generate a scenario emission log");
  sim_cmd->add_option("--config", sim_args.config, "Scenario configuration (JSON)");
  sim_cmd->add_option("--seed", sim_args.seed, "Override the scenario seed");
  sim_cmd->add_option("--days", sim_args.days, "Override the duration in days")->check(CLI::NonNegativeNumber);
  sim_cmd->add_option("--out", sim_args.out, "Output log (default stdout)");
  sim_cmd->add_option("--truth", sim_args.truth, "Also write the ground truth (JSON)");

  ReplayArgs replay_args;
  auto* replay_cmd = app.add_subcommand("replay", "Feed a log through the store and the assistance pipeline");
  replay_cmd->add_option("--log", replay_args.log, "Emission log")->required();
  replay_cmd->add_option("--data-dir", replay_args.data_dir, "Persist the store here");
  replay_cmd->add_option("--patterns", replay_args.patterns, "Alarm patterns (JSONL)");
  replay_cmd->add_option("--model", replay_args.models, "Forecast model (repeatable)");
  replay_cmd->add_option("--kb", replay_args.kb_dir, "Knowledge-base directory");
  replay_cmd->add_option("--classifier", replay_args.classifier, "Situation classifier (JSON)");
  replay_cmd->add_option("--chatter-window-s", replay_args.chatter_window_s)->check(CLI::NonNegativeNumber);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a quality model (or the situation classifier)");
  train_cmd->add_option("--log", train_args.log, "Emission log");
  train_cmd->add_option("--data-dir", train_args.data_dir, "Persisted store");
  train_cmd->add_option("--parameter", train_args.parameter, "Quality parameter");
  train_cmd->add_option("--out", train_args.out, "Model output (JSON)")->required();
  train_cmd->add_option("--trees", train_args.trees)->check(CLI::PositiveNumber);
  train_cmd->add_option("--max-depth", train_args.max_depth)->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", train_args.seed);
  train_cmd->add_option("--holdout", train_args.holdout, "Reel fraction kept out of training")->check(CLI::Range(0.0, 0.95));
  train_cmd->add_flag("--stddev", train_args.with_stddev, "Add per-reel standard deviation features");
  train_cmd->add_flag("--situations", train_args.situations, "Train the situation classifier instead");
  train_cmd->add_option("--config", train_args.config, "Scenario configuration with the fault plan (--situations)");
  train_cmd->add_option("--stride-s", train_args.stride_s)->check(CLI::PositiveNumber);

  EvaluateArgs eval_args;
  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a model on reels it was not trained on");
  eval_cmd->add_option("--log", eval_args.log, "Emission log");
  eval_cmd->add_option("--data-dir", eval_args.data_dir, "Persisted store");
  eval_cmd->add_option("--model", eval_args.model, "Model (JSON)")->required();
  eval_cmd->add_option("--report", eval_args.report, "Write the JSONL report here");

  MineArgs mine_args;
  auto* mine_cmd = app.add_subcommand("mine-patterns", "Mine frequent alarm sequences from a log");
  mine_cmd->add_option("--log", mine_args.log, "Emission log")->required();
  mine_cmd->add_option("--out", mine_args.out, "Patterns output (JSONL, default stdout)");
  mine_cmd->add_option("--min-support", mine_args.min_support)->check(CLI::PositiveNumber);
  mine_cmd->add_option("--max-gap-s", mine_args.max_gap_s)->check(CLI::NonNegativeNumber);
  mine_cmd->add_option("--max-len", mine_args.max_len)->check(CLI::Range(2, 20));
  mine_cmd->add_option("--chatter-window-s", mine_args.chatter_window_s)->check(CLI::NonNegativeNumber);

  ServeArgs serve_args;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service (env: MILLASSIST_PORT, MILLASSIST_DATA_DIR)");
  serve_cmd->add_option("--host", serve_args.host);
  serve_cmd->add_option("--port", serve_args.port)->check(CLI::Range(0, 65535));
  serve_cmd->add_option("--data-dir", serve_args.data_dir, "Knowledge base and audit log directory");
  serve_cmd->add_option("--log", serve_args.log, "Replay this emission log");
  serve_cmd->add_option("--config", serve_args.config, "Simulate and replay this scenario");
  serve_cmd->add_option("--speed", serve_args.speed, "Simulated seconds per wall second (0 = as fast as possible)");
  serve_cmd->add_option("--model", serve_args.models, "Forecast model (repeatable)");
  serve_cmd->add_option("--patterns", serve_args.patterns, "Alarm patterns (JSONL)");
  serve_cmd->add_option("--classifier", serve_args.classifier, "Situation classifier (JSON)");
  serve_cmd->add_option("--tokens", serve_args.tokens, "Static tokens: JSON object token -> user");
  serve_cmd->add_option("--chatter-window-s", serve_args.chatter_window_s)->check(CLI::NonNegativeNumber);

  ExportArgs export_args;
  auto* export_cmd = app.add_subcommand("export", "Export a store window as a log, or a knowledge-base archive");
  export_cmd->add_option("--log", export_args.log, "Emission log");
  export_cmd->add_option("--data-dir", export_args.data_dir, "Persisted store");
  export_cmd->add_option("--t0", export_args.t0, "Window start (ms)");
  export_cmd->add_option("--t1", export_args.t1, "Window end (ms, exclusive)");
  export_cmd->add_option("--out", export_args.out, "Output log (default stdout)");
  export_cmd->add_option("--kb", export_args.kb_dir, "Knowledge-base directory to archive");
  export_cmd->add_option("--kb-out", export_args.kb_out, "Archive output (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*sim_cmd) return run_sim(sim_args, jsonl);
    if (*replay_cmd) return run_replay(replay_args, jsonl);
    if (*train_cmd) return run_train(train_args, jsonl);
    if (*eval_cmd) return run_evaluate(eval_args, jsonl);
    if (*mine_cmd) return run_mine(mine_args, jsonl);
    if (*serve_cmd) return run_serve(serve_args, jsonl);
    if (*export_cmd) return run_export(export_args, jsonl);
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
