#include "millassist/assist.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <ostream>
#include <set>

namespace millassist::assist {

using nlohmann::json;

namespace {

struct Window {
  Millis begin;
  Millis end;
};

Window active_window(const sim::FaultInjection& f, Millis scenario_end) {
  const Millis begin = seconds_to_millis(f.start_s);
  const Millis end = f.duration_s > 0.0 ? std::min(scenario_end, begin + seconds_to_millis(f.duration_s)) : scenario_end;
  return {begin, end};
}

forecast::Row row_of(const store::FeatureVector& fv) { return fv.values; }

std::optional<std::string> optional_string(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::string>();
}

bool blank(const std::optional<std::string>& s) {
  return !s || s->find_first_not_of(" \t\r\n") == std::string::npos;
}

}  // namespace

// --- situation recognition -----------------------------------------------------

store::FeatureSpec situation_feature_spec(const std::vector<std::string>& tags, double trailing_s) {
  if (!(trailing_s > 0.0)) throw Error(ErrorCode::validation, "trailing window must be > 0");
  store::FeatureSpec spec;
  for (const auto& tag : tags) {
    spec.push_back({tag, store::Aggregation::mean, trailing_s});
    spec.push_back({tag, store::Aggregation::stddev, trailing_s});
  }
  return spec;
}

std::vector<SituationExample> situation_examples(const store::DataStore& store, const sim::ScenarioConfig& config,
                                                 const store::FeatureSpec& spec, double stride_s) {
  if (!(stride_s > 0.0)) throw Error(ErrorCode::validation, "stride must be > 0");
  double trailing_s = 0.0;
  for (const auto& def : spec) trailing_s = std::max(trailing_s, def.trailing_s.value_or(0.0));
  const Millis end = seconds_to_millis(config.duration_s);
  const Millis trailing = seconds_to_millis(trailing_s);
  const Millis stride = std::max<Millis>(1, seconds_to_millis(stride_s));

  std::vector<std::pair<Window, sim::FaultKind>> faults;
  for (const auto& f : config.fault_plan)
    if (f.kind != sim::FaultKind::chattering_sensor) faults.push_back({active_window(f, end), f.kind});

  std::vector<SituationExample> out;
  for (Millis t = std::max(trailing, stride); t <= end; t += stride) {
    const Window image{t - trailing, t};
    std::optional<std::string> label;
    bool mixed = false;
    for (const auto& [w, kind] : faults) {
      const bool touches = w.begin <= image.end && image.begin < w.end;
      if (!touches) continue;
      const bool covers = w.begin <= image.begin && image.end < w.end;
      const std::string name(sim::to_string(kind));
      if (!covers || (label && *label != name)) mixed = true;
      label = name;
    }
    if (mixed) continue;
    auto fv = store.align_at(t, spec);
    if (fv.all_missing()) continue;
    out.push_back({std::move(fv), label.value_or(kNominalSituation)});
  }
  return out;
}

json to_json(const SituationResult& r) { return json{{"label", r.label}, {"confidence", r.confidence}}; }

SituationClassifier SituationClassifier::train(const std::vector<SituationExample>& examples,
                                               const store::FeatureSpec& spec,
                                               const forecast::Hyperparams& hyperparams) {
  if (examples.empty()) throw Error(ErrorCode::training, "no situation examples");
  SituationClassifier c;
  c.spec_ = spec;
  for (const auto& def : spec) c.names_.push_back(store::feature_name(def));
  std::set<std::string> labels;
  for (const auto& e : examples) {
    if (e.features.names != c.names_) throw Error(ErrorCode::contract, "example features do not match the spec");
    labels.insert(e.label);
  }
  if (labels.size() < 2) throw Error(ErrorCode::training, "situation examples need at least two labels");
  c.labels_.assign(labels.begin(), labels.end());

  std::vector<forecast::Row> rows;
  std::vector<double> y;
  for (const auto& e : examples) {
    rows.push_back(row_of(e.features));
    const auto it = std::lower_bound(c.labels_.begin(), c.labels_.end(), e.label);
    y.push_back(static_cast<double>(it - c.labels_.begin()));
  }
  c.forest_ = forecast::Forest::fit(rows, y, hyperparams, forecast::ForestTask::classification,
                                    static_cast<int>(c.labels_.size()))
                  .forest;
  return c;
}

SituationResult SituationClassifier::classify(const store::FeatureVector& image, double threshold) const {
  if (!forest_) return {};
  if (image.names != names_) throw Error(ErrorCode::contract, "process image does not match the classifier spec");
  if (image.all_missing()) return {};
  const auto row = row_of(image);
  std::vector<std::size_t> votes(labels_.size(), 0);
  for (std::size_t t = 0; t < forest_->trees().size(); ++t) {
    const auto& shares = forest_->tree_output(t, row);
    const auto best = std::max_element(shares.begin(), shares.end()) - shares.begin();
    ++votes[static_cast<std::size_t>(best)];
  }
  const auto best = static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  SituationResult r;
  r.confidence = static_cast<double>(votes[best]) / static_cast<double>(forest_->trees().size());
  r.label = r.confidence < threshold ? kUnknownSituation : labels_[best];
  return r;
}

json SituationClassifier::to_json() const {
  json j{{"classifier_schema", 1}, {"feature_spec", store::to_json(spec_)}, {"labels", labels_}};
  j["forest"] = forest_ ? forest_->to_json() : json(nullptr);
  return j;
}

SituationClassifier SituationClassifier::from_json(const json& j) {
  SituationClassifier c;
  try {
    if (j.at("classifier_schema").get<int>() != 1) throw Error(ErrorCode::validation, "unsupported classifier_schema");
    c.spec_ = store::feature_spec_from_json(j.at("feature_spec"));
    for (const auto& def : c.spec_) c.names_.push_back(store::feature_name(def));
    c.labels_ = j.at("labels").get<std::vector<std::string>>();
    if (!j.at("forest").is_null()) c.forest_ = forecast::Forest::from_json(j.at("forest"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed classifier document: ") + e.what());
  }
  if (c.forest_ && (c.forest_->feature_count() != c.names_.size() ||
                    c.forest_->classes() != static_cast<int>(c.labels_.size())))
    throw Error(ErrorCode::validation, "classifier document is inconsistent");
  return c;
}

// --- triggers and recommendations ------------------------------------------------

std::string_view to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::pcs_alarm: return "pcs_alarm";
    case TriggerKind::web_break: return "web_break";
    case TriggerKind::recognized_situation: return "recognized_situation";
    case TriggerKind::quality_deviation: return "quality_deviation";
  }
  return "?";
}

TriggerKind parse_trigger_kind(std::string_view s) {
  for (auto k : {TriggerKind::pcs_alarm, TriggerKind::web_break, TriggerKind::recognized_situation,
                 TriggerKind::quality_deviation})
    if (to_string(k) == s) return k;
  throw Error(ErrorCode::validation, "unknown trigger kind " + std::string(s));
}

void validate(const TriggerEvent& e) {
  if (e.source_ref.empty()) throw Error(ErrorCode::validation, "trigger needs a source reference");
  if (e.location.empty()) throw Error(ErrorCode::validation, "trigger needs a location identifier");
  switch (e.kind) {
    case TriggerKind::pcs_alarm:
      if (blank(e.error_code)) throw Error(ErrorCode::validation, "pcs_alarm trigger needs an error code");
      break;
    case TriggerKind::recognized_situation:
      if (blank(e.situation)) throw Error(ErrorCode::validation, "recognized_situation trigger needs a situation");
      if (e.error_code) throw Error(ErrorCode::validation, "recognized_situation trigger carries no error code");
      break;
    case TriggerKind::quality_deviation:
      if (e.error_code) throw Error(ErrorCode::validation, "quality_deviation trigger carries no error code");
      break;
    case TriggerKind::web_break:
      break;
  }
}

json to_json(const TriggerEvent& e) {
  json j{{"kind", to_string(e.kind)},
         {"source_ref", e.source_ref},
         {"timestamp", e.timestamp},
         {"location", e.location}};
  j["error_code"] = e.error_code ? json(*e.error_code) : json(nullptr);
  j["situation"] = e.situation ? json(*e.situation) : json(nullptr);
  return j;
}

TriggerEvent trigger_from_json(const json& j) {
  TriggerEvent e;
  try {
    e.kind = parse_trigger_kind(j.at("kind").get<std::string>());
    e.source_ref = j.at("source_ref").get<std::string>();
    e.timestamp = j.at("timestamp").get<Millis>();
    e.location = j.at("location").get<std::string>();
    e.error_code = optional_string(j, "error_code");
    e.situation = optional_string(j, "situation");
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::validation, std::string("malformed trigger: ") + ex.what());
  }
  return e;
}

std::string_view to_string(Disposition d) {
  switch (d) {
    case Disposition::open: return "open";
    case Disposition::acted: return "acted";
    case Disposition::dismissed: return "dismissed";
  }
  return "?";
}

json to_json(const Recommendation& r) {
  json candidates = json::array();
  for (const auto& c : r.candidates)
    candidates.push_back(json{{"card_id", c.card_id}, {"version", c.version}, {"score", c.score}});
  return json{{"recommendation_id", r.recommendation_id},
              {"trigger", to_json(r.trigger)},
              {"situation_label", r.situation_label},
              {"situation_confidence", r.situation_confidence},
              {"candidates", std::move(candidates)},
              {"created_at", r.created_at},
              {"disposition", to_string(r.disposition)}};
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::confirm: return "confirm";
    case Verdict::reject: return "reject";
    case Verdict::correct: return "correct";
    case Verdict::supplement: return "supplement";
  }
  return "?";
}

Verdict parse_verdict(std::string_view s) {
  for (auto v : {Verdict::confirm, Verdict::reject, Verdict::correct, Verdict::supplement})
    if (to_string(v) == s) return v;
  throw Error(ErrorCode::validation, "unknown verdict " + std::string(s));
}

json to_json(const Feedback& f) {
  json j{{"recommendation_id", f.recommendation_id},
         {"card_id", f.card_id},
         {"verdict", to_string(f.verdict)},
         {"author", f.author},
         {"timestamp", f.timestamp}};
  j["text"] = f.text ? json(*f.text) : json(nullptr);
  return j;
}

Feedback feedback_from_json(const json& j) {
  Feedback f;
  try {
    f.recommendation_id = j.at("recommendation_id").get<std::string>();
    f.card_id = j.at("card_id").get<std::string>();
    f.verdict = parse_verdict(j.at("verdict").get<std::string>());
    f.text = optional_string(j, "text");
    f.author = j.at("author").get<std::string>();
    f.timestamp = j.value("timestamp", Millis{0});
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::validation, std::string("malformed feedback: ") + ex.what());
  }
  return f;
}

// --- ranking -------------------------------------------------------------------

json to_json(const FeedbackStats& stats) {
  json out = json::array();
  for (const auto& [key, c] : stats)
    out.push_back(json{{"card_id", key.first},
                       {"situation", key.second},
                       {"confirms", c.confirms},
                       {"rejects", c.rejects},
                       {"corrections", c.corrections},
                       {"supplements", c.supplements},
                       {"score", smoothed_score(c.confirms, c.rejects)}});
  return out;
}

double smoothed_score(std::uint64_t confirms, std::uint64_t rejects, double a, double b) {
  return (static_cast<double>(confirms) + a) / (static_cast<double>(confirms + rejects) + a + b);
}

std::vector<Candidate> rank_candidates(const std::vector<kb::CardView>& cards, const std::string& situation,
                                       const FeedbackStats& stats) {
  struct Ranked {
    Candidate c;
    std::uint64_t approval_seq;
  };
  std::vector<Ranked> ranked;
  for (const auto& view : cards) {
    const auto it = stats.find({view.card_id, situation});
    const double score = it == stats.end() ? smoothed_score(0, 0) : smoothed_score(it->second.confirms, it->second.rejects);
    ranked.push_back({{view.card_id, view.version, score}, view.approval_seq});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.c.score != b.c.score) return a.c.score > b.c.score;
    if (a.approval_seq != b.approval_seq) return a.approval_seq > b.approval_seq;
    return a.c.card_id < b.c.card_id;
  });
  std::vector<Candidate> out;
  for (auto& r : ranked) out.push_back(std::move(r.c));
  return out;
}

std::vector<kb::Query> candidate_queries(const TriggerEvent& e, const std::string& situation) {
  std::vector<kb::Query> out;
  if (e.kind != TriggerKind::quality_deviation) {
    if (e.error_code) out.push_back({kb::QueryKind::error_code, *e.error_code});
    if (situation != kUnknownSituation && situation != kNominalSituation)
      out.push_back({kb::QueryKind::situation, situation});
  }
  out.push_back({kb::QueryKind::location, e.location});
  return out;
}

// --- engine --------------------------------------------------------------------

json to_json(const FeedbackOutcome& o) {
  json j{{"recommendation", to_json(o.recommendation)},
         {"confirms", o.counts.confirms},
         {"rejects", o.counts.rejects},
         {"corrections", o.counts.corrections},
         {"supplements", o.counts.supplements},
         {"score", o.score}};
  j["proposal_id"] = o.proposal_id ? json(*o.proposal_id) : json(nullptr);
  return j;
}

AssistEngine::AssistEngine(kb::KnowledgeBase& base, EngineConfig config) : base_(base), config_(config) {
  if (!(config_.confidence_threshold >= 0.0 && config_.confidence_threshold <= 1.0))
    throw Error(ErrorCode::validation, "confidence_threshold must lie in [0, 1]");
}

void AssistEngine::set_classifier(SituationClassifier classifier) {
  std::lock_guard lock(mutex_);
  classifier_ = std::move(classifier);
}

SituationResult AssistEngine::classify_situation(const store::FeatureVector& image) const {
  std::lock_guard lock(mutex_);
  return classifier_.classify(image, config_.confidence_threshold);
}

void AssistEngine::set_audit_sink(std::ostream* sink) {
  std::lock_guard lock(mutex_);
  sink_ = sink;
}

void AssistEngine::audit_locked(json record) {
  audit_.push_back(record.dump());
  if (sink_) {
    *sink_ << audit_.back() << '\n';
    sink_->flush();
  }
}

Recommendation AssistEngine::on_trigger(const TriggerEvent& event, const std::optional<store::FeatureVector>& image) {
  validate(event);
  std::lock_guard lock(mutex_);
  Recommendation rec;
  char buf[32];
  std::snprintf(buf, sizeof buf, "REC-%06llu", static_cast<unsigned long long>(next_id_++));
  rec.recommendation_id = buf;
  rec.trigger = event;
  rec.created_at = event.timestamp;
  if (event.situation) {
    rec.situation_label = *event.situation;
    rec.situation_confidence = 1.0;
  } else if (image) {
    const auto r = classifier_.classify(*image, config_.confidence_threshold);
    rec.situation_label = r.label;
    rec.situation_confidence = r.confidence;
  }

  std::vector<kb::CardView> cards;
  std::set<std::string> seen;
  for (const auto& q : candidate_queries(event, rec.situation_label))
    for (auto& view : base_.find_cards(q))
      if (seen.insert(view.card_id).second) cards.push_back(std::move(view));
  rec.candidates = rank_candidates(cards, rec.situation_label, stats_);

  audit_locked(json{{"type", "trigger"}, {"recommendation_id", rec.recommendation_id}, {"trigger", to_json(event)}});
  audit_locked(json{{"type", "recommendation"}, {"recommendation", to_json(rec)}});
  recommendations_[rec.recommendation_id] = rec;
  return rec;
}

FeedbackOutcome AssistEngine::record_feedback(const Feedback& feedback) {
  std::lock_guard lock(mutex_);
  const auto it = recommendations_.find(feedback.recommendation_id);
  if (it == recommendations_.end())
    throw Error(ErrorCode::not_found, "unknown recommendation " + feedback.recommendation_id);
  auto& rec = it->second;
  if (rec.disposition == Disposition::dismissed)
    throw Error(ErrorCode::state, "recommendation " + rec.recommendation_id + " is dismissed");
  const bool candidate = std::any_of(rec.candidates.begin(), rec.candidates.end(),
                                     [&](const Candidate& c) { return c.card_id == feedback.card_id; });
  if (!candidate)
    throw Error(ErrorCode::validation,
                "card " + feedback.card_id + " is not a candidate of " + rec.recommendation_id);
  const bool edits = feedback.verdict == Verdict::correct || feedback.verdict == Verdict::supplement;
  if (edits && blank(feedback.text))
    throw Error(ErrorCode::validation, std::string(to_string(feedback.verdict)) + " feedback needs text");

  FeedbackOutcome outcome;
  if (edits) {
    // The proposal is drafted first so that a knowledge-base refusal leaves
    // the statistics untouched.
    const auto view = base_.visible_card(feedback.card_id);
    if (!view) throw Error(ErrorCode::state, "card " + feedback.card_id + " has no visible version");
    kb::Diff diff;
    diff.solutions = view->content.solutions;
    const std::string text = feedback.verdict == Verdict::correct ? "Correction: " + *feedback.text : *feedback.text;
    diff.solutions->push_back({text, std::nullopt});
    outcome.proposal_id = base_.propose_change(feedback.card_id, diff, feedback.author,
                                               std::string(to_string(feedback.verdict)) + " feedback on " +
                                                   rec.recommendation_id);
  }

  auto& counts = stats_[{feedback.card_id, rec.situation_label}];
  switch (feedback.verdict) {
    case Verdict::confirm:
      ++counts.confirms;
      rec.disposition = Disposition::acted;
      break;
    case Verdict::reject: {
      ++counts.rejects;
      auto& given = feedback_[rec.recommendation_id];
      std::set<std::string> rejected{feedback.card_id};
      for (const auto& f : given)
        if (f.verdict == Verdict::reject) rejected.insert(f.card_id);
      if (rec.disposition == Disposition::open && rejected.size() == rec.candidates.size())
        rec.disposition = Disposition::dismissed;
      break;
    }
    case Verdict::correct:
      ++counts.corrections;
      break;
    case Verdict::supplement:
      ++counts.supplements;
      break;
  }
  feedback_[rec.recommendation_id].push_back(feedback);

  outcome.recommendation = rec;
  outcome.counts = counts;
  outcome.score = smoothed_score(counts.confirms, counts.rejects);
  json line{{"type", "feedback"},
            {"feedback", to_json(feedback)},
            {"situation", rec.situation_label},
            {"disposition", to_string(rec.disposition)}};
  line["proposal_id"] = outcome.proposal_id ? json(*outcome.proposal_id) : json(nullptr);
  audit_locked(std::move(line));
  return outcome;
}

Recommendation AssistEngine::recommendation(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = recommendations_.find(id);
  if (it == recommendations_.end()) throw Error(ErrorCode::not_found, "unknown recommendation " + id);
  return it->second;
}

std::vector<Recommendation> AssistEngine::recommendations() const {
  std::lock_guard lock(mutex_);
  std::vector<Recommendation> out;
  for (const auto& [id, r] : recommendations_) out.push_back(r);
  return out;
}

std::vector<Feedback> AssistEngine::feedback_for(const std::string& recommendation_id) const {
  std::lock_guard lock(mutex_);
  if (!recommendations_.count(recommendation_id))
    throw Error(ErrorCode::not_found, "unknown recommendation " + recommendation_id);
  const auto it = feedback_.find(recommendation_id);
  return it == feedback_.end() ? std::vector<Feedback>{} : it->second;
}

FeedbackStats AssistEngine::stats() const {
  std::lock_guard lock(mutex_);
  return stats_;
}

FeedbackCounts AssistEngine::counts(const std::string& card_id, const std::string& situation) const {
  std::lock_guard lock(mutex_);
  const auto it = stats_.find({card_id, situation});
  return it == stats_.end() ? FeedbackCounts{} : it->second;
}

double AssistEngine::score(const std::string& card_id, const std::string& situation) const {
  const auto c = counts(card_id, situation);
  return smoothed_score(c.confirms, c.rejects);
}

std::vector<std::string> AssistEngine::audit_lines() const {
  std::lock_guard lock(mutex_);
  return audit_;
}

FeedbackStats replay_stats(std::istream& audit) {
  FeedbackStats stats;
  std::string line;
  std::size_t number = 0;
  while (std::getline(audit, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      if (j.at("type").get<std::string>() != "feedback") continue;
      const auto f = feedback_from_json(j.at("feedback"));
      auto& c = stats[{f.card_id, j.at("situation").get<std::string>()}];
      switch (f.verdict) {
        case Verdict::confirm: ++c.confirms; break;
        case Verdict::reject: ++c.rejects; break;
        case Verdict::correct: ++c.corrections; break;
        case Verdict::supplement: ++c.supplements; break;
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::validation, "audit line " + std::to_string(number) + ": " + e.what());
    }
  }
  return stats;
}

}  // namespace millassist::assist
