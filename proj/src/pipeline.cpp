#include "millassist/pipeline.hpp"

#include <algorithm>

namespace millassist::assist {

using nlohmann::json;

std::map<std::string, std::string> parameter_locations(const sim::ScenarioConfig& config) {
  std::map<std::string, std::string> out;
  for (const auto& q : config.quality_model) out[q.parameter] = q.location.empty() ? q.parameter : q.location;
  return out;
}

json to_json(const StreamEvent& e) {
  return json{{"seq", e.seq}, {"type", e.type}, {"at", e.at}, {"location", e.location}, {"payload", e.payload}};
}

json to_json(const GroupEntry& g) {
  json j = alarms::to_json(g.linked.group);
  j["card_ids"] = g.linked.card_ids;
  j["link_status"] = alarms::to_string(g.linked.status);
  j["recommendation_id"] = g.recommendation_id ? json(*g.recommendation_id) : json(nullptr);
  j["acknowledged"] = g.ack ? json{{"user", g.ack->user}, {"at", g.ack->at}} : json(nullptr);
  return j;
}

json to_json(const ForecastEntry& f) {
  json j = forecast::to_json(f.forecast);
  j["forecast_id"] = f.forecast_id;
  j["issued_at"] = f.issued_at;
  j["lab_value"] = f.lab_value ? json(*f.lab_value) : json(nullptr);
  return j;
}

Pipeline::Pipeline(store::DataStore& store, kb::KnowledgeBase& base, AssistEngine& engine, PipelineConfig config)
    : store_(store), base_(base), engine_(engine), config_(std::move(config)),
      chain_(config_.chatter_window_s, config_.patterns) {
  if (!(config_.situation_interval_s >= 0.0)) throw Error(ErrorCode::validation, "situation_interval_s must be >= 0");
}

void Pipeline::add_model(forecast::ForecastModel model) {
  std::lock_guard lock(mutex_);
  forecast::CusumConfig cusum;
  cusum.sigma = model.residual_sd > 0.0 ? model.residual_sd : 1.0;
  const auto parameter = model.parameter;
  models_.insert_or_assign(parameter, Model{std::move(model), forecast::ChangeDetector(parameter, cusum)});
}

std::vector<std::string> Pipeline::parameters() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [p, m] : models_) out.push_back(p);
  return out;
}

void Pipeline::publish_locked(const std::string& type, Millis at, const std::string& location, json payload,
                              std::vector<StreamEvent>& out) {
  StreamEvent e{events_.size() + 1, type, at, location, std::move(payload)};
  events_.push_back(e);
  out.push_back(std::move(e));
  changed_.notify_all();
}

std::optional<store::FeatureVector> Pipeline::image_locked(Millis at) const {
  const auto& classifier = engine_.classifier();
  if (!classifier.trained()) return std::nullopt;
  return store_.align_at(at, classifier.spec());
}

void Pipeline::recommend_locked(const TriggerEvent& trigger, std::optional<store::FeatureVector> image,
                                std::vector<StreamEvent>& out) {
  const auto rec = engine_.on_trigger(trigger, image);
  publish_locked("recommendation", trigger.timestamp, trigger.location, to_json(rec), out);
  if (trigger.kind == TriggerKind::pcs_alarm || trigger.kind == TriggerKind::web_break) {
    const auto it = groups_.find(trigger.source_ref);
    if (it != groups_.end()) it->second.recommendation_id = rec.recommendation_id;
  }
}

void Pipeline::on_units_locked(std::vector<alarms::AlarmGroup>& units, std::vector<StreamEvent>& out) {
  for (auto& unit : units) {
    const auto lookup = [this](const std::string& code) {
      std::vector<std::string> ids;
      for (const auto& v : base_.find_cards({kb::QueryKind::error_code, code})) ids.push_back(v.card_id);
      return ids;
    };
    GroupEntry entry{alarms::knowledge_link_filter(unit, lookup), std::nullopt, std::nullopt};
    const auto id = unit.group_id;
    const auto& rep = entry.linked.group.representative;
    group_order_.push_back(id);
    groups_[id] = entry;
    publish_locked("alarm_group", unit.first, rep.tag, to_json(entry), out);

    if (entry.linked.status == alarms::LinkStatus::hold) continue;
    TriggerEvent trigger;
    trigger.kind = TriggerKind::pcs_alarm;
    trigger.error_code = rep.error_code;
    for (const auto& member : unit.members) {
      const auto a = raised_.find(member);
      if (a == raised_.end()) continue;
      const auto& codes = config_.web_break_codes;
      if (std::find(codes.begin(), codes.end(), a->second.error_code) != codes.end()) {
        trigger.kind = TriggerKind::web_break;
        trigger.error_code = a->second.error_code;
        break;
      }
    }
    trigger.source_ref = id;
    trigger.timestamp = unit.last;
    trigger.location = rep.tag;
    recommend_locked(trigger, image_locked(unit.last), out);
  }
  units.clear();
}

void Pipeline::on_reel_locked(const ReelRecord& reel, std::vector<StreamEvent>& out) {
  for (auto& [parameter, m] : models_) {
    const auto features = store_.align_features(reel.reel_id, m.model.spec);
    ForecastEntry entry;
    entry.forecast_id = "FC-" + std::to_string(reel.reel_id) + "-" + parameter;
    entry.forecast = forecast::predict(m.model, features, reel.reel_id);
    entry.issued_at = reel.end;
    forecast_index_[entry.forecast_id] = forecasts_.size();
    forecasts_.push_back(entry);
    const auto loc = config_.parameter_locations.find(parameter);
    const std::string location = loc == config_.parameter_locations.end() ? parameter : loc->second;
    publish_locked("forecast", reel.end, location, to_json(entry), out);

    if (entry.forecast.quality_class == forecast::QualityClass::in_specification) continue;
    TriggerEvent trigger;
    trigger.kind = TriggerKind::quality_deviation;
    trigger.source_ref = entry.forecast_id;
    trigger.timestamp = reel.end;
    trigger.location = location;
    recommend_locked(trigger, image_locked(reel.end), out);
  }
}

void Pipeline::on_lab_locked(const LabMeasurement& lab, std::vector<StreamEvent>& out) {
  const auto m = models_.find(lab.parameter);
  if (m == models_.end()) return;
  const auto it = forecast_index_.find("FC-" + std::to_string(lab.reel_id) + "-" + lab.parameter);
  if (it == forecast_index_.end()) return;
  auto& entry = forecasts_[it->second];
  if (entry.lab_value) return;
  entry.lab_value = lab.value;
  const auto event = m->second.detector.update(lab.value - entry.forecast.point, lab.measured_at);
  if (!event) return;
  change_points_.push_back(*event);
  const auto loc = config_.parameter_locations.find(lab.parameter);
  publish_locked("change_point", lab.measured_at,
                 loc == config_.parameter_locations.end() ? lab.parameter : loc->second, forecast::to_json(*event),
                 out);
}

void Pipeline::recognize_locked(Millis until, std::vector<StreamEvent>& out) {
  if (config_.situation_interval_s <= 0.0 || !engine_.classifier().trained()) return;
  const Millis step = std::max<Millis>(1, seconds_to_millis(config_.situation_interval_s));
  if (next_recognition_ == 0) next_recognition_ = step;
  while (next_recognition_ <= until) {
    const Millis at = next_recognition_;
    next_recognition_ += step;
    const auto result = engine_.classify_situation(*image_locked(at));
    if (result.label == kUnknownSituation || result.label == last_situation_) continue;
    last_situation_ = result.label;
    if (result.label == kNominalSituation) continue;
    TriggerEvent trigger;
    trigger.kind = TriggerKind::recognized_situation;
    trigger.source_ref = result.label;
    trigger.situation = result.label;
    trigger.timestamp = at;
    trigger.location = config_.situation_location;
    recommend_locked(trigger, std::nullopt, out);
  }
}

std::vector<StreamEvent> Pipeline::ingest(const Record& record) {
  std::lock_guard lock(mutex_);
  const Millis t = timestamp_of(record);
  if (t < now_) throw Error(ErrorCode::ordering, "record at " + std::to_string(t) + " precedes " + std::to_string(now_));
  store_.append(record);
  now_ = t;

  std::vector<StreamEvent> out;
  std::vector<alarms::AlarmGroup> units;
  // Images are taken before the record's own timestamp so that a recognition
  // never sees a partial set of samples for its instant.
  recognize_locked(t - 1, out);
  chain_.advance(t, units);
  on_units_locked(units, out);
  if (const auto* a = std::get_if<AlarmEvent>(&record)) {
    if (a->state == AlarmState::raised) raised_[a->alarm_id] = *a;
    chain_.push(*a, units);
    on_units_locked(units, out);
  } else if (const auto* reel = std::get_if<ReelRecord>(&record)) {
    on_reel_locked(*reel, out);
  } else if (const auto* lab = std::get_if<LabMeasurement>(&record)) {
    on_lab_locked(*lab, out);
  }
  return out;
}

std::vector<StreamEvent> Pipeline::flush() {
  std::lock_guard lock(mutex_);
  std::vector<StreamEvent> out;
  std::vector<alarms::AlarmGroup> units;
  chain_.flush(units);
  on_units_locked(units, out);
  return out;
}

Recommendation Pipeline::trigger(const TriggerEvent& event) {
  std::lock_guard lock(mutex_);
  std::vector<StreamEvent> out;
  validate(event);
  recommend_locked(event, event.situation ? std::nullopt : image_locked(event.timestamp), out);
  return engine_.recommendation(out.back().payload.at("recommendation_id").get<std::string>());
}

std::vector<GroupEntry> Pipeline::groups() const {
  std::lock_guard lock(mutex_);
  std::vector<GroupEntry> out;
  for (const auto& id : group_order_) out.push_back(groups_.at(id));
  return out;
}

GroupEntry Pipeline::group(const std::string& group_id) const {
  std::lock_guard lock(mutex_);
  const auto it = groups_.find(group_id);
  if (it == groups_.end()) throw Error(ErrorCode::not_found, "unknown alarm group " + group_id);
  return it->second;
}

GroupEntry Pipeline::acknowledge(const std::string& group_id, const std::string& user, Millis at) {
  std::lock_guard lock(mutex_);
  const auto it = groups_.find(group_id);
  if (it == groups_.end()) throw Error(ErrorCode::not_found, "unknown alarm group " + group_id);
  if (user.empty()) throw Error(ErrorCode::validation, "acknowledgement needs a user");
  if (it->second.ack) throw Error(ErrorCode::conflict, "alarm group " + group_id + " is already acknowledged");
  it->second.ack = Acknowledgement{user, at};
  return it->second;
}

std::vector<ForecastEntry> Pipeline::forecasts(std::optional<std::int64_t> reel_id,
                                               const std::optional<std::string>& parameter) const {
  std::lock_guard lock(mutex_);
  std::vector<ForecastEntry> out;
  for (const auto& f : forecasts_)
    if ((!reel_id || f.forecast.reel_id == *reel_id) && (!parameter || f.forecast.parameter == *parameter))
      out.push_back(f);
  return out;
}

std::vector<forecast::ChangePointEvent> Pipeline::change_points() const {
  std::lock_guard lock(mutex_);
  return change_points_;
}

alarms::FloodMetrics Pipeline::metrics(Millis t0, Millis t1) const {
  std::vector<AlarmEvent> raw;
  for (const auto& r : store_.query_window({RecordKind::alarm, std::nullopt}, t0, t1))
    raw.push_back(std::get<AlarmEvent>(r));
  std::vector<alarms::AlarmGroup> units;
  {
    std::lock_guard lock(mutex_);
    for (const auto& id : group_order_) units.push_back(groups_.at(id).linked.group);
  }
  return alarms::flood_metrics(raw, units, t0, t1);
}

std::vector<StreamEvent> Pipeline::events_after(std::uint64_t after, std::size_t limit) const {
  std::lock_guard lock(mutex_);
  std::vector<StreamEvent> out;
  for (std::size_t i = static_cast<std::size_t>(std::min<std::uint64_t>(after, events_.size()));
       i < events_.size() && out.size() < limit; ++i)
    out.push_back(events_[i]);
  return out;
}

std::vector<StreamEvent> Pipeline::wait_events(std::uint64_t after, std::chrono::milliseconds timeout,
                                               std::size_t limit) const {
  std::unique_lock lock(mutex_);
  changed_.wait_for(lock, timeout, [&] { return events_.size() > after; });
  std::vector<StreamEvent> out;
  for (std::size_t i = static_cast<std::size_t>(std::min<std::uint64_t>(after, events_.size()));
       i < events_.size() && out.size() < limit; ++i)
    out.push_back(events_[i]);
  return out;
}

std::uint64_t Pipeline::last_seq() const {
  std::lock_guard lock(mutex_);
  return events_.size();
}

Millis Pipeline::now() const {
  std::lock_guard lock(mutex_);
  return now_;
}

}  // namespace millassist::assist
