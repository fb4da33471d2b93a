#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "millassist/common.hpp"
#include "millassist/datastore.hpp"
#include "millassist/forest.hpp"
#include "millassist/knowledge_base.hpp"
#include "millassist/plant_sim.hpp"

namespace millassist::assist {

inline constexpr const char* kUnknownSituation = "unknown";
inline constexpr const char* kNominalSituation = "nominal";

// --- situation recognition -----------------------------------------------------

struct SituationExample {
  store::FeatureVector features;
  std::string label;
};

/// Trailing-window mean and standard deviation per tag.
store::FeatureSpec situation_feature_spec(const std::vector<std::string>& tags, double trailing_s = 600.0);

/// Process images sampled every `stride_s` from a store filled with `config`'s
/// scenario. An image is labelled with the fault kind whose active window
/// covers its whole trailing window, or `nominal` when no fault touches it;
/// mixed windows are skipped. Chattering sensors do not change the process and
/// are not labels.
std::vector<SituationExample> situation_examples(const store::DataStore& store, const sim::ScenarioConfig& config,
                                                 const store::FeatureSpec& spec, double stride_s);

struct SituationResult {
  std::string label = kUnknownSituation;
  double confidence = 0.0;  ///< vote fraction of the winning label
};

nlohmann::json to_json(const SituationResult& r);

/// Randomized-tree classifier over process images. Untrained instances
/// answer `unknown` with confidence 0.
class SituationClassifier {
 public:
  SituationClassifier() = default;

  /// Throws Error(training) without examples or with a single label.
  static SituationClassifier train(const std::vector<SituationExample>& examples, const store::FeatureSpec& spec,
                                   const forecast::Hyperparams& hyperparams = {});

  /// Image names must match the training spec, else Error(contract).
  SituationResult classify(const store::FeatureVector& image, double threshold = 0.5) const;

  bool trained() const { return forest_.has_value(); }
  const store::FeatureSpec& spec() const { return spec_; }
  const std::vector<std::string>& labels() const { return labels_; }

  nlohmann::json to_json() const;
  static SituationClassifier from_json(const nlohmann::json& j);

 private:
  store::FeatureSpec spec_;
  std::vector<std::string> names_;
  std::vector<std::string> labels_;
  std::optional<forecast::Forest> forest_;
};

// --- triggers and recommendations ------------------------------------------------

enum class TriggerKind { pcs_alarm, web_break, recognized_situation, quality_deviation };
std::string_view to_string(TriggerKind k);
TriggerKind parse_trigger_kind(std::string_view s);

struct TriggerEvent {
  TriggerKind kind = TriggerKind::pcs_alarm;
  std::string source_ref;  ///< alarm group id, situation label or forecast id
  Millis timestamp = 0;
  std::string location;
  std::optional<std::string> error_code;  ///< pcs_alarm (required), web_break
  std::optional<std::string> situation;   ///< recognized_situation (required); overrides classification

  bool operator==(const TriggerEvent&) const = default;
};

/// Throws Error(validation) when the fields do not fit the kind.
void validate(const TriggerEvent& e);
nlohmann::json to_json(const TriggerEvent& e);
TriggerEvent trigger_from_json(const nlohmann::json& j);

struct Candidate {
  std::string card_id;
  int version = 0;
  double score = 0.0;

  bool operator==(const Candidate&) const = default;
};

enum class Disposition { open, acted, dismissed };
std::string_view to_string(Disposition d);

struct Recommendation {
  std::string recommendation_id;
  TriggerEvent trigger;
  std::string situation_label = kUnknownSituation;
  double situation_confidence = 0.0;
  std::vector<Candidate> candidates;  ///< scores non-increasing
  Millis created_at = 0;
  Disposition disposition = Disposition::open;

  bool operator==(const Recommendation&) const = default;
};

nlohmann::json to_json(const Recommendation& r);

enum class Verdict { confirm, reject, correct, supplement };
std::string_view to_string(Verdict v);
Verdict parse_verdict(std::string_view s);

struct Feedback {
  std::string recommendation_id;
  std::string card_id;
  Verdict verdict = Verdict::confirm;
  std::optional<std::string> text;
  std::string author;
  Millis timestamp = 0;
};

nlohmann::json to_json(const Feedback& f);
Feedback feedback_from_json(const nlohmann::json& j);

// --- ranking -------------------------------------------------------------------

struct FeedbackCounts {
  std::uint64_t confirms = 0;
  std::uint64_t rejects = 0;
  std::uint64_t corrections = 0;
  std::uint64_t supplements = 0;

  bool operator==(const FeedbackCounts&) const = default;
};

/// (card_id, situation label) -> counts.
using StatsKey = std::pair<std::string, std::string>;
using FeedbackStats = std::map<StatsKey, FeedbackCounts>;

nlohmann::json to_json(const FeedbackStats& stats);

/// (confirms + a) / (confirms + rejects + a + b).
double smoothed_score(std::uint64_t confirms, std::uint64_t rejects, double a = 1.0, double b = 1.0);

/// Score descending, then most recently approved, then card id.
std::vector<Candidate> rank_candidates(const std::vector<kb::CardView>& cards, const std::string& situation,
                                       const FeedbackStats& stats);

/// Knowledge queries a trigger asks: location only for quality deviations,
/// otherwise error code, situation (when recognized) and location.
std::vector<kb::Query> candidate_queries(const TriggerEvent& e, const std::string& situation);

// --- engine --------------------------------------------------------------------

struct EngineConfig {
  double confidence_threshold = 0.5;
};

struct FeedbackOutcome {
  Recommendation recommendation;
  FeedbackCounts counts;  ///< for (card, situation) after the update
  double score = 0.0;     ///< the card's new score in that situation
  std::optional<std::string> proposal_id;
};

nlohmann::json to_json(const FeedbackOutcome& o);

/// Turns triggers into ranked recommendations and learns from feedback by
/// counting. It holds no reference to machine settings; its only outputs are
/// recommendations, knowledge-base proposals and the audit log.
class AssistEngine {
 public:
  explicit AssistEngine(kb::KnowledgeBase& base, EngineConfig config = {});

  AssistEngine(const AssistEngine&) = delete;
  AssistEngine& operator=(const AssistEngine&) = delete;

  void set_classifier(SituationClassifier classifier);
  const SituationClassifier& classifier() const { return classifier_; }
  SituationResult classify_situation(const store::FeatureVector& image) const;

  /// Also appends every audit line to `sink` (not owned) from now on.
  void set_audit_sink(std::ostream* sink);

  /// `image` is the process image at the trigger moment, aligned with the
  /// classifier's spec. Throws Error(validation) for an invalid event.
  Recommendation on_trigger(const TriggerEvent& event, const std::optional<store::FeatureVector>& image = {});

  /// Throws not_found (unknown recommendation), validation (card not a
  /// candidate, missing text) or state (dismissed recommendation).
  /// Correct and supplement draft a change proposal by the feedback author.
  FeedbackOutcome record_feedback(const Feedback& feedback);

  Recommendation recommendation(const std::string& id) const;
  std::vector<Recommendation> recommendations() const;
  std::vector<Feedback> feedback_for(const std::string& recommendation_id) const;

  FeedbackStats stats() const;
  FeedbackCounts counts(const std::string& card_id, const std::string& situation) const;
  double score(const std::string& card_id, const std::string& situation) const;

  std::vector<std::string> audit_lines() const;

 private:
  void audit_locked(nlohmann::json record);

  kb::KnowledgeBase& base_;
  EngineConfig config_;
  SituationClassifier classifier_;
  mutable std::mutex mutex_;
  std::ostream* sink_ = nullptr;
  std::map<std::string, Recommendation> recommendations_;
  std::map<std::string, std::vector<Feedback>> feedback_;
  FeedbackStats stats_;
  std::vector<std::string> audit_;
  std::uint64_t next_id_ = 1;
};

/// Rebuilds the feedback statistics from an audit log.
FeedbackStats replay_stats(std::istream& audit);

}  // namespace millassist::assist
