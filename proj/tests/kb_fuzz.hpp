#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "millassist/knowledge_base.hpp"

namespace millassist::testing {

/// Random knowledge-base workflow driver. After every action the checks
/// below are evaluated; each returns the first violation found, or "".
struct KbFuzz {
  kb::KnowledgeBase base;
  Rng rng;
  std::vector<std::string> operators{"op1", "op2", "op3"};
  std::vector<std::string> editors{"ed1", "ed2"};
  std::vector<std::string> codes{"E1", "E2", "E3", "E4"};
  std::vector<std::string> locations{"PRESS", "DRYER", "STOCK"};
  std::size_t self_approvals_attempted = 0;
  std::size_t self_approvals_rejected = 0;

  explicit KbFuzz(std::uint64_t seed) : rng(seed) {
    for (const auto& u : operators) base.add_user(u, kb::Role::operator_role);
    for (const auto& u : editors) base.add_user(u, kb::Role::editor);
    base.set_clock([] { return Millis{0}; });
  }

  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(v.size()) - 1))];
  }

  std::string any_user() { return rng.bernoulli(0.5) ? pick(operators) : pick(editors); }

  kb::CardContent random_content() {
    kb::CardContent c;
    c.malfunction.description = "malfunction " + std::to_string(rng.uniform_int(0, 999));
    c.malfunction.error_codes = {pick(codes)};
    c.malfunction.locations = {pick(locations)};
    c.solutions = {{"step " + std::to_string(rng.uniform_int(0, 999)), std::nullopt}};
    return c;
  }

  /// Snapshot of every approved version's (content, hash).
  std::map<std::pair<std::string, int>, std::pair<kb::CardContent, std::string>> approved_snapshot() const {
    std::map<std::pair<std::string, int>, std::pair<kb::CardContent, std::string>> out;
    for (const auto& id : base.card_ids())
      for (const auto& v : base.card(id).versions)
        if (v.status == kb::VersionStatus::approved) out[{id, v.version}] = {v.content, v.content_hash};
    return out;
  }

  /// One random action; errors thrown by the knowledge base are expected and swallowed.
  void step() {
    const auto ids = base.card_ids();
    const auto open = base.proposals(kb::ProposalState::open);
    try {
      switch (rng.uniform_int(0, 7)) {
        case 0:
          base.create_card(random_content(), any_user());
          break;
        case 1:
          if (!ids.empty()) base.submit_draft(pick(ids), any_user());
          break;
        case 2:
          if (!ids.empty()) {
            kb::Diff d;
            if (rng.bernoulli(0.5)) d.solutions = random_content().solutions;
            else d.malfunction = random_content().malfunction;
            base.propose_change(pick(ids), d, any_user(), "fuzz");
          }
          break;
        case 3:
        case 4:
          if (!open.empty()) {
            const auto& p = pick(open);
            if (rng.bernoulli(0.3)) {
              ++self_approvals_attempted;
              try {
                base.approve(p.proposal_id, p.proposer);
              } catch (const Error& e) {
                if (e.code() == ErrorCode::authorization) ++self_approvals_rejected;
                throw;
              }
            } else {
              base.approve(p.proposal_id, pick(editors));
            }
          }
          break;
        case 5:
          if (!open.empty()) base.reject(pick(open).proposal_id, pick(editors));
          break;
        case 6:
          if (!open.empty()) base.rebase(pick(open).proposal_id, any_user());
          break;
        case 7:
          if (!ids.empty() && rng.bernoulli(0.1)) base.deprecate(pick(ids), pick(editors));
          else if (!ids.empty()) base.comment(pick(ids), any_user(), "note");
          break;
      }
    } catch (const Error&) {
    }
  }

  /// Every query result is the latest approved version of a non-deprecated card.
  std::string visibility_violation() const {
    std::vector<kb::Query> queries;
    for (const auto& c : codes) queries.push_back({kb::QueryKind::error_code, c});
    for (const auto& l : locations) queries.push_back({kb::QueryKind::location, l});
    for (const auto& q : queries) {
      for (const auto& view : base.find_cards(q)) {
        const auto card = base.card(view.card_id);
        const auto* approved = card.approved();
        if (card.deprecated) return view.card_id + " is deprecated but visible";
        if (!approved) return view.card_id + " has no approved version but is visible";
        if (approved->version != view.version) return view.card_id + " shows a version that is not the latest approved";
        if (!(approved->content == view.content)) return view.card_id + " shows unapproved content";
      }
    }
    for (const auto& id : base.card_ids()) {
      const auto card = base.card(id);
      const auto view = base.visible_card(id);
      if (view && (card.deprecated || !card.approved())) return id + " visible without approval";
    }
    return {};
  }
};

}  // namespace millassist::testing
