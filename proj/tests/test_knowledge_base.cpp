#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "kb_fuzz.hpp"
#include "millassist/knowledge_base.hpp"

using namespace millassist;
using namespace millassist::kb;
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

CardContent content(const std::string& code, const std::string& description = "Web tension drops before break") {
  CardContent c;
  c.malfunction.description = description;
  c.malfunction.cause = "felt wear";
  c.malfunction.locations = {"PRESS"};
  c.malfunction.error_codes = {code};
  c.malfunction.situations = {"web_break_precursor"};
  c.solutions = {{"Check felt tension", std::nullopt}, {"Inspect press roll", std::string("press.png")}};
  return c;
}

struct Fixture {
  KnowledgeBase base;
  Fixture() {
    base.add_user("olga", Role::operator_role);
    base.add_user("otto", Role::operator_role);
    base.add_user("erik", Role::editor);
    base.add_user("emma", Role::editor);
    Millis t = 0;
    base.set_clock([t]() mutable { return t += 1000; });
  }

  std::string approved_card(const std::string& code) {
    const auto id = base.create_card(content(code), "olga");
    base.approve(base.submit_draft(id, "olga"), "erik");
    return id;
  }
};

Diff solution_diff(const std::string& text) {
  Diff d;
  d.solutions = std::vector<SolutionStep>{{text, std::nullopt}};
  return d;
}

}  // namespace

TEST_CASE("drafts are invisible until approved", "[knowledge-base]") {
  Fixture f;
  const auto id = f.base.create_card(content("TENSION_LOW"), "olga");
  CHECK(id == "KC-0001");
  CHECK(f.base.card(id).versions.front().status == VersionStatus::draft);
  CHECK(f.base.find_cards({QueryKind::error_code, "TENSION_LOW"}).empty());
  const auto pid = f.base.submit_draft(id, "olga");
  CHECK(f.base.card(id).versions.front().status == VersionStatus::proposed);
  CHECK(f.base.find_cards({QueryKind::error_code, "TENSION_LOW"}).empty());
  CHECK(f.base.approve(pid, "erik") == 1);
  const auto found = f.base.find_cards({QueryKind::error_code, "TENSION_LOW"});
  REQUIRE(found.size() == 1);
  CHECK(found[0].card_id == id);
  CHECK(f.base.card(id).versions.front().editor_of_record == "erik");
  CHECK(f.base.find_cards({QueryKind::location, "PRESS"}).size() == 1);
  CHECK(f.base.find_cards({QueryKind::situation, "web_break_precursor"}).size() == 1);
  CHECK(f.base.find_cards({QueryKind::error_code, "UNKNOWN"}).empty());
}

TEST_CASE("card creation validates content and users", "[knowledge-base]") {
  Fixture f;
  CHECK(code_of([&] { f.base.create_card(content("E", "  "), "olga"); }) == ErrorCode::validation);
  CHECK(code_of([&] { f.base.create_card(content("E"), "mallory"); }) == ErrorCode::authorization);
  CHECK(code_of([&] { f.base.submit_draft("KC-9999", "olga"); }) == ErrorCode::not_found);
}

TEST_CASE("proposals leave approved content untouched until approval", "[knowledge-base]") {
  Fixture f;
  const auto id = f.approved_card("STEAM_LOW");
  const auto before = f.base.version(id, 1);
  const auto pid = f.base.propose_change(id, solution_diff("Open steam valve"), "olga", "valve fix");
  CHECK(f.base.version(id, 1) == before);
  CHECK(f.base.visible_card(id)->content == before.content);
  CHECK(f.base.proposal(pid).state == ProposalState::open);

  CHECK(code_of([&] { f.base.propose_change(id, solution_diff("x"), "mallory"); }) == ErrorCode::authorization);
  CHECK(code_of([&] { f.base.propose_change("KC-0404", solution_diff("x"), "olga"); }) == ErrorCode::not_found);
  CHECK(code_of([&] { f.base.propose_change(id, Diff{}, "olga"); }) == ErrorCode::validation);

  CHECK(f.base.approve(pid, "erik") == 2);
  CHECK(f.base.version(id, 1) == before);
  const auto v2 = f.base.version(id, 2);
  CHECK(v2.status == VersionStatus::approved);
  CHECK(v2.content.solutions.size() == 1);
  CHECK(v2.content.malfunction == before.content.malfunction);
  CHECK(v2.author == "olga");
  CHECK(f.base.visible_card(id)->version == 2);
  CHECK(code_of([&] { f.base.version(id, 3); }) == ErrorCode::not_found);
}

TEST_CASE("approval enforces roles, four eyes, staleness and state", "[knowledge-base]") {
  Fixture f;
  const auto id = f.approved_card("E1");
  const auto p1 = f.base.propose_change(id, solution_diff("first"), "olga");
  const auto p2 = f.base.propose_change(id, solution_diff("second"), "otto");

  CHECK(code_of([&] { f.base.approve(p1, "otto"); }) == ErrorCode::authorization);
  const auto own = f.base.propose_change(id, solution_diff("mine"), "erik");
  CHECK(code_of([&] { f.base.approve(own, "erik"); }) == ErrorCode::authorization);

  f.base.approve(p1, "emma");
  CHECK(code_of([&] { f.base.approve(p2, "emma"); }) == ErrorCode::conflict);
  f.base.rebase(p2, "otto");
  CHECK(f.base.proposal(p2).base_version == 2);
  CHECK(f.base.approve(p2, "emma") == 3);

  const auto p3 = f.base.propose_change(id, solution_diff("third"), "olga");
  f.base.reject(p3, "erik", "not needed");
  CHECK(code_of([&] { f.base.approve(p3, "emma"); }) == ErrorCode::state);
  CHECK(code_of([&] { f.base.reject(p3, "emma"); }) == ErrorCode::state);
  CHECK(code_of([&] { f.base.approve("PR-9999", "emma"); }) == ErrorCode::not_found);
}

TEST_CASE("rejecting a creation proposal returns the card to draft", "[knowledge-base]") {
  Fixture f;
  const auto id = f.base.create_card(content("E"), "olga");
  const auto pid = f.base.submit_draft(id, "olga");
  f.base.reject(pid, "erik");
  CHECK(f.base.card(id).versions.front().status == VersionStatus::draft);
  CHECK(code_of([&] { f.base.propose_change(id, solution_diff("x"), "otto"); }) == ErrorCode::state);
  f.base.approve(f.base.submit_draft(id, "olga"), "emma");
  CHECK(f.base.visible_card(id));
}

TEST_CASE("deprecated cards disappear from queries", "[knowledge-base]") {
  Fixture f;
  const auto id = f.approved_card("E");
  CHECK(code_of([&] { f.base.deprecate(id, "olga"); }) == ErrorCode::authorization);
  f.base.deprecate(id, "erik");
  CHECK(f.base.find_cards({QueryKind::error_code, "E"}).empty());
  CHECK_FALSE(f.base.visible_card(id));
  CHECK(f.base.version(id, 1).status == VersionStatus::approved);
}

TEST_CASE("ranking uses scores then approval recency", "[knowledge-base]") {
  Fixture f;
  const auto a = f.approved_card("E");
  const auto b = f.approved_card("E");
  const auto c = f.approved_card("E");
  auto ids = [](const std::vector<CardView>& v) {
    std::vector<std::string> out;
    for (const auto& x : v) out.push_back(x.card_id);
    return out;
  };
  // Equal scores: most recently approved first.
  CHECK(ids(f.base.find_cards({QueryKind::error_code, "E"})) == std::vector<std::string>{c, b, a});
  // Laplace-smoothed acceptance: a 3/0 -> 0.8, b 0/2 -> 0.25, c none -> 0.5.
  const std::map<std::string, std::pair<int, int>> stats{{a, {3, 0}}, {b, {0, 2}}};
  const Scorer scorer = [&](const std::string& id) {
    const auto it = stats.find(id);
    const auto [yes, no] = it == stats.end() ? std::pair{0, 0} : it->second;
    return (yes + 1.0) / (yes + no + 2.0);
  };
  CHECK(ids(f.base.find_cards({QueryKind::error_code, "E"}, scorer)) == std::vector<std::string>{a, c, b});
}

TEST_CASE("causal links stay acyclic and support navigation", "[knowledge-base]") {
  Fixture f;
  const auto a = f.approved_card("A");
  const auto b = f.approved_card("B");
  const auto c = f.approved_card("C");
  f.base.link_causal(a, b, "erik");
  CHECK(code_of([&] { f.base.link_causal(b, a, "erik"); }) == ErrorCode::cycle);
  f.base.link_causal(b, c, "erik", "b drives c");
  CHECK(f.base.effects_of(a) == std::vector<std::string>{b, c});
  CHECK(f.base.causes_of(c) == std::vector<std::string>{a, b});
  try {
    f.base.link_causal(c, a, "erik");
    FAIL("expected a cycle error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::cycle);
    CHECK(std::string(e.what()).find(c + " -> " + a + " -> " + b + " -> " + c) != std::string::npos);
  }
  CHECK(code_of([&] { f.base.link_causal(a, a, "erik"); }) == ErrorCode::cycle);
  CHECK(code_of([&] { f.base.link_causal(a, c, "olga"); }) == ErrorCode::authorization);
  CHECK(code_of([&] { f.base.link_causal(a, "KC-0404", "erik"); }) == ErrorCode::not_found);
  CHECK(code_of([&] { f.base.link_causal(a, b, "erik"); }) == ErrorCode::conflict);
  CHECK(f.base.acyclic());
}

TEST_CASE("comments are append-only", "[knowledge-base]") {
  Fixture f;
  const auto id = f.approved_card("E");
  f.base.comment(id, "olga", "happened again on night shift");
  f.base.comment(id, "erik", "felt replaced");
  const auto comments = f.base.card(id).comments;
  REQUIRE(comments.size() == 2);
  CHECK(comments[0].text == "happened again on night shift");
  CHECK(comments[0].at < comments[1].at);
  CHECK(code_of([&] { f.base.comment(id, "olga", ""); }) == ErrorCode::validation);
  CHECK(f.base.version(id, 1).status == VersionStatus::approved);
}

TEST_CASE("persistence through a content-addressed directory and archive", "[knowledge-base]") {
  Fixture f;
  const auto a = f.approved_card("A");
  const auto b = f.approved_card("B");
  f.base.approve(f.base.propose_change(a, solution_diff("new"), "olga"), "erik");
  f.base.link_causal(a, b, "erik");
  f.base.comment(b, "otto", "seen twice");
  f.base.propose_change(b, solution_diff("open"), "otto");

  const auto dir = fs::temp_directory_path() / ("millassist-kb-" + std::to_string(Rng(std::random_device{}()).next_u64()));
  f.base.save(dir);
  std::size_t objects = 0;
  for (const auto& entry : fs::directory_iterator(dir / "objects")) objects += entry.path().extension() == ".json";
  CHECK(objects == 3);

  KnowledgeBase loaded;
  loaded.load(dir);
  CHECK(loaded.to_json() == f.base.to_json());
  CHECK(loaded.verify_integrity());

  // Tampering with an object is detected.
  for (const auto& entry : fs::directory_iterator(dir / "objects")) {
    auto text = [&] {
      std::ifstream in(entry.path());
      return std::string(std::istreambuf_iterator<char>(in), {});
    }();
    auto pos = text.find("felt wear");
    text.replace(pos, 9, "felt tear");
    std::ofstream(entry.path(), std::ios::trunc) << text;
    break;
  }
  KnowledgeBase broken;
  CHECK(code_of([&] { broken.load(dir); }) == ErrorCode::validation);
  fs::remove_all(dir);

  std::stringstream archive;
  f.base.export_archive(archive);
  KnowledgeBase imported;
  imported.import_archive(archive);
  CHECK(imported.to_json() == f.base.to_json());
  // Counters survive: the next card id continues the sequence.
  imported.add_user("x", Role::operator_role);
  CHECK(imported.create_card(content("Z"), "x") == "KC-0003");

  auto doc = f.base.to_json();
  doc["links"].push_back({{"from", b}, {"to", a}, {"note", ""}});
  KnowledgeBase cyclic;
  CHECK(code_of([&] { cyclic.load_json(doc); }) == ErrorCode::cycle);
}

TEST_CASE("random workflows preserve visibility and immutability", "[knowledge-base][property]") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    testing::KbFuzz fuzz(seed);
    for (int i = 0; i < 400; ++i) {
      const auto before = fuzz.approved_snapshot();
      fuzz.step();
      const auto after = fuzz.approved_snapshot();
      for (const auto& [key, value] : before) {
        const auto it = after.find(key);
        REQUIRE(it != after.end());
        REQUIRE(it->second.first == value.first);
        REQUIRE(it->second.second == value.second);
        REQUIRE(content_hash(it->second.first) == value.second);
      }
      const auto violation = fuzz.visibility_violation();
      INFO(violation);
      REQUIRE(violation.empty());
      for (const auto& id : fuzz.base.card_ids()) {
        const auto card = fuzz.base.card(id);
        for (std::size_t v = 0; v < card.versions.size(); ++v) REQUIRE(card.versions[v].version == int(v) + 1);
      }
    }
    CHECK(fuzz.base.verify_integrity());
    CHECK(fuzz.self_approvals_rejected == fuzz.self_approvals_attempted);
  }
}

TEST_CASE("random link attempts never create a cycle", "[knowledge-base][property]") {
  Fixture f;
  std::vector<std::string> ids;
  for (int i = 0; i < 25; ++i) ids.push_back(f.approved_card("E" + std::to_string(i)));
  std::set<std::pair<std::string, std::string>> edges;
  // Independent reachability oracle over the accepted edges.
  std::function<bool(const std::string&, const std::string&, std::set<std::string>&)> reaches =
      [&](const std::string& from, const std::string& to, std::set<std::string>& seen) {
        if (from == to) return true;
        if (!seen.insert(from).second) return false;
        for (const auto& [x, y] : edges)
          if (x == from && reaches(y, to, seen)) return true;
        return false;
      };
  Rng rng(5);
  std::size_t accepted = 0, cycles = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto& a = ids[static_cast<std::size_t>(rng.uniform_int(0, 24))];
    const auto& b = ids[static_cast<std::size_t>(rng.uniform_int(0, 24))];
    std::set<std::string> seen;
    const bool would_cycle = reaches(b, a, seen);
    try {
      f.base.link_causal(a, b, "erik");
      REQUIRE_FALSE(would_cycle);
      edges.insert({a, b});
      ++accepted;
    } catch (const Error& e) {
      if (e.code() == ErrorCode::cycle) {
        REQUIRE(would_cycle);
        ++cycles;
      } else {
        REQUIRE(e.code() == ErrorCode::conflict);
        REQUIRE(edges.count({a, b}));
      }
    }
    REQUIRE(f.base.acyclic());
  }
  CHECK(accepted > 0);
  CHECK(cycles > 0);
}
