#include <gtest/gtest.h>

#include <cmath>

#include "sftkit/corpus.hpp"
#include "test_support.hpp"

using namespace sftkit;
using testing_support::make_record;
using testing_support::TempDir;

namespace {

std::string data_path(const char* name) { return std::string(SFTKIT_TEST_DATA_DIR) + "/" + name; }

std::string expect_validation_field(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ValidationError& e) {
    return e.field();
  }
  ADD_FAILURE() << "no ValidationError";
  return {};
}

}  // namespace

TEST(Records, NormalizeTripleJoinsInstructionAndInput) {
  auto turns = normalize_triple("Summarize.", "Long text.", "Short.");
  ASSERT_EQ(turns.size(), 2u);
  EXPECT_EQ(turns[0], (Message{Role::user, "Summarize.\n\nLong text."}));
  EXPECT_EQ(turns[1], (Message{Role::assistant, "Short."}));
  EXPECT_EQ(normalize_triple("Hi", "", "Hello")[0].text, "Hi");
}

TEST(Records, JsonRoundTrip) {
  auto r = make_record("d1", "प्रश्न?", "उत्तर।", "dolly", "hi");
  r.lineage = "d0";
  const auto back = record_from_json(json::parse(to_record_line(r)));
  EXPECT_EQ(back, r);
}

TEST(Records, TripleLineParses) {
  auto r = record_from_json(json::parse(
      R"({"id":"f1","source_dataset":"flan_v2","language":"en","instruction":"Add","input":"2+2","output":"4"})"));
  EXPECT_EQ(r.source_dataset.kind(), SourceDataset::Kind::flan_v2);
  EXPECT_EQ(r.turns[0].text, "Add\n\n2+2");
}

TEST(Records, ValidationNamesField) {
  EXPECT_EQ(expect_validation_field([] { record_from_json(json::parse(R"({"source_dataset":"x","language":"en"})")); }),
            "id");
  EXPECT_EQ(expect_validation_field([] {
              record_from_json(json::parse(R"({"id":"a","source_dataset":"x","language":"english","turns":[]})"));
            }),
            "language");
  EXPECT_EQ(expect_validation_field([] {
              record_from_json(json::parse(
                  R"({"id":"a","source_dataset":"x","language":"en","turns":[{"role":"user","text":"q"},{"role":"user","text":"q"}]})"));
            }),
            "turns[1].role");
  EXPECT_EQ(expect_validation_field([] {
              record_from_json(json::parse(
                  R"({"id":"a","source_dataset":"x","language":"en","turns":[{"role":"user","text":"q"}]})"));
            }),
            "turns");
  EXPECT_EQ(expect_validation_field([] {
              record_from_json(json::parse(
                  R"({"id":"a","source_dataset":"x","language":"en","turns":[{"role":"user"},{"role":"assistant","text":"a"}]})"));
            }),
            "turns[0].text");
}

TEST(Records, SystemTurnAllowedFirst) {
  auto r = make_record("s", "q", "a");
  r.turns.insert(r.turns.begin(), Message{Role::system, "be brief"});
  EXPECT_NO_THROW(validate(r));
  r.turns.push_back({Role::system, "again"});
  EXPECT_THROW(validate(r), ValidationError);
}

TEST(Records, MalformedUtf8Rejected) {
  auto r = make_record("u", "ok", std::string("bad \xC3("));
  EXPECT_EQ(expect_validation_field([&] { validate(r); }), "turns[1].text");
}

TEST(Records, LanguageTags) {
  EXPECT_TRUE(valid_language_tag("hi"));
  EXPECT_TRUE(valid_language_tag("en-US"));
  EXPECT_TRUE(valid_language_tag("hi-Deva"));
  EXPECT_FALSE(valid_language_tag(""));
  EXPECT_FALSE(valid_language_tag("h"));
  EXPECT_FALSE(valid_language_tag("hi_IN"));
}

TEST(SourceDatasets, KnownAndOther) {
  EXPECT_EQ(SourceDataset::parse("lmsys_chat").display_name(), "LMSYS-Chat");
  auto o = SourceDataset::parse("my_corpus");
  EXPECT_EQ(o.kind(), SourceDataset::Kind::other);
  EXPECT_EQ(o.name(), "my_corpus");
  EXPECT_LT(SourceDataset::parse("flan_v2"), SourceDataset::parse("anudesh"));
}

TEST(Ingest, RecordLinesFile) {
  TempDir dir;
  write_records(dir / "r.jsonl", {make_record("a", "q1", "a1"), make_record("b", "q2", "a2", "flan_v2")});
  auto got = ingest(dir / "r.jsonl", IngestFormat::record_lines);
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[1].source_dataset.kind(), SourceDataset::Kind::flan_v2);
}

TEST(Ingest, ReportsEveryBadLineAndDuplicates) {
  TempDir dir;
  const std::string good = to_record_line(make_record("a", "q", "a"));
  write_file(dir / "r.jsonl", good + "\n{not json\n" + good + "\n" + R"({"id":"z"})" + "\n");
  try {
    ingest(dir / "r.jsonl", IngestFormat::record_lines);
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3 invalid entries"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 2: invalid JSON"), std::string::npos);
    EXPECT_NE(msg.find("line 3: duplicate id 'a' (first seen on line 1)"), std::string::npos);
    EXPECT_NE(msg.find("line 4:"), std::string::npos);
    EXPECT_EQ(e.field(), "id");
  }
}

TEST(Ingest, ConversationTreeExpandsLeafPaths) {
  TempDir dir;
  const char* tree = R"({"id":"t1","source_dataset":"open_assistant","language":"en","license":"apache-2.0",
    "root":{"role":"user","text":"Q","children":[
      {"role":"assistant","text":"A1"},
      {"role":"assistant","text":"A2","children":[
        {"role":"user","text":"Q2","children":[{"role":"assistant","text":"A3"}]},
        {"role":"user","text":"dangling"}]}]}})";
  std::string line = json::parse(tree).dump();
  write_file(dir / "t.jsonl", line + "\n");
  auto got = ingest(dir / "t.jsonl", IngestFormat::conversation_tree);
  ASSERT_EQ(got.size(), 3u);
  EXPECT_EQ(got[0].id, "t1/0");
  EXPECT_EQ(got[0].turns.back().text, "A1");
  EXPECT_EQ(got[1].turns.size(), 4u);
  EXPECT_EQ(got[1].turns.back().text, "A3");
  // trailing user turn trimmed
  EXPECT_EQ(got[2].turns.size(), 2u);
  EXPECT_EQ(got[2].turns.back().text, "A2");
  EXPECT_EQ(got[2].license, "apache-2.0");
}

TEST(Mixture, CapsPerDatasetAndLanguage) {
  std::vector<InstructionRecord> recs;
  for (int i = 0; i < 30; ++i) recs.push_back(make_record("d" + std::to_string(i), "q", "a", "dolly"));
  for (int i = 0; i < 30; ++i) recs.push_back(make_record("h" + std::to_string(i), "q", "a", "dolly", "hi"));
  for (int i = 0; i < 5; ++i) recs.push_back(make_record("f" + std::to_string(i), "q", "a", "flan_v2"));
  MixturePlan plan{{{"dolly", 10}, {"flan_v2", 100}}, 0, 3};
  auto out = sample_mixture(recs, plan);
  ASSERT_EQ(out.size(), 25u);
  std::map<std::string, int> by_lang;
  for (const auto& r : out) {
    if (r.source_dataset.name() == "dolly") ++by_lang[r.language];
  }
  EXPECT_EQ(by_lang["en"], 10);
  EXPECT_EQ(by_lang["hi"], 10);
  // ordered by dataset kind, then original position
  EXPECT_EQ(out.front().source_dataset.name(), "flan_v2");
  EXPECT_EQ(sample_mixture(recs, plan), out);
  plan.seed = 4;
  EXPECT_NE(sample_mixture(recs, plan), out);
}

TEST(Mixture, AddingDatasetDoesNotPerturbOthers) {
  std::vector<InstructionRecord> recs;
  for (int i = 0; i < 40; ++i) recs.push_back(make_record("d" + std::to_string(i), "q", "a", "dolly"));
  MixturePlan plan{{{"dolly", 7}, {"wikihow", 3}}, 0, 11};
  auto a = sample_mixture(recs, plan);
  for (int i = 0; i < 9; ++i) recs.push_back(make_record("w" + std::to_string(i), "q", "a", "wikihow"));
  auto b = sample_mixture(recs, plan);
  b.erase(std::remove_if(b.begin(), b.end(), [](const auto& r) { return r.source_dataset.name() == "wikihow"; }),
          b.end());
  EXPECT_EQ(a, b);
}

TEST(Mixture, BudgetAndMissingCap) {
  std::vector<InstructionRecord> recs = {make_record("a", "q", "a"), make_record("b", "q", "a")};
  EXPECT_EQ(expect_validation_field([&] { sample_mixture(recs, MixturePlan{{{"dolly", 2}}, 1, 0}); }),
            "total_budget");
  EXPECT_EQ(expect_validation_field([&] { sample_mixture(recs, MixturePlan{{{"flan_v2", 2}}, 0, 0}); }),
            "caps.dolly");
  auto p = mixture_plan_from_json(json::parse(R"({"caps":{"dolly":3},"total_budget":10,"seed":5})"));
  EXPECT_EQ(p.caps.at("dolly"), 3u);
  EXPECT_EQ(expect_validation_field([] { mixture_plan_from_json(json::parse(R"({"caps":{"dolly":-1},"seed":1})")); }),
            "caps.dolly");
}

// Retention oracle: one correctly rounded long double division (exact on
// half-way cases), then half-up to hundredths of a percent.
static std::string oracle_retention(std::size_t filtered, std::size_t unfiltered) {
  const long double q = static_cast<long double>(10000ULL * filtered) / unfiltered;
  const auto hundredths = static_cast<unsigned long long>(std::floor(q + 0.5L));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%llu.%02llu%%", hundredths / 100, hundredths % 100);
  return buf;
}

TEST(Manifest, PublishedRetentionsFromFixture) {
  auto m = DatasetManifest::from_json(json::parse(read_file(data_path("retention_manifest.json"))));
  const auto* flan = m.find(SourceDataset(SourceDataset::Kind::flan_v2), "hi");
  const auto* lmsys = m.find(SourceDataset(SourceDataset::Kind::lmsys_chat), "hi");
  ASSERT_TRUE(flan && lmsys);
  EXPECT_EQ(flan->retention_percent(), "96.69%");
  EXPECT_EQ(lmsys->retention_percent(), "74.84%");
  for (const auto& e : m.entries()) EXPECT_EQ(e.retention_percent(), oracle_retention(e.filtered, e.unfiltered));
  EXPECT_EQ(m.total_unfiltered(), 354287u);
  EXPECT_EQ(m.total_filtered(), 335510u);
  const auto table = m.render_table();
  EXPECT_NE(table.find("FLAN-v2"), std::string::npos);
  EXPECT_NE(table.find("96.69%"), std::string::npos);
}

TEST(Manifest, ReportFromRecordsWithLineage) {
  // FLAN-v2 hi: 67,463 -> 65,228; LMSYS-Chat hi: 50,000 -> 37,422
  std::vector<InstructionRecord> before, after;
  auto add = [&](const char* ds, std::size_t n, std::size_t kept) {
    for (std::size_t i = 0; i < n; ++i) {
      InstructionRecord r = make_record(std::string(ds) + std::to_string(i), "q", "a", ds, "hi");
      if (i < kept) {
        InstructionRecord t = r;
        t.id += "#f";
        t.lineage = r.id;
        after.push_back(std::move(t));
      }
      before.push_back(std::move(r));
    }
  };
  add("flan_v2", 67463, 65228);
  add("lmsys_chat", 50000, 37422);
  auto m = manifest_report(before, after);
  ASSERT_EQ(m.entries().size(), 2u);
  EXPECT_EQ(m.entries()[0].retention_percent(), "96.69%");
  EXPECT_EQ(m.entries()[1].retention_percent(), "74.84%");

  after.push_back(make_record("orphan", "q", "a", "flan_v2", "hi"));
  EXPECT_EQ(expect_validation_field([&] { manifest_report(before, after); }), "lineage");
}

TEST(Manifest, RetentionRoundingProperty) {
  Rng rng(99);
  for (int i = 0; i < 2000; ++i) {
    const std::size_t u = 1 + rng.below(200000);
    const std::size_t f = rng.below(u + 1);
    ManifestEntry e{SourceDataset::parse("dolly"), "hi", u, f};
    EXPECT_EQ(e.retention_percent(), oracle_retention(f, u)) << f << "/" << u;
  }
  EXPECT_EQ((ManifestEntry{SourceDataset::parse("dolly"), "hi", 0, 0}.retention_percent()), "n/a");
  DatasetManifest m;
  EXPECT_THROW(m.add({SourceDataset::parse("dolly"), "hi", 1, 2}), ValidationError);
}

TEST(Manifest, JsonRoundTrip) {
  auto m = DatasetManifest::from_json(json::parse(read_file(data_path("retention_manifest.json"))));
  auto again = DatasetManifest::from_json(json::parse(m.to_json().dump()));
  EXPECT_EQ(again.entries(), m.entries());
}
