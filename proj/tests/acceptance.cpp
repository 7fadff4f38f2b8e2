// Acceptance run: one PASS/FAIL line per criterion. Tolerances and time
// limits are fixed below; the process exits non-zero when any line fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "eval_fixtures.hpp"
#include "metric_cases.hpp"
#include "oracles.hpp"
#include "sftkit/checkpoint.hpp"
#include "sftkit/eval_harness.hpp"
#include "sftkit/filter.hpp"
#include "sftkit/humaneval_server.hpp"
#include "sftkit/metrics.hpp"
#include "sftkit/pipeline.hpp"
#include "sftkit/sft.hpp"
#include "test_support.hpp"

using namespace sftkit;
using testing_support::TempDir;

namespace {

constexpr double kChrfTolerance = 0.01;
constexpr double kRougeTolerance = 0.01;  // hand values carry 4 decimals
constexpr double kTokenF1Tolerance = 1e-4;
constexpr double kMetricSeconds = 5;
constexpr double kFilterSeconds = 10;
constexpr double kCheckpointSeconds = 5;
constexpr double kSerializeSeconds = 30;
constexpr double kNoLimit = 0;

const std::string kData = SFTKIT_TEST_DATA_DIR;

// Collects failures; a criterion passes when none were recorded.
struct Check {
  std::vector<std::string> failures;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

struct Criterion {
  std::string name;
  double limit_seconds;
  std::function<void(Check&)> body;
};

std::string fmt(double v, int digits = 4) { return format_fixed(v, digits); }

// ---------------------------------------------------------------------------

void metric_oracles(Check& c) {
  const auto fixtures = oracle::load_chrf_fixtures(kData + "/chrf_fixtures.jsonl");
  c.expect(fixtures.size() >= 50, "only " + std::to_string(fixtures.size()) + " chrF fixtures");
  std::size_t devanagari = 0;
  for (const auto& f : fixtures) {
    const double got = chrf_pp(f.hyp, f.ref).value, want = oracle::chrf_pp(f.hyp, f.ref);
    c.expect(std::abs(got - want) <= kChrfTolerance, "chrF " + fmt(got) + " vs oracle " + fmt(want) + " on '" + f.hyp + "'");
    for (char32_t cp : oracle::decode(f.hyp + f.ref)) {
      if (cp >= 0x0900 && cp <= 0x097F) {
        ++devanagari;
        break;
      }
    }
  }
  c.expect(devanagari > 0, "no Devanagari chrF fixture");

  std::size_t rouge = 0, f1 = 0;
  for (const auto& k : metric_cases::kRouge) {
    ++rouge;
    const double got = rouge_l(k.hyp, k.ref).value;
    c.expect(std::abs(got - k.expected) <= kRougeTolerance, std::string("ROUGE-L '") + k.hyp + "' = " + fmt(got));
    c.expect(std::abs(got - oracle::rouge_l(k.hyp, k.ref)) <= 1e-9, std::string("ROUGE-L oracle '") + k.hyp + "'");
  }
  for (const auto& k : metric_cases::kTokenF1) {
    ++f1;
    const double got = token_f1(k.pred, k.gold).value;
    c.expect(std::abs(got - k.expected) <= kTokenF1Tolerance, std::string("token F1 '") + k.pred + "' = " + fmt(got));
  }
  c.expect(rouge >= 20 && f1 >= 20, "fewer than 20 ROUGE-L or token F1 cases");
  c.expect(format_fixed(rouge_l("a b c d", "a c d").value, 2) == "85.71", "LCS example is not 85.71");
  c.expect(format_fixed(token_f1("a b c", "b c d").value, 4) == "0.6667", "bag overlap example is not 0.6667");
}

// ---------------------------------------------------------------------------

TranslationPair pair_of(const InstructionRecord& src, std::string user, std::string assistant) {
  InstructionRecord t = src;
  t.id = src.id + "#hi";
  t.language = "hi";
  t.lineage = src.id;
  t.turns[0].text = std::move(user);
  t.turns[1].text = std::move(assistant);
  return {src, t};
}

void filter_semantics(Check& c) {
  mock::IdentityMt identity;
  const auto base = testing_support::make_record("r", "q", "a");
  std::vector<TranslationPair> pairs = {pair_of(base, "x", "score:50.0"), pair_of(base, "x", "score:49.9")};
  pairs[0].translated.id += "0";
  pairs[1].translated.id += "1";
  FilterOptions o;
  o.threshold = kDefaultRoundtripThreshold;
  // the back-translated text carries its own score after the first newline
  o.scorer = [](std::string_view hyp, std::string_view) {
    const auto body = hyp.substr(hyp.find('\n') + 1);
    return std::stod(std::string(body.substr(body.find(':') + 1)));
  };
  const auto res = roundtrip_filter(pairs, identity, o);
  c.expect(kDefaultRoundtripThreshold == 50.0, "default threshold is not 50");
  c.expect(res.report.decisions.size() == 2 && res.report.decisions[0].kept, "score 50.0 was not kept");
  c.expect(res.report.decisions.size() == 2 && !res.report.decisions[1].kept, "score 49.9 was kept");

  // monotonicity over 1000 synthetic pairs through a lossy mock MT
  mock::FunctionMt lossy("mock:lossy", [](const std::string& s, const std::string&, const std::string&) {
    std::string out;
    for (const auto& w : split_whitespace(s)) {
      if (fnv1a(w) % 1000 < 350) continue;
      out += (out.empty() ? "" : " ") + w;
    }
    return out;
  });
  static const char* kWords[] = {"river", "mountain", "city", "bright", "slowly", "market", "paper", "green",
                                 "water", "quick",    "लोग",  "घर",     "पानी",   "किताब",  "देश",   "समय"};
  Rng rng(2024);
  std::vector<TranslationPair> many;
  for (int i = 0; i < 1000; ++i) {
    std::string q, a;
    for (std::size_t k = 0, n = 3 + rng.below(8); k < n; ++k) {
      q += std::string(k ? " " : "") + kWords[rng.below(16)] + std::to_string(rng.below(9));
    }
    for (std::size_t k = 0, n = 3 + rng.below(12); k < n; ++k) {
      a += std::string(k ? " " : "") + kWords[rng.below(16)] + std::to_string(rng.below(9));
    }
    many.push_back(pair_of(testing_support::make_record("p" + std::to_string(i), q, a), q, a));
  }
  ContentCache cache;
  std::set<std::string> previous;
  bool first = true;
  std::size_t at_50 = 0;
  for (double t : {0.0, 10.0, 25.0, 40.0, 50.0, 60.0, 75.0, 90.0, 100.0}) {
    FilterOptions fo;
    fo.threshold = t;
    fo.cache = &cache;
    std::set<std::string> kept;
    for (const auto& r : roundtrip_filter(many, lossy, fo).kept) kept.insert(r.id);
    if (!first) {
      c.expect(std::includes(previous.begin(), previous.end(), kept.begin(), kept.end()),
               "kept set grew when the threshold rose to " + fmt(t, 1));
    }
    if (t == 50.0) at_50 = kept.size();
    previous = std::move(kept);
    first = false;
  }
  c.expect(at_50 > 0 && at_50 < 1000, "lossy MT gave no spread at threshold 50");
}

// ---------------------------------------------------------------------------

void retention_arithmetic(Check& c) {
  const auto fixture = DatasetManifest::from_json(json::parse(read_file(kData + "/retention_manifest.json")));
  // Records seeded with the published counts for two of the rows.
  std::vector<InstructionRecord> before, after;
  for (const auto& e : fixture.entries()) {
    if (e.language != "hi") continue;
    if (e.dataset.kind() != SourceDataset::Kind::flan_v2 && e.dataset.kind() != SourceDataset::Kind::lmsys_chat) continue;
    for (std::size_t i = 0; i < e.unfiltered; ++i) {
      auto r = testing_support::make_record(e.dataset.name() + std::to_string(i), "q", "a", e.dataset.name(), "hi");
      if (i < e.filtered) {
        auto kept = r;
        kept.id += "/kept";
        kept.lineage = r.id;
        after.push_back(std::move(kept));
      }
      before.push_back(std::move(r));
    }
  }
  const auto m = manifest_report(before, after);
  const auto* flan = m.find(SourceDataset(SourceDataset::Kind::flan_v2), "hi");
  const auto* lmsys = m.find(SourceDataset(SourceDataset::Kind::lmsys_chat), "hi");
  c.expect(flan && flan->unfiltered == 67463 && flan->filtered == 65228, "FLAN-v2 hi counts");
  c.expect(lmsys && lmsys->unfiltered == 50000 && lmsys->filtered == 37422, "LMSYS-Chat hi counts");
  c.expect(flan && flan->retention_percent() == "96.69%",
           "FLAN-v2 hi retention " + (flan ? flan->retention_percent() : std::string("missing")));
  c.expect(lmsys && lmsys->retention_percent() == "74.84%",
           "LMSYS-Chat hi retention " + (lmsys ? lmsys->retention_percent() : std::string("missing")));
  const auto* ff = fixture.find(SourceDataset(SourceDataset::Kind::flan_v2), "hi");
  c.expect(ff && ff->retention_percent() == "96.69%", "fixture FLAN-v2 hi retention");
}

// ---------------------------------------------------------------------------

CheckpointStore one_tensor(DType dt, std::vector<float> v) {
  CheckpointStore s;
  s.insert("w", TensorEntry::from_floats(dt, {static_cast<std::int64_t>(v.size())}, v));
  return s;
}

void checkpoint_math(Check& c) {
  const auto a = one_tensor(DType::f32, {1.0f, 2.0f}), b = one_tensor(DType::f32, {3.0f, 6.0f});
  const auto mixed = interpolate(a, b, 0.6).at("w").to_floats();
  // exact: 0.6*1 + 0.4*3 = 1.8, 0.6*2 + 0.4*6 = 3.6; allowed one f32 ulp
  const float want[] = {1.8f, 3.6f};
  for (int i = 0; i < 2; ++i) {
    const bool near = mixed[i] == want[i] || std::nextafter(want[i], mixed[i]) == mixed[i];
    c.expect(near, "interpolate[" + std::to_string(i) + "] = " + fmt(mixed[i], 9));
  }
  c.expect(serialize_checkpoint(interpolate(a, b, 1.0)) == serialize_checkpoint(a), "alpha = 1 is not the identity");

  Rng rng(8);
  for (DType dt : {DType::f32, DType::f16, DType::bf16}) {
    std::vector<float> x(513), y(513);
    for (auto& v : x) v = static_cast<float>((rng.unit() - 0.5) * 10);
    for (auto& v : y) v = static_cast<float>((rng.unit() - 0.5) * 10);
    const auto l = one_tensor(dt, x), r = one_tensor(dt, y);
    for (int trial = 0; trial < 40; ++trial) {
      const double alpha = rng.unit();
      const auto p = interpolate(l, r, alpha).at("w").to_floats();
      const auto q = interpolate(r, l, 1.0 - alpha).at("w").to_floats();
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (ulp_distance(p[i], q[i], dt) > 1) {
          c.expect(false, "commutation off by more than 1 ulp (" + std::string(dtype_name(dt)) + ")");
          break;
        }
      }
    }
    auto store = l;
    store.metadata()["note"] = "round trip";
    const auto bytes = serialize_checkpoint(store);
    c.expect(serialize_checkpoint(parse_checkpoint(bytes)) == bytes,
             "container round trip changed bytes (" + std::string(dtype_name(dt)) + ")");
  }
}

// ---------------------------------------------------------------------------

void serialization_invariants(Check& c) {
  WhitespaceTokenizer tok;
  const auto corpus = testing_support::synthetic_records(1000, 5);
  std::vector<ChatExample> examples;
  for (const auto& r : corpus) {
    auto ex = serialize_chat(r, tok);
    std::size_t assistant = 0;
    for (const auto& m : r.turns) {
      if (m.role == Role::assistant) assistant += tok.encode(m.text).size();
    }
    const auto mask = std::accumulate(ex.loss_mask.begin(), ex.loss_mask.end(), std::size_t{0});
    c.expect(ex.loss_mask.size() == ex.token_ids.size(), "mask length differs for " + r.id);
    c.expect(mask == assistant, "mask sum differs from assistant tokens for " + r.id);
    examples.push_back(std::move(ex));
  }
  std::size_t total = 0;
  for (const auto& e : examples) total += e.size();
  for (std::size_t max_len : {256u, 512u, 2048u}) {
    const auto packs = pack_examples(examples, max_len);
    std::size_t packed = 0;
    std::vector<ChatExample> unpacked;
    for (const auto& p : packs) {
      c.expect(p.size() <= max_len, "pack exceeds max_len " + std::to_string(max_len));
      packed += p.size();
      for (auto& e : unpack_example(p)) unpacked.push_back(std::move(e));
    }
    c.expect(packed == total, "packing changed the token total at max_len " + std::to_string(max_len));
    c.expect(unpacked == examples, "unpack does not restore the examples at max_len " + std::to_string(max_len));
    c.expect(pack_examples(unpacked, max_len) == packs, "repack differs at max_len " + std::to_string(max_len));
  }
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> snapshot_tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[std::filesystem::relative(e.path(), root).string()] = read_file(e.path());
  }
  return files;
}

void end_to_end_determinism(Check& c) {
  TempDir dir;
  write_file(dir / "records.jsonl", records_to_lines(testing_support::synthetic_records(500, 21)));
  PipelineConfig cfg;
  cfg.output_dir = (dir / "out").string();
  cfg.datasets = {{(dir / "records.jsonl").string(), IngestFormat::record_lines, std::nullopt}};
  cfg.mt.endpoint = "mock:truncate";
  cfg.threshold = 30;
  cfg.seed = 17;
  cfg.mixture = MixturePlan{{{"flan_v2", 60}, {"dolly", 60}, {"open_assistant", 40}, {"lmsys_chat", 40},
                             {"anthropic_hhh", 30}, {"wikihow", 30}},
                            0, 99};
  cfg.serialize.pack = true;
  cfg.serialize.max_len = 1024;
  std::ostringstream sink;
  JsonLogger log(LogLevel::error, sink);

  run_pipeline(cfg, log);
  const auto first = snapshot_tree(dir / "out");
  std::filesystem::remove_all(dir / "out");
  run_pipeline(cfg, log);
  const auto second = snapshot_tree(dir / "out");

  c.expect(first.size() >= 15, "pipeline wrote only " + std::to_string(first.size()) + " files");
  c.expect(first.count("serialize/examples.jsonl") == 1, "no serialized examples");
  for (const auto& [name, bytes] : first) {
    auto it = second.find(name);
    c.expect(it != second.end() && it->second == bytes, "file differs between runs: " + name);
  }
  c.expect(first.size() == second.size(), "file sets differ between runs");
}

// ---------------------------------------------------------------------------

void eval_oracle(Check& c) {
  EvalOptions eo;
  eo.record_latency = false;
  for (int k : {0, 5}) {
    for (const auto& t : eval_fixtures::all_tasks()) {
      auto gold = mock::gold_echo_model(t, k, 42);
      const auto row = score_run(t, run_task(t, *gold, k, 42, eo));
      c.expect(row.score == 100.0, "gold echo on " + t.name + " k=" + std::to_string(k) + " scored " + fmt(row.score));
    }
  }
  // metric maximum of token F1 on its own 0-1 scale
  c.expect(token_f1("नई दिल्ली", "नई दिल्ली").value == 1.0, "token F1 maximum is not 1.0");

  auto gibberish = mock::gibberish_llm();
  const auto cls = eval_fixtures::sentiment();
  for (int k : {0, 5}) {
    const auto row = score_run(cls, run_task(cls, *gibberish, k, 1, eo));
    c.expect(row.score == 0.0, "gibberish classification scored " + fmt(row.score));
  }

  mock::IdentityMt mt;
  TranslateTestOptions tto;
  tto.eval = eo;
  for (const auto& t : eval_fixtures::all_tasks(false)) {
    for (int k : {0, 5}) {
      mock::FunctionLlm model("mock:hash", [](const CompletionRequest& r) {
        static const char* kAnswers[] = {"सकारात्मक", "नकारात्मक", "नई दिल्ली", "आसमान नीला", "व्यक्ति 2"};
        return std::string(kAnswers[fnv1a(r.prompt) % 5]);
      });
      const auto direct = score_run(t, run_task(t, model, k, 7, eo));
      const auto tt = score_run(t, translate_test(t, mt, model, k, 7, tto));
      c.expect(direct.score == tt.score,
               "translate-test " + fmt(tt.score) + " != direct " + fmt(direct.score) + " on " + t.name);
    }
  }

  for (const auto& t : eval_fixtures::all_tasks()) {
    for (const auto& item : t.items) {
      const auto demos = select_demos(t, item, 5, 3, "m");
      const auto p = build_prompt(t, item, 5, demos);
      c.expect(eval_fixtures::count_demos(p, t.answer_cue) == 5, "prompt for " + item.id + " lacks 5 demonstrations");
      const std::string target = render_input(t, item);
      const auto first = p.find(target);
      c.expect(first == p.size() - target.size() - 1 - t.answer_cue.size(), "target leaked into demos for " + item.id);
      for (const auto& d : demos) c.expect(d.id != item.id, "item is its own demonstration: " + item.id);
    }
  }
}

// ---------------------------------------------------------------------------

void training_config_fidelity(Check& c) {
  TempDir dir;
  emit_training_config(TrainingConfig{}, dir / "training_config.json");
  const auto back = read_training_config(dir / "training_config.json");
  const auto raw = json::parse(read_file(dir / "training_config.json"));
  c.expect(back == TrainingConfig{}, "round trip changed the config");
  c.expect(raw.at("lora_rank") == 16, "lora_rank");
  c.expect(raw.at("lora_alpha") == 32, "lora_alpha");
  c.expect(raw.at("lora_dropout") == 0.05, "lora_dropout");
  c.expect(raw.at("epochs") == 4, "epochs");
  c.expect(raw.at("learning_rate") == 5e-4, "learning_rate");
  c.expect(raw.at("batch_size") == 128, "batch_size");
  c.expect(raw.at("precision") == "bfloat16", "precision");
  c.expect(back.lora_rank == 16 && back.lora_alpha == 32 && back.lora_dropout == 0.05 && back.epochs == 4 &&
               back.learning_rate == 5e-4 && back.batch_size == 128 && back.precision == "bfloat16",
           "read-back values");
}

// ---------------------------------------------------------------------------

void humaneval_service(Check& c) {
  std::vector<EvalPrompt> prompts;
  for (int i = 0; i < 50; ++i) {
    prompts.push_back({"p" + std::to_string(i), "प्रश्न " + std::to_string(i), kAbilities[i % 5], {}});
  }
  mock::EchoLlm a("model-a");
  mock::FunctionLlm b("model-b", [](const CompletionRequest& r) { return "उत्तर: " + r.prompt; });
  mock::FunctionLlm d("model-c", [](const CompletionRequest&) { return std::string("नमस्ते"); });
  auto batch = build_batch(prompts, {&a, &b, &d}, 5);
  c.expect(batch.items.size() == 150, "batch has " + std::to_string(batch.items.size()) + " items");

  HumanEvalStore store(batch.items);
  HumanEvalServer server(store, {"127.0.0.1", 0, std::nullopt});
  const int port = server.start();

  // concurrent annotators pull everything; every payload is checked
  std::mutex mu;
  std::map<std::string, int> handed;
  std::vector<std::string> leaks;
  std::string first_of_ann0;
  std::vector<std::thread> threads;
  for (int t = 0; t < 6; ++t) {
    threads.emplace_back([&, t] {
      httplib::Client client("127.0.0.1", port);
      for (;;) {
        auto res = client.Get(("/api/next-item?annotator=ann" + std::to_string(t)).c_str());
        if (!res || res->status != 200) break;
        const auto j = json::parse(res->body);
        std::lock_guard lock(mu);
        if (j.contains("model_key") || res->body.find("model-") != std::string::npos) leaks.push_back(res->body);
        const auto id = j.at("item_id").get<std::string>();
        ++handed[id];
        if (t == 0 && first_of_ann0.empty()) first_of_ann0 = id;
      }
    });
  }
  for (auto& th : threads) th.join();
  c.expect(leaks.empty(), "model identity leaked in " + std::to_string(leaks.size()) + " payloads");
  c.expect(handed.size() == 150, "served " + std::to_string(handed.size()) + " distinct items");
  for (const auto& [id, n] : handed) c.expect(n == 1, "item " + id + " assigned " + std::to_string(n) + " times");

  MeanCell m;
  for (int v : {4, 5, 3}) m.add(v);
  c.expect(m.text() == "4.00", "mean of [4,5,3] is " + m.text());

  // the first item ann0 was handed: out of range, then valid, then a repeat
  const std::string owned = first_of_ann0, owner = "ann0";
  httplib::Client client("127.0.0.1", port);
  auto post = [&](int overall) {
    json body{{"item_id", owned}, {"annotator", owner}, {"ifa", 2}, {"cns", 2}, {"cq", 2}, {"overall", overall}};
    return client.Post("/api/rating", body.dump(), "application/json");
  };
  auto res = post(6);
  c.expect(res && res->status == 400, "out-of-range rating not rejected with 400");
  c.expect(res && json::parse(res->body).value("field", "") == "overall", "400 body does not name the field");
  res = post(5);
  c.expect(res && res->status == 200, "valid rating not accepted");
  res = post(5);
  c.expect(res && res->status == 409, "duplicate rating not rejected with 409");
  c.expect(store.ratings()->size() == 1, "rejected submissions were stored");
  server.stop();
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"metric oracle suite", kMetricSeconds, metric_oracles},
      {"filter threshold semantics", kFilterSeconds, filter_semantics},
      {"retention table arithmetic", kNoLimit, retention_arithmetic},
      {"checkpoint math", kCheckpointSeconds, checkpoint_math},
      {"serialization invariants", kSerializeSeconds, serialization_invariants},
      {"end-to-end determinism", kNoLimit, end_to_end_determinism},
      {"eval harness oracle", kNoLimit, eval_oracle},
      {"training-config fidelity", kNoLimit, training_config_fidelity},
      {"human-eval service", kNoLimit, humaneval_service},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    Check check;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.body(check);
    } catch (const std::exception& e) {
      check.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cr.limit_seconds > 0 && secs > cr.limit_seconds) {
      check.failures.push_back("took " + fmt(secs, 2) + " s, limit " + fmt(cr.limit_seconds, 0) + " s");
    }
    const bool ok = check.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS " : "FAIL ") << cr.name << " (" << fmt(secs, 2) << " s)";
    if (!ok) {
      std::cout << ": " << check.failures.front();
      if (check.failures.size() > 1) std::cout << " (+" << check.failures.size() - 1 << " more)";
    }
    std::cout << std::endl;
  }
  std::cout << (failed ? "FAIL" : "PASS") << " " << criteria.size() - failed << "/" << criteria.size()
            << " criteria" << std::endl;
  return failed ? 1 : 0;
}
