#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "sftkit/http_clients.hpp"
#include "test_support.hpp"

using namespace sftkit;
using testing_support::TempDir;

namespace {

RetryPolicy fast_retry(int attempts = 5) {
  RetryPolicy r;
  r.max_attempts = attempts;
  r.initial_backoff = std::chrono::milliseconds(0);
  r.max_backoff = std::chrono::milliseconds(0);
  return r;
}

TranslateOptions fast_opts(std::size_t batch = 32) {
  TranslateOptions o;
  o.batch_size = batch;
  o.retry = fast_retry();
  return o;
}

MtRequest req(std::vector<std::string> texts, std::string src = "en", std::string tgt = "hi") {
  return {std::move(texts), std::move(src), std::move(tgt)};
}

// Upper-cases ASCII so translations are visibly different from the input.
mock::FunctionMt upper_mt(std::size_t parallelism = 1) {
  return mock::FunctionMt(
      "mock:upper",
      [](const std::string& s, const std::string&, const std::string&) {
        std::string out = s;
        for (char& c : out) {
          if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
        }
        return out;
      },
      parallelism);
}

}  // namespace

TEST(SentenceSplit, RejoinsByteForByte) {
  for (const char* text : {"One. Two? Three!", "  lead. trail  ", "no terminator", "यह है। वह था॥ end",
                           "e.g. this", "Wait... what?!  Yes.\n\nNext", ""}) {
    const auto split = split_sentences(text);
    std::vector<std::string> same;
    for (const auto& [s, _] : split.sentences) same.push_back(s);
    EXPECT_EQ(split.join_with(same), text) << text;
  }
  const auto s = split_sentences("One. Two? Three!");
  ASSERT_EQ(s.sentences.size(), 3u);
  EXPECT_EQ(s.sentences[1].first, "Two?");
  EXPECT_EQ(split_sentences("यह है। वह था").sentences.size(), 2u);
  EXPECT_EQ(split_sentences("3.14 is pi").sentences.size(), 1u);
}

TEST(Translate, IdentityPreservesText) {
  mock::IdentityMt mt;
  const std::vector<std::string> texts = {"Hello there. How are you?", "", "  padded  "};
  EXPECT_EQ(translate(req(texts), mt, nullptr, fast_opts()), texts);
}

TEST(Translate, SentenceLevelAndOrderPreserved) {
  auto mt = upper_mt(3);
  auto out = translate(req({"a b. c d?", "e f!"}), mt, nullptr, fast_opts(1));
  EXPECT_EQ(out, (std::vector<std::string>{"A B. C D?", "E F!"}));
  EXPECT_EQ(mt.calls(), 3u);
}

TEST(Translate, RequestValidation) {
  mock::IdentityMt mt;
  EXPECT_THROW(translate(req({}), mt), ValidationError);
  EXPECT_THROW(translate(req({"x"}, "en", "en"), mt), ValidationError);
}

TEST(Translate, CacheSkipsKnownSentences) {
  auto mt = upper_mt();
  ContentCache cache;
  translate(req({"one. two."}), mt, &cache, fast_opts());
  const auto first_calls = mt.calls();
  auto out = translate(req({"two. one. three."}), mt, &cache, fast_opts());
  EXPECT_EQ(out[0], "TWO. ONE. THREE.");
  EXPECT_EQ(mt.calls(), first_calls + 1);
  EXPECT_EQ(cache.hits(), 2u);
  // a different direction is a different key
  translate(req({"one."}, "hi", "en"), mt, &cache, fast_opts());
  EXPECT_EQ(mt.calls(), first_calls + 2);
}

TEST(Translate, DuplicateSentencesSentOnce) {
  auto mt = upper_mt();
  ContentCache cache;
  translate(req({"same.", "same.", "same. same."}), mt, &cache, fast_opts());
  EXPECT_EQ(mt.calls(), 1u);
  EXPECT_EQ(cache.misses(), 1u);
}

TEST(Translate, PersistentCacheSurvivesRestart) {
  TempDir dir;
  {
    ContentCache cache(dir.path());
    auto mt = upper_mt();
    translate(req({"persist me."}), mt, &cache, fast_opts());
  }
  ContentCache reopened(dir.path());
  auto mt = upper_mt();
  EXPECT_EQ(translate(req({"persist me."}), mt, &reopened, fast_opts())[0], "PERSIST ME.");
  EXPECT_EQ(mt.calls(), 0u);
}

TEST(Translate, CacheKeyIncludesEndpoint) {
  EXPECT_NE(ContentCache::make_key("a", "p"), ContentCache::make_key("b", "p"));
  EXPECT_NE(ContentCache::make_key("ab", "c"), ContentCache::make_key("a", "bc"));
}

TEST(Translate, ConcurrentCacheUse) {
  TempDir dir;
  ContentCache cache(dir.path());
  std::vector<std::jthread> ts;
  std::atomic<int> bad{0};
  for (int t = 0; t < 4; ++t) {
    ts.emplace_back([&, t] {
      auto mt = upper_mt();
      for (int i = 0; i < 50; ++i) {
        const std::string s = "s" + std::to_string((i + t) % 20) + ".";
        auto got = translate(req({s}), mt, &cache, fast_opts());
        if (got[0] != "S" + std::to_string((i + t) % 20) + ".") ++bad;
      }
    });
  }
  ts.clear();
  EXPECT_EQ(bad.load(), 0);
}

TEST(Translate, TimeoutRetriedThenSucceeds) {
  mock::IdentityMt inner;
  mock::FlakyMt flaky(inner, 2, mock::FlakyMt::Mode::timeout);
  EXPECT_EQ(translate(req({"x."}), flaky, nullptr, fast_opts())[0], "x.");
  EXPECT_EQ(flaky.calls(), 3u);
}

TEST(Translate, PartialBatchRejectedAndRetried) {
  mock::IdentityMt inner;
  mock::FlakyMt flaky(inner, 1, mock::FlakyMt::Mode::partial_batch);
  ContentCache cache;
  auto out = translate(req({"a. b. c."}), flaky, &cache, fast_opts());
  EXPECT_EQ(out[0], "a. b. c.");
  EXPECT_EQ(flaky.calls(), 2u);
}

TEST(Translate, RetriesExhaustedSurfaceTransient) {
  mock::IdentityMt inner;
  mock::FlakyMt flaky(inner, 100, mock::FlakyMt::Mode::timeout);
  EXPECT_THROW(translate(req({"x."}), flaky, nullptr, fast_opts()), TransientError);
  EXPECT_EQ(flaky.calls(), 5u);
}

TEST(Translate, PermanentFailureNotRetried) {
  mock::IdentityMt inner;
  mock::FlakyMt flaky(inner, 100, mock::FlakyMt::Mode::permanent);
  EXPECT_THROW(translate(req({"x."}), flaky, nullptr, fast_opts()), ServiceError);
  EXPECT_EQ(flaky.calls(), 1u);
}

TEST(Complete, StopSequencesAndLimits) {
  mock::FunctionLlm llm("f", [](const CompletionRequest&) { return std::string("yes\nAnswer: more"); }, 10);
  CompletionRequest r;
  r.prompt = "short";
  r.stop = {"\n"};
  EXPECT_EQ(complete(r, llm), "yes");
  r.prompt = std::string(11, 'x');
  EXPECT_THROW(complete(r, llm), ValidationError);
  r.prompt = "ok";
  r.max_tokens = 0;
  EXPECT_THROW(complete(r, llm), ValidationError);
  EXPECT_EQ(truncate_at_stop("abcabc", {"c", "b"}), "a");
}

TEST(Complete, CannedResponses) {
  mock::CannedLlm llm("c");
  llm.add("p1", "r1");
  CompletionRequest r;
  r.prompt = "p1";
  EXPECT_EQ(complete(r, llm), "r1");
  r.prompt = "p2";
  EXPECT_THROW(complete(r, llm), ServiceError);
  mock::CannedLlm with_fallback("c", "dunno");
  EXPECT_EQ(complete(r, with_fallback), "dunno");
}

// ---------------------------------------------------------------------------
// HTTP transport against an in-process server
// ---------------------------------------------------------------------------

namespace {

class FakeServices {
 public:
  FakeServices() {
    server_.Post("/translate", [this](const httplib::Request& req, httplib::Response& res) {
      ++mt_calls;
      last_auth = req.get_header_value("Authorization");
      if (fail_next > 0) {
        --fail_next;
        res.status = 503;
        return;
      }
      auto body = json::parse(req.body);
      json out = json::array();
      for (const auto& t : body["texts"]) out.push_back("[" + body["tgt"].get<std::string>() + "]" + t.get<std::string>());
      res.set_content(json{{"translations", out}}.dump(), "application/json");
    });
    server_.Post("/complete", [](const httplib::Request& req, httplib::Response& res) {
      auto body = json::parse(req.body);
      res.set_content(json{{"text", "echo:" + body["prompt"].get<std::string>()}}.dump(), "application/json");
    });
    server_.Post("/score", [](const httplib::Request& req, httplib::Response& res) {
      auto body = json::parse(req.body);
      json scores = json::array();
      for (const auto& p : body["pairs"]) scores.push_back(p["hyp"] == p["ref"] ? 1.0 : 0.25);
      res.set_content(json{{"scores", scores}}.dump(), "application/json");
    });
    server_.Post("/bad", [](const httplib::Request&, httplib::Response& res) {
      res.status = 400;
      res.set_content("nope", "text/plain");
    });
    server_.Post("/garbage", [](const httplib::Request&, httplib::Response& res) {
      res.set_content("{not json", "application/json");
    });
    server_.Post("/slow", [](const httplib::Request&, httplib::Response& res) {
      std::this_thread::sleep_for(std::chrono::milliseconds(600));
      res.set_content("{}", "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServices() {
    server_.stop();
    thread_.join();
  }

  std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port_) + path; }

  std::atomic<int> mt_calls{0};
  std::atomic<int> fail_next{0};
  std::string last_auth;

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace

TEST(Http, MtRoundTripWithBearerToken) {
  FakeServices svc;
  HttpMtClient mt({svc.url("/translate"), std::chrono::milliseconds(2000), "secret", 2});
  auto out = translate(req({"Hello. World."}), mt, nullptr, fast_opts());
  EXPECT_EQ(out[0], "[hi]Hello. [hi]World.");
  EXPECT_EQ(svc.last_auth, "Bearer secret");
  EXPECT_EQ(mt.endpoint_id(), svc.url("/translate"));
}

TEST(Http, ServerErrorsAreRetried) {
  FakeServices svc;
  svc.fail_next = 2;
  HttpMtClient mt({svc.url("/translate"), std::chrono::milliseconds(2000), "", 1});
  EXPECT_EQ(translate(req({"x"}), mt, nullptr, fast_opts())[0], "[hi]x");
  EXPECT_EQ(svc.mt_calls.load(), 3);
}

TEST(Http, ClientErrorsAndMalformedBodiesAreServiceErrors) {
  FakeServices svc;
  HttpMtClient bad({svc.url("/bad"), std::chrono::milliseconds(2000), "", 1});
  EXPECT_THROW(translate(req({"x"}), bad, nullptr, fast_opts()), ServiceError);
  EXPECT_EQ(bad.calls(), 1u);
  HttpMtClient garbage({svc.url("/garbage"), std::chrono::milliseconds(2000), "", 1});
  EXPECT_THROW(translate(req({"x"}), garbage, nullptr, fast_opts()), ServiceError);
}

TEST(Http, TimeoutIsTransient) {
  FakeServices svc;
  HttpMtClient slow({svc.url("/slow"), std::chrono::milliseconds(150), "", 1});
  EXPECT_THROW(translate(req({"x"}), slow, nullptr, fast_opts(2)), TransientError);
}

TEST(Http, ConnectionRefusedIsTransient) {
  HttpMtClient dead({"http://127.0.0.1:1/translate", std::chrono::milliseconds(300), "", 1});
  TranslateOptions o = fast_opts();
  o.retry.max_attempts = 2;
  EXPECT_THROW(translate(req({"x"}), dead, nullptr, o), TransientError);
}

TEST(Http, LlmAndScorer) {
  FakeServices svc;
  HttpLlmClient llm({svc.url("/complete"), std::chrono::milliseconds(2000), "", 1}, "remote-7b");
  CompletionRequest r;
  r.prompt = "hi";
  EXPECT_EQ(complete(r, llm), "echo:hi");
  EXPECT_EQ(llm.model_id(), "remote-7b");

  HttpScorerClient scorer({svc.url("/score"), std::chrono::milliseconds(2000), "", 1});
  auto s = external_score({{"a", "a"}, {"a", "b"}}, scorer);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s[0].value, 1.0);
  EXPECT_DOUBLE_EQ(s[1].value, 0.25);
}

TEST(Http, UrlNeedsScheme) { EXPECT_THROW(detail::split_url("localhost:80/x"), ValidationError); }
