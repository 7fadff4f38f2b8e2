#pragma once

// Clients for the machine-translation and LLM services. Transport lives in
// http_clients.hpp; this header has the interfaces, the content-addressed
// cache, sentence-level batching and deterministic mocks.

#include <array>
#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "sftkit/common.hpp"
#include "sftkit/retry.hpp"

namespace sftkit {

struct MtRequest {
  std::vector<std::string> texts;
  std::string source_lang;
  std::string target_lang;

  void validate() const {
    if (texts.empty()) throw ValidationError("service_clients", "translation request has no texts", "texts");
    if (source_lang.empty() || target_lang.empty()) {
      throw ValidationError("service_clients", "translation request needs source and target languages");
    }
    if (source_lang == target_lang) {
      throw ValidationError("service_clients", "source and target language are both '" + source_lang + "'",
                            "target_lang");
    }
  }
};

struct CompletionRequest {
  std::string prompt;
  int max_tokens = 256;
  double temperature = 0.0;
  std::vector<std::string> stop;

  void validate() const {
    if (max_tokens <= 0) throw ValidationError("service_clients", "max_tokens must be > 0", "max_tokens");
    if (temperature < 0) throw ValidationError("service_clients", "temperature must be >= 0", "temperature");
  }
};

// ---------------------------------------------------------------------------
// Client interfaces
// ---------------------------------------------------------------------------

// Translates a batch of sentences. translate_sentences() counts every
// transport call so tests can assert cache behaviour.
class MtClient {
 public:
  virtual ~MtClient() = default;

  // Stable identifier of the backing system; part of every cache key.
  virtual std::string endpoint_id() const = 0;
  virtual std::size_t parallelism() const { return 1; }

  std::vector<std::string> translate_sentences(const std::vector<std::string>& sentences, const std::string& src,
                                               const std::string& tgt) {
    ++calls_;
    return do_translate(sentences, src, tgt);
  }

  std::size_t calls() const { return calls_.load(); }

 protected:
  virtual std::vector<std::string> do_translate(const std::vector<std::string>& sentences, const std::string& src,
                                                const std::string& tgt) = 0;

 private:
  std::atomic<std::size_t> calls_{0};
};

class LlmClient {
 public:
  virtual ~LlmClient() = default;

  virtual std::string model_id() const = 0;
  virtual std::size_t parallelism() const { return 1; }
  // 0 means no limit.
  virtual std::size_t max_prompt_chars() const { return 0; }

  std::string generate(const CompletionRequest& req) {
    ++calls_;
    return do_generate(req);
  }

  std::size_t calls() const { return calls_.load(); }

 protected:
  virtual std::string do_generate(const CompletionRequest& req) = 0;

 private:
  std::atomic<std::size_t> calls_{0};
};

// ---------------------------------------------------------------------------
// Content-addressed cache
// ---------------------------------------------------------------------------

struct CacheEntry {
  std::string key;
  std::string value;
  std::int64_t created_at = 0;  // unix seconds
};

// Keys are SHA-256 of (endpoint, payload). With a directory the cache
// persists one JSON file per key under <dir>/<k[0:2]>/<k>.json; without one
// it is in-memory only. Readers share a lock; writers are serialized per key
// stripe, and files land via atomic rename.
class ContentCache {
 public:
  ContentCache() = default;
  explicit ContentCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(*dir_);
  }

  static std::string make_key(std::string_view endpoint, std::string_view payload) {
    std::string material(endpoint);
    material.push_back('\0');
    material.append(payload);
    return sha256_hex(material);
  }

  std::optional<std::string> get(const std::string& key) {
    {
      std::shared_lock lock(mu_);
      auto it = mem_.find(key);
      if (it != mem_.end()) {
        ++hits_;
        return it->second.value;
      }
    }
    if (dir_) {
      const auto path = path_for(key);
      std::error_code ec;
      if (std::filesystem::exists(path, ec)) {
        json j = json::parse(read_file(path));
        CacheEntry e{j.at("key").get<std::string>(), j.at("value").get<std::string>(),
                     j.at("created_at").get<std::int64_t>()};
        if (e.key == key) {
          std::unique_lock lock(mu_);
          auto [it, _] = mem_.emplace(key, std::move(e));
          ++hits_;
          return it->second.value;
        }
      }
    }
    ++misses_;
    return std::nullopt;
  }

  void put(const std::string& key, const std::string& value) {
    CacheEntry e{key, value,
                 std::chrono::duration_cast<std::chrono::seconds>(
                     std::chrono::system_clock::now().time_since_epoch())
                     .count()};
    std::lock_guard stripe(stripes_[fnv1a(key) % stripes_.size()]);
    if (dir_) {
      json j = {{"key", e.key}, {"value", e.value}, {"created_at", e.created_at}};
      write_file(path_for(key), j.dump());
    }
    std::unique_lock lock(mu_);
    mem_.insert_or_assign(key, std::move(e));
  }

  std::size_t hits() const { return hits_.load(); }
  std::size_t misses() const { return misses_.load(); }

 private:
  std::filesystem::path path_for(const std::string& key) const { return *dir_ / key.substr(0, 2) / (key + ".json"); }

  std::optional<std::filesystem::path> dir_;
  std::shared_mutex mu_;
  std::unordered_map<std::string, CacheEntry> mem_;
  std::array<std::mutex, 16> stripes_;
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> misses_{0};
};

// ---------------------------------------------------------------------------
// Sentence segmentation
// ---------------------------------------------------------------------------

struct SentenceSplit {
  std::string leading;  // whitespace before the first sentence
  // (sentence, whitespace that followed it)
  std::vector<std::pair<std::string, std::string>> sentences;

  std::string join_with(const std::vector<std::string>& replaced) const {
    std::string out = leading;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      out += replaced[i];
      out += sentences[i].second;
    }
    return out;
  }
};

inline bool is_sentence_terminator(char32_t c) {
  return c == U'.' || c == U'?' || c == U'!' || c == U'\u0964' || c == U'\u0965';
}

// Splits after a run of terminal punctuation (. ? ! danda, double danda)
// that is followed by whitespace or end of text. Rejoining the pieces with
// their recorded whitespace reproduces the input byte for byte.
inline SentenceSplit split_sentences(std::string_view text) {
  const std::u32string cps = utf8::decode(text);
  SentenceSplit out;
  std::size_t i = 0;
  while (i < cps.size() && is_space(cps[i])) ++i;
  out.leading = utf8::encode(std::u32string_view(cps).substr(0, i));
  std::size_t start = i;
  while (i < cps.size()) {
    if (is_sentence_terminator(cps[i])) {
      std::size_t j = i;
      while (j < cps.size() && is_sentence_terminator(cps[j])) ++j;
      if (j == cps.size() || is_space(cps[j])) {
        std::size_t k = j;
        while (k < cps.size() && is_space(cps[k])) ++k;
        out.sentences.emplace_back(utf8::encode(std::u32string_view(cps).substr(start, j - start)),
                                   utf8::encode(std::u32string_view(cps).substr(j, k - j)));
        start = i = k;
        continue;
      }
      i = j;
      continue;
    }
    ++i;
  }
  if (start < cps.size()) {
    std::size_t e = cps.size();
    while (e > start && is_space(cps[e - 1])) --e;
    out.sentences.emplace_back(utf8::encode(std::u32string_view(cps).substr(start, e - start)),
                               utf8::encode(std::u32string_view(cps).substr(e)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

struct TranslateOptions {
  std::size_t batch_size = 32;  // sentences per transport call
  RetryPolicy retry;
};

// Sentence-level translation of every text. Sentences already in the cache
// are not sent; the rest go out in batches (up to client.parallelism() in
// flight). A batch answered with the wrong number of translations is
// rejected and retried whole.
inline std::vector<std::string> translate(const MtRequest& req, MtClient& client, ContentCache* cache = nullptr,
                                          const TranslateOptions& opts = {}) {
  req.validate();
  ContentCache scratch;
  ContentCache& store = cache ? *cache : scratch;
  const std::string endpoint = client.endpoint_id();

  std::vector<SentenceSplit> splits;
  splits.reserve(req.texts.size());
  std::vector<std::string> pending;
  std::unordered_map<std::string, std::string> resolved;  // sentence -> translation
  std::unordered_map<std::string, std::string> key_of;
  for (const auto& text : req.texts) {
    splits.push_back(split_sentences(text));
    for (const auto& [sentence, _] : splits.back().sentences) {
      if (resolved.count(sentence) || key_of.count(sentence)) continue;
      json payload = {{"src", req.source_lang}, {"tgt", req.target_lang}, {"text", sentence}};
      std::string key = ContentCache::make_key(endpoint, payload.dump());
      if (auto hit = store.get(key)) {
        resolved.emplace(sentence, std::move(*hit));
      } else {
        key_of.emplace(sentence, std::move(key));
        pending.push_back(sentence);
      }
    }
  }

  const std::size_t step = std::max<std::size_t>(1, opts.batch_size);
  const std::size_t n_batches = (pending.size() + step - 1) / step;
  auto batches = parallel_map(n_batches, client.parallelism(), [&](std::size_t b) {
    const auto first = pending.begin() + static_cast<std::ptrdiff_t>(b * step);
    const auto last = pending.begin() + static_cast<std::ptrdiff_t>(std::min(pending.size(), (b + 1) * step));
    std::vector<std::string> chunk(first, last);
    return with_retries(opts.retry, [&] {
      auto got = client.translate_sentences(chunk, req.source_lang, req.target_lang);
      if (got.size() != chunk.size()) {
        throw TransientError("service_clients", "partial batch: sent " + std::to_string(chunk.size()) +
                                                    " sentences, received " + std::to_string(got.size()));
      }
      return got;
    });
  });
  for (std::size_t b = 0; b < n_batches; ++b) {
    for (std::size_t k = 0; k < batches[b].size(); ++k) {
      const std::string& sentence = pending[b * step + k];
      store.put(key_of.at(sentence), batches[b][k]);
      resolved.emplace(sentence, std::move(batches[b][k]));
    }
  }

  std::vector<std::string> out;
  out.reserve(req.texts.size());
  for (const auto& split : splits) {
    std::vector<std::string> replaced;
    replaced.reserve(split.sentences.size());
    for (const auto& [sentence, _] : split.sentences) replaced.push_back(resolved.at(sentence));
    out.push_back(split.join_with(replaced));
  }
  return out;
}

inline std::string truncate_at_stop(std::string text, const std::vector<std::string>& stop) {
  std::size_t cut = text.size();
  for (const auto& s : stop) {
    if (s.empty()) continue;
    cut = std::min(cut, text.find(s));
  }
  text.resize(cut);
  return text;
}

inline std::string complete(const CompletionRequest& req, LlmClient& client, const RetryPolicy& retry = {}) {
  req.validate();
  if (const std::size_t limit = client.max_prompt_chars(); limit != 0 && req.prompt.size() > limit) {
    throw ValidationError("service_clients",
                          "prompt is " + std::to_string(req.prompt.size()) + " bytes, over the model limit of " +
                              std::to_string(limit),
                          "prompt");
  }
  return truncate_at_stop(with_retries(retry, [&] { return client.generate(req); }), req.stop);
}

// ---------------------------------------------------------------------------
// Deterministic mocks
// ---------------------------------------------------------------------------

namespace mock {

class IdentityMt : public MtClient {
 public:
  std::string endpoint_id() const override { return "mock:identity"; }

 protected:
  std::vector<std::string> do_translate(const std::vector<std::string>& s, const std::string&,
                                        const std::string&) override {
    return s;
  }
};

// Per-sentence function; handy for scripted corruption.
class FunctionMt : public MtClient {
 public:
  using Fn = std::function<std::string(const std::string& sentence, const std::string& src, const std::string& tgt)>;
  FunctionMt(std::string id, Fn fn, std::size_t parallelism = 1)
      : id_(std::move(id)), fn_(std::move(fn)), parallelism_(parallelism) {}

  std::string endpoint_id() const override { return id_; }
  std::size_t parallelism() const override { return parallelism_; }

 protected:
  std::vector<std::string> do_translate(const std::vector<std::string>& s, const std::string& src,
                                        const std::string& tgt) override {
    std::vector<std::string> out;
    out.reserve(s.size());
    for (const auto& x : s) out.push_back(fn_(x, src, tgt));
    return out;
  }

 private:
  std::string id_;
  Fn fn_;
  std::size_t parallelism_;
};

// Wraps another client and misbehaves for the first `failures` calls, either
// by throwing a transient error or by dropping the last translation.
class FlakyMt : public MtClient {
 public:
  enum class Mode { timeout, partial_batch, permanent };
  FlakyMt(MtClient& inner, std::size_t failures, Mode mode) : inner_(inner), failures_(failures), mode_(mode) {}

  std::string endpoint_id() const override { return inner_.endpoint_id(); }

 protected:
  std::vector<std::string> do_translate(const std::vector<std::string>& s, const std::string& src,
                                        const std::string& tgt) override {
    if (seen_++ < failures_) {
      if (mode_ == Mode::timeout) throw TransientError("mock", "timed out");
      if (mode_ == Mode::permanent) throw ServiceError("mock", "service rejected request");
      auto got = inner_.translate_sentences(s, src, tgt);
      if (!got.empty()) got.pop_back();
      return got;
    }
    return inner_.translate_sentences(s, src, tgt);
  }

 private:
  MtClient& inner_;
  std::size_t failures_;
  Mode mode_;
  std::atomic<std::size_t> seen_{0};
};

class EchoLlm : public LlmClient {
 public:
  explicit EchoLlm(std::string id = "mock:echo") : id_(std::move(id)) {}
  std::string model_id() const override { return id_; }

 protected:
  std::string do_generate(const CompletionRequest& r) override { return r.prompt; }

 private:
  std::string id_;
};

class FunctionLlm : public LlmClient {
 public:
  using Fn = std::function<std::string(const CompletionRequest&)>;
  FunctionLlm(std::string id, Fn fn, std::size_t max_prompt = 0)
      : id_(std::move(id)), fn_(std::move(fn)), max_prompt_(max_prompt) {}
  std::string model_id() const override { return id_; }
  std::size_t max_prompt_chars() const override { return max_prompt_; }

 protected:
  std::string do_generate(const CompletionRequest& r) override { return fn_(r); }

 private:
  std::string id_;
  Fn fn_;
  std::size_t max_prompt_;
};

// Responses keyed by SHA-256 of the prompt. Unknown prompts get the
// fallback text, or a ServiceError when no fallback is set.
class CannedLlm : public LlmClient {
 public:
  explicit CannedLlm(std::string id = "mock:canned", std::optional<std::string> fallback = std::nullopt)
      : id_(std::move(id)), fallback_(std::move(fallback)) {}

  void add(std::string_view prompt, std::string response) {
    std::lock_guard lock(mu_);
    canned_[sha256_hex(prompt)] = std::move(response);
  }

  std::string model_id() const override { return id_; }

 protected:
  std::string do_generate(const CompletionRequest& r) override {
    std::lock_guard lock(mu_);
    auto it = canned_.find(sha256_hex(r.prompt));
    if (it != canned_.end()) return it->second;
    if (fallback_) return *fallback_;
    throw ServiceError("mock", "no canned response for prompt");
  }

 private:
  std::string id_;
  std::optional<std::string> fallback_;
  std::mutex mu_;
  std::unordered_map<std::string, std::string> canned_;
};

}  // namespace mock
}  // namespace sftkit
