#pragma once

// HTTP transport for the MT, LLM and external-scorer services.
//
//   MT:     POST {texts, src, tgt}                     -> {translations}
//   LLM:    POST {prompt, max_tokens, temperature, stop} -> {text}
//   Scorer: POST {pairs:[{hyp, ref}]}                   -> {scores}
//
// Connection failures, timeouts, 429 and 5xx are TransientError (retried by
// the callers); other non-2xx answers and malformed bodies are ServiceError.

#include <chrono>
#include <string>
#include <utility>

#include "httplib.h"
#include "sftkit/metrics.hpp"
#include "sftkit/service_clients.hpp"

namespace sftkit {

struct HttpEndpoint {
  std::string url;  // e.g. http://localhost:8080/translate
  std::chrono::milliseconds timeout{30000};
  std::string api_key;  // sent as a bearer token when non-empty
  std::size_t parallelism = 4;
};

namespace detail {

// Splits "http://host:port/path" into ("http://host:port", "/path").
inline std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ValidationError("http", "endpoint url needs a scheme: " + url, "url");
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

inline json post_json(const HttpEndpoint& ep, const json& body, const std::string& module) {
  const auto [base, path] = split_url(ep.url);
  httplib::Client cli(base);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(ep.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(ep.timeout - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  cli.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!ep.api_key.empty()) headers.emplace("Authorization", "Bearer " + ep.api_key);
  auto res = cli.Post(path, headers, body.dump(), "application/json");
  if (!res) {
    throw TransientError(module, ep.url + ": " + httplib::to_string(res.error()));
  }
  if (res->status == 429 || res->status >= 500) {
    throw TransientError(module, ep.url + ": HTTP " + std::to_string(res->status));
  }
  if (res->status < 200 || res->status >= 300) {
    throw ServiceError(module, ep.url + ": HTTP " + std::to_string(res->status) + ": " + res->body);
  }
  try {
    return json::parse(res->body);
  } catch (const json::parse_error& e) {
    throw ServiceError(module, ep.url + ": malformed response: " + e.what());
  }
}

}  // namespace detail

class HttpMtClient : public MtClient {
 public:
  explicit HttpMtClient(HttpEndpoint ep) : ep_(std::move(ep)) {}
  std::string endpoint_id() const override { return ep_.url; }
  std::size_t parallelism() const override { return ep_.parallelism; }

 protected:
  std::vector<std::string> do_translate(const std::vector<std::string>& s, const std::string& src,
                                        const std::string& tgt) override {
    json res = detail::post_json(ep_, {{"texts", s}, {"src", src}, {"tgt", tgt}}, "mt");
    auto it = res.find("translations");
    if (it == res.end() || !it->is_array()) throw ServiceError("mt", "response lacks 'translations' array");
    std::vector<std::string> out;
    for (const auto& t : *it) {
      if (!t.is_string()) throw ServiceError("mt", "non-string translation in response");
      out.push_back(t.get<std::string>());
    }
    return out;
  }

 private:
  HttpEndpoint ep_;
};

class HttpLlmClient : public LlmClient {
 public:
  HttpLlmClient(HttpEndpoint ep, std::string model_name, std::size_t max_prompt = 0)
      : ep_(std::move(ep)), model_(std::move(model_name)), max_prompt_(max_prompt) {}
  std::string model_id() const override { return model_; }
  std::size_t parallelism() const override { return ep_.parallelism; }
  std::size_t max_prompt_chars() const override { return max_prompt_; }

 protected:
  std::string do_generate(const CompletionRequest& r) override {
    json body = {{"prompt", r.prompt}, {"max_tokens", r.max_tokens}, {"temperature", r.temperature}, {"stop", r.stop}};
    json res = detail::post_json(ep_, body, "llm");
    auto it = res.find("text");
    if (it == res.end() || !it->is_string()) throw ServiceError("llm", "response lacks 'text' string");
    return it->get<std::string>();
  }

 private:
  HttpEndpoint ep_;
  std::string model_;
  std::size_t max_prompt_;
};

class HttpScorerClient : public ExternalScorerClient {
 public:
  explicit HttpScorerClient(HttpEndpoint ep) : ep_(std::move(ep)) {}

  std::vector<double> score(const std::vector<ScorePair>& pairs) override {
    json arr = json::array();
    for (const auto& p : pairs) arr.push_back({{"hyp", p.hyp}, {"ref", p.ref}});
    json res = detail::post_json(ep_, {{"pairs", arr}}, "scorer");
    auto it = res.find("scores");
    if (it == res.end() || !it->is_array()) throw ServiceError("scorer", "response lacks 'scores' array");
    std::vector<double> out;
    for (const auto& v : *it) {
      if (!v.is_number()) throw ServiceError("scorer", "non-numeric score in response");
      out.push_back(v.get<double>());
    }
    return out;
  }

 private:
  HttpEndpoint ep_;
};

}  // namespace sftkit
