#pragma once

// Pipeline configuration and the data-preparation steps
// (ingest -> translate -> filter -> sample -> serialize) shared by the CLI.
// Every step writes into <output_dir>/<step>/ and leaves a manifest.json
// with the effective configuration, its digest, seeds and artifact hashes.

#include <cstdlib>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sftkit/checkpoint.hpp"
#include "sftkit/corpus.hpp"
#include "sftkit/filter.hpp"
#include "sftkit/http_clients.hpp"
#include "sftkit/sft.hpp"

namespace sftkit {

// ---------------------------------------------------------------------------
// Logging: one JSON object per line on stderr.
// ---------------------------------------------------------------------------

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

inline LogLevel parse_log_level(std::string_view s) {
  if (s == "error") return LogLevel::error;
  if (s == "warn") return LogLevel::warn;
  if (s == "info") return LogLevel::info;
  if (s == "debug") return LogLevel::debug;
  throw ValidationError("cli", "unknown log level '" + std::string(s) + "'", "log_level");
}

class JsonLogger {
 public:
  explicit JsonLogger(LogLevel level = LogLevel::info, std::ostream& out = std::cerr) : level_(level), out_(&out) {}

  void set_level(LogLevel l) { level_ = l; }

  void log(LogLevel l, std::string_view event, ordered_json fields = ordered_json::object()) {
    if (static_cast<int>(l) > static_cast<int>(level_)) return;
    static constexpr const char* kNames[] = {"error", "warn", "info", "debug"};
    ordered_json j;
    j["level"] = kNames[static_cast<int>(l)];
    j["event"] = event;
    for (auto& [k, v] : fields.items()) j[k] = v;
    std::lock_guard lock(mu_);
    *out_ << j.dump() << '\n';
    out_->flush();
  }

  void error(std::string_view e, ordered_json f = ordered_json::object()) { log(LogLevel::error, e, std::move(f)); }
  void warn(std::string_view e, ordered_json f = ordered_json::object()) { log(LogLevel::warn, e, std::move(f)); }
  void info(std::string_view e, ordered_json f = ordered_json::object()) { log(LogLevel::info, e, std::move(f)); }
  void debug(std::string_view e, ordered_json f = ordered_json::object()) { log(LogLevel::debug, e, std::move(f)); }

 private:
  LogLevel level_;
  std::ostream* out_;
  std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct EndpointConfig {
  std::string endpoint;  // "mock:<name>" or an http(s) URL
  std::string api_key;
  std::string model;  // LLM model name sent with requests
  int timeout_ms = 30000;
  std::size_t parallelism = 4;

  friend bool operator==(const EndpointConfig&, const EndpointConfig&) = default;
};

struct DatasetInput {
  std::string path;
  IngestFormat format = IngestFormat::record_lines;
  std::optional<std::string> source_dataset;  // overrides the tag on every record

  friend bool operator==(const DatasetInput&, const DatasetInput&) = default;
};

struct SerializeConfig {
  std::string tokenizer = "whitespace";  // or a path to a JSON vocabulary
  std::size_t max_len = 2048;
  bool pack = false;
  ChatTemplate chat_template;
  TrainingConfig training;
};

struct PipelineConfig {
  std::string output_dir = "out";
  std::vector<DatasetInput> datasets;
  std::string source_language = "en";
  std::string target_language = "hi";
  EndpointConfig mt{"mock:identity", "", "", 30000, 4};
  EndpointConfig llm{"mock:echo", "", "", 30000, 4};
  EndpointConfig scorer;
  ChrfConfig chrf;
  double threshold = kDefaultRoundtripThreshold;
  bool per_turn = false;
  std::optional<MixturePlan> mixture;
  double blend_alpha = kDefaultBlendAlpha;
  std::uint64_t seed = 0;
  SerializeConfig serialize;
  std::optional<std::string> cache_dir;
  std::string log_level = "info";
};

namespace detail {

inline ordered_json endpoint_json(const EndpointConfig& e, bool redact) {
  ordered_json j;
  j["endpoint"] = e.endpoint;
  j["api_key"] = redact && !e.api_key.empty() ? std::string("***") : e.api_key;
  j["model"] = e.model;
  j["timeout_ms"] = e.timeout_ms;
  j["parallelism"] = e.parallelism;
  return j;
}

inline EndpointConfig endpoint_from_json(const json& j, const std::string& field, EndpointConfig e) {
  if (!j.is_object()) throw ValidationError("config", field + " must be an object", field);
  static const std::set<std::string> kKeys = {"endpoint", "api_key", "model", "timeout_ms", "parallelism"};
  for (const auto& [k, _] : j.items()) {
    if (!kKeys.count(k)) throw ValidationError("config", "unknown field '" + field + "." + k + "'", field + "." + k);
  }
  e.endpoint = j.value("endpoint", e.endpoint);
  e.api_key = j.value("api_key", e.api_key);
  e.model = j.value("model", e.model);
  e.timeout_ms = j.value("timeout_ms", e.timeout_ms);
  e.parallelism = j.value("parallelism", e.parallelism);
  return e;
}

}  // namespace detail

// Secrets are replaced by "***" when `redact` is set; manifests and the
// config digest use the redacted form.
inline ordered_json to_json(const PipelineConfig& c, bool redact = true) {
  ordered_json j;
  j["output_dir"] = c.output_dir;
  ordered_json ds = ordered_json::array();
  for (const auto& d : c.datasets) {
    ordered_json o;
    o["path"] = d.path;
    o["format"] = d.format == IngestFormat::record_lines ? "record_lines" : "conversation_tree";
    if (d.source_dataset) o["source_dataset"] = *d.source_dataset;
    ds.push_back(std::move(o));
  }
  j["datasets"] = std::move(ds);
  j["source_language"] = c.source_language;
  j["target_language"] = c.target_language;
  j["mt"] = detail::endpoint_json(c.mt, redact);
  j["llm"] = detail::endpoint_json(c.llm, redact);
  j["scorer"] = detail::endpoint_json(c.scorer, redact);
  j["chrf"] = to_json(c.chrf);
  j["threshold"] = c.threshold;
  j["per_turn"] = c.per_turn;
  j["mixture"] = c.mixture ? ordered_json(to_json(*c.mixture)) : ordered_json(nullptr);
  j["blend_alpha"] = c.blend_alpha;
  j["seed"] = c.seed;
  ordered_json s;
  s["tokenizer"] = c.serialize.tokenizer;
  s["max_len"] = c.serialize.max_len;
  s["pack"] = c.serialize.pack;
  s["chat_template"] = c.serialize.chat_template.to_json();
  s["training"] = to_json(c.serialize.training);
  j["serialize"] = std::move(s);
  j["cache_dir"] = c.cache_dir ? ordered_json(*c.cache_dir) : ordered_json(nullptr);
  return j;
}

inline PipelineConfig pipeline_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("config", "configuration must be a JSON object");
  static const std::set<std::string> kKeys = {
      "output_dir", "datasets", "source_language", "target_language", "mt",        "llm",       "scorer",
      "chrf",       "threshold", "per_turn",       "mixture",         "blend_alpha", "seed",    "serialize",
      "cache_dir",  "log_level"};
  for (const auto& [k, _] : j.items()) {
    if (!kKeys.count(k)) throw ValidationError("config", "unknown field '" + k + "'", k);
  }
  PipelineConfig c;
  auto field = [&](const char* name, auto& target) {
    if (!j.contains(name) || j[name].is_null()) return;
    try {
      target = j[name].get<std::remove_reference_t<decltype(target)>>();
    } catch (const json::exception&) {
      throw ValidationError("config", std::string("field '") + name + "' has the wrong type", name);
    }
  };
  field("output_dir", c.output_dir);
  field("source_language", c.source_language);
  field("target_language", c.target_language);
  field("threshold", c.threshold);
  field("per_turn", c.per_turn);
  field("blend_alpha", c.blend_alpha);
  field("seed", c.seed);
  field("log_level", c.log_level);
  if (j.contains("cache_dir") && !j["cache_dir"].is_null()) c.cache_dir = j["cache_dir"].get<std::string>();
  if (j.contains("datasets")) {
    if (!j["datasets"].is_array()) throw ValidationError("config", "datasets must be an array", "datasets");
    for (std::size_t i = 0; i < j["datasets"].size(); ++i) {
      const auto& d = j["datasets"][i];
      const std::string where = "datasets[" + std::to_string(i) + "]";
      if (!d.is_object() || !d.contains("path") || !d["path"].is_string()) {
        throw ValidationError("config", where + " needs a 'path'", where + ".path");
      }
      DatasetInput in;
      in.path = d["path"].get<std::string>();
      if (d.contains("format")) {
        auto f = parse_ingest_format(d["format"].get<std::string>());
        if (!f) throw ValidationError("config", where + ".format is not a known format", where + ".format");
        in.format = *f;
      }
      if (d.contains("source_dataset")) in.source_dataset = d["source_dataset"].get<std::string>();
      c.datasets.push_back(std::move(in));
    }
  }
  if (j.contains("mt")) c.mt = detail::endpoint_from_json(j["mt"], "mt", c.mt);
  if (j.contains("llm")) c.llm = detail::endpoint_from_json(j["llm"], "llm", c.llm);
  if (j.contains("scorer")) c.scorer = detail::endpoint_from_json(j["scorer"], "scorer", c.scorer);
  if (j.contains("chrf")) c.chrf = chrf_config_from_json(j["chrf"]);
  if (j.contains("mixture") && !j["mixture"].is_null()) c.mixture = mixture_plan_from_json(j["mixture"]);
  if (j.contains("serialize")) {
    const auto& s = j["serialize"];
    c.serialize.tokenizer = s.value("tokenizer", c.serialize.tokenizer);
    c.serialize.max_len = s.value("max_len", c.serialize.max_len);
    c.serialize.pack = s.value("pack", c.serialize.pack);
    if (s.contains("chat_template")) c.serialize.chat_template = ChatTemplate::from_json(s["chat_template"]);
    if (s.contains("training")) c.serialize.training = training_config_from_json(s["training"]);
  }
  return c;
}

// Relative dataset paths in a config file resolve against the file's
// directory.
inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("config", path.string() + ": " + e.what());
  }
  auto c = pipeline_config_from_json(j);
  const auto base = path.parent_path();
  for (auto& d : c.datasets) {
    if (std::filesystem::path(d.path).is_relative() && !base.empty()) d.path = (base / d.path).lexically_normal().string();
  }
  return c;
}

using EnvLookup = std::function<std::optional<std::string>(const char*)>;

inline std::optional<std::string> process_env(const char* name) {
  const char* v = std::getenv(name);
  if (!v) return std::nullopt;
  return std::string(v);
}

// Endpoint, secret and location overrides from SFTKIT_* variables.
inline void apply_env(PipelineConfig& c, const EnvLookup& env = process_env) {
  auto set = [&](const char* name, std::string& target) {
    if (auto v = env(name)) target = *v;
  };
  set("SFTKIT_MT_ENDPOINT", c.mt.endpoint);
  set("SFTKIT_MT_API_KEY", c.mt.api_key);
  set("SFTKIT_LLM_ENDPOINT", c.llm.endpoint);
  set("SFTKIT_LLM_API_KEY", c.llm.api_key);
  set("SFTKIT_LLM_MODEL", c.llm.model);
  set("SFTKIT_SCORER_ENDPOINT", c.scorer.endpoint);
  set("SFTKIT_SCORER_API_KEY", c.scorer.api_key);
  set("SFTKIT_OUTPUT_DIR", c.output_dir);
  if (auto v = env("SFTKIT_CACHE_DIR")) c.cache_dir = *v;
}

inline void validate(const PipelineConfig& c, bool check_paths = true) {
  if (!(c.threshold >= 0 && c.threshold <= 100)) {
    throw ValidationError("config", "threshold must be in [0, 100], got " + format_fixed(c.threshold, 2), "threshold");
  }
  if (!(c.blend_alpha >= 0 && c.blend_alpha <= 1)) {
    throw ValidationError("config", "blend_alpha must be in [0, 1], got " + format_fixed(c.blend_alpha, 4),
                          "blend_alpha");
  }
  if (c.output_dir.empty()) throw ValidationError("config", "output_dir is empty", "output_dir");
  if (!valid_language_tag(c.source_language)) {
    throw ValidationError("config", "bad source_language '" + c.source_language + "'", "source_language");
  }
  if (!valid_language_tag(c.target_language)) {
    throw ValidationError("config", "bad target_language '" + c.target_language + "'", "target_language");
  }
  c.chrf.validate();
  if (c.serialize.max_len == 0) throw ValidationError("config", "serialize.max_len must be > 0", "serialize.max_len");
  c.serialize.training.validate();
  parse_log_level(c.log_level);
  if (!check_paths) return;
  for (std::size_t i = 0; i < c.datasets.size(); ++i) {
    if (!std::filesystem::exists(c.datasets[i].path)) {
      throw ValidationError("config", "dataset file not found: " + c.datasets[i].path,
                            "datasets[" + std::to_string(i) + "].path");
    }
  }
  if (c.serialize.tokenizer != "whitespace" && !std::filesystem::exists(c.serialize.tokenizer)) {
    throw ValidationError("config", "tokenizer file not found: " + c.serialize.tokenizer, "serialize.tokenizer");
  }
}

inline std::string config_digest(const PipelineConfig& c) { return sha256_hex(to_json(c, true).dump()); }

// ---------------------------------------------------------------------------
// Clients from endpoint strings
// ---------------------------------------------------------------------------

namespace mock {

// Keeps the first half of every sentence's words; a degraded translator for
// exercising the filter.
inline std::unique_ptr<MtClient> truncating_mt() {
  return std::make_unique<FunctionMt>("mock:truncate", [](const std::string& s, const std::string&, const std::string&) {
    auto words = split_whitespace(s);
    words.resize((words.size() + 1) / 2);
    return join(words, " ");
  });
}

inline std::unique_ptr<LlmClient> gibberish_llm(std::string id = "mock:gibberish") {
  return std::make_unique<FunctionLlm>(std::move(id), [](const CompletionRequest&) { return std::string("zzqx vrrk"); });
}

}  // namespace mock

inline HttpEndpoint to_http_endpoint(const EndpointConfig& e) {
  return {e.endpoint, std::chrono::milliseconds(e.timeout_ms), e.api_key, e.parallelism};
}

inline bool is_http(std::string_view endpoint) {
  return endpoint.rfind("http://", 0) == 0 || endpoint.rfind("https://", 0) == 0;
}

inline std::unique_ptr<MtClient> make_mt_client(const EndpointConfig& e) {
  if (e.endpoint == "mock:identity") return std::make_unique<mock::IdentityMt>();
  if (e.endpoint == "mock:truncate") return mock::truncating_mt();
  if (is_http(e.endpoint)) return std::make_unique<HttpMtClient>(to_http_endpoint(e));
  throw ValidationError("config", "unsupported MT endpoint '" + e.endpoint + "'", "mt.endpoint");
}

// `name` becomes the model id (defaults to the configured model, then the
// endpoint string).
inline std::unique_ptr<LlmClient> make_llm_client(const EndpointConfig& e, std::string name = {}) {
  if (name.empty()) name = e.model.empty() ? e.endpoint : e.model;
  if (e.endpoint == "mock:echo") return std::make_unique<mock::EchoLlm>(name);
  if (e.endpoint == "mock:gibberish") return mock::gibberish_llm(name);
  if (e.endpoint.rfind("mock:constant:", 0) == 0) {
    std::string text = e.endpoint.substr(14);
    return std::make_unique<mock::FunctionLlm>(name, [text](const CompletionRequest&) { return text; });
  }
  if (is_http(e.endpoint)) return std::make_unique<HttpLlmClient>(to_http_endpoint(e), name);
  throw ValidationError("config", "unsupported LLM endpoint '" + e.endpoint + "'", "llm.endpoint");
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string step;
  ordered_json config;
  std::string config_digest;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<std::pair<std::string, std::string>> inputs;   // path, sha256
  std::vector<std::pair<std::string, std::string>> outputs;  // path relative to the step dir, sha256
  ordered_json summary = ordered_json::object();

  ordered_json to_json() const {
    ordered_json j;
    j["tool"] = "sftkit";
    j["step"] = step;
    j["config_digest"] = config_digest;
    j["seeds"] = seeds;
    auto files = [](const auto& v) {
      ordered_json a = ordered_json::array();
      for (const auto& [p, h] : v) a.push_back({{"path", p}, {"sha256", h}});
      return a;
    };
    j["inputs"] = files(inputs);
    j["outputs"] = files(outputs);
    j["summary"] = summary;
    j["config"] = config;
    return j;
  }
};

inline std::string file_digest(const std::filesystem::path& p) { return sha256_hex(read_file(p)); }

class StepWriter {
 public:
  StepWriter(const PipelineConfig& cfg, std::string step)
      : dir_(std::filesystem::path(cfg.output_dir) / step) {
    manifest_.step = std::move(step);
    manifest_.config = to_json(cfg, true);
    manifest_.config_digest = config_digest(cfg);
    manifest_.seeds["seed"] = cfg.seed;
    if (cfg.mixture) manifest_.seeds["mixture"] = cfg.mixture->seed;
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }
  RunManifest& manifest() { return manifest_; }

  void input(const std::filesystem::path& p) { manifest_.inputs.emplace_back(p.string(), file_digest(p)); }

  void output(const std::string& name, std::string_view contents) {
    write_file(dir_ / name, contents);
    manifest_.outputs.emplace_back(name, sha256_hex(contents));
  }

  std::filesystem::path finish() {
    const auto path = dir_ / "manifest.json";
    write_file(path, manifest_.to_json().dump(2) + "\n");
    return path;
  }

 private:
  std::filesystem::path dir_;
  RunManifest manifest_;
};

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

inline std::filesystem::path step_path(const PipelineConfig& c, std::string_view step, std::string_view file) {
  return std::filesystem::path(c.output_dir) / step / file;
}

inline std::vector<InstructionRecord> run_ingest(const PipelineConfig& cfg, JsonLogger& log) {
  if (cfg.datasets.empty()) throw ValidationError("config", "no datasets configured", "datasets");
  StepWriter w(cfg, "ingest");
  std::vector<InstructionRecord> all;
  std::set<std::string> ids;
  for (const auto& d : cfg.datasets) {
    w.input(d.path);
    auto recs = ingest(d.path, d.format);
    for (auto& r : recs) {
      if (d.source_dataset) r.source_dataset = SourceDataset::parse(*d.source_dataset);
      if (!ids.insert(r.id).second) {
        throw ValidationError("corpus", "record id '" + r.id + "' appears in more than one dataset", "id");
      }
    }
    log.info("ingest.file", {{"path", d.path}, {"records", recs.size()}});
    all.insert(all.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  w.output("records.jsonl", records_to_lines(all));
  w.manifest().summary["records"] = all.size();
  w.finish();
  return all;
}

inline std::string translated_id(const InstructionRecord& r, const std::string& lang) { return r.id + "#" + lang; }

// Translates every source-language record into the target language. Records
// whose translation fails after retries are left out and listed in
// failures.jsonl.
inline std::vector<InstructionRecord> run_translate(const PipelineConfig& cfg,
                                                    const std::vector<InstructionRecord>& records, MtClient& mt,
                                                    JsonLogger& log, const std::filesystem::path* input = nullptr) {
  StepWriter w(cfg, "translate");
  if (input) w.input(*input);
  std::optional<ContentCache> cache;
  if (cfg.cache_dir) cache.emplace(std::filesystem::path(*cfg.cache_dir));
  std::vector<const InstructionRecord*> todo;
  for (const auto& r : records) {
    if (r.language == cfg.source_language) todo.push_back(&r);
  }
  struct Outcome {
    std::optional<InstructionRecord> record;
    std::string error;
  };
  auto outcomes = parallel_map(todo.size(), mt.parallelism(), [&](std::size_t i) {
    const auto& src = *todo[i];
    MtRequest req{{}, cfg.source_language, cfg.target_language};
    for (const auto& m : src.turns) req.texts.push_back(m.text);
    Outcome o;
    try {
      auto out = translate(req, mt, cache ? &*cache : nullptr);
      InstructionRecord t = src;
      t.id = translated_id(src, cfg.target_language);
      t.language = cfg.target_language;
      t.lineage = src.id;
      for (std::size_t k = 0; k < t.turns.size(); ++k) t.turns[k].text = out[k];
      validate(t);
      o.record = std::move(t);
    } catch (const ServiceError& e) {
      o.error = e.what();
    } catch (const ValidationError& e) {
      o.error = e.what();
    }
    return o;
  });
  std::vector<InstructionRecord> translated;
  std::string failures;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].record) {
      translated.push_back(std::move(*outcomes[i].record));
    } else {
      failures += ordered_json{{"id", todo[i]->id}, {"error", outcomes[i].error}}.dump() + "\n";
      log.warn("translate.failed", {{"id", todo[i]->id}, {"error", outcomes[i].error}});
    }
  }
  w.output("records.jsonl", records_to_lines(translated));
  w.output("failures.jsonl", failures);
  w.manifest().summary["translated"] = translated.size();
  w.manifest().summary["failed"] = todo.size() - translated.size();
  w.manifest().summary["mt_endpoint"] = mt.endpoint_id();
  w.finish();
  log.info("translate.done", {{"translated", translated.size()}, {"failed", todo.size() - translated.size()}});
  return translated;
}

// Keeps every untranslated record, and each translated record whose
// round-trip score clears the threshold.
inline std::vector<InstructionRecord> run_filter(const PipelineConfig& cfg, const std::vector<InstructionRecord>& sources,
                                                 const std::vector<InstructionRecord>& translated, MtClient& mt,
                                                 JsonLogger& log) {
  validate(cfg, false);
  StepWriter w(cfg, "filter");
  std::optional<ContentCache> cache;
  if (cfg.cache_dir) cache.emplace(std::filesystem::path(*cfg.cache_dir));
  FilterOptions opts;
  opts.chrf = cfg.chrf;
  opts.threshold = cfg.threshold;
  opts.per_turn = cfg.per_turn;
  opts.cache = cache ? &*cache : nullptr;
  auto result = roundtrip_filter(pair_by_lineage(sources, translated), mt, opts);

  std::vector<InstructionRecord> kept = sources;
  kept.insert(kept.end(), result.kept.begin(), result.kept.end());
  std::vector<InstructionRecord> before = sources;
  before.insert(before.end(), translated.begin(), translated.end());
  const auto manifest = manifest_report(before, kept);

  w.output("records.jsonl", records_to_lines(kept));
  w.output("filter_report.json", result.report.to_json().dump(2) + "\n");
  w.output("dataset_manifest.json", manifest.to_json().dump(2) + "\n");
  w.output("dataset_manifest.txt", manifest.render_table());
  std::size_t undecided = 0;
  for (const auto& d : result.report.decisions) undecided += d.status == FilterStatus::undecided;
  w.manifest().summary["pairs"] = result.report.decisions.size();
  w.manifest().summary["kept"] = result.kept.size();
  w.manifest().summary["undecided"] = undecided;
  w.finish();
  log.info("filter.done",
           {{"pairs", result.report.decisions.size()}, {"kept", result.kept.size()}, {"undecided", undecided}});
  return kept;
}

inline std::vector<InstructionRecord> run_sample(const PipelineConfig& cfg, const std::vector<InstructionRecord>& records,
                                                 JsonLogger& log, const std::filesystem::path* input = nullptr) {
  if (!cfg.mixture) throw ValidationError("config", "sampling needs a mixture plan", "mixture");
  StepWriter w(cfg, "sample");
  if (input) w.input(*input);
  auto picked = sample_mixture(records, *cfg.mixture);
  w.output("records.jsonl", records_to_lines(picked));
  w.output("dataset_manifest.txt", manifest_report(records, picked).render_table());
  w.manifest().summary["selected"] = picked.size();
  w.manifest().summary["available"] = records.size();
  w.finish();
  log.info("sample.done", {{"selected", picked.size()}, {"available", records.size()}});
  return picked;
}

inline std::unique_ptr<Tokenizer> make_tokenizer(const std::string& spec) {
  if (spec == "whitespace") return std::make_unique<WhitespaceTokenizer>();
  return std::make_unique<VocabTokenizer>(VocabTokenizer::from_file(spec));
}

inline std::vector<ChatExample> run_serialize(const PipelineConfig& cfg, const std::vector<InstructionRecord>& records,
                                              JsonLogger& log, const std::filesystem::path* input = nullptr) {
  StepWriter w(cfg, "serialize");
  if (input) w.input(*input);
  auto tok = make_tokenizer(cfg.serialize.tokenizer);
  std::vector<ChatExample> examples;
  examples.reserve(records.size());
  // Serial on purpose: the whitespace tokenizer assigns ids on first sight,
  // so record order fixes the vocabulary.
  for (const auto& r : records) examples.push_back(serialize_chat(r, *tok, cfg.serialize.chat_template));
  std::size_t oversized = 0;
  for (const auto& ex : examples) oversized += ex.token_ids.size() > cfg.serialize.max_len;
  if (cfg.serialize.pack) examples = pack_examples(examples, cfg.serialize.max_len);

  std::string lines;
  for (const auto& ex : examples) lines += to_json(ex).dump() + "\n";
  w.output("examples.jsonl", lines);
  w.output("training_config.json", to_json(cfg.serialize.training).dump(2) + "\n");
  if (auto* ws = dynamic_cast<WhitespaceTokenizer*>(tok.get())) {
    w.output("vocab.json", json(ws->vocabulary()).dump() + "\n");
    w.manifest().summary["vocab_size"] = ws->vocab_size();
  }
  w.manifest().summary["records"] = records.size();
  w.manifest().summary["examples"] = examples.size();
  w.manifest().summary["oversized_records"] = oversized;
  w.finish();
  log.info("serialize.done", {{"records", records.size()}, {"examples", examples.size()}, {"oversized", oversized}});
  return examples;
}

// ingest -> translate -> filter -> sample -> serialize
inline std::vector<ChatExample> run_pipeline(const PipelineConfig& cfg, JsonLogger& log) {
  validate(cfg);
  auto mt = make_mt_client(cfg.mt);
  const auto records = run_ingest(cfg, log);
  const auto translated = run_translate(cfg, records, *mt, log);
  const auto filtered = run_filter(cfg, records, translated, *mt, log);
  const auto mixture = cfg.mixture ? run_sample(cfg, filtered, log) : filtered;
  return run_serialize(cfg, mixture, log);
}

}  // namespace sftkit
