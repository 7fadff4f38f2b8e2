#pragma once

// k-shot evaluation: task files, prompt construction, generative answer
// parsing, translate-test, scoring and report tables.

#include <chrono>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sftkit/metrics.hpp"
#include "sftkit/service_clients.hpp"

namespace sftkit {

enum class TaskKind { classification, extractive_qa, generation, translation };
enum class MetricKind { accuracy, macro_f1, token_f1, rouge_l, chrf_pp };

inline std::string_view kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::classification: return "classification";
    case TaskKind::extractive_qa: return "extractive_qa";
    case TaskKind::generation: return "generation";
    case TaskKind::translation: return "translation";
  }
  return "?";
}

inline std::string_view metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::macro_f1: return "macro_f1";
    case MetricKind::token_f1: return "token_f1";
    case MetricKind::rouge_l: return "rouge_l";
    case MetricKind::chrf_pp: return "chrf_pp";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  for (auto k : {TaskKind::classification, TaskKind::extractive_qa, TaskKind::generation, TaskKind::translation}) {
    if (kind_name(k) == s) return k;
  }
  throw ValidationError("eval", "unknown task kind '" + std::string(s) + "'", "kind");
}

inline MetricKind parse_metric(std::string_view s) {
  for (auto m : {MetricKind::accuracy, MetricKind::macro_f1, MetricKind::token_f1, MetricKind::rouge_l,
                 MetricKind::chrf_pp}) {
    if (metric_name(m) == s) return m;
  }
  throw ValidationError("eval", "unknown metric '" + std::string(s) + "'", "metric");
}

inline MetricKind default_metric(TaskKind k) {
  switch (k) {
    case TaskKind::classification: return MetricKind::accuracy;
    case TaskKind::extractive_qa: return MetricKind::token_f1;
    case TaskKind::generation: return MetricKind::rouge_l;
    case TaskKind::translation: return MetricKind::chrf_pp;
  }
  return MetricKind::accuracy;
}

inline bool metric_fits(TaskKind k, MetricKind m) {
  switch (k) {
    case TaskKind::classification: return m == MetricKind::accuracy || m == MetricKind::macro_f1;
    case TaskKind::extractive_qa: return m == MetricKind::token_f1;
    case TaskKind::generation: return m == MetricKind::rouge_l;
    case TaskKind::translation: return m == MetricKind::chrf_pp;
  }
  return false;
}

struct EvalItem {
  std::string id;
  std::map<std::string, std::string> fields;
  std::string gold;

  friend bool operator==(const EvalItem&, const EvalItem&) = default;
};

struct EvalTask {
  std::string name;
  TaskKind kind = TaskKind::classification;
  MetricKind metric = MetricKind::accuracy;
  std::string language = "hi";
  std::string instruction;
  // "{field}" placeholders; empty renders "field: value" lines.
  std::string input_template;
  std::string answer_cue = "Answer:";
  std::vector<std::string> labels;                   // classification verbalizers
  std::map<std::string, std::string> english_labels;  // label -> English verbalizer
  std::vector<EvalItem> items;
  std::vector<EvalItem> demo_pool;
  int k_shot = 0;
  std::map<std::string, std::string> metadata;

  void validate() const {
    if (name.empty()) throw ValidationError("eval", "task has no name", "name");
    if (items.empty()) throw ValidationError("eval", "task '" + name + "' has no items", "items");
    if (!metric_fits(kind, metric)) {
      throw ValidationError("eval", "metric " + std::string(metric_name(metric)) + " does not fit " +
                                        std::string(kind_name(kind)) + " task '" + name + "'",
                            "metric");
    }
    if (k_shot < 0) throw ValidationError("eval", "k_shot must be >= 0", "k_shot");
    std::unordered_set<std::string> ids;
    for (const auto& it : items) {
      if (it.id.empty()) throw ValidationError("eval", "task '" + name + "' has an item without id", "id");
      if (!ids.insert(it.id).second) throw ValidationError("eval", "duplicate item id '" + it.id + "'", "id");
    }
    if (kind == TaskKind::classification) {
      if (labels.empty()) throw ValidationError("eval", "classification task '" + name + "' has no labels", "labels");
      const std::set<std::string> allowed(labels.begin(), labels.end());
      auto check = [&](const EvalItem& it) {
        if (!allowed.count(it.gold)) {
          throw ValidationError("eval", "item '" + it.id + "' gold '" + it.gold + "' is not a label of '" + name + "'",
                                "gold");
        }
      };
      for (const auto& it : items) check(it);
      for (const auto& it : demo_pool) check(it);
    }
  }
};

// ---------------------------------------------------------------------------
// Task files: a header line {"task": {...}} followed by one line per item
// {"id", "fields", "gold", "split": "test"|"demo"}.
// ---------------------------------------------------------------------------

inline ordered_json task_header_json(const EvalTask& t) {
  ordered_json h;
  h["name"] = t.name;
  h["kind"] = kind_name(t.kind);
  h["metric"] = metric_name(t.metric);
  h["language"] = t.language;
  h["instruction"] = t.instruction;
  h["input_template"] = t.input_template;
  h["answer_cue"] = t.answer_cue;
  h["labels"] = t.labels;
  h["english_labels"] = t.english_labels;
  h["k_shot"] = t.k_shot;
  h["metadata"] = t.metadata;
  return h;
}

inline std::string task_to_lines(const EvalTask& t) {
  std::string out = ordered_json{{"task", task_header_json(t)}}.dump() + "\n";
  auto item_line = [](const EvalItem& it, const char* split) {
    ordered_json j;
    j["id"] = it.id;
    j["fields"] = it.fields;
    j["gold"] = it.gold;
    j["split"] = split;
    return j.dump() + "\n";
  };
  for (const auto& it : t.items) out += item_line(it, "test");
  for (const auto& it : t.demo_pool) out += item_line(it, "demo");
  return out;
}

inline void save_task(const EvalTask& t, const std::filesystem::path& path) { write_file(path, task_to_lines(t)); }

inline EvalTask load_task(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw ValidationError("eval", path.string() + ": empty task file");
  EvalTask t;
  try {
    const json h = json::parse(lines[0].second).at("task");
    t.name = h.at("name").get<std::string>();
    t.kind = parse_task_kind(h.at("kind").get<std::string>());
    t.metric = h.contains("metric") ? parse_metric(h["metric"].get<std::string>()) : default_metric(t.kind);
    t.language = h.value("language", t.language);
    t.instruction = h.value("instruction", "");
    t.input_template = h.value("input_template", "");
    t.answer_cue = h.value("answer_cue", t.answer_cue);
    t.labels = h.value("labels", std::vector<std::string>{});
    t.english_labels = h.value("english_labels", std::map<std::string, std::string>{});
    t.k_shot = h.value("k_shot", 0);
    t.metadata = h.value("metadata", std::map<std::string, std::string>{});
  } catch (const json::exception& e) {
    throw ValidationError("eval", path.string() + ": line " + std::to_string(lines[0].first) + ": bad task header: " +
                                      e.what());
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    try {
      const json j = json::parse(lines[i].second);
      EvalItem it{j.at("id").get<std::string>(), j.at("fields").get<std::map<std::string, std::string>>(),
                  j.at("gold").get<std::string>()};
      const std::string split = j.value("split", "test");
      if (split == "test") {
        t.items.push_back(std::move(it));
      } else if (split == "demo") {
        t.demo_pool.push_back(std::move(it));
      } else {
        throw ValidationError("eval", "unknown split '" + split + "'", "split");
      }
    } catch (const json::exception& e) {
      throw ValidationError("eval", path.string() + ": line " + std::to_string(lines[i].first) + ": " + e.what());
    }
  }
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

inline std::string render_input(const EvalTask& task, const EvalItem& item) {
  if (task.input_template.empty()) {
    std::string out;
    for (const auto& [k, v] : item.fields) {
      if (!out.empty()) out += '\n';
      out += k + ": " + v;
    }
    return out;
  }
  std::string out;
  const std::string& t = task.input_template;
  std::size_t i = 0;
  while (i < t.size()) {
    if (t[i] == '{') {
      const auto close = t.find('}', i);
      if (close == std::string::npos) throw ValidationError("eval", "unterminated placeholder in template", "input_template");
      const std::string key = t.substr(i + 1, close - i - 1);
      auto it = item.fields.find(key);
      if (it == item.fields.end()) {
        throw ValidationError("eval", "item '" + item.id + "' has no field '" + key + "'", "input_template");
      }
      out += it->second;
      i = close + 1;
    } else {
      out += t[i++];
    }
  }
  return out;
}

// Demonstration order is fixed per (task, model): the pool is shuffled once
// with a seed derived from both, and each item takes the first k entries
// that are not the item itself.
inline std::vector<EvalItem> select_demos(const EvalTask& task, const EvalItem& item, int k, std::uint64_t seed,
                                          std::string_view model_id) {
  if (k <= 0) return {};
  std::vector<std::size_t> order(task.demo_pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, task.name + '\x1f' + std::string(model_id)));
  rng.shuffle(order);
  std::vector<EvalItem> out;
  for (std::size_t idx : order) {
    if (out.size() == static_cast<std::size_t>(k)) break;
    if (task.demo_pool[idx].id == item.id) continue;
    out.push_back(task.demo_pool[idx]);
  }
  if (out.size() < static_cast<std::size_t>(k)) {
    throw ValidationError("eval", "task '" + task.name + "' has only " + std::to_string(out.size()) +
                                      " usable demonstrations, " + std::to_string(k) + " requested",
                          "demo_pool");
  }
  return out;
}

// instruction, then k solved demonstrations, then the target input and the
// answer cue. A demonstration that is the target item is rejected.
inline std::string build_prompt(const EvalTask& task, const EvalItem& item, int k, const std::vector<EvalItem>& demos) {
  if (k < 0) throw ValidationError("eval", "k must be >= 0", "k");
  if (demos.size() != static_cast<std::size_t>(k)) {
    throw ValidationError("eval", "expected " + std::to_string(k) + " demonstrations, got " + std::to_string(demos.size()),
                          "demos");
  }
  std::string p;
  if (!task.instruction.empty()) p += task.instruction + "\n\n";
  for (const auto& d : demos) {
    if (d.id == item.id) {
      throw ValidationError("eval", "demonstration '" + d.id + "' is the evaluated item", "demos");
    }
    p += render_input(task, d) + "\n" + task.answer_cue + " " + d.gold + "\n\n";
  }
  p += render_input(task, item) + "\n" + task.answer_cue;
  return p;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

enum class PredictionStatus { ok, invalid, undecided };

inline std::string_view status_name(PredictionStatus s) {
  switch (s) {
    case PredictionStatus::ok: return "ok";
    case PredictionStatus::invalid: return "invalid";
    case PredictionStatus::undecided: return "undecided";
  }
  return "?";
}

inline PredictionStatus parse_prediction_status(std::string_view s) {
  if (s == "ok") return PredictionStatus::ok;
  if (s == "invalid") return PredictionStatus::invalid;
  if (s == "undecided") return PredictionStatus::undecided;
  throw ValidationError("eval", "unknown prediction status '" + std::string(s) + "'");
}

struct Prediction {
  std::string item_id;
  std::string raw;
  std::optional<std::string> parsed;  // label for classification, answer text otherwise
  PredictionStatus status = PredictionStatus::ok;
  std::optional<double> latency_ms;

  bool valid() const { return status == PredictionStatus::ok && parsed.has_value(); }
  friend bool operator==(const Prediction&, const Prediction&) = default;
};

struct EvalOptions {
  int max_tokens = 256;
  double temperature = 0.0;
  std::vector<std::string> stop;
  RetryPolicy retry;
  std::size_t parallelism = 1;
  // Append-only record-lines file; items already present for this
  // (task, model, shots) are reused instead of re-queried.
  std::optional<std::filesystem::path> results_path;
  bool record_latency = true;
};

// Earliest verbalizer occurrence in the text (case-insensitive, on word
// boundaries); longer verbalizers win ties. Returns the index into
// `verbalizers`.
inline std::optional<std::size_t> match_verbalizer(std::string_view text, const std::vector<std::string>& verbalizers) {
  const std::string hay = ascii_lower(text);
  auto is_word = [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || static_cast<unsigned char>(c) >= 0x80;
  };
  std::optional<std::size_t> best;
  std::size_t best_pos = std::string::npos;
  for (std::size_t v = 0; v < verbalizers.size(); ++v) {
    const std::string needle = ascii_lower(verbalizers[v]);
    if (needle.empty()) continue;
    for (std::size_t pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
      const bool left_ok = pos == 0 || !is_word(hay[pos - 1]) || !is_word(needle.front());
      const std::size_t end = pos + needle.size();
      const bool right_ok = end == hay.size() || !is_word(hay[end]) || !is_word(needle.back());
      if (!left_ok || !right_ok) continue;
      if (pos < best_pos || (pos == best_pos && needle.size() > verbalizers[*best].size())) {
        best = v;
        best_pos = pos;
      }
      break;
    }
  }
  return best;
}

namespace detail {

inline ordered_json prediction_line(const std::string& task, const std::string& model, int shots, const Prediction& p) {
  ordered_json j;
  j["task"] = task;
  j["model"] = model;
  j["shots"] = shots;
  j["item_id"] = p.item_id;
  j["raw"] = p.raw;
  j["parsed"] = p.parsed ? ordered_json(*p.parsed) : ordered_json(nullptr);
  j["status"] = status_name(p.status);
  if (p.latency_ms) j["latency_ms"] = *p.latency_ms;
  return j;
}

inline Prediction prediction_from_json(const json& j) {
  Prediction p;
  p.item_id = j.at("item_id").get<std::string>();
  p.raw = j.at("raw").get<std::string>();
  if (!j.at("parsed").is_null()) p.parsed = j["parsed"].get<std::string>();
  p.status = parse_prediction_status(j.at("status").get<std::string>());
  if (j.contains("latency_ms")) p.latency_ms = j["latency_ms"].get<double>();
  return p;
}

inline std::unordered_map<std::string, Prediction> load_existing(const std::optional<std::filesystem::path>& path,
                                                                 const std::string& task, const std::string& model,
                                                                 int shots) {
  std::unordered_map<std::string, Prediction> out;
  if (!path || !std::filesystem::exists(*path)) return out;
  for (const auto& [lineno, line] : read_lines(*path)) {
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      continue;  // torn final line from an interrupted run
    }
    if (j.value("task", "") != task || j.value("model", "") != model || j.value("shots", -1) != shots) continue;
    auto p = prediction_from_json(j);
    out.insert_or_assign(p.item_id, std::move(p));
  }
  return out;
}

inline void append_lines(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("eval", "cannot append to " + path.string());
  out << text;
  out.flush();
}

// Shared driver for run_task and translate_test: `prompt_task` supplies the
// prompts (possibly translated), `interpret` turns raw model text into a
// prediction for item i. Items listed in `undecided` are not queried.
template <typename Interpret>
std::vector<Prediction> drive(const EvalTask& prompt_task, const std::string& result_task_name, LlmClient& model,
                              int k, std::uint64_t seed, const EvalOptions& opts,
                              const std::unordered_map<std::string, std::string>& undecided, Interpret&& interpret) {
  const std::string model_id = model.model_id();
  auto existing = load_existing(opts.results_path, result_task_name, model_id, k);
  const std::size_t n = prompt_task.items.size();
  std::vector<std::optional<Prediction>> out(n);
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& item = prompt_task.items[i];
    if (auto it = existing.find(item.id); it != existing.end()) {
      out[i] = it->second;
    } else if (auto u = undecided.find(item.id); u != undecided.end()) {
      out[i] = Prediction{item.id, "", std::nullopt, PredictionStatus::undecided, std::nullopt};
    } else {
      todo.push_back(i);
    }
  }

  // Work proceeds in chunks of `parallelism` so completed results can be
  // appended in item order before the next chunk starts.
  const std::size_t width = std::max<std::size_t>(1, opts.parallelism);
  for (std::size_t start = 0; start < todo.size(); start += width) {
    const std::size_t stop = std::min(todo.size(), start + width);
    std::vector<std::optional<Prediction>> chunk(stop - start);
    std::exception_ptr failure;
    std::mutex failure_mu;
    parallel_map(stop - start, width, [&](std::size_t c) {
      const std::size_t i = todo[start + c];
      const auto& item = prompt_task.items[i];
      try {
        const auto demos = select_demos(prompt_task, item, k, seed, model_id);
        CompletionRequest req{build_prompt(prompt_task, item, k, demos), opts.max_tokens, opts.temperature, opts.stop};
        const auto t0 = std::chrono::steady_clock::now();
        std::string raw = complete(req, model, opts.retry);
        const auto t1 = std::chrono::steady_clock::now();
        Prediction p = interpret(i, std::move(raw));
        if (opts.record_latency) p.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        chunk[c] = std::move(p);
      } catch (const ServiceError&) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
      return 0;
    });
    std::string lines;
    for (std::size_t c = 0; c < chunk.size(); ++c) {
      if (!chunk[c]) continue;
      lines += prediction_line(result_task_name, model_id, k, *chunk[c]).dump() + "\n";
      out[todo[start + c]] = std::move(chunk[c]);
    }
    if (opts.results_path && !lines.empty()) append_lines(*opts.results_path, lines);
    if (failure) std::rethrow_exception(failure);
  }

  std::vector<Prediction> result;
  result.reserve(n);
  for (auto& p : out) result.push_back(std::move(*p));
  return result;
}

}  // namespace detail

inline Prediction interpret_answer(const EvalTask& task, const EvalItem& item, std::string raw) {
  Prediction p;
  p.item_id = item.id;
  if (task.kind == TaskKind::classification) {
    if (auto m = match_verbalizer(raw, task.labels)) {
      p.parsed = task.labels[*m];
    } else {
      p.status = PredictionStatus::invalid;
    }
  } else {
    p.parsed = trim(raw);
  }
  p.raw = std::move(raw);
  return p;
}

inline std::vector<Prediction> run_task(const EvalTask& task, LlmClient& model, int k, std::uint64_t seed,
                                        const EvalOptions& opts = {}) {
  task.validate();
  return detail::drive(task, task.name, model, k, seed, opts, {},
                       [&](std::size_t i, std::string raw) { return interpret_answer(task, task.items[i], std::move(raw)); });
}

struct TranslateTestOptions {
  EvalOptions eval;
  TranslateOptions translate;
  ContentCache* cache = nullptr;
  std::string pivot_language = "en";
  // Translate free-text answers back into the task language before scoring.
  bool back_translate_answers = true;
  std::string english_instruction;  // replaces task.instruction when set
};

namespace detail {

inline std::optional<EvalItem> translate_item(const EvalItem& item, bool translate_gold, const std::string& src,
                                              const std::string& tgt, MtClient& mt, ContentCache* cache,
                                              const TranslateOptions& topts) {
  MtRequest req{{}, src, tgt};
  for (const auto& [_, v] : item.fields) req.texts.push_back(v);
  if (translate_gold) req.texts.push_back(item.gold);
  if (req.texts.empty()) return item;
  try {
    const auto out = translate(req, mt, cache, topts);
    EvalItem t = item;
    std::size_t i = 0;
    for (auto& [_, v] : t.fields) v = out[i++];
    if (translate_gold) t.gold = out[i];
    return t;
  } catch (const ServiceError&) {
    return std::nullopt;
  }
}

}  // namespace detail

// Translate-test: inputs (and demonstrations) are machine-translated into
// the pivot language, the model is prompted there, classification answers
// are read against the English verbalizer table and mapped back to task
// labels, free-text answers are optionally translated back. Items whose
// translation fails are recorded as undecided.
inline std::vector<Prediction> translate_test(const EvalTask& task, MtClient& mt, LlmClient& model, int k,
                                              std::uint64_t seed, const TranslateTestOptions& opts = {}) {
  task.validate();
  const bool classification = task.kind == TaskKind::classification;
  EvalTask pivot = task;
  pivot.language = opts.pivot_language;
  if (!opts.english_instruction.empty()) pivot.instruction = opts.english_instruction;
  std::vector<std::string> english;
  for (const auto& l : task.labels) {
    auto it = task.english_labels.find(l);
    english.push_back(it == task.english_labels.end() ? l : it->second);
  }
  if (classification) pivot.labels = english;

  std::unordered_map<std::string, std::string> undecided;
  for (std::size_t i = 0; i < task.items.size(); ++i) {
    auto t = detail::translate_item(task.items[i], false, task.language, opts.pivot_language, mt, opts.cache,
                                    opts.translate);
    if (!t) {
      undecided.emplace(task.items[i].id, "translation failed");
      continue;
    }
    if (classification) {
      const auto pos = std::find(task.labels.begin(), task.labels.end(), t->gold) - task.labels.begin();
      t->gold = english[static_cast<std::size_t>(pos)];
    }
    pivot.items[i] = std::move(*t);
  }
  pivot.demo_pool.clear();
  for (const auto& d : task.demo_pool) {
    auto t = detail::translate_item(d, !classification, task.language, opts.pivot_language, mt, opts.cache,
                                    opts.translate);
    if (!t) continue;  // an untranslatable demonstration is skipped
    if (classification) {
      const auto pos = std::find(task.labels.begin(), task.labels.end(), t->gold) - task.labels.begin();
      t->gold = english[static_cast<std::size_t>(pos)];
    }
    pivot.demo_pool.push_back(std::move(*t));
  }

  return detail::drive(pivot, task.name + " [translate-test]", model, k, seed, opts.eval, undecided,
                       [&](std::size_t i, std::string raw) {
                         Prediction p;
                         p.item_id = task.items[i].id;
                         if (classification) {
                           if (auto m = match_verbalizer(raw, english)) {
                             p.parsed = task.labels[*m];
                           } else {
                             p.status = PredictionStatus::invalid;
                           }
                         } else if (opts.back_translate_answers && !trim(raw).empty()) {
                           try {
                             p.parsed = translate(MtRequest{{trim(raw)}, opts.pivot_language, task.language}, mt,
                                                  opts.cache, opts.translate)
                                            .front();
                           } catch (const ServiceError&) {
                             p.status = PredictionStatus::undecided;
                           }
                         } else {
                           p.parsed = trim(raw);
                         }
                         p.raw = std::move(raw);
                         return p;
                       });
}

// Machine-translates a benchmark into another language: every field and
// every free-text gold goes through the MT client, classification labels are
// kept. The result is named "<name> (Translated)".
inline EvalTask translate_benchmark(const EvalTask& task, MtClient& mt, const std::string& target_language,
                                   ContentCache* cache = nullptr, const TranslateOptions& topts = {}) {
  task.validate();
  EvalTask out = task;
  out.name = task.name + " (Translated)";
  out.language = target_language;
  const bool translate_gold = task.kind != TaskKind::classification;
  auto convert = [&](const EvalItem& it) {
    auto t = detail::translate_item(it, translate_gold, task.language, target_language, mt, cache, topts);
    if (!t) throw ServiceError("eval", "could not translate item '" + it.id + "' of task '" + task.name + "'");
    return *t;
  };
  for (auto& it : out.items) it = convert(it);
  for (auto& it : out.demo_pool) it = convert(it);
  if (!task.instruction.empty()) {
    out.instruction = translate(MtRequest{{task.instruction}, task.language, target_language}, mt, cache, topts).front();
  }
  out.metadata["translated_from"] = task.name;
  return out;
}

// ---------------------------------------------------------------------------
// Scoring and reports
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string model;
  std::string task;
  int shots = 0;
  std::string metric;
  double score = 0;
  std::size_t items = 0;
  std::size_t invalid = 0;
  std::size_t undecided = 0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

// Item-averaged metric on the 0-100 scale; invalid and undecided
// predictions score zero.
inline ReportRow score_run(const EvalTask& task, const std::vector<Prediction>& predictions,
                           const std::string& model_id = "", int shots = 0) {
  if (!metric_fits(task.kind, task.metric)) {
    throw ValidationError("eval", "metric " + std::string(metric_name(task.metric)) + " does not fit " +
                                      std::string(kind_name(task.kind)) + " task '" + task.name + "'",
                          "metric");
  }
  std::unordered_map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions) by_id[p.item_id] = &p;
  ReportRow row{model_id, task.name, shots, std::string(metric_name(task.metric)), 0, task.items.size(), 0, 0};
  std::vector<std::optional<std::string>> parsed;
  std::vector<std::string> golds;
  double sum = 0;
  for (const auto& item : task.items) {
    auto it = by_id.find(item.id);
    if (it == by_id.end()) throw ValidationError("eval", "no prediction for item '" + item.id + "'", "predictions");
    const Prediction& p = *it->second;
    if (p.status == PredictionStatus::invalid) ++row.invalid;
    if (p.status == PredictionStatus::undecided) ++row.undecided;
    const std::optional<std::string> answer = p.valid() ? p.parsed : std::nullopt;
    parsed.push_back(answer);
    golds.push_back(item.gold);
    if (!answer) continue;
    switch (task.metric) {
      case MetricKind::accuracy: sum += (*answer == item.gold) ? 100.0 : 0.0; break;
      case MetricKind::macro_f1: break;
      case MetricKind::token_f1: sum += 100.0 * token_f1(*answer, item.gold).value; break;
      case MetricKind::rouge_l: sum += rouge_l(*answer, item.gold).value; break;
      case MetricKind::chrf_pp: sum += item.gold.empty() ? 0.0 : chrf_pp(*answer, item.gold).value; break;
    }
  }
  if (task.metric == MetricKind::macro_f1) {
    row.score = macro_f1(parsed, golds).value;
  } else if (!task.items.empty()) {
    row.score = sum / static_cast<double>(task.items.size());
  }
  return row;
}

inline ordered_json to_json(const ReportRow& r) {
  ordered_json j;
  j["model"] = r.model;
  j["task"] = r.task;
  j["shots"] = r.shots;
  j["metric"] = r.metric;
  j["score"] = r.score;
  j["items"] = r.items;
  j["invalid"] = r.invalid;
  j["undecided"] = r.undecided;
  return j;
}

inline ReportRow report_row_from_json(const json& j) {
  return {j.at("model").get<std::string>(),   j.at("task").get<std::string>(),   j.at("shots").get<int>(),
          j.at("metric").get<std::string>(),  j.at("score").get<double>(),       j.at("items").get<std::size_t>(),
          j.at("invalid").get<std::size_t>(), j.at("undecided").get<std::size_t>()};
}

struct RenderedReport {
  std::string text;
  ordered_json table;
};

// Columns: model, task, one column per shot setting (0 and 5 when there are
// no rows), metric. Rows are sorted by (model, task, metric).
inline RenderedReport render_report(std::vector<ReportRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.model, a.task, a.metric, a.shots) < std::tie(b.model, b.task, b.metric, b.shots);
  });
  std::set<int> shots;
  for (const auto& r : rows) shots.insert(r.shots);
  if (rows.empty()) shots = {0, 5};

  std::vector<std::string> header = {"model", "task"};
  for (int s : shots) header.push_back(std::to_string(s) + "-shot");
  header.push_back("metric");

  std::vector<std::vector<std::string>> cells;
  std::map<std::tuple<std::string, std::string, std::string>, std::map<int, double>> grid;
  for (const auto& r : rows) grid[{r.model, r.task, r.metric}][r.shots] = r.score;
  for (const auto& [key, by_shot] : grid) {
    std::vector<std::string> line = {std::get<0>(key), std::get<1>(key)};
    for (int s : shots) {
      auto it = by_shot.find(s);
      line.push_back(it == by_shot.end() ? "-" : format_fixed(it->second, 2));
    }
    line.push_back(std::get<2>(key));
    cells.push_back(std::move(line));
  }

  std::vector<std::size_t> width(header.size(), 0);
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  }
  auto render_line = [&](const std::vector<std::string>& line) {
    std::string s;
    for (std::size_t c = 0; c < line.size(); ++c) {
      if (c) s += "  ";
      const std::string pad(width[c] - line[c].size(), ' ');
      const bool numeric = c >= 2 && c + 1 < line.size();
      s += numeric ? pad + line[c] : line[c] + pad;
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s + "\n";
  };

  RenderedReport out;
  out.text = render_line(header);
  for (const auto& line : cells) out.text += render_line(line);
  out.table["columns"] = header;
  ordered_json arr = ordered_json::array();
  for (const auto& r : rows) arr.push_back(to_json(r));
  out.table["rows"] = std::move(arr);
  return out;
}

inline std::vector<ReportRow> report_rows_from_json(const json& table) {
  std::vector<ReportRow> rows;
  for (const auto& r : table.at("rows")) rows.push_back(report_row_from_json(r));
  return rows;
}

namespace mock {

// A model that answers every item of `task` with its gold (the label
// verbalizer for classification), for the prompts run_task would build.
inline std::unique_ptr<CannedLlm> gold_echo_model(const EvalTask& task, int k, std::uint64_t seed,
                                                  std::string model_id = "mock:gold",
                                                  std::optional<std::string> fallback = std::nullopt) {
  auto llm = std::make_unique<CannedLlm>(model_id, std::move(fallback));
  for (const auto& item : task.items) {
    const auto demos = select_demos(task, item, k, seed, model_id);
    llm->add(build_prompt(task, item, k, demos), item.gold);
  }
  return llm;
}

}  // namespace mock
}  // namespace sftkit
