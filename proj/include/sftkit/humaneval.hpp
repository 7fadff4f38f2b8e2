#pragma once

// Human evaluation: anonymized prompt/response batches, item assignment to
// annotators, rubric ratings persisted to an append-only log, aggregates.

#include <chrono>
#include <ctime>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sftkit/service_clients.hpp"

namespace sftkit {

enum class Ability { long_form, fact_ops, content, lang_creativity, culture };

inline constexpr std::array<Ability, 5> kAbilities = {Ability::long_form, Ability::fact_ops, Ability::content,
                                                      Ability::lang_creativity, Ability::culture};

inline std::string_view ability_name(Ability a) {
  switch (a) {
    case Ability::long_form: return "Long";
    case Ability::fact_ops: return "Fact-Ops";
    case Ability::content: return "Content";
    case Ability::lang_creativity: return "Lang-Creativity";
    case Ability::culture: return "Culture";
  }
  return "?";
}

inline Ability parse_ability(std::string_view s) {
  for (auto a : kAbilities) {
    if (ability_name(a) == s) return a;
  }
  throw ValidationError("humaneval", "unknown ability '" + std::string(s) + "'", "ability");
}

struct EvalPrompt {
  std::string id;
  std::string text;
  Ability ability = Ability::content;
  std::vector<std::string> tags;  // intent / domain
};

inline std::vector<EvalPrompt> prompts_from_lines(const std::filesystem::path& path) {
  std::vector<EvalPrompt> out;
  std::unordered_set<std::string> seen;
  for (const auto& [lineno, line] : read_lines(path)) {
    const std::string where = path.string() + ": line " + std::to_string(lineno) + ": ";
    try {
      const json j = json::parse(line);
      EvalPrompt p{j.at("id").get<std::string>(), j.at("text").get<std::string>(),
                   parse_ability(j.at("ability").get<std::string>()),
                   j.value("tags", std::vector<std::string>{})};
      if (p.text.empty()) throw ValidationError("humaneval", "empty prompt text", "text");
      if (!seen.insert(p.id).second) throw ValidationError("humaneval", "duplicate prompt id '" + p.id + "'", "id");
      out.push_back(std::move(p));
    } catch (const ValidationError& e) {
      throw ValidationError("humaneval", where + e.what(), e.field());
    } catch (const json::exception& e) {
      throw ValidationError("humaneval", where + e.what());
    }
  }
  return out;
}

struct AnnotationItem {
  std::string id;  // opaque
  std::string prompt_id;
  std::string prompt;
  std::string response;
  Ability ability = Ability::content;
  std::string model_key;  // server side only

  friend bool operator==(const AnnotationItem&, const AnnotationItem&) = default;
};

// What an annotator sees. The model key is deliberately absent.
inline ordered_json annotator_view(const AnnotationItem& it) {
  ordered_json j;
  j["item_id"] = it.id;
  j["prompt_id"] = it.prompt_id;
  j["prompt"] = it.prompt;
  j["response"] = it.response;
  j["ability"] = ability_name(it.ability);
  return j;
}

inline ordered_json to_json(const AnnotationItem& it) {
  ordered_json j = annotator_view(it);
  j["model_key"] = it.model_key;
  return j;
}

inline AnnotationItem annotation_item_from_json(const json& j) {
  return {j.at("item_id").get<std::string>(), j.at("prompt_id").get<std::string>(), j.at("prompt").get<std::string>(),
          j.at("response").get<std::string>(), parse_ability(j.at("ability").get<std::string>()),
          j.at("model_key").get<std::string>()};
}

inline void save_batch(const std::vector<AnnotationItem>& items, const std::filesystem::path& path) {
  std::string out;
  for (const auto& it : items) out += to_json(it).dump() + "\n";
  write_file(path, out);
}

inline std::vector<AnnotationItem> load_batch(const std::filesystem::path& path) {
  std::vector<AnnotationItem> out;
  for (const auto& [lineno, line] : read_lines(path)) {
    try {
      out.push_back(annotation_item_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ValidationError("humaneval", path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

struct BatchOptions {
  int max_tokens = 1024;
  double temperature = 0.0;
  RetryPolicy retry;
};

struct BatchFailure {
  std::string prompt_id;
  std::string model_key;
  std::string error;
};

struct Batch {
  std::vector<AnnotationItem> items;
  std::vector<BatchFailure> failures;  // (prompt, model) pairs left out
};

// One item per (prompt, model), shuffled with the seed. A model failure
// drops that pair and is reported in `failures`.
inline Batch build_batch(const std::vector<EvalPrompt>& prompts, const std::vector<LlmClient*>& models,
                         std::uint64_t seed, const BatchOptions& opts = {}) {
  if (prompts.empty()) throw ValidationError("humaneval", "batch needs at least one prompt", "prompts");
  if (models.empty()) throw ValidationError("humaneval", "batch needs at least one model", "models");
  std::set<std::string> keys;
  for (auto* m : models) {
    if (!keys.insert(m->model_id()).second) {
      throw ValidationError("humaneval", "model '" + m->model_id() + "' listed twice", "models");
    }
  }
  Batch batch;
  for (const auto& p : prompts) {
    for (auto* m : models) {
      const std::string key = m->model_id();
      try {
        CompletionRequest req{p.text, opts.max_tokens, opts.temperature, {}};
        std::string response = complete(req, *m, opts.retry);
        const std::string id =
            "item-" + sha256_hex(std::to_string(seed) + '\x1f' + p.id + '\x1f' + key).substr(0, 16);
        batch.items.push_back({id, p.id, p.text, std::move(response), p.ability, key});
      } catch (const ServiceError& e) {
        batch.failures.push_back({p.id, key, e.what()});
      } catch (const ValidationError& e) {
        batch.failures.push_back({p.id, key, e.what()});
      }
    }
  }
  Rng rng(derive_seed(seed, "humaneval/shuffle"));
  rng.shuffle(batch.items);
  return batch;
}

// ---------------------------------------------------------------------------
// Ratings
// ---------------------------------------------------------------------------

struct RatingRecord {
  std::string item_id;
  std::string annotator;
  int ifa = 0;      // instruction following, 0-2
  int cns = 0;      // closeness to native speaker, 0-2
  int cq = 0;       // content quality, 0-2
  int overall = 1;  // 1-5
  std::string timestamp;

  friend bool operator==(const RatingRecord&, const RatingRecord&) = default;
};

inline void validate_rating(const RatingRecord& r) {
  auto range = [](int v, int lo, int hi, const char* field) {
    if (v < lo || v > hi) {
      throw ValidationError("humaneval",
                            std::string(field) + " must be in " + std::to_string(lo) + ".." + std::to_string(hi) +
                                ", got " + std::to_string(v),
                            field);
    }
  };
  if (r.item_id.empty()) throw ValidationError("humaneval", "item_id is required", "item_id");
  if (r.annotator.empty()) throw ValidationError("humaneval", "annotator is required", "annotator");
  range(r.ifa, 0, 2, "ifa");
  range(r.cns, 0, 2, "cns");
  range(r.cq, 0, 2, "cq");
  range(r.overall, 1, 5, "overall");
}

inline ordered_json to_json(const RatingRecord& r) {
  ordered_json j;
  j["item_id"] = r.item_id;
  j["annotator"] = r.annotator;
  j["ifa"] = r.ifa;
  j["cns"] = r.cns;
  j["cq"] = r.cq;
  j["overall"] = r.overall;
  j["timestamp"] = r.timestamp;
  return j;
}

// Missing or non-integer fields are validation errors naming the field.
inline RatingRecord rating_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("humaneval", "rating must be a JSON object");
  auto str = [&](const char* f) {
    auto it = j.find(f);
    if (it == j.end() || !it->is_string()) throw ValidationError("humaneval", std::string(f) + " must be a string", f);
    return it->get<std::string>();
  };
  auto integer = [&](const char* f) {
    auto it = j.find(f);
    if (it == j.end() || !it->is_number_integer()) {
      throw ValidationError("humaneval", std::string(f) + " must be an integer", f);
    }
    const auto v = it->get<std::int64_t>();
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
      throw ValidationError("humaneval", std::string(f) + " out of range", f);
    }
    return static_cast<int>(v);
  };
  RatingRecord r{str("item_id"), str("annotator"), integer("ifa"), integer("cns"), integer("cq"), integer("overall"),
                 j.contains("timestamp") && j["timestamp"].is_string() ? j["timestamp"].get<std::string>() : ""};
  return r;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Aggregates
// ---------------------------------------------------------------------------

struct MeanCell {
  std::size_t count = 0;
  std::int64_t sum = 0;
  // Half-up at two decimals, computed on integers.
  std::int64_t hundredths() const {
    if (count == 0) return 0;
    return (sum * 200 / static_cast<std::int64_t>(count) + 1) / 2;
  }
  double mean() const { return static_cast<double>(hundredths()) / 100.0; }
  std::string text() const {
    const auto h = hundredths();
    const std::string frac = std::to_string(h % 100);
    return std::to_string(h / 100) + "." + (frac.size() == 1 ? "0" + frac : frac);
  }
  void add(int v) {
    ++count;
    sum += v;
  }
};

struct ModelAggregate {
  std::string model;
  MeanCell overall, ifa, cns, cq;
  std::map<Ability, MeanCell> by_ability;
};

struct AggregateReport {
  std::vector<ModelAggregate> models;  // sorted by model key
  std::size_t ratings = 0;

  const ModelAggregate* find(std::string_view model) const {
    for (const auto& m : models) {
      if (m.model == model) return &m;
    }
    return nullptr;
  }

  ordered_json to_json() const {
    auto cell = [](const MeanCell& c) { return ordered_json{{"mean", c.mean()}, {"count", c.count}}; };
    ordered_json j;
    j["ratings"] = ratings;
    ordered_json arr = ordered_json::array();
    for (const auto& m : models) {
      ordered_json o;
      o["model"] = m.model;
      o["count"] = m.overall.count;
      o["overall"] = cell(m.overall);
      o["ifa"] = cell(m.ifa);
      o["cns"] = cell(m.cns);
      o["cq"] = cell(m.cq);
      ordered_json ab;
      for (const auto& [a, c] : m.by_ability) ab[std::string(ability_name(a))] = cell(c);
      o["by_ability"] = std::move(ab);
      arr.push_back(std::move(o));
    }
    j["models"] = std::move(arr);
    return j;
  }

  std::string render() const {
    std::string out = "model  n  overall  ifa  cns  cq\n";
    for (const auto& m : models) {
      out += m.model + "  " + std::to_string(m.overall.count) + "  " + m.overall.text() + "  " + m.ifa.text() + "  " +
             m.cns.text() + "  " + m.cq.text() + "\n";
    }
    return out;
  }
};

inline AggregateReport aggregate(const std::vector<RatingRecord>& ratings, const std::vector<AnnotationItem>& items) {
  std::unordered_map<std::string, const AnnotationItem*> by_id;
  for (const auto& it : items) by_id.emplace(it.id, &it);
  std::map<std::string, ModelAggregate> m;
  for (const auto& r : ratings) {
    auto it = by_id.find(r.item_id);
    if (it == by_id.end()) throw ValidationError("humaneval", "rating for unknown item '" + r.item_id + "'", "item_id");
    auto& agg = m[it->second->model_key];
    agg.model = it->second->model_key;
    agg.overall.add(r.overall);
    agg.ifa.add(r.ifa);
    agg.cns.add(r.cns);
    agg.cq.add(r.cq);
    agg.by_ability[it->second->ability].add(r.overall);
  }
  AggregateReport rep;
  rep.ratings = ratings.size();
  for (auto& [_, a] : m) rep.models.push_back(std::move(a));
  return rep;
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

// Assignment was never made to this annotator (HTTP 403).
class AssignmentError : public Error {
 public:
  using Error::Error;
};

struct StoreOptions {
  std::size_t raters_per_item = 1;
  std::optional<std::filesystem::path> ratings_log;  // append-only, replayed on construction
};

struct Progress {
  std::size_t items = 0;
  std::size_t raters_per_item = 1;
  std::size_t ratings = 0;
  std::size_t required = 0;
  std::size_t outstanding = 0;  // assigned, not yet rated
  std::map<std::string, std::size_t> per_annotator;

  ordered_json to_json() const {
    ordered_json j;
    j["items"] = items;
    j["raters_per_item"] = raters_per_item;
    j["ratings"] = ratings;
    j["required"] = required;
    j["outstanding"] = outstanding;
    j["complete"] = ratings >= required;
    j["per_annotator"] = per_annotator;
    return j;
  }
};

// Assignment and rating insertion share one writer lock. Readers copy a
// snapshot pointer and never wait on the writer's log I/O.
class HumanEvalStore {
 public:
  explicit HumanEvalStore(std::vector<AnnotationItem> items, StoreOptions opts = {})
      : items_(std::move(items)), opts_(std::move(opts)), ratings_(std::make_shared<const std::vector<RatingRecord>>()) {
    if (opts_.raters_per_item == 0) throw ValidationError("humaneval", "raters_per_item must be >= 1", "raters_per_item");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      if (!index_.emplace(items_[i].id, i).second) {
        throw ValidationError("humaneval", "duplicate item id '" + items_[i].id + "'", "item_id");
      }
    }
    state_.resize(items_.size());
    if (opts_.ratings_log && std::filesystem::exists(*opts_.ratings_log)) replay(*opts_.ratings_log);
  }

  const std::vector<AnnotationItem>& items() const { return items_; }

  std::optional<AnnotationItem> next_item(const std::string& annotator) {
    if (annotator.empty()) throw ValidationError("humaneval", "annotator id is required", "annotator");
    std::lock_guard lock(write_mu_);
    for (std::size_t i = 0; i < items_.size(); ++i) {
      auto& st = state_[i];
      if (st.assigned.count(annotator)) continue;
      if (st.assigned.size() >= opts_.raters_per_item) continue;
      st.assigned.insert(annotator);
      return items_[i];
    }
    return std::nullopt;
  }

  // Returns the stored record (timestamp filled in when absent).
  RatingRecord record_rating(RatingRecord r) {
    validate_rating(r);
    std::lock_guard lock(write_mu_);
    auto it = index_.find(r.item_id);
    if (it == index_.end()) throw NotFoundError("humaneval", "unknown item '" + r.item_id + "'");
    auto& st = state_[it->second];
    if (st.rated.count(r.annotator)) {
      throw ConflictError("humaneval", "item '" + r.item_id + "' already rated by '" + r.annotator + "'");
    }
    if (!st.assigned.count(r.annotator)) {
      throw AssignmentError("humaneval", "item '" + r.item_id + "' is not assigned to '" + r.annotator + "'");
    }
    if (r.timestamp.empty()) r.timestamp = utc_timestamp();
    if (opts_.ratings_log) append_log(*opts_.ratings_log, r);
    st.rated.insert(r.annotator);
    auto next = std::make_shared<std::vector<RatingRecord>>(*snapshot());
    next->push_back(r);
    publish(std::move(next));
    return r;
  }

  std::shared_ptr<const std::vector<RatingRecord>> ratings() const { return snapshot(); }

  AggregateReport aggregates() const { return aggregate(*snapshot(), items_); }

  Progress progress() const {
    std::lock_guard lock(write_mu_);
    Progress p;
    p.items = items_.size();
    p.raters_per_item = opts_.raters_per_item;
    p.required = items_.size() * opts_.raters_per_item;
    for (const auto& st : state_) {
      p.ratings += st.rated.size();
      p.outstanding += st.assigned.size() - st.rated.size();
    }
    for (const auto& r : *snapshot()) p.per_annotator[r.annotator]++;
    return p;
  }

 private:
  struct ItemState {
    std::set<std::string> assigned;  // includes annotators who already rated
    std::set<std::string> rated;
  };

  std::shared_ptr<const std::vector<RatingRecord>> snapshot() const {
    std::lock_guard lock(snapshot_mu_);
    return ratings_;
  }

  void publish(std::shared_ptr<const std::vector<RatingRecord>> next) {
    std::lock_guard lock(snapshot_mu_);
    ratings_ = std::move(next);
  }

  static void append_log(const std::filesystem::path& path, const RatingRecord& r) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw IoError("humaneval", "cannot append to " + path.string());
    out << to_json(r).dump() << '\n';
    out.flush();
    if (!out) throw IoError("humaneval", "write to " + path.string() + " failed");
  }

  void replay(const std::filesystem::path& path) {
    auto loaded = std::make_shared<std::vector<RatingRecord>>();
    for (const auto& [lineno, line] : read_lines(path)) {
      RatingRecord r;
      try {
        r = rating_from_json(json::parse(line));
      } catch (const json::parse_error&) {
        continue;  // torn last line after a crash
      }
      validate_rating(r);
      auto it = index_.find(r.item_id);
      if (it == index_.end()) {
        throw ValidationError("humaneval",
                              path.string() + ": line " + std::to_string(lineno) + ": unknown item '" + r.item_id + "'");
      }
      auto& st = state_[it->second];
      if (!st.rated.insert(r.annotator).second) continue;
      st.assigned.insert(r.annotator);
      loaded->push_back(std::move(r));
    }
    ratings_ = std::move(loaded);
  }

  std::vector<AnnotationItem> items_;
  StoreOptions opts_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<ItemState> state_;
  mutable std::mutex write_mu_;
  mutable std::mutex snapshot_mu_;
  std::shared_ptr<const std::vector<RatingRecord>> ratings_;
};

}  // namespace sftkit
