#pragma once

// Instruction-data model, ingestion, mixture sampling and retention
// manifests.

#include <map>
#include <optional>
#include <regex>
#include <set>
#include <tuple>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sftkit/common.hpp"

namespace sftkit {

enum class Role { system, user, assistant };

inline std::string_view role_name(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "?";
}

inline std::optional<Role> parse_role(std::string_view s) {
  if (s == "system") return Role::system;
  if (s == "user") return Role::user;
  if (s == "assistant") return Role::assistant;
  return std::nullopt;
}

struct Message {
  Role role = Role::user;
  std::string text;

  friend bool operator==(const Message&, const Message&) = default;
};

// Source dataset tag. Known corpora get a fixed kind (which also fixes their
// report ordering); anything else is carried as other(name).
class SourceDataset {
 public:
  enum class Kind {
    flan_v2,
    anthropic_hhh,
    dolly,
    open_assistant,
    lmsys_chat,
    wikihow,
    anudesh,
    nmt,
    other
  };

  SourceDataset() = default;
  explicit SourceDataset(Kind k) : kind_(k) {}

  static SourceDataset other(std::string name) {
    SourceDataset d(Kind::other);
    d.custom_ = std::move(name);
    return d;
  }

  static SourceDataset parse(std::string_view name) {
    for (const auto& [k, n] : table()) {
      if (n == name) return SourceDataset(k);
    }
    return other(std::string(name));
  }

  Kind kind() const { return kind_; }

  std::string name() const {
    if (kind_ == Kind::other) return custom_;
    for (const auto& [k, n] : table()) {
      if (k == kind_) return std::string(n);
    }
    return {};
  }

  std::string display_name() const {
    switch (kind_) {
      case Kind::flan_v2: return "FLAN-v2";
      case Kind::anthropic_hhh: return "Anthropic-HHH";
      case Kind::dolly: return "Dolly";
      case Kind::open_assistant: return "OpenAssistant";
      case Kind::lmsys_chat: return "LMSYS-Chat";
      case Kind::wikihow: return "WikiHow";
      case Kind::anudesh: return "Anudesh";
      case Kind::nmt: return "NMT";
      case Kind::other: return custom_;
    }
    return custom_;
  }

  friend bool operator==(const SourceDataset&, const SourceDataset&) = default;
  friend auto operator<=>(const SourceDataset& a, const SourceDataset& b) {
    if (auto c = a.kind_ <=> b.kind_; c != 0) return c;
    return a.custom_ <=> b.custom_;
  }

 private:
  static const std::vector<std::pair<Kind, std::string_view>>& table() {
    static const std::vector<std::pair<Kind, std::string_view>> t = {
        {Kind::flan_v2, "flan_v2"},       {Kind::anthropic_hhh, "anthropic_hhh"},
        {Kind::dolly, "dolly"},           {Kind::open_assistant, "open_assistant"},
        {Kind::lmsys_chat, "lmsys_chat"}, {Kind::wikihow, "wikihow"},
        {Kind::anudesh, "anudesh"},       {Kind::nmt, "nmt"},
    };
    return t;
  }

  Kind kind_ = Kind::other;
  std::string custom_;
};

struct InstructionRecord {
  std::string id;
  SourceDataset source_dataset;
  std::string language;
  std::vector<Message> turns;
  std::string license;
  std::optional<std::string> lineage;

  friend bool operator==(const InstructionRecord&, const InstructionRecord&) = default;
};

inline bool valid_language_tag(std::string_view tag) {
  static const std::regex re("^[A-Za-z]{2,3}(-[A-Za-z0-9]{2,8})*$");
  return std::regex_match(tag.begin(), tag.end(), re);
}

// Throws ValidationError naming the offending field. An optional leading
// system message is allowed; after it roles alternate user/assistant and the
// conversation ends on an assistant turn.
inline void validate(const InstructionRecord& r) {
  auto fail = [&](const std::string& field, const std::string& why) {
    throw ValidationError("corpus", "record '" + r.id + "': " + field + ": " + why, field);
  };
  if (r.id.empty()) fail("id", "empty");
  if (r.source_dataset.name().empty()) fail("source_dataset", "empty");
  if (!valid_language_tag(r.language)) fail("language", "not a language tag: '" + r.language + "'");
  if (r.turns.empty()) fail("turns", "empty");
  std::size_t start = 0;
  if (r.turns.front().role == Role::system) start = 1;
  if (start == r.turns.size()) fail("turns", "no user/assistant turns");
  for (std::size_t i = start; i < r.turns.size(); ++i) {
    const Role want = ((i - start) % 2 == 0) ? Role::user : Role::assistant;
    if (r.turns[i].role != want) {
      fail("turns[" + std::to_string(i) + "].role",
           "expected " + std::string(role_name(want)) + ", got " +
               std::string(role_name(r.turns[i].role)));
    }
    if (!utf8::valid(r.turns[i].text)) {
      fail("turns[" + std::to_string(i) + "].text", "malformed UTF-8");
    }
  }
  if (r.turns.back().role != Role::assistant) fail("turns", "last turn must be assistant");
}

// Single-turn datasets: instruction and optional input are joined with one
// blank line into the user turn.
inline std::vector<Message> normalize_triple(std::string_view instruction, std::string_view input,
                                             std::string_view output) {
  std::string user(instruction);
  if (!input.empty()) {
    user += "\n\n";
    user += input;
  }
  return {{Role::user, std::move(user)}, {Role::assistant, std::string(output)}};
}

// ---------------------------------------------------------------------------
// Record-lines serialization
// ---------------------------------------------------------------------------

inline ordered_json to_json(const InstructionRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["source_dataset"] = r.source_dataset.name();
  j["language"] = r.language;
  ordered_json turns = ordered_json::array();
  for (const auto& m : r.turns) {
    ordered_json t;
    t["role"] = role_name(m.role);
    t["text"] = m.text;
    turns.push_back(std::move(t));
  }
  j["turns"] = std::move(turns);
  j["license"] = r.license;
  if (r.lineage) j["lineage"] = *r.lineage;
  return j;
}

inline std::string to_record_line(const InstructionRecord& r) { return to_json(r).dump(); }

namespace detail {

inline const json& require(const json& obj, const std::string& field) {
  auto it = obj.find(field);
  if (it == obj.end()) throw ValidationError("corpus", "missing field '" + field + "'", field);
  return *it;
}

inline std::string require_string(const json& obj, const std::string& field) {
  const json& v = require(obj, field);
  if (!v.is_string()) throw ValidationError("corpus", "field '" + field + "' must be a string", field);
  return v.get<std::string>();
}

inline std::vector<Message> parse_turns(const json& arr) {
  if (!arr.is_array()) throw ValidationError("corpus", "field 'turns' must be an array", "turns");
  std::vector<Message> turns;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const json& t = arr[i];
    const std::string where = "turns[" + std::to_string(i) + "]";
    if (!t.is_object()) throw ValidationError("corpus", where + " must be an object", where);
    auto role_it = t.find("role");
    auto text_it = t.find("text");
    if (role_it == t.end() || !role_it->is_string()) {
      throw ValidationError("corpus", "missing field '" + where + ".role'", where + ".role");
    }
    if (text_it == t.end() || !text_it->is_string()) {
      throw ValidationError("corpus", "missing field '" + where + ".text'", where + ".text");
    }
    auto role = parse_role(role_it->get<std::string>());
    if (!role) {
      throw ValidationError("corpus", where + ".role: unknown role '" + role_it->get<std::string>() + "'",
                            where + ".role");
    }
    turns.push_back({*role, text_it->get<std::string>()});
  }
  return turns;
}

}  // namespace detail

// Parses one record object. Lines carrying `instruction` are treated as
// instruction/input/output triples; everything else must carry `turns`.
inline InstructionRecord record_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("corpus", "record must be a JSON object");
  InstructionRecord r;
  r.id = detail::require_string(j, "id");
  r.source_dataset = SourceDataset::parse(detail::require_string(j, "source_dataset"));
  r.language = detail::require_string(j, "language");
  if (j.contains("instruction")) {
    const std::string instruction = detail::require_string(j, "instruction");
    const std::string input = j.contains("input") ? detail::require_string(j, "input") : "";
    r.turns = normalize_triple(instruction, input, detail::require_string(j, "output"));
  } else {
    r.turns = detail::parse_turns(detail::require(j, "turns"));
  }
  r.license = j.contains("license") ? detail::require_string(j, "license") : "";
  if (j.contains("lineage") && !j["lineage"].is_null()) r.lineage = detail::require_string(j, "lineage");
  validate(r);
  return r;
}

enum class IngestFormat { record_lines, conversation_tree };

inline std::optional<IngestFormat> parse_ingest_format(std::string_view s) {
  if (s == "record_lines") return IngestFormat::record_lines;
  if (s == "conversation_tree") return IngestFormat::conversation_tree;
  return std::nullopt;
}

namespace detail {

// Depth-first enumeration of root-to-leaf paths. Trailing user turns are
// trimmed so every emitted path ends on an assistant reply.
inline void collect_paths(const json& node, std::vector<Message>& path,
                          std::vector<std::vector<Message>>& out, const std::string& where) {
  if (!node.is_object()) throw ValidationError("corpus", where + " must be an object", where);
  auto role_it = node.find("role");
  auto text_it = node.find("text");
  if (role_it == node.end() || !role_it->is_string()) {
    throw ValidationError("corpus", "missing field '" + where + ".role'", where + ".role");
  }
  if (text_it == node.end() || !text_it->is_string()) {
    throw ValidationError("corpus", "missing field '" + where + ".text'", where + ".text");
  }
  auto role = parse_role(role_it->get<std::string>());
  if (!role) throw ValidationError("corpus", where + ".role: unknown role", where + ".role");
  path.push_back({*role, text_it->get<std::string>()});
  auto kids = node.find("children");
  if (kids == node.end() || !kids->is_array() || kids->empty()) {
    std::vector<Message> p = path;
    while (!p.empty() && p.back().role != Role::assistant) p.pop_back();
    if (!p.empty()) out.push_back(std::move(p));
  } else {
    for (std::size_t i = 0; i < kids->size(); ++i) {
      collect_paths((*kids)[i], path, out, where + ".children[" + std::to_string(i) + "]");
    }
  }
  path.pop_back();
}

}  // namespace detail

// Conversation-tree lines look like
//   {"id","source_dataset","language","license","root":{"role","text","children":[...]}}
// and expand to one record per root-to-leaf path, with ids "<tree id>/<n>".
inline std::vector<InstructionRecord> records_from_tree(const json& j) {
  if (!j.is_object()) throw ValidationError("corpus", "tree must be a JSON object");
  const std::string id = detail::require_string(j, "id");
  const auto source = SourceDataset::parse(detail::require_string(j, "source_dataset"));
  const std::string language = detail::require_string(j, "language");
  const std::string license = j.contains("license") ? detail::require_string(j, "license") : "";
  std::vector<std::vector<Message>> paths;
  std::vector<Message> scratch;
  detail::collect_paths(detail::require(j, "root"), scratch, paths, "root");
  std::vector<InstructionRecord> out;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    InstructionRecord r{id + "/" + std::to_string(i), source, language, std::move(paths[i]), license,
                        std::nullopt};
    validate(r);
    out.push_back(std::move(r));
  }
  return out;
}

// Reads and validates a whole file. All malformed lines are reported
// together (one "line N: ..." entry each); duplicate ids are an error.
inline std::vector<InstructionRecord> ingest(const std::filesystem::path& path, IngestFormat format) {
  std::vector<InstructionRecord> records;
  std::vector<std::string> problems;
  std::string first_field;
  std::unordered_map<std::string, std::size_t> seen;

  for (auto& [lineno, line] : read_lines(path)) {
    try {
      json j = json::parse(line);
      std::vector<InstructionRecord> got;
      if (format == IngestFormat::record_lines) {
        got.push_back(record_from_json(j));
      } else {
        got = records_from_tree(j);
      }
      for (auto& r : got) {
        auto [it, inserted] = seen.emplace(r.id, lineno);
        if (!inserted) {
          problems.push_back("line " + std::to_string(lineno) + ": duplicate id '" + r.id +
                             "' (first seen on line " + std::to_string(it->second) + ")");
          if (first_field.empty()) first_field = "id";
          continue;
        }
        records.push_back(std::move(r));
      }
    } catch (const json::parse_error& e) {
      problems.push_back("line " + std::to_string(lineno) + ": invalid JSON: " + e.what());
    } catch (const ValidationError& e) {
      problems.push_back("line " + std::to_string(lineno) + ": " + e.what());
      if (first_field.empty()) first_field = e.field();
    }
  }
  if (!problems.empty()) {
    std::string msg = path.string() + ": " + std::to_string(problems.size()) + " invalid entr" +
                      (problems.size() == 1 ? "y" : "ies");
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError("corpus", msg, first_field);
  }
  return records;
}

inline std::string records_to_lines(const std::vector<InstructionRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_record_line(r);
    out += '\n';
  }
  return out;
}

inline void write_records(const std::filesystem::path& path, const std::vector<InstructionRecord>& records) {
  write_file(path, records_to_lines(records));
}

// ---------------------------------------------------------------------------
// Mixture sampling
// ---------------------------------------------------------------------------

struct MixturePlan {
  // dataset name -> max examples per language
  std::map<std::string, std::size_t> caps;
  // 0 means unbounded
  std::size_t total_budget = 0;
  std::uint64_t seed = 0;
};

inline json to_json(const MixturePlan& p) {
  json j;
  j["caps"] = p.caps;
  j["total_budget"] = p.total_budget;
  j["seed"] = p.seed;
  return j;
}

inline MixturePlan mixture_plan_from_json(const json& j) {
  MixturePlan p;
  if (!j.contains("caps") || !j["caps"].is_object()) {
    throw ValidationError("corpus", "mixture plan needs a 'caps' object", "caps");
  }
  for (const auto& [k, v] : j["caps"].items()) {
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ValidationError("corpus", "cap for '" + k + "' must be a nonnegative integer", "caps." + k);
    }
    p.caps[k] = v.get<std::size_t>();
  }
  p.total_budget = j.value("total_budget", std::size_t{0});
  if (!j.contains("seed")) throw ValidationError("corpus", "mixture plan needs a 'seed'", "seed");
  p.seed = j["seed"].get<std::uint64_t>();
  return p;
}

// Uniform selection without replacement of min(cap, available) records per
// (dataset, language) group. Each group draws from its own seed derived from
// the plan seed, so adding a dataset does not perturb the others. Output is
// ordered by dataset, then by original position.
inline std::vector<InstructionRecord> sample_mixture(const std::vector<InstructionRecord>& records,
                                                     const MixturePlan& plan) {
  std::map<SourceDataset, std::map<std::string, std::vector<std::size_t>>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) {
    groups[records[i].source_dataset][records[i].language].push_back(i);
  }
  std::size_t planned = 0;
  for (const auto& [ds, by_lang] : groups) {
    auto cap = plan.caps.find(ds.name());
    if (cap == plan.caps.end()) {
      throw ValidationError("corpus", "dataset '" + ds.name() + "' has no cap in the mixture plan",
                            "caps." + ds.name());
    }
    for (const auto& [lang, idx] : by_lang) planned += std::min(cap->second, idx.size());
  }
  if (plan.total_budget != 0 && planned > plan.total_budget) {
    throw ValidationError("corpus",
                          "mixture selects " + std::to_string(planned) + " records, over the total budget of " +
                              std::to_string(plan.total_budget),
                          "total_budget");
  }

  std::vector<InstructionRecord> out;
  out.reserve(planned);
  for (const auto& [ds, by_lang] : groups) {
    const std::size_t cap = plan.caps.at(ds.name());
    std::vector<std::size_t> chosen;
    for (const auto& [lang, idx] : by_lang) {
      Rng rng(derive_seed(plan.seed, ds.name() + "/" + lang));
      for (std::size_t k : rng.sample_indices(idx.size(), cap)) chosen.push_back(idx[k]);
    }
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t i : chosen) out.push_back(records[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retention manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
  SourceDataset dataset;
  std::string language;
  std::size_t unfiltered = 0;
  std::size_t filtered = 0;

  // filtered/unfiltered in hundredths of a percent, rounded half up with
  // integer arithmetic (67463 -> 65228 gives 9669).
  std::optional<std::uint64_t> retention_basis_points() const {
    if (unfiltered == 0) return std::nullopt;
    const std::uint64_t num = static_cast<std::uint64_t>(filtered) * 20000;
    const std::uint64_t den = static_cast<std::uint64_t>(unfiltered);
    return (num / den + 1) / 2;
  }

  std::string retention_percent() const {
    auto bp = retention_basis_points();
    if (!bp) return "n/a";
    std::string frac = std::to_string(*bp % 100);
    if (frac.size() < 2) frac.insert(0, "0");
    return std::to_string(*bp / 100) + "." + frac + "%";
  }

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

class DatasetManifest {
 public:
  void add(ManifestEntry e) {
    if (e.filtered > e.unfiltered) {
      throw ValidationError("corpus", "manifest entry " + e.dataset.name() + "/" + e.language +
                                          ": filtered count exceeds unfiltered count");
    }
    entries_.push_back(std::move(e));
    std::stable_sort(entries_.begin(), entries_.end(), [](const auto& a, const auto& b) {
      return std::tie(a.dataset, a.language) < std::tie(b.dataset, b.language);
    });
  }

  const std::vector<ManifestEntry>& entries() const { return entries_; }

  const ManifestEntry* find(const SourceDataset& ds, std::string_view language) const {
    for (const auto& e : entries_) {
      if (e.dataset == ds && e.language == language) return &e;
    }
    return nullptr;
  }

  std::size_t total_unfiltered() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.unfiltered;
    return n;
  }

  std::size_t total_filtered() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.filtered;
    return n;
  }

  ordered_json to_json() const {
    ordered_json rows = ordered_json::array();
    for (const auto& e : entries_) {
      ordered_json r;
      r["dataset"] = e.dataset.name();
      r["language"] = e.language;
      r["unfiltered"] = e.unfiltered;
      r["filtered"] = e.filtered;
      r["retention"] = e.retention_percent();
      rows.push_back(std::move(r));
    }
    ordered_json j;
    j["entries"] = std::move(rows);
    j["total_unfiltered"] = total_unfiltered();
    j["total_filtered"] = total_filtered();
    return j;
  }

  static DatasetManifest from_json(const json& j) {
    DatasetManifest m;
    for (const auto& r : j.at("entries")) {
      m.add({SourceDataset::parse(r.at("dataset").get<std::string>()), r.at("language").get<std::string>(),
             r.at("unfiltered").get<std::size_t>(), r.at("filtered").get<std::size_t>()});
    }
    return m;
  }

  // Aligned-column text table, one row per (dataset, language) plus totals.
  std::string render_table() const {
    std::vector<std::array<std::string, 5>> rows;
    rows.push_back({"Dataset", "Language", "Unfiltered", "Filtered", "Retention"});
    for (const auto& e : entries_) {
      rows.push_back({e.dataset.display_name(), e.language, std::to_string(e.unfiltered),
                      std::to_string(e.filtered), e.retention_percent()});
    }
    ManifestEntry total{SourceDataset::other("Total"), "", total_unfiltered(), total_filtered()};
    rows.push_back({"Total", "", std::to_string(total.unfiltered), std::to_string(total.filtered),
                    total.retention_percent()});
    std::array<std::size_t, 5> width{};
    for (const auto& r : rows) {
      for (std::size_t c = 0; c < 5; ++c) width[c] = std::max(width[c], r[c].size());
    }
    std::string out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i == rows.size() - 1 || i == 1) {
        std::size_t total_w = 0;
        for (auto w : width) total_w += w;
        out += std::string(total_w + 8, '-') + "\n";
      }
      std::string line;
      for (std::size_t c = 0; c < 5; ++c) {
        const auto& cell = rows[i][c];
        const std::string pad(width[c] - cell.size(), ' ');
        if (c) line += "  ";
        line += (c < 2) ? cell + pad : pad + cell;
      }
      while (!line.empty() && line.back() == ' ') line.pop_back();
      out += line + "\n";
    }
    return out;
  }

 private:
  std::vector<ManifestEntry> entries_;
};

// Per (dataset, language) counts of `before` vs `after`. Every record in
// `after` must trace back to `before`, either by id or through its lineage.
inline DatasetManifest manifest_report(const std::vector<InstructionRecord>& before,
                                       const std::vector<InstructionRecord>& after) {
  std::unordered_set<std::string> known;
  known.reserve(before.size());
  std::map<std::pair<SourceDataset, std::string>, std::pair<std::size_t, std::size_t>> counts;
  for (const auto& r : before) {
    known.insert(r.id);
    ++counts[{r.source_dataset, r.language}].first;
  }
  for (const auto& r : after) {
    if (!known.count(r.id) && !(r.lineage && known.count(*r.lineage))) {
      throw ValidationError("corpus", "record '" + r.id + "' in filtered corpus has no lineage in the unfiltered corpus",
                            "lineage");
    }
    ++counts[{r.source_dataset, r.language}].second;
  }
  DatasetManifest m;
  for (const auto& [key, c] : counts) m.add({key.first, key.second, c.first, c.second});
  return m;
}

}  // namespace sftkit
