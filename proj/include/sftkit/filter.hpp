#pragma once

// Round-trip translation filtering: back-translate each translated record,
// score it against its source with chrF++ and keep it when the score clears
// the threshold.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sftkit/corpus.hpp"
#include "sftkit/metrics.hpp"
#include "sftkit/service_clients.hpp"

namespace sftkit {

inline constexpr double kDefaultRoundtripThreshold = 50.0;

enum class FilterStatus { kept, dropped, undecided };

inline std::string_view status_name(FilterStatus s) {
  switch (s) {
    case FilterStatus::kept: return "kept";
    case FilterStatus::dropped: return "dropped";
    case FilterStatus::undecided: return "undecided";
  }
  return "?";
}

struct FilterDecision {
  std::string record_id;   // translated record
  std::string source_id;   // record it was translated from
  SourceDataset dataset;
  std::string language;
  std::optional<double> roundtrip_score;  // absent when undecided
  bool kept = false;
  double threshold = kDefaultRoundtripThreshold;
  FilterStatus status = FilterStatus::undecided;
  std::string error;  // why the pair is undecided
};

struct FilterDatasetCounts {
  SourceDataset dataset;
  std::string language;
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::size_t undecided = 0;
  std::size_t total() const { return kept + dropped + undecided; }
};

struct FilterReport {
  double threshold = kDefaultRoundtripThreshold;
  std::vector<FilterDecision> decisions;

  static constexpr double kBinWidth = 5.0;
  static constexpr std::size_t kBins = 20;

  std::vector<FilterDatasetCounts> dataset_counts() const {
    std::map<std::pair<SourceDataset, std::string>, FilterDatasetCounts> m;
    for (const auto& d : decisions) {
      auto& c = m[{d.dataset, d.language}];
      c.dataset = d.dataset;
      c.language = d.language;
      switch (d.status) {
        case FilterStatus::kept: ++c.kept; break;
        case FilterStatus::dropped: ++c.dropped; break;
        case FilterStatus::undecided: ++c.undecided; break;
      }
    }
    std::vector<FilterDatasetCounts> out;
    for (auto& [_, c] : m) out.push_back(std::move(c));
    return out;
  }

  // Bin i counts scores in [5i, 5i+5); 100 falls in the last bin.
  std::array<std::size_t, kBins> histogram() const {
    std::array<std::size_t, kBins> h{};
    for (const auto& d : decisions) {
      if (!d.roundtrip_score) continue;
      auto bin = static_cast<std::size_t>(std::max(0.0, *d.roundtrip_score) / kBinWidth);
      h[std::min(bin, kBins - 1)]++;
    }
    return h;
  }

  ordered_json to_json() const {
    ordered_json j;
    j["threshold"] = threshold;
    ordered_json ds = ordered_json::array();
    for (const auto& c : dataset_counts()) {
      ds.push_back({{"dataset", c.dataset.name()},
                    {"language", c.language},
                    {"total", c.total()},
                    {"kept", c.kept},
                    {"dropped", c.dropped},
                    {"undecided", c.undecided}});
    }
    j["datasets"] = std::move(ds);
    ordered_json hist = ordered_json::array();
    const auto h = histogram();
    for (std::size_t i = 0; i < kBins; ++i) {
      hist.push_back({{"lo", i * kBinWidth}, {"hi", (i + 1) * kBinWidth}, {"count", h[i]}});
    }
    j["histogram"] = std::move(hist);
    ordered_json dec = ordered_json::array();
    for (const auto& d : decisions) {
      ordered_json o;
      o["record_id"] = d.record_id;
      o["source_id"] = d.source_id;
      o["dataset"] = d.dataset.name();
      o["language"] = d.language;
      o["roundtrip_score"] = d.roundtrip_score ? ordered_json(*d.roundtrip_score) : ordered_json(nullptr);
      o["status"] = status_name(d.status);
      if (!d.error.empty()) o["error"] = d.error;
      dec.push_back(std::move(o));
    }
    j["decisions"] = std::move(dec);
    return j;
  }
};

struct FilterOptions {
  ChrfConfig chrf;
  double threshold = kDefaultRoundtripThreshold;
  // Score every turn separately and keep the record only if its weakest
  // turn clears the threshold. Off: the whole example is scored at once.
  bool per_turn = false;
  TranslateOptions translate;
  ContentCache* cache = nullptr;
  // Replaces chrF++ (hyp, ref) -> [0,100]; for tests and alternative metrics.
  std::function<double(std::string_view, std::string_view)> scorer;
};

struct FilterResult {
  std::vector<InstructionRecord> kept;
  FilterReport report;
};

struct TranslationPair {
  InstructionRecord source;      // original (English)
  InstructionRecord translated;  // its translation, lineage -> source.id
};

namespace detail {

inline void check_lineage(const TranslationPair& p) {
  const auto& t = p.translated;
  if (!t.lineage || *t.lineage != p.source.id) {
    throw ValidationError("filter", "record '" + t.id + "' has lineage '" + t.lineage.value_or("") +
                                        "' but is paired with '" + p.source.id + "'",
                          "lineage");
  }
  if (t.turns.size() != p.source.turns.size()) {
    throw ValidationError("filter", "record '" + t.id + "' has " + std::to_string(t.turns.size()) +
                                        " turns, its source has " + std::to_string(p.source.turns.size()),
                          "turns");
  }
  for (std::size_t i = 0; i < t.turns.size(); ++i) {
    if (t.turns[i].role != p.source.turns[i].role) {
      throw ValidationError("filter", "record '" + t.id + "' turn " + std::to_string(i) + " role differs from source",
                            "turns");
    }
  }
}

inline std::string joined_texts(const std::vector<Message>& turns) {
  std::string out;
  for (std::size_t i = 0; i < turns.size(); ++i) {
    if (i) out += '\n';
    out += turns[i].text;
  }
  return out;
}

}  // namespace detail

// Thresholds above 100 are accepted and keep nothing; negative or NaN
// thresholds are rejected.
inline FilterResult roundtrip_filter(const std::vector<TranslationPair>& pairs, MtClient& mt,
                                     const FilterOptions& opts = {}) {
  if (!(opts.threshold >= 0)) throw ValidationError("filter", "threshold must be >= 0", "threshold");
  opts.chrf.validate();
  for (const auto& p : pairs) detail::check_lineage(p);

  auto score_fn = [&](std::string_view hyp, std::string_view ref) {
    return opts.scorer ? opts.scorer(hyp, ref) : chrf_pp(hyp, ref, opts.chrf).value;
  };

  auto decisions = parallel_map(pairs.size(), mt.parallelism(), [&](std::size_t i) {
    const auto& src = pairs[i].source;
    const auto& tr = pairs[i].translated;
    FilterDecision d;
    d.record_id = tr.id;
    d.source_id = src.id;
    d.dataset = tr.source_dataset;
    d.language = tr.language;
    d.threshold = opts.threshold;
    try {
      MtRequest req;
      req.source_lang = tr.language;
      req.target_lang = src.language;
      for (const auto& m : tr.turns) req.texts.push_back(m.text);
      const auto back = translate(req, mt, opts.cache, opts.translate);
      double score;
      if (opts.per_turn) {
        std::optional<double> worst;
        for (std::size_t t = 0; t < back.size(); ++t) {
          if (src.turns[t].text.empty()) continue;
          const double s = score_fn(back[t], src.turns[t].text);
          worst = worst ? std::min(*worst, s) : s;
        }
        if (!worst) throw ValidationError("filter", "source record has no text to score against");
        score = *worst;
      } else {
        std::vector<Message> bt = tr.turns;
        for (std::size_t t = 0; t < bt.size(); ++t) bt[t].text = back[t];
        score = score_fn(detail::joined_texts(bt), detail::joined_texts(src.turns));
      }
      d.roundtrip_score = score;
      d.kept = score >= opts.threshold;
      d.status = d.kept ? FilterStatus::kept : FilterStatus::dropped;
    } catch (const ServiceError& e) {
      d.status = FilterStatus::undecided;
      d.error = e.what();
    } catch (const ValidationError& e) {
      d.status = FilterStatus::undecided;
      d.error = e.what();
    }
    return d;
  });

  FilterResult result;
  result.report.threshold = opts.threshold;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (decisions[i].kept) result.kept.push_back(pairs[i].translated);
  }
  result.report.decisions = std::move(decisions);
  return result;
}

// Pairs translated records with their sources through lineage. Translated
// records whose lineage is unknown are a validation error.
inline std::vector<TranslationPair> pair_by_lineage(const std::vector<InstructionRecord>& sources,
                                                    const std::vector<InstructionRecord>& translated) {
  std::unordered_map<std::string, const InstructionRecord*> by_id;
  for (const auto& r : sources) by_id.emplace(r.id, &r);
  std::vector<TranslationPair> out;
  out.reserve(translated.size());
  for (const auto& t : translated) {
    if (!t.lineage) throw ValidationError("filter", "record '" + t.id + "' has no lineage", "lineage");
    auto it = by_id.find(*t.lineage);
    if (it == by_id.end()) {
      throw ValidationError("filter", "record '" + t.id + "' points at unknown source '" + *t.lineage + "'",
                            "lineage");
    }
    out.push_back({*it->second, t});
  }
  return out;
}

// Unfiltered = every decision (undecided included), filtered = kept.
inline DatasetManifest filter_stats(const FilterReport& report) {
  if (report.decisions.empty()) throw ValidationError("filter", "filter report has no decisions");
  DatasetManifest m;
  for (const auto& c : report.dataset_counts()) m.add({c.dataset, c.language, c.total(), c.kept});
  return m;
}

}  // namespace sftkit
