#pragma once

// Text-similarity and classification metrics: chrF++, ROUGE-L, token F1,
// accuracy, macro-F1, plus a pass-through for external neural scorers.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "sftkit/common.hpp"
#include "sftkit/retry.hpp"

namespace sftkit {

struct ChrfConfig {
  int char_order = 6;
  int word_order = 2;
  double beta = 2.0;
  bool strip_whitespace_for_char_ngrams = true;

  void validate() const {
    if (char_order < 1) throw ValidationError("metrics", "char_order must be >= 1", "char_order");
    if (word_order < 0) throw ValidationError("metrics", "word_order must be >= 0", "word_order");
    if (!(beta > 0)) throw ValidationError("metrics", "beta must be > 0", "beta");
  }

  friend bool operator==(const ChrfConfig&, const ChrfConfig&) = default;
};

inline json to_json(const ChrfConfig& c) {
  return {{"char_order", c.char_order},
          {"word_order", c.word_order},
          {"beta", c.beta},
          {"strip_whitespace_for_char_ngrams", c.strip_whitespace_for_char_ngrams}};
}

inline ChrfConfig chrf_config_from_json(const json& j) {
  ChrfConfig c;
  c.char_order = j.value("char_order", c.char_order);
  c.word_order = j.value("word_order", c.word_order);
  c.beta = j.value("beta", c.beta);
  c.strip_whitespace_for_char_ngrams =
      j.value("strip_whitespace_for_char_ngrams", c.strip_whitespace_for_char_ngrams);
  c.validate();
  return c;
}

// Clipped n-gram statistics for one order.
struct NgramStat {
  enum class Kind { character, word };
  Kind kind = Kind::character;
  int order = 0;
  std::size_t matches = 0;
  std::size_t hyp_total = 0;
  std::size_t ref_total = 0;

  double precision() const { return hyp_total ? static_cast<double>(matches) / hyp_total : 0.0; }
  double recall() const { return ref_total ? static_cast<double>(matches) / ref_total : 0.0; }
};

struct Score {
  double value = 0.0;
  // 100 for percentage-scale metrics, 1 for token F1 and external scores.
  double max = 100.0;
  std::vector<NgramStat> components;
};

namespace detail {

inline bool is_ascii_punct(char32_t c) {
  return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
         (c >= 0x7B && c <= 0x7E);
}

// Word tokens for chrF++: whitespace split, then a single trailing (or else
// leading) ASCII punctuation mark is split off any token longer than one
// character. This is the tokenization used by the reference chrF++ scorer.
inline std::vector<std::string> chrf_word_tokens(std::string_view text) {
  std::vector<std::string> out;
  for (auto& w : split_whitespace(text)) {
    if (w.size() == 1) {
      out.push_back(std::move(w));
    } else if (is_ascii_punct(static_cast<unsigned char>(w.back()))) {
      out.push_back(w.substr(0, w.size() - 1));
      out.push_back(w.substr(w.size() - 1));
    } else if (is_ascii_punct(static_cast<unsigned char>(w.front()))) {
      out.push_back(w.substr(0, 1));
      out.push_back(w.substr(1));
    } else {
      out.push_back(std::move(w));
    }
  }
  return out;
}

template <typename Key>
struct NgramCounts {
  std::unordered_map<Key, std::size_t> counts;
  std::size_t total = 0;
};

inline NgramCounts<std::u32string> char_ngrams(const std::u32string& cps, int n) {
  NgramCounts<std::u32string> out;
  const auto len = static_cast<std::size_t>(n);
  if (cps.size() < len) return out;
  for (std::size_t i = 0; i + len <= cps.size(); ++i) {
    ++out.counts[cps.substr(i, len)];
    ++out.total;
  }
  return out;
}

inline NgramCounts<std::string> word_ngrams(const std::vector<std::string>& toks, int n) {
  NgramCounts<std::string> out;
  const auto len = static_cast<std::size_t>(n);
  if (toks.size() < len) return out;
  for (std::size_t i = 0; i + len <= toks.size(); ++i) {
    std::string key = toks[i];
    for (std::size_t k = 1; k < len; ++k) {
      key += ' ';
      key += toks[i + k];
    }
    ++out.counts[key];
    ++out.total;
  }
  return out;
}

template <typename Key>
std::size_t clipped_matches(const NgramCounts<Key>& hyp, const NgramCounts<Key>& ref) {
  std::size_t m = 0;
  for (const auto& [k, c] : hyp.counts) {
    auto it = ref.counts.find(k);
    if (it != ref.counts.end()) m += std::min(c, it->second);
  }
  return m;
}

inline std::u32string strip_spaces(const std::u32string& s) {
  std::u32string out;
  out.reserve(s.size());
  for (char32_t c : s) {
    if (!is_space(c)) out.push_back(c);
  }
  return out;
}

}  // namespace detail

// chrF++ with macro-averaged precision and recall: P and R are averaged over
// the character orders 1..char_order and word orders 1..word_order at which
// both sides have n-grams, then combined as F-beta.
inline Score chrf_pp(std::string_view hypothesis, std::string_view reference, const ChrfConfig& cfg = {}) {
  cfg.validate();
  if (reference.empty()) throw ValidationError("metrics", "chrF++ reference is empty", "reference");
  Score score;
  std::u32string hyp_cps = utf8::decode(hypothesis);
  std::u32string ref_cps = utf8::decode(reference);
  if (cfg.strip_whitespace_for_char_ngrams) {
    hyp_cps = detail::strip_spaces(hyp_cps);
    ref_cps = detail::strip_spaces(ref_cps);
  }
  for (int n = 1; n <= cfg.char_order; ++n) {
    auto h = detail::char_ngrams(hyp_cps, n);
    auto r = detail::char_ngrams(ref_cps, n);
    score.components.push_back(
        {NgramStat::Kind::character, n, detail::clipped_matches(h, r), h.total, r.total});
  }
  if (cfg.word_order > 0) {
    const auto hyp_toks = detail::chrf_word_tokens(hypothesis);
    const auto ref_toks = detail::chrf_word_tokens(reference);
    for (int n = 1; n <= cfg.word_order; ++n) {
      auto h = detail::word_ngrams(hyp_toks, n);
      auto r = detail::word_ngrams(ref_toks, n);
      score.components.push_back({NgramStat::Kind::word, n, detail::clipped_matches(h, r), h.total, r.total});
    }
  }
  double p_sum = 0, r_sum = 0;
  int effective = 0;
  for (const auto& c : score.components) {
    if (c.ref_total == 0 || c.hyp_total == 0) continue;
    p_sum += c.precision();
    r_sum += c.recall();
    ++effective;
  }
  if (effective == 0) return score;
  const double p = p_sum / effective;
  const double r = r_sum / effective;
  const double b2 = cfg.beta * cfg.beta;
  if (p + r > 0) score.value = 100.0 * (1 + b2) * p * r / (b2 * p + r);
  return score;
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// ROUGE-L F1 on whitespace tokens, no stemming.
inline Score rouge_l(std::string_view hypothesis, std::string_view reference) {
  const auto hyp = split_whitespace(hypothesis);
  const auto ref = split_whitespace(reference);
  Score s;
  const std::size_t l = lcs_length(hyp, ref);
  if (l == 0) return s;
  const double p = static_cast<double>(l) / hyp.size();
  const double r = static_cast<double>(l) / ref.size();
  s.value = 100.0 * 2 * p * r / (p + r);
  return s;
}

namespace detail {

inline bool is_punct(char32_t c) {
  return is_ascii_punct(c) || c == 0x0964 || c == 0x0965 ||  // danda, double danda
         (c >= 0x00A1 && c <= 0x00BF && c != 0x00AA && c != 0x00B5 && c != 0x00BA) ||
         (c >= 0x2010 && c <= 0x2027) || (c >= 0x2030 && c <= 0x205E) || (c >= 0x3001 && c <= 0x3003) ||
         (c >= 0x3008 && c <= 0x3011);
}

}  // namespace detail

// Lowercased tokens with surrounding punctuation stripped; tokens that are
// all punctuation disappear.
inline std::vector<std::string> normalized_tokens(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& w : split_whitespace(ascii_lower(text))) {
    std::u32string cps = utf8::decode(w);
    std::size_t b = 0, e = cps.size();
    while (b < e && detail::is_punct(cps[b])) ++b;
    while (e > b && detail::is_punct(cps[e - 1])) --e;
    if (e > b) out.push_back(utf8::encode(std::u32string_view(cps).substr(b, e - b)));
  }
  return out;
}

// Bag-of-tokens F1 in [0,1]. Two empty token bags count as a match.
inline Score token_f1(std::string_view prediction, std::string_view gold) {
  const auto pred = normalized_tokens(prediction);
  const auto ref = normalized_tokens(gold);
  Score s;
  s.max = 1.0;
  if (pred.empty() || ref.empty()) {
    s.value = (pred.empty() && ref.empty()) ? 1.0 : 0.0;
    return s;
  }
  std::unordered_map<std::string, std::size_t> bag;
  for (const auto& t : ref) ++bag[t];
  std::size_t common = 0;
  for (const auto& t : pred) {
    auto it = bag.find(t);
    if (it != bag.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return s;
  const double p = static_cast<double>(common) / pred.size();
  const double r = static_cast<double>(common) / ref.size();
  s.value = 2 * p * r / (p + r);
  return s;
}

inline Score accuracy(const std::vector<std::string>& predictions, const std::vector<std::string>& golds) {
  if (predictions.size() != golds.size()) {
    throw ValidationError("metrics", "accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                                         std::to_string(golds.size()) + " golds");
  }
  Score s;
  if (golds.empty()) return s;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) hit += predictions[i] == golds[i];
  s.value = 100.0 * static_cast<double>(hit) / golds.size();
  return s;
}

// Macro-averaged F1 over labels that occur among golds or predictions.
// A missing prediction (nullopt) is a miss for its gold label.
inline Score macro_f1(const std::vector<std::optional<std::string>>& predictions,
                      const std::vector<std::string>& golds) {
  if (predictions.size() != golds.size()) {
    throw ValidationError("metrics", "macro_f1: prediction/gold length mismatch");
  }
  std::map<std::string, std::array<std::size_t, 3>> tally;  // tp, fp, fn
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const auto& p = predictions[i];
    if (p && *p == golds[i]) {
      ++tally[golds[i]][0];
    } else {
      ++tally[golds[i]][2];
      if (p) ++tally[*p][1];
    }
  }
  Score s;
  if (tally.empty()) return s;
  double sum = 0;
  for (const auto& [label, t] : tally) {
    const double denom = 2.0 * t[0] + t[1] + t[2];
    sum += denom > 0 ? 2.0 * t[0] / denom : 0.0;
  }
  s.value = 100.0 * sum / tally.size();
  return s;
}

// ---------------------------------------------------------------------------
// External scorers (e.g. a served BLEURT model)
// ---------------------------------------------------------------------------

struct ScorePair {
  std::string hyp;
  std::string ref;
};

class ExternalScorerClient {
 public:
  virtual ~ExternalScorerClient() = default;
  // One score per pair in order. Throw TransientError for retryable
  // failures, ServiceError for anything else.
  virtual std::vector<double> score(const std::vector<ScorePair>& pairs) = 0;
};

class ExternalScoreError : public ServiceError {
 public:
  ExternalScoreError(std::size_t pair_index, const std::string& what)
      : ServiceError("metrics", "external scorer failed at pair " + std::to_string(pair_index) + ": " + what),
        pair_index_(pair_index) {}
  std::size_t pair_index() const { return pair_index_; }

 private:
  std::size_t pair_index_;
};

struct ExternalScoreOptions {
  std::size_t batch_size = 64;
  RetryPolicy retry;
};

inline std::vector<Score> external_score(const std::vector<ScorePair>& batch, ExternalScorerClient& scorer,
                                         const ExternalScoreOptions& opts = {}) {
  std::vector<Score> out;
  out.reserve(batch.size());
  const std::size_t step = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t start = 0; start < batch.size(); start += step) {
    const std::size_t end = std::min(batch.size(), start + step);
    std::vector<ScorePair> chunk(batch.begin() + static_cast<std::ptrdiff_t>(start),
                                 batch.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<double> got;
    try {
      got = with_retries(opts.retry, [&] { return scorer.score(chunk); });
    } catch (const ServiceError& e) {
      throw ExternalScoreError(start, e.what());
    }
    if (got.size() != chunk.size()) {
      throw ExternalScoreError(start, "expected " + std::to_string(chunk.size()) + " scores, got " +
                                          std::to_string(got.size()));
    }
    for (double v : got) {
      Score s;
      s.value = v;
      s.max = 1.0;
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace sftkit
