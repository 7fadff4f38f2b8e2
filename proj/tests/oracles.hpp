#pragma once

// Reference implementations used only by tests. They deliberately share no
// code with the library: n-grams are materialized as sorted lists and
// matched by merging, tokenization is re-derived from the metric
// definitions.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

namespace oracle {

inline std::u32string decode(const std::string& s) {
  std::u32string out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    int len = c < 0x80 ? 1 : c < 0xE0 ? 2 : c < 0xF0 ? 3 : 4;
    char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1F) : len == 3 ? (c & 0x0F) : (c & 0x07);
    for (int k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    out.push_back(cp);
    i += len;
  }
  return out;
}

// Python str.isspace() for the code points that occur in fixtures.
inline bool py_space(char32_t c) {
  return c == U' ' || (c >= 0x09 && c <= 0x0D) || (c >= 0x1C && c <= 0x1F) || c == 0x85 || c == 0xA0 ||
         c == 0x1680 || (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F ||
         c == 0x205F || c == 0x3000;
}

inline std::vector<std::u32string> py_split(const std::u32string& s) {
  std::vector<std::u32string> out;
  std::u32string cur;
  for (char32_t c : s) {
    if (py_space(c)) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline bool ascii_punct(char32_t c) {
  static const std::u32string kPunct = U"!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
  return kPunct.find(c) != std::u32string::npos;
}

struct Counts {
  long hyp = 0, ref = 0, match = 0;
};

// Size of the multiset intersection of two n-gram lists.
template <typename T>
long intersect(std::vector<T> a, std::vector<T> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  long m = 0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) {
      ++i;
    } else if (b[j] < a[i]) {
      ++j;
    } else {
      ++m;
      ++i;
      ++j;
    }
  }
  return m;
}

inline Counts char_counts(const std::u32string& h, const std::u32string& r, std::size_t n) {
  std::vector<std::u32string> hs, rs;
  for (std::size_t i = 0; i + n <= h.size(); ++i) hs.push_back(h.substr(i, n));
  for (std::size_t i = 0; i + n <= r.size(); ++i) rs.push_back(r.substr(i, n));
  return {static_cast<long>(hs.size()), static_cast<long>(rs.size()), intersect(hs, rs)};
}

inline std::vector<std::u32string> words(const std::u32string& s) {
  std::vector<std::u32string> out;
  for (const auto& w : py_split(s)) {
    if (w.size() == 1) {
      out.push_back(w);
    } else if (ascii_punct(w.back())) {
      out.push_back(w.substr(0, w.size() - 1));
      out.push_back(w.substr(w.size() - 1));
    } else if (ascii_punct(w.front())) {
      out.push_back(w.substr(0, 1));
      out.push_back(w.substr(1));
    } else {
      out.push_back(w);
    }
  }
  return out;
}

inline Counts word_counts(const std::vector<std::u32string>& h, const std::vector<std::u32string>& r, std::size_t n) {
  auto grams = [n](const std::vector<std::u32string>& t) {
    std::vector<std::vector<std::u32string>> g;
    for (std::size_t i = 0; i + n <= t.size(); ++i) g.emplace_back(t.begin() + i, t.begin() + i + n);
    return g;
  };
  auto hg = grams(h), rg = grams(r);
  return {static_cast<long>(hg.size()), static_cast<long>(rg.size()), intersect(hg, rg)};
}

// chrF++ (character order 6, word order 2, beta 2, whitespace excluded from
// character n-grams).
inline double chrf_pp(const std::string& hyp, const std::string& ref, int char_order = 6, int word_order = 2,
                      double beta = 2.0) {
  const auto h = decode(hyp), r = decode(ref);
  std::u32string hc, rc;
  for (const auto& w : py_split(h)) hc += w;
  for (const auto& w : py_split(r)) rc += w;
  std::vector<Counts> all;
  for (int n = 1; n <= char_order; ++n) all.push_back(char_counts(hc, rc, static_cast<std::size_t>(n)));
  const auto hw = words(h), rw = words(r);
  for (int n = 1; n <= word_order; ++n) all.push_back(word_counts(hw, rw, static_cast<std::size_t>(n)));
  double ps = 0, rs = 0;
  int eff = 0;
  for (const auto& c : all) {
    if (c.hyp > 0 && c.ref > 0) {
      ps += static_cast<double>(c.match) / c.hyp;
      rs += static_cast<double>(c.match) / c.ref;
      ++eff;
    }
  }
  if (eff == 0) return 0.0;
  ps /= eff;
  rs /= eff;
  if (ps + rs == 0) return 0.0;
  const double f = beta * beta;
  return 100.0 * (1 + f) * ps * rs / (f * ps + rs);
}

struct ChrfFixture {
  std::string hyp, ref;
  double expected;  // published reference scorer value
};

inline std::vector<ChrfFixture> load_chrf_fixtures(const std::string& path) {
  std::ifstream in(path);
  std::vector<ChrfFixture> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    out.push_back({j["hyp"].get<std::string>(), j["ref"].get<std::string>(), j["chrf_pp"].get<double>()});
  }
  return out;
}

// ROUGE-L F1 by exhaustive recursion with memo over (i, j).
inline double rouge_l(const std::string& hyp, const std::string& ref) {
  auto split = [](const std::string& s) {
    std::vector<std::string> t;
    std::string cur;
    for (char c : s) {
      if (c == ' ' || c == '\t' || c == '\n') {
        if (!cur.empty()) t.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) t.push_back(cur);
    return t;
  };
  const auto a = split(hyp), b = split(ref);
  std::vector<std::vector<int>> memo(a.size() + 1, std::vector<int>(b.size() + 1, -1));
  std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
    if (i == a.size() || j == b.size()) return 0;
    int& m = memo[i][j];
    if (m >= 0) return m;
    m = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
    return m;
  };
  const int l = go(0, 0);
  if (l == 0) return 0.0;
  const double p = static_cast<double>(l) / a.size(), r = static_cast<double>(l) / b.size();
  return 100.0 * 2 * p * r / (p + r);
}

}  // namespace oracle
