#pragma once

// Brute-force reference implementations for the answer metrics. Random cases
// are built from atoms whose character class is known up front, so the
// oracle never consults a Unicode database.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace oracle {

enum class Cls { letter, digit, space, punct };

struct Atom {
  std::string text;
  Cls cls;
  std::string lower;  // letters only
};

inline const std::vector<Atom>& alphabet() {
  static const std::vector<Atom> atoms = [] {
    std::vector<Atom> a;
    for (char c = 'a'; c <= 'z'; ++c) a.push_back({std::string(1, c), Cls::letter, std::string(1, c)});
    for (char c = 'A'; c <= 'Z'; ++c) {
      a.push_back({std::string(1, c), Cls::letter, std::string(1, static_cast<char>(c - 'A' + 'a'))});
    }
    for (auto [up, lo] : {std::pair{"É", "é"}, {"Ü", "ü"}, {"Ñ", "ñ"},
                          {"é", "é"}, {"ß", "ß"}, {"Ж", "ж"}}) {
      a.push_back({up, Cls::letter, lo});
    }
    for (char c = '0'; c <= '9'; ++c) a.push_back({std::string(1, c), Cls::digit, std::string(1, c)});
    for (const char* w : {" ", "\t", "\n", "\u00a0", "\u2003", "\u3000"}) a.push_back({w, Cls::space, ""});
    const std::string ascii = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
    for (char c : ascii) a.push_back({std::string(1, c), Cls::punct, ""});
    for (const char* p : {"¿", "«", "»", "—", "…", "€", "©", "°", "±"}) {
      a.push_back({p, Cls::punct, ""});
    }
    return a;
  }();
  return atoms;
}

using Atoms = std::vector<Atom>;

inline std::string text(const Atoms& atoms) {
  std::string s;
  for (const auto& a : atoms) s += a.text;
  return s;
}

/// Random text biased toward short words and articles.
inline Atoms random_atoms(std::mt19937_64& rng, std::size_t max_words) {
  const auto& abc = alphabet();
  std::uniform_int_distribution<std::size_t> pick(0, abc.size() - 1);
  std::uniform_int_distribution<std::size_t> words(0, max_words);
  std::uniform_int_distribution<int> coin(0, 9);
  static const std::vector<std::string> articles{"a", "an", "the", "The", "AN", "A"};
  Atoms out;
  const std::size_t n = words(rng);
  for (std::size_t w = 0; w < n; ++w) {
    if (w > 0) out.push_back(coin(rng) < 8 ? Atom{" ", Cls::space, ""} : abc[pick(rng)]);
    if (coin(rng) < 2) {
      const std::string& art = articles[static_cast<std::size_t>(coin(rng)) % articles.size()];
      for (char c : art) {
        const char lo = static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c);
        out.push_back({std::string(1, c), Cls::letter, std::string(1, lo)});
      }
      continue;
    }
    std::uniform_int_distribution<int> len(1, 5);
    const int L = len(rng);
    for (int i = 0; i < L; ++i) {
      // Mostly a few lowercase letters so words repeat across strings.
      if (coin(rng) < 6) {
        const char c = static_cast<char>('a' + coin(rng) % 5);
        out.push_back({std::string(1, c), Cls::letter, std::string(1, c)});
      } else {
        out.push_back(abc[pick(rng)]);
      }
    }
  }
  return out;
}

/// A contiguous slice of a, or fresh text.
inline Atoms random_label(std::mt19937_64& rng, const Atoms& prediction) {
  std::uniform_int_distribution<int> coin(0, 1);
  if (prediction.empty() || coin(rng) == 0) return random_atoms(rng, 4);
  std::uniform_int_distribution<std::size_t> pos(0, prediction.size() - 1);
  std::size_t a = pos(rng), b = pos(rng);
  if (a > b) std::swap(a, b);
  return Atoms(prediction.begin() + static_cast<std::ptrdiff_t>(a), prediction.begin() + static_cast<std::ptrdiff_t>(b) + 1);
}

inline std::vector<std::string> words(const Atoms& atoms) {
  std::vector<std::string> out;
  std::string cur;
  for (const auto& a : atoms) {
    switch (a.cls) {
      case Cls::letter: cur += a.lower; break;
      case Cls::digit: cur += a.text; break;
      case Cls::punct: break;
      case Cls::space:
        if (!cur.empty()) out.push_back(cur);
        cur.clear();
        break;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  std::vector<std::string> kept;
  for (const auto& w : out) {
    if (w != "a" && w != "an" && w != "the") kept.push_back(w);
  }
  return kept;
}

inline std::string normalize(const Atoms& atoms) {
  std::string s;
  for (const auto& w : words(atoms)) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

inline bool contains(const std::string& hay, const std::string& needle) {
  if (needle.size() > hay.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < needle.size() && ok; ++j) ok = hay[i + j] == needle[j];
    if (ok) return true;
  }
  return false;
}

inline int match(const Atoms& prediction, const std::vector<Atoms>& labels) {
  const std::string p = normalize(prediction);
  for (const auto& l : labels) {
    if (contains(p, normalize(l))) return 1;
  }
  return 0;
}

// Multiset intersection size by greedy pairing with a used-flag array.
inline std::size_t common(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<bool> used(a.size(), false);
  std::size_t n = 0;
  for (const auto& w : b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!used[i] && a[i] == w) {
        used[i] = true;
        ++n;
        break;
      }
    }
  }
  return n;
}

inline double f1(const Atoms& prediction, const std::vector<Atoms>& labels) {
  const auto p = words(prediction);
  double best = 0.0;
  for (const auto& l : labels) {
    const auto g = words(l);
    if (p.empty() || g.empty()) continue;
    const std::size_t c = common(p, g);
    if (c == 0) continue;
    const double precision = static_cast<double>(c) / static_cast<double>(p.size());
    const double recall = static_cast<double>(c) / static_cast<double>(g.size());
    best = std::max(best, 2 * precision * recall / (precision + recall));
  }
  return best;
}

inline double recall(const Atoms& prediction, const std::vector<Atoms>& labels) {
  const auto p = words(prediction);
  double best = 0.0;
  for (const auto& l : labels) {
    const auto g = words(l);
    if (g.empty()) continue;
    best = std::max(best, static_cast<double>(common(p, g)) / static_cast<double>(g.size()));
  }
  return best;
}

// Normalized text as a list of characters, one string per code point.
inline std::vector<std::string> chars(const Atoms& atoms) {
  std::vector<std::string> out;
  for (const auto& w : words(atoms)) {
    if (!out.empty()) out.push_back(" ");
    std::size_t i = 0;
    while (i < w.size()) {
      const auto b = static_cast<unsigned char>(w[i]);
      const std::size_t n = b < 0x80 ? 1 : b < 0xE0 ? 2 : b < 0xF0 ? 3 : 4;
      out.push_back(w.substr(i, n));
      i += n;
    }
  }
  return out;
}

inline double recall_3gram(const Atoms& prediction, const std::vector<Atoms>& labels) {
  const auto p = chars(prediction);
  std::vector<std::vector<std::string>> have;
  for (std::size_t i = 0; i + 3 <= p.size(); ++i) have.push_back({p[i], p[i + 1], p[i + 2]});
  double best = 0.0;
  for (const auto& l : labels) {
    const auto g = chars(l);
    if (g.empty()) continue;
    if (g.size() < 3) {
      std::string gs, ps;
      for (const auto& c : g) gs += c;
      for (const auto& c : p) ps += c;
      if (contains(ps, gs)) best = 1.0;
      continue;
    }
    std::vector<std::vector<std::string>> want;
    for (std::size_t i = 0; i + 3 <= g.size(); ++i) {
      std::vector<std::string> gram{g[i], g[i + 1], g[i + 2]};
      if (std::find(want.begin(), want.end(), gram) == want.end()) want.push_back(gram);
    }
    std::size_t found = 0;
    for (const auto& gram : want) found += std::find(have.begin(), have.end(), gram) != have.end();
    best = std::max(best, static_cast<double>(found) / static_cast<double>(want.size()));
  }
  return best;
}

// LCS by memoised recursion over suffixes.
template <class T>
std::size_t lcs(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::vector<long>> memo(a.size() + 1, std::vector<long>(b.size() + 1, -1));
  auto go = [&](auto&& self, std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size() || j == b.size()) return 0;
    long& m = memo[i][j];
    if (m >= 0) return static_cast<std::size_t>(m);
    std::size_t r = a[i] == b[j] ? 1 + self(self, i + 1, j + 1) : std::max(self(self, i + 1, j), self(self, i, j + 1));
    m = static_cast<long>(r);
    return r;
  };
  return go(go, 0, 0);
}

template <class T>
double rouge_l(const std::vector<T>& prediction, const std::vector<T>& reference) {
  const std::size_t l = lcs(prediction, reference);
  if (l == 0 || prediction.empty() || reference.empty()) return 0.0;
  const double p = static_cast<double>(l) / static_cast<double>(prediction.size());
  const double r = static_cast<double>(l) / static_cast<double>(reference.size());
  return 2 * p * r / (p + r);
}

struct Case {
  Atoms prediction;
  std::vector<Atoms> labels;
  std::vector<std::string> label_text;
};

/// n predictions, each with one to three labels that often overlap it.
inline std::vector<Case> random_cases(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(1, 3);
  std::vector<Case> out;
  for (std::size_t i = 0; i < n; ++i) {
    Case c;
    c.prediction = random_atoms(rng, 8);
    const int k = count(rng);
    for (int j = 0; j < k; ++j) {
      c.labels.push_back(random_label(rng, c.prediction));
      c.label_text.push_back(text(c.labels.back()));
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace oracle
