#include "pisco/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include "pisco/error.hpp"
#include "pisco/vocab.hpp"

namespace pisco {
inline namespace PISCO_ABI {

namespace {

bool punctuation_or_symbol(UChar32 c) {
  const auto mask = U_GET_GC_MASK(c);
  return (mask & (U_GC_P_MASK | U_GC_S_MASK)) != 0;
}

std::vector<std::string> tokens_of(const std::string& normalized) {
  std::vector<std::string> out;
  for (auto w : split_whitespace(normalized)) out.emplace_back(w);
  return out;
}

std::u32string to_u32(const std::string& s) {
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(s);
  std::u32string out;
  for (int32_t i = 0; i < u.length();) {
    const UChar32 c = u.char32At(i);
    out.push_back(static_cast<char32_t>(c));
    i += U16_LENGTH(c);
  }
  return out;
}

void require_labels(std::span<const std::string> labels, const char* what) {
  if (labels.empty()) fail(ErrorCode::invalid_argument, std::string(what) + ": empty label list");
}

std::size_t overlap(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::map<std::string, std::size_t> counts;
  for (const auto& w : a) ++counts[w];
  std::size_t common = 0;
  for (const auto& w : b) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  return common;
}

template <class T>
std::size_t lcs_length(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double lcs_f1(std::size_t lcs, std::size_t pred, std::size_t ref) {
  if (lcs == 0 || pred == 0 || ref == 0) return 0.0;
  const double p = static_cast<double>(lcs) / static_cast<double>(pred);
  const double r = static_cast<double>(lcs) / static_cast<double>(ref);
  return 2 * p * r / (p + r);
}

}  // namespace

std::string normalize(std::string_view s) {
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
  u.toLower();
  icu::UnicodeString kept;
  for (int32_t i = 0; i < u.length();) {
    const UChar32 c = u.char32At(i);
    i += U16_LENGTH(c);
    if (punctuation_or_symbol(c)) continue;
    kept.append(u_isUWhiteSpace(c) ? UChar32(' ') : c);
  }
  std::string lowered;
  kept.toUTF8String(lowered);
  std::string out;
  for (auto w : split_whitespace(lowered)) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

int match_accuracy(std::string_view prediction, std::span<const std::string> labels) {
  require_labels(labels, "match_accuracy");
  const std::string p = normalize(prediction);
  for (const auto& l : labels) {
    if (p.find(normalize(l)) != std::string::npos) return 1;
  }
  return 0;
}

double token_f1(std::string_view prediction, std::span<const std::string> labels) {
  require_labels(labels, "token_f1");
  const auto p = tokens_of(normalize(prediction));
  double best = 0.0;
  for (const auto& l : labels) {
    const auto g = tokens_of(normalize(l));
    if (p.empty() || g.empty()) continue;
    const std::size_t common = overlap(p, g);
    if (common == 0) continue;
    const double precision = static_cast<double>(common) / static_cast<double>(p.size());
    const double recall = static_cast<double>(common) / static_cast<double>(g.size());
    best = std::max(best, 2 * precision * recall / (precision + recall));
  }
  return best;
}

double token_recall(std::string_view prediction, std::span<const std::string> labels) {
  require_labels(labels, "token_recall");
  const auto p = tokens_of(normalize(prediction));
  double best = 0.0;
  for (const auto& l : labels) {
    const auto g = tokens_of(normalize(l));
    if (g.empty()) continue;
    best = std::max(best, static_cast<double>(overlap(p, g)) / static_cast<double>(g.size()));
  }
  return best;
}

double recall_3gram(std::string_view prediction, std::span<const std::string> labels) {
  require_labels(labels, "recall_3gram");
  const std::u32string p = to_u32(normalize(prediction));
  std::set<std::u32string> have;
  for (std::size_t i = 0; i + 3 <= p.size(); ++i) have.insert(p.substr(i, 3));
  double best = 0.0;
  for (const auto& l : labels) {
    const std::u32string g = to_u32(normalize(l));
    if (g.empty()) continue;
    if (g.size() < 3) {
      if (p.find(g) != std::u32string::npos) best = 1.0;
      continue;
    }
    std::set<std::u32string> want;
    for (std::size_t i = 0; i + 3 <= g.size(); ++i) want.insert(g.substr(i, 3));
    std::size_t found = 0;
    for (const auto& gram : want) found += have.count(gram);
    best = std::max(best, static_cast<double>(found) / static_cast<double>(want.size()));
  }
  return best;
}

double rouge_l(std::span<const TokenId> prediction, std::span<const TokenId> reference) {
  return lcs_f1(lcs_length(prediction, reference), prediction.size(), reference.size());
}

double rouge_l(std::string_view prediction, std::string_view reference) {
  std::vector<std::string> p, r;
  for (auto w : split_whitespace(prediction)) p.emplace_back(w);
  for (auto w : split_whitespace(reference)) r.emplace_back(w);
  return lcs_f1(lcs_length<std::string>(p, r), p.size(), r.size());
}

MetricRecord score_prediction(std::size_t qid, std::string prediction, std::vector<std::string> labels) {
  MetricRecord r;
  r.qid = qid;
  r.match = match_accuracy(prediction, labels);
  r.f1 = token_f1(prediction, labels);
  r.recall = token_recall(prediction, labels);
  r.recall3gram = recall_3gram(prediction, labels);
  r.prediction = std::move(prediction);
  r.labels = std::move(labels);
  return r;
}

MetricSummary MetricReport::summary() const {
  MetricSummary s;
  s.count = records.size();
  if (records.empty()) return s;
  for (const auto& r : records) {
    s.match += r.match;
    s.f1 += r.f1;
    s.recall += r.recall;
    s.recall3gram += r.recall3gram;
  }
  const auto n = static_cast<double>(records.size());
  s.match /= n;
  s.f1 /= n;
  s.recall /= n;
  s.recall3gram /= n;
  return s;
}

void MetricReport::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot open " + path.string() + " for writing");
  for (const auto& r : records) {
    nlohmann::json j{{"qid", r.qid},   {"prediction", r.prediction}, {"labels", r.labels},
                     {"match", r.match}, {"f1", r.f1},                {"recall", r.recall},
                     {"recall3gram", r.recall3gram}};
    out << j.dump() << '\n';
  }
}

void MetricReport::write_summary(const std::filesystem::path& path, std::string_view config_hash) const {
  const MetricSummary s = summary();
  nlohmann::json j{{"count", s.count},   {"match", s.match},
                   {"f1", s.f1},         {"recall", s.recall},
                   {"recall3gram", s.recall3gram}, {"config_hash", std::string(config_hash)}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

}  // namespace PISCO_ABI
}  // namespace pisco
