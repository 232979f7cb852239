#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pisco/precision.hpp"

namespace pisco {
inline namespace PISCO_ABI {

/// Lowercase, drop Unicode punctuation (P*) and symbols (S*), drop the
/// articles "a", "an", "the", collapse whitespace.
std::string normalize(std::string_view s);

/// 1 when some normalized label occurs inside the normalized prediction.
int match_accuracy(std::string_view prediction, std::span<const std::string> labels);
/// Token-overlap F1, maximum over labels.
double token_f1(std::string_view prediction, std::span<const std::string> labels);
/// Share of label tokens found in the prediction, maximum over labels.
double token_recall(std::string_view prediction, std::span<const std::string> labels);
/// Share of the label's distinct character 3-grams present in the
/// prediction, maximum over labels. Labels shorter than three characters
/// score 1 if contained in the prediction.
double recall_3gram(std::string_view prediction, std::span<const std::string> labels);

/// LCS-based F1 between token sequences.
double rouge_l(std::span<const TokenId> prediction, std::span<const TokenId> reference);
double rouge_l(std::string_view prediction, std::string_view reference);

struct MetricRecord {
  std::size_t qid = 0;
  std::string prediction;
  std::vector<std::string> labels;
  int match = 0;
  double f1 = 0.0;
  double recall = 0.0;
  double recall3gram = 0.0;
};

MetricRecord score_prediction(std::size_t qid, std::string prediction, std::vector<std::string> labels);

struct MetricSummary {
  std::size_t count = 0;
  double match = 0.0;
  double f1 = 0.0;
  double recall = 0.0;
  double recall3gram = 0.0;
};

struct MetricReport {
  std::vector<MetricRecord> records;

  void add(MetricRecord r) { records.push_back(std::move(r)); }
  MetricSummary summary() const;
  /// One JSON object per record.
  void write_jsonl(const std::filesystem::path& path) const;
  /// Aggregates plus the producing config hash.
  void write_summary(const std::filesystem::path& path, std::string_view config_hash) const;
};

}  // namespace PISCO_ABI
}  // namespace pisco
