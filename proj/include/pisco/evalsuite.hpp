#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pisco/distill.hpp"
#include "pisco/metrics.hpp"
#include "pisco/synth.hpp"

namespace pisco {
inline namespace PISCO_ABI {

/// Answers a query from plain document tokens. Compressed answerers compress
/// the documents on the fly.
using DocsAnswerFn =
    std::function<std::vector<TokenId>(std::span<const TokenId> query, std::span<const std::vector<TokenId>> docs)>;

/// Answers one retrieval example.
using ExampleAnswerFn = std::function<std::vector<TokenId>(const TrainingExample& example)>;

/// Greedy decoding over the uncompressed prompt. Throws overflow when the
/// prompt plus answer budget does not fit the context window.
DocsAnswerFn teacher_answerer(const InferenceWeights& teacher, const CompiledPrompt& prompt,
                              std::size_t max_new_tokens = kMaxAnswerTokens);
DocsAnswerFn student_answerer(const StudentRuntime& student, const CompiledPrompt& prompt,
                              std::size_t max_new_tokens = kMaxAnswerTokens);

/// Looks each example's document ids up in chunks.
ExampleAnswerFn corpus_answerer(DocsAnswerFn answer, std::span<const DocumentChunk> chunks);
/// Reads precomputed embeddings instead of compressing.
ExampleAnswerFn store_answerer(const StudentRuntime& student, const EmbeddingStore& store,
                               const CompiledPrompt& prompt, std::size_t max_new_tokens = kMaxAnswerTokens);

/// Answer text up to the first EOS.
std::string answer_text(const Vocabulary& vocab, std::span<const TokenId> answer);

/// Scores every example against its QA pair's gold answers. Runs over
/// workers threads; records stay in example order.
MetricReport evaluate_qa(const ExampleAnswerFn& answer, std::span<const TrainingExample> examples,
                         std::span<const QAPair> qa, const Vocabulary& vocab, std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Needle in a haystack

struct NihConfig {
  std::vector<std::size_t> context_sizes{1, 2, 3, 4, 5};  // documents per haystack
  std::vector<double> depths{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t trials = 20;
  std::uint64_t seed = 0;
  std::size_t max_new_tokens = 16;
  std::size_t workers = 1;

  void validate() const;
};

struct NIHGrid {
  std::vector<std::size_t> context_sizes;
  std::vector<double> depths;
  std::vector<double> accuracy;  // row-major, sizes x depths
  std::size_t trials = 0;

  double at(std::size_t size_index, std::size_t depth_index) const;
  double mean() const;
  /// Rows are context sizes, columns are depths.
  void write_csv(const std::filesystem::path& path, std::string_view config_hash) const;
};

/// Haystack seed for one cell and trial; shared by every model evaluated
/// with the same config.
std::uint64_t nih_trial_seed(std::uint64_t seed, std::size_t size_index, std::size_t depth_index,
                             std::size_t trial);

NIHGrid nih_run(const DocsAnswerFn& answer, const SynthSpec& spec, const Vocabulary& vocab,
                const NihConfig& config);

// ---------------------------------------------------------------------------
// Efficiency

/// Decoder input positions by kind.
struct PromptComposition {
  std::size_t tokens = 0;
  std::size_t embeddings = 0;

  std::size_t positions() const noexcept { return tokens + embeddings; }
};

/// Template tokens plus k documents of doc_tokens each, as text.
PromptComposition uncompressed_composition(const CompiledPrompt& prompt, std::size_t query_tokens, std::size_t k,
                                           std::size_t doc_tokens);
/// Template tokens plus k documents of l embeddings each.
PromptComposition compressed_composition(const CompiledPrompt& prompt, std::size_t query_tokens, std::size_t k,
                                         std::size_t l);

struct FlopsCount {
  std::uint64_t layer_macs = 0;  // projections, attention and MLP
  std::uint64_t head_macs = 0;   // LM head
  std::uint64_t macs() const noexcept { return layer_macs + head_macs; }
  std::uint64_t flops() const noexcept { return 2 * macs(); }
};

/// Analytic multiply-accumulates for prefill plus greedy decoding with a
/// key/value cache. The LM head runs once per generated token; the last
/// generated token is not fed back.
FlopsCount flops_count(const ModelConfig& config, const PromptComposition& prompt, std::size_t answer_tokens);

struct BenchConfig {
  std::size_t k = 5;
  std::size_t doc_tokens = 128;
  std::size_t l = 8;
  std::size_t query_tokens = 128;
  std::size_t answer_tokens = 32;
  std::size_t warmup = 2;
  std::size_t repetitions = 10;
  std::size_t memory_cap_bytes = std::size_t{1} << 30;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PipelineEfficiency {
  PromptComposition composition;
  FlopsCount analytic;
  std::uint64_t counted_macs = 0;   // instrumented, one query
  std::vector<double> seconds;      // timed repetitions
  double median_seconds = 0.0;
  std::size_t bytes_per_query = 0;  // key/value cache
  std::size_t max_batch = 0;        // under memory_cap_bytes
};

struct EfficiencyReport {
  BenchConfig config;
  PipelineEfficiency uncompressed;
  PipelineEfficiency compressed;

  double flops_ratio() const;
  double time_ratio() const;
  /// Largest relative gap between analytic and instrumented counts.
  double count_mismatch() const;
  void write_json(const std::filesystem::path& path, std::string_view config_hash) const;
};

/// Largest batch whose weights plus per-query cache fit the cap. Throws
/// out_of_memory when not even one query fits.
std::size_t max_batch(std::size_t weight_bytes, std::size_t bytes_per_query, std::size_t cap_bytes);

/// Times answer generation over k plain documents against k precompressed
/// documents. Compression itself is offline and not timed. Single worker.
EfficiencyReport latency_bench(const InferenceWeights& uncompressed, const InferenceWeights& compressed_decoder,
                               const CompiledPrompt& prompt, const BenchConfig& config);

// ---------------------------------------------------------------------------
// Pairwise judgments

struct PairwiseItem {
  std::size_t qid = 0;
  std::string question;
  std::string answer_a;
  std::string answer_b;
  std::vector<std::string> gold;
};

/// One JSON object per item for an external judge.
void write_pairwise_jsonl(const std::filesystem::path& path, std::span<const PairwiseItem> items);

}  // namespace PISCO_ABI
}  // namespace pisco
