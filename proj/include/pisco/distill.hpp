#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pisco/compressor.hpp"
#include "pisco/inference.hpp"
#include "pisco/model.hpp"
#include "pisco/optim.hpp"
#include "pisco/rag_store.hpp"

namespace pisco {
inline namespace PISCO_ABI {

inline constexpr std::size_t kMaxAnswerTokens = 128;

/// Which parameters the optimizer updates when training a compression model.
enum class TrainableSet {
  full,            // compressor adapters, decoder adapters, memory tokens
  frozen_decoder,  // compressor adapters and memory tokens only
};

struct TrainConfig {
  std::size_t batch_size = 128;
  double lr = 1e-4;
  std::size_t epochs = 1;
  /// Hard cap on optimizer steps; 0 means epochs decide.
  std::size_t max_steps = 0;
  double warmup_ratio = 0.05;
  AdamWConfig adamw;
  /// Share of examples held out for the eval loss, fixed by seed.
  double eval_fraction = 0.02;
  /// Evaluate every this many steps; 0 evaluates only at the end.
  std::size_t eval_every = 0;
  std::uint64_t seed = 0;
  TrainableSet trainable = TrainableSet::full;
  /// CSV with one row per step (empty path disables).
  std::filesystem::path loss_log;
  /// Written with the last good parameters if training diverges.
  std::filesystem::path checkpoint;
  std::function<void(std::size_t step, double train_loss, double eval_loss)> on_step;
};

struct LossRecord {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean per target token over the batch
  double eval_loss = 0.0;   // NaN when not evaluated at this step
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct TrainReport {
  std::vector<LossRecord> curve;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  std::size_t steps = 0;
  std::size_t train_examples = 0;
  std::size_t eval_examples = 0;
};

/// Summed negative log-likelihood of one example plus its target count.
struct ExampleLoss {
  Var sum;
  std::size_t tokens = 0;
};

using ExampleLossFn = std::function<ExampleLoss(Tape&, std::size_t example, std::mt19937_64* dropout_rng)>;

/// Mini-batch AdamW over a fixed example set. The batch loss is the mean over
/// all target tokens in the batch. A non-finite loss or gradient restores the
/// last good parameters, writes them to config.checkpoint and throws.
TrainReport run_training(const std::vector<Parameter*>& params, std::size_t example_count,
                         const ExampleLossFn& loss, const TrainConfig& config);

/// Deterministic train/eval partition used by run_training.
void split_examples(std::size_t count, double eval_fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                    std::vector<std::size_t>& eval);

// ---------------------------------------------------------------------------
// Examples and labels

struct TrainingExample {
  std::size_t qid = 0;
  std::vector<TokenId> query;
  std::vector<std::size_t> docs;  // most to least relevant
  std::vector<TokenId> answer;    // ends with EOS unless capped
};

/// Tokenises questions and attaches the top-k retrieved chunk ids. Answers
/// are left empty.
std::vector<TrainingExample> retrieve_examples(std::span<const QAPair> qa, const Bm25Index& index,
                                               const Vocabulary& vocab, std::size_t k);

/// Gold answers as labels: the full answer sentence (long) or the bare
/// value, each followed by EOS.
void attach_gold_answers(std::vector<TrainingExample>& examples, std::span<const QAPair> qa, const Vocabulary& vocab,
                         bool long_form);

/// Summed cross-entropy on answer positions only. Logit rows before
/// answer_start belong to the prompt and are ignored.
struct SkdLoss {
  Var sum;
  std::size_t tokens = 0;
  double mean = 0.0;
};
SkdLoss skd_loss(Var logits, std::span<const TokenId> answer, std::size_t answer_start = 0);

// ---------------------------------------------------------------------------
// Teacher

struct TeacherLabel {
  std::vector<TokenId> tokens;
  std::size_t dropped_docs = 0;  // trailing documents removed to fit the window
  bool closed_book = false;      // no documents: low confidence
};

/// Greedy answer from plain-text context.
TeacherLabel teacher_generate(const InferenceWeights& teacher, std::span<const TokenId> query,
                              std::span<const std::vector<TokenId>> docs, const CompiledPrompt& prompt,
                              std::size_t max_new_tokens = kMaxAnswerTokens);

/// Loss of the teacher on one example with uncompressed documents.
ExampleLoss teacher_example_loss(Tape& tape, Transformer& teacher, const TrainingExample& ex,
                                 std::span<const DocumentChunk> chunks, const CompiledPrompt& prompt);

TrainReport train_teacher(Transformer& teacher, std::span<const TrainingExample> examples,
                          std::span<const DocumentChunk> chunks, const CompiledPrompt& prompt,
                          const TrainConfig& config);

/// Replaces each example's answer with the teacher's greedy output. Runs
/// over workers threads; results do not depend on the worker count.
std::vector<TeacherLabel> label_with_teacher(const InferenceWeights& teacher, std::vector<TrainingExample>& examples,
                                             std::span<const DocumentChunk> chunks, const CompiledPrompt& prompt,
                                             std::size_t workers = 1);

/// Cache file: one line per query, "qid<TAB>space-joined ids".
void write_label_cache(const std::filesystem::path& path, std::span<const TrainingExample> examples);
std::map<std::size_t, std::vector<TokenId>> read_label_cache(const std::filesystem::path& path);
/// Fills answers from the cache; throws missing_artifact for absent qids.
void apply_label_cache(std::vector<TrainingExample>& examples, const std::map<std::size_t, std::vector<TokenId>>& cache);

// ---------------------------------------------------------------------------
// Compression model

/// Frozen base plus compressor adapters, decoder adapters and memory tokens.
class PiscoModel {
 public:
  PiscoModel(const Transformer& base, std::size_t l, LoraConfig lora, std::uint64_t seed);

  Transformer base;
  LoraAdapterSet compressor;
  LoraAdapterSet decoder;
  MemoryTokenSet memory;

  std::size_t l() const noexcept { return memory.l(); }
  CompressorView compressor_view() { return {&base, &compressor, &memory}; }
  /// Marks parameters trainable per mode and returns the optimizer set.
  std::vector<Parameter*> configure_trainable(TrainableSet mode);
  std::vector<const Parameter*> all_parameters() const;
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);
};

/// Loss of the compressed student on one example.
ExampleLoss student_example_loss(Tape& tape, PiscoModel& model, const TrainingExample& ex,
                                 std::span<const DocumentChunk> chunks, const CompiledPrompt& prompt,
                                 std::mt19937_64* dropout_rng);

/// Distillation (or any label set) over compressed documents.
TrainReport train(PiscoModel& model, std::span<const TrainingExample> examples, std::span<const DocumentChunk> chunks,
                  const CompiledPrompt& prompt, const TrainConfig& config);

/// Supervised fine-tuning on bare gold answers through the same trainer.
TrainReport sft_raw_labels(PiscoModel& model, std::vector<TrainingExample> examples, std::span<const QAPair> qa,
                           const Vocabulary& vocab, std::span<const DocumentChunk> chunks,
                           const CompiledPrompt& prompt, const TrainConfig& config);

/// Merged inference weights for both roles.
struct StudentRuntime {
  StudentRuntime(const PiscoModel& model);

  InferenceWeights compressor;
  InferenceWeights decoder;
  Tensor memory;

  DocumentEmbeddings compress(std::size_t doc_id, std::span<const TokenId> tokens, MacCounter* counter = nullptr) const;
  std::vector<TokenId> answer(std::span<const TokenId> query, std::span<const DocumentEmbeddings> docs,
                              const CompiledPrompt& prompt, std::size_t max_new_tokens = kMaxAnswerTokens,
                              MacCounter* counter = nullptr) const;
};

// ---------------------------------------------------------------------------
// Pretraining tasks

enum class PretrainTask { ae, tc, kbtc, multi_kbtc };
inline constexpr PretrainTask kPretrainTasks[] = {PretrainTask::ae, PretrainTask::tc, PretrainTask::kbtc,
                                                  PretrainTask::multi_kbtc};
std::string_view to_string(PretrainTask t);
TokenId task_token(PretrainTask t);

struct PretrainExample {
  PretrainTask task = PretrainTask::ae;
  std::vector<std::vector<TokenId>> docs;  // compressed inputs, in prompt order
  std::vector<TokenId> keyword;            // empty for AE and TC
  std::vector<TokenId> target;             // without EOS
};

PretrainExample make_ae_example(std::span<const TokenId> doc);
PretrainExample make_tc_example(std::span<const TokenId> doc, std::size_t split);
PretrainExample make_kbtc_example(std::span<const TokenId> doc, std::span<const TokenId> keyword);
PretrainExample make_multi_kbtc_example(std::span<const std::vector<TokenId>> docs, std::size_t target_doc,
                                        std::span<const TokenId> keyword);

/// Keyword span of 3 to 8 tokens drawn uniformly from the interior of doc.
std::vector<TokenId> sample_keyword(std::span<const TokenId> doc, std::mt19937_64& rng);

/// Decoder prompt for a pretraining example: BOS, compressed documents
/// joined by SEP, the task token, then the keyword.
std::vector<InputItem> pretrain_prompt(const StudentRuntime& runtime, const PretrainExample& ex);

ExampleLoss pretrain_example_loss(Tape& tape, PiscoModel& model, const PretrainExample& ex,
                                  std::mt19937_64* dropout_rng);

/// Task weights; must sum to one.
struct Mixture {
  double ae = 0.0, tc = 0.0, kbtc = 0.0, multi_kbtc = 0.0;

  double weight(PretrainTask t) const;
  void validate() const;
  /// "ae=0.5,tc=0.5" or a preset name: ae, mix1 .. mix5.
  static Mixture parse(std::string_view text);
};

struct PretrainConfig {
  Mixture mixture;
  std::size_t steps = 100;
  std::size_t multi_docs = 3;
  /// Held-out documents scored per task.
  std::size_t eval_docs = 32;
  TrainConfig train;
};

struct PretrainReport {
  TrainReport train;
  std::map<std::string, double> rouge_l;  // per task, held-out docs
};

PretrainExample sample_pretrain_example(const Mixture& mixture, std::span<const DocumentChunk> docs,
                                        std::size_t multi_docs, std::mt19937_64& rng,
                                        std::optional<PretrainTask> force = std::nullopt);

PretrainReport pretrain(PiscoModel& model, std::span<const DocumentChunk> train_docs,
                        std::span<const DocumentChunk> heldout_docs, const PretrainConfig& config);

/// Mean Rouge-L of greedy outputs against targets.
double pretrain_rouge(const StudentRuntime& runtime, std::span<const PretrainExample> examples);

}  // namespace PISCO_ABI
}  // namespace pisco
