#include "pisco/evalsuite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <thread>

#include "pisco/error.hpp"

namespace pisco {
inline namespace PISCO_ABI {

namespace {

// Calls fn(i) for i in [0, n), striding over workers threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += workers) fn(i);
  };
  if (workers == 1) {
    run(0);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot open " + path.string() + " for writing");
  return out;
}

GenerateOptions generate_options(std::size_t max_new_tokens) {
  GenerateOptions opts;
  opts.max_new_tokens = max_new_tokens;
  return opts;
}

}  // namespace

DocsAnswerFn teacher_answerer(const InferenceWeights& teacher, const CompiledPrompt& prompt,
                              std::size_t max_new_tokens) {
  return [&teacher, prompt, max_new_tokens](std::span<const TokenId> query, std::span<const std::vector<TokenId>> docs) {
    const auto ids = build_text_input(query, docs, prompt);
    const std::size_t window = teacher.config().max_seq_len;
    if (ids.size() + max_new_tokens > window) {
      fail(ErrorCode::overflow, "uncompressed prompt of " + std::to_string(ids.size()) + " tokens plus " +
                                    std::to_string(max_new_tokens) + " answer tokens exceeds the window of " +
                                    std::to_string(window));
    }
    const auto items = token_items(ids);
    return greedy_generate(teacher, items, generate_options(max_new_tokens));
  };
}

DocsAnswerFn student_answerer(const StudentRuntime& student, const CompiledPrompt& prompt,
                              std::size_t max_new_tokens) {
  return [&student, prompt, max_new_tokens](std::span<const TokenId> query, std::span<const std::vector<TokenId>> docs) {
    std::vector<DocumentEmbeddings> embedded;
    embedded.reserve(docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i) embedded.push_back(student.compress(i, docs[i]));
    return student.answer(query, embedded, prompt, max_new_tokens);
  };
}

ExampleAnswerFn corpus_answerer(DocsAnswerFn answer, std::span<const DocumentChunk> chunks) {
  return [answer = std::move(answer), chunks](const TrainingExample& ex) {
    std::vector<std::vector<TokenId>> docs;
    for (std::size_t id : ex.docs) {
      if (id >= chunks.size()) fail(ErrorCode::invalid_argument, "document id " + std::to_string(id) + " not in corpus");
      docs.push_back(chunks[id].tokens);
    }
    return answer(ex.query, docs);
  };
}

ExampleAnswerFn store_answerer(const StudentRuntime& student, const EmbeddingStore& store,
                               const CompiledPrompt& prompt, std::size_t max_new_tokens) {
  if (store.l() != student.memory.rows()) {
    fail(ErrorCode::shape_mismatch, "store holds l = " + std::to_string(store.l()) + " embeddings per document, model uses " +
                                        std::to_string(student.memory.rows()));
  }
  return [&student, &store, prompt, max_new_tokens](const TrainingExample& ex) {
    std::vector<DocumentEmbeddings> docs;
    for (std::size_t id : ex.docs) {
      if (!store.contains(id)) {
        fail(ErrorCode::missing_artifact, "document " + std::to_string(id) + " missing from the store; run compress first");
      }
      docs.push_back(store.get(id));
    }
    return student.answer(ex.query, docs, prompt, max_new_tokens);
  };
}

std::string answer_text(const Vocabulary& vocab, std::span<const TokenId> answer) {
  const auto end = std::find(answer.begin(), answer.end(), special::eos);
  return vocab.detokenize(std::span<const TokenId>(answer.begin(), end));
}

MetricReport evaluate_qa(const ExampleAnswerFn& answer, std::span<const TrainingExample> examples,
                         std::span<const QAPair> qa, const Vocabulary& vocab, std::size_t workers) {
  std::map<std::size_t, const QAPair*> by_id;
  for (const auto& q : qa) by_id[q.id] = &q;
  for (const auto& ex : examples) {
    if (!by_id.count(ex.qid)) fail(ErrorCode::missing_artifact, "no QA pair for query " + std::to_string(ex.qid));
  }
  std::vector<MetricRecord> records(examples.size());
  parallel_for(examples.size(), workers, [&](std::size_t i) {
    const auto tokens = answer(examples[i]);
    records[i] = score_prediction(examples[i].qid, answer_text(vocab, tokens), by_id.at(examples[i].qid)->answers);
  });
  MetricReport report;
  report.records = std::move(records);
  return report;
}

// ---------------------------------------------------------------------------

void NihConfig::validate() const {
  if (context_sizes.empty() || depths.empty()) fail(ErrorCode::config, "nih: empty grid");
  for (std::size_t s : context_sizes) {
    if (s == 0) fail(ErrorCode::config, "nih: context size must be positive");
  }
  for (double d : depths) {
    if (!(d >= 0.0 && d <= 1.0)) fail(ErrorCode::config, "nih: depth " + std::to_string(d) + " outside [0, 1]");
  }
  if (trials < 20) fail(ErrorCode::config, "nih: at least 20 trials per cell, got " + std::to_string(trials));
}

double NIHGrid::at(std::size_t size_index, std::size_t depth_index) const {
  if (size_index >= context_sizes.size() || depth_index >= depths.size()) {
    fail(ErrorCode::invalid_argument, "nih grid index out of range");
  }
  return accuracy[size_index * depths.size() + depth_index];
}

double NIHGrid::mean() const {
  if (accuracy.empty()) return 0.0;
  double s = 0.0;
  for (double a : accuracy) s += a;
  return s / static_cast<double>(accuracy.size());
}

void NIHGrid::write_csv(const std::filesystem::path& path, std::string_view config_hash) const {
  auto out = open_out(path);
  out << "# config_hash " << config_hash << " trials " << trials << '\n';
  out << "context_docs";
  for (double d : depths) out << ",depth_" << d;
  out << '\n';
  for (std::size_t i = 0; i < context_sizes.size(); ++i) {
    out << context_sizes[i];
    for (std::size_t j = 0; j < depths.size(); ++j) out << ',' << at(i, j);
    out << '\n';
  }
}

std::uint64_t nih_trial_seed(std::uint64_t seed, std::size_t size_index, std::size_t depth_index,
                             std::size_t trial) {
  std::uint64_t h = splitmix(seed);
  h = splitmix(h ^ size_index);
  h = splitmix(h ^ depth_index);
  return splitmix(h ^ trial);
}

NIHGrid nih_run(const DocsAnswerFn& answer, const SynthSpec& spec, const Vocabulary& vocab,
                const NihConfig& config) {
  config.validate();
  NIHGrid grid;
  grid.context_sizes = config.context_sizes;
  grid.depths = config.depths;
  grid.trials = config.trials;
  const std::size_t cells = config.context_sizes.size() * config.depths.size();
  std::vector<int> hits(cells * config.trials, 0);
  parallel_for(hits.size(), config.workers, [&](std::size_t job) {
    const std::size_t cell = job / config.trials;
    const std::size_t trial = job % config.trials;
    const std::size_t si = cell / config.depths.size();
    const std::size_t di = cell % config.depths.size();
    const Haystack hay = make_haystack(spec, config.context_sizes[si], config.depths[di],
                                       nih_trial_seed(config.seed, si, di, trial));
    std::vector<std::vector<TokenId>> docs;
    for (const auto& d : hay.documents) docs.push_back(vocab.tokenize(d));
    const auto query = vocab.tokenize(hay.qa.question);
    const auto tokens = answer(query, docs);
    hits[job] = match_accuracy(answer_text(vocab, tokens), hay.qa.answers);
  });
  grid.accuracy.assign(cells, 0.0);
  for (std::size_t c = 0; c < cells; ++c) {
    int s = 0;
    for (std::size_t t = 0; t < config.trials; ++t) s += hits[c * config.trials + t];
    grid.accuracy[c] = static_cast<double>(s) / static_cast<double>(config.trials);
  }
  return grid;
}

// ---------------------------------------------------------------------------

PromptComposition uncompressed_composition(const CompiledPrompt& prompt, std::size_t query_tokens, std::size_t k,
                                           std::size_t doc_tokens) {
  const std::vector<std::size_t> lengths(k, doc_tokens);
  return {prompt.length(query_tokens, lengths), 0};
}

PromptComposition compressed_composition(const CompiledPrompt& prompt, std::size_t query_tokens, std::size_t k,
                                         std::size_t l) {
  const std::vector<std::size_t> lengths(k, l);
  const std::size_t total = prompt.length(query_tokens, lengths);
  return {total - k * l, k * l};
}

FlopsCount flops_count(const ModelConfig& config, const PromptComposition& prompt, std::size_t answer_tokens) {
  const std::uint64_t d = config.d_model;
  const std::uint64_t per_position = 4 * d * d + 2 * d * config.d_ff;
  // Positions run through the layers: the prompt plus every generated token
  // except the last.
  const std::uint64_t positions = prompt.positions() + (answer_tokens > 0 ? answer_tokens - 1 : 0);
  // Position p attends to p + 1 keys: sum over p of 2 (p + 1) d.
  const std::uint64_t attention = d * positions * (positions + 1);
  FlopsCount out;
  out.layer_macs = config.n_layers * (positions * per_position + attention);
  out.head_macs = static_cast<std::uint64_t>(answer_tokens) * config.vocab_size * d;
  return out;
}

void BenchConfig::validate() const {
  if (k == 0 || doc_tokens == 0 || l == 0 || query_tokens == 0) fail(ErrorCode::config, "bench: sizes must be positive");
  if (repetitions < 10) fail(ErrorCode::config, "bench: at least 10 timed repetitions");
}

double EfficiencyReport::flops_ratio() const {
  return static_cast<double>(uncompressed.analytic.flops()) / static_cast<double>(compressed.analytic.flops());
}

double EfficiencyReport::time_ratio() const { return uncompressed.median_seconds / compressed.median_seconds; }

double EfficiencyReport::count_mismatch() const {
  auto gap = [](const PipelineEfficiency& p) {
    const double a = static_cast<double>(p.analytic.macs());
    return std::abs(a - static_cast<double>(p.counted_macs)) / a;
  };
  return std::max(gap(uncompressed), gap(compressed));
}

void EfficiencyReport::write_json(const std::filesystem::path& path, std::string_view config_hash) const {
  auto pipeline = [](const PipelineEfficiency& p) {
    return nlohmann::json{{"positions", p.composition.positions()},
                          {"token_items", p.composition.tokens},
                          {"embedding_items", p.composition.embeddings},
                          {"flops", p.analytic.flops()},
                          {"layer_macs", p.analytic.layer_macs},
                          {"head_macs", p.analytic.head_macs},
                          {"counted_macs", p.counted_macs},
                          {"median_seconds", p.median_seconds},
                          {"seconds", p.seconds},
                          {"bytes_per_query", p.bytes_per_query},
                          {"max_batch", p.max_batch}};
  };
  nlohmann::json j{{"config_hash", config_hash},
                   {"k", config.k},
                   {"doc_tokens", config.doc_tokens},
                   {"l", config.l},
                   {"query_tokens", config.query_tokens},
                   {"answer_tokens", config.answer_tokens},
                   {"memory_cap_bytes", config.memory_cap_bytes},
                   {"uncompressed", pipeline(uncompressed)},
                   {"compressed", pipeline(compressed)},
                   {"flops_ratio", flops_ratio()},
                   {"time_ratio", time_ratio()},
                   {"count_mismatch", count_mismatch()}};
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

std::size_t max_batch(std::size_t weight_bytes, std::size_t bytes_per_query, std::size_t cap_bytes) {
  if (weight_bytes + bytes_per_query > cap_bytes) {
    fail(ErrorCode::out_of_memory, "batch of 1 needs " + std::to_string(weight_bytes + bytes_per_query) +
                                       " bytes, above the cap of " + std::to_string(cap_bytes));
  }
  return (cap_bytes - weight_bytes) / bytes_per_query;
}

namespace {

PipelineEfficiency measure(const InferenceWeights& weights, const std::vector<InputItem>& prompt,
                           PromptComposition composition, const BenchConfig& config) {
  const ModelConfig& mc = weights.config();
  if (prompt.size() + config.answer_tokens > mc.max_seq_len) {
    fail(ErrorCode::overflow, "bench prompt of " + std::to_string(prompt.size()) + " positions plus " +
                                  std::to_string(config.answer_tokens) + " answer tokens exceeds max_seq_len " +
                                  std::to_string(mc.max_seq_len));
  }
  GenerateOptions opts;
  opts.max_new_tokens = config.answer_tokens;
  opts.force_length = true;
  PipelineEfficiency p;
  p.composition = composition;
  p.analytic = flops_count(mc, composition, config.answer_tokens);
  MacCounter counter;
  greedy_generate(weights, prompt, opts, &counter);
  p.counted_macs = counter.macs;
  for (std::size_t i = 0; i < config.warmup; ++i) greedy_generate(weights, prompt, opts);
  for (std::size_t i = 0; i < config.repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    greedy_generate(weights, prompt, opts);
    p.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  auto sorted = p.seconds;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  p.median_seconds = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  p.bytes_per_query = 2 * mc.n_layers * (prompt.size() + config.answer_tokens) * mc.d_model * sizeof(Scalar);
  p.max_batch = max_batch(weights.bytes(), p.bytes_per_query, config.memory_cap_bytes);
  return p;
}

}  // namespace

EfficiencyReport latency_bench(const InferenceWeights& uncompressed, const InferenceWeights& compressed_decoder,
                               const CompiledPrompt& prompt, const BenchConfig& config) {
  config.validate();
  const ModelConfig& mc = uncompressed.config();
  if (mc.d_model != compressed_decoder.config().d_model) {
    fail(ErrorCode::shape_mismatch, "bench: decoders disagree on d_model");
  }
  if (mc.vocab_size <= static_cast<std::size_t>(special::first_word)) {
    fail(ErrorCode::config, "bench: vocabulary has no word ids");
  }
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<TokenId> word(special::first_word, static_cast<TokenId>(mc.vocab_size - 1));
  auto random_tokens = [&](std::size_t n) {
    std::vector<TokenId> t(n);
    for (TokenId& id : t) id = word(rng);
    return t;
  };
  const auto query = random_tokens(config.query_tokens);
  std::vector<std::vector<TokenId>> docs;
  for (std::size_t i = 0; i < config.k; ++i) docs.push_back(random_tokens(config.doc_tokens));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<DocumentEmbeddings> embedded;
  for (std::size_t i = 0; i < config.k; ++i) {
    DocumentEmbeddings e;
    e.doc_id = i;
    e.source_token_count = config.doc_tokens;
    e.vectors = Tensor::matrix(config.l, mc.d_model);
    for (Scalar& v : e.vectors.values()) v = static_cast<Scalar>(normal(rng));
    embedded.push_back(std::move(e));
  }

  EfficiencyReport report;
  report.config = config;
  const auto text_items = token_items(build_text_input(query, docs, prompt));
  report.uncompressed = measure(uncompressed, text_items,
                                uncompressed_composition(prompt, config.query_tokens, config.k, config.doc_tokens),
                                config);
  const auto compressed_items =
      build_decoder_input(query, embedded, prompt, compressed_decoder.config().max_seq_len);
  report.compressed = measure(compressed_decoder, compressed_items,
                              compressed_composition(prompt, config.query_tokens, config.k, config.l), config);
  return report;
}

void write_pairwise_jsonl(const std::filesystem::path& path, std::span<const PairwiseItem> items) {
  auto out = open_out(path);
  for (const auto& it : items) {
    out << nlohmann::json{{"qid", it.qid},
                          {"question", it.question},
                          {"answer_a", it.answer_a},
                          {"answer_b", it.answer_b},
                          {"gold", it.gold}}
               .dump()
        << '\n';
  }
}

}  // namespace PISCO_ABI
}  // namespace pisco
