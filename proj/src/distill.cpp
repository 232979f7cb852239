#include "pisco/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "pisco/checkpoint.hpp"
#include "pisco/error.hpp"
#include "pisco/metrics.hpp"

namespace pisco {
inline namespace PISCO_ABI {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<TokenId> without_last(std::span<const TokenId> answer) {
  return {answer.begin(), answer.end() - (answer.empty() ? 0 : 1)};
}

}  // namespace

void split_examples(std::size_t count, double eval_fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                    std::vector<std::size_t>& eval) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_eval = 0;
  if (eval_fraction > 0 && count >= 2) {
    n_eval = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(count))));
    n_eval = std::min(n_eval, count - 1);
  }
  eval.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_eval));
  train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_eval), order.end());
  std::sort(eval.begin(), eval.end());
  std::sort(train.begin(), train.end());
}

TrainReport run_training(const std::vector<Parameter*>& params, std::size_t example_count,
                         const ExampleLossFn& loss, const TrainConfig& config) {
  if (config.batch_size == 0) fail(ErrorCode::config, "batch_size must be positive");
  std::vector<Parameter*> trainable;
  for (Parameter* p : params) {
    if (p->trainable) trainable.push_back(p);
  }
  TrainReport report;
  std::vector<std::size_t> train_idx, eval_idx;
  split_examples(example_count, config.eval_fraction, config.seed, train_idx, eval_idx);
  report.train_examples = train_idx.size();
  report.eval_examples = eval_idx.size();

  const std::size_t per_epoch = (train_idx.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = config.max_steps > 0 ? config.max_steps : config.epochs * per_epoch;
  if (total > 0 && train_idx.empty()) fail(ErrorCode::invalid_argument, "training requested with no training examples");

  auto evaluate = [&]() -> double {
    if (eval_idx.empty()) return kNaN;
    double sum = 0.0;
    std::size_t tokens = 0;
    for (std::size_t i : eval_idx) {
      Tape tape(false);
      ExampleLoss el = loss(tape, i, nullptr);
      sum += el.sum.value().item();
      tokens += el.tokens;
    }
    return tokens == 0 ? kNaN : sum / static_cast<double>(tokens);
  };

  std::ofstream log;
  if (!config.loss_log.empty()) {
    log.open(config.loss_log, std::ios::trunc);
    if (!log) fail(ErrorCode::io, "cannot open loss log " + config.loss_log.string());
    log << "step,train_loss,eval_loss,lr,grad_norm\n";
  }

  report.initial_eval_loss = evaluate();
  report.final_eval_loss = report.initial_eval_loss;
  if (total == 0) return report;

  AdamWConfig adam = config.adamw;
  AdamW opt(trainable, adam);
  LinearSchedule schedule(config.lr, total, config.warmup_ratio);
  std::mt19937_64 order_rng(config.seed);
  std::mt19937_64 dropout_rng(config.seed ^ 0xd20b0u);
  std::vector<Tensor> last_good;
  for (Parameter* p : trainable) last_good.push_back(p->value);

  auto diverge = [&](std::size_t step, const std::string& why) {
    for (std::size_t i = 0; i < trainable.size(); ++i) trainable[i]->value = last_good[i];
    if (!config.checkpoint.empty()) {
      std::vector<const Parameter*> all(params.begin(), params.end());
      save_checkpoint(config.checkpoint, all);
    }
    fail(ErrorCode::non_finite, "training diverged at step " + std::to_string(step) + " (" + why +
                                    "); parameters restored to the last good step");
  };

  std::vector<std::size_t> order = train_idx;
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < total; ++step) {
    opt.zero_grad();
    double loss_sum = 0.0;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        if (b > 0) break;  // batches never straddle epochs
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      Tape tape;
      ExampleLoss el = loss(tape, idx, &dropout_rng);
      loss_sum += el.sum.value().item();
      tokens += el.tokens;
      tape.backward(el.sum);
    }
    if (!std::isfinite(loss_sum)) diverge(step, "non-finite loss");
    if (tokens > 0) {
      const auto inv = static_cast<Scalar>(1.0 / static_cast<double>(tokens));
      for (Parameter* p : trainable) {
        for (Scalar& g : p->grad.values()) g *= inv;
      }
    }
    const double lr = schedule.lr_at(step);
    StepReport sr;
    try {
      sr = opt.step(lr);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::non_finite) throw;
      diverge(step, e.what());
    }
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      if (!trainable[i]->value.all_finite()) diverge(step, "non-finite parameter " + trainable[i]->name);
      last_good[i] = trainable[i]->value;
    }

    LossRecord rec;
    rec.step = step + 1;
    rec.train_loss = tokens == 0 ? 0.0 : loss_sum / static_cast<double>(tokens);
    rec.lr = lr;
    rec.grad_norm = sr.grad_norm;
    const bool last = step + 1 == total;
    rec.eval_loss = (last || (config.eval_every > 0 && rec.step % config.eval_every == 0)) ? evaluate() : kNaN;
    if (last) report.final_eval_loss = rec.eval_loss;
    report.curve.push_back(rec);
    if (log) {
      log << rec.step << ',' << rec.train_loss << ',';
      if (!std::isnan(rec.eval_loss)) log << rec.eval_loss;
      log << ',' << rec.lr << ',' << rec.grad_norm << '\n';
      log.flush();
    }
    if (config.on_step) config.on_step(rec.step, rec.train_loss, rec.eval_loss);
  }
  report.steps = total;
  return report;
}

// ---------------------------------------------------------------------------

std::vector<TrainingExample> retrieve_examples(std::span<const QAPair> qa, const Bm25Index& index,
                                               const Vocabulary& vocab, std::size_t k) {
  std::vector<TrainingExample> out;
  out.reserve(qa.size());
  for (const auto& q : qa) {
    TrainingExample ex;
    ex.qid = q.id;
    ex.query = vocab.tokenize(q.question);
    if (k > 0) {
      for (const auto& hit : index.retrieve(ex.query, k)) ex.docs.push_back(hit.doc_id);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void attach_gold_answers(std::vector<TrainingExample>& examples, std::span<const QAPair> qa, const Vocabulary& vocab,
                         bool long_form) {
  std::map<std::size_t, const QAPair*> by_id;
  for (const auto& q : qa) by_id[q.id] = &q;
  for (auto& ex : examples) {
    auto it = by_id.find(ex.qid);
    if (it == by_id.end()) fail(ErrorCode::missing_artifact, "no QA pair for query " + std::to_string(ex.qid));
    const QAPair& q = *it->second;
    if (q.answers.empty()) fail(ErrorCode::invalid_argument, "query " + std::to_string(ex.qid) + " has no answers");
    ex.answer = vocab.tokenize(long_form && !q.long_answer.empty() ? q.long_answer : q.answers.front());
    ex.answer.push_back(special::eos);
  }
}

SkdLoss skd_loss(Var logits, std::span<const TokenId> answer, std::size_t answer_start) {
  if (logits.rows() != answer_start + answer.size()) {
    fail(ErrorCode::shape_mismatch, "skd_loss: " + std::to_string(logits.rows()) + " logit rows for " +
                                        std::to_string(answer_start) + " prompt + " + std::to_string(answer.size()) +
                                        " answer positions");
  }
  if (answer.empty()) fail(ErrorCode::invalid_argument, "skd_loss: empty answer");
  std::vector<TokenId> targets(answer_start, -1);
  targets.insert(targets.end(), answer.begin(), answer.end());
  SkdLoss out;
  out.sum = cross_entropy(logits, targets);
  out.tokens = answer.size();
  out.mean = out.sum.value().item() / static_cast<double>(out.tokens);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<TokenId>> gather_docs(const TrainingExample& ex, std::span<const DocumentChunk> chunks) {
  std::vector<std::vector<TokenId>> docs;
  for (std::size_t id : ex.docs) {
    if (id >= chunks.size()) fail(ErrorCode::invalid_argument, "example references unknown chunk " + std::to_string(id));
    docs.push_back(chunks[id].tokens);
  }
  return docs;
}

// Drops trailing documents until prompt plus budget fits the window.
std::size_t fit_documents(std::vector<std::vector<TokenId>>& docs, std::span<const TokenId> query,
                          const CompiledPrompt& prompt, std::size_t budget, std::size_t max_seq_len) {
  std::size_t dropped = 0;
  while (true) {
    std::vector<std::size_t> lengths;
    for (const auto& d : docs) lengths.push_back(d.size());
    if (prompt.length(query.size(), lengths) + budget <= max_seq_len) return dropped;
    if (docs.empty()) {
      fail(ErrorCode::overflow, "prompt without documents plus " + std::to_string(budget) +
                                    " answer tokens exceeds max_seq_len " + std::to_string(max_seq_len));
    }
    docs.pop_back();
    ++dropped;
  }
}

}  // namespace

TeacherLabel teacher_generate(const InferenceWeights& teacher, std::span<const TokenId> query,
                              std::span<const std::vector<TokenId>> docs, const CompiledPrompt& prompt,
                              std::size_t max_new_tokens) {
  std::vector<std::vector<TokenId>> kept(docs.begin(), docs.end());
  TeacherLabel label;
  label.dropped_docs = fit_documents(kept, query, prompt, max_new_tokens, teacher.config().max_seq_len);
  label.closed_book = kept.empty();
  const auto ids = build_text_input(query, kept, prompt);
  const auto items = token_items(ids);
  GenerateOptions opts;
  opts.max_new_tokens = max_new_tokens;
  label.tokens = greedy_generate(teacher, items, opts);
  return label;
}

ExampleLoss teacher_example_loss(Tape& tape, Transformer& teacher, const TrainingExample& ex,
                                 std::span<const DocumentChunk> chunks, const CompiledPrompt& prompt) {
  if (ex.answer.empty()) fail(ErrorCode::invalid_argument, "example " + std::to_string(ex.qid) + " has no answer");
  auto docs = gather_docs(ex, chunks);
  fit_documents(docs, ex.query, prompt, ex.answer.size(), teacher.config().max_seq_len);
  auto ids = build_text_input(ex.query, docs, prompt);
  const std::size_t prompt_len = ids.size();
  const auto forced = without_last(ex.answer);
  ids.insert(ids.end(), forced.begin(), forced.end());
  GraphOptions opts;
  opts.logits_from = prompt_len - 1;
  GraphOutput out = teacher.forward(tape, teacher.embed_tokens(tape, ids), opts);
  SkdLoss l = skd_loss(*out.logits, ex.answer);
  return {l.sum, l.tokens};
}

TrainReport train_teacher(Transformer& teacher, std::span<const TrainingExample> examples,
                          std::span<const DocumentChunk> chunks, const CompiledPrompt& prompt,
                          const TrainConfig& config) {
  teacher.set_trainable(true);
  return run_training(
      teacher.parameters(), examples.size(),
      [&](Tape& tape, std::size_t i, std::mt19937_64*) {
        return teacher_example_loss(tape, teacher, examples[i], chunks, prompt);
      },
      config);
}

std::vector<TeacherLabel> label_with_teacher(const InferenceWeights& teacher, std::vector<TrainingExample>& examples,
                                             std::span<const DocumentChunk> chunks, const CompiledPrompt& prompt,
                                             std::size_t workers) {
  std::vector<TeacherLabel> labels(examples.size());
  workers = std::max<std::size_t>(1, workers);
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < examples.size(); i += workers) {
      const auto docs = gather_docs(examples[i], chunks);
      labels[i] = teacher_generate(teacher, examples[i].query, docs, prompt);
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
  }
  for (std::size_t i = 0; i < examples.size(); ++i) examples[i].answer = labels[i].tokens;
  return labels;
}

void write_label_cache(const std::filesystem::path& path, std::span<const TrainingExample> examples) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot open " + tmp.string() + " for writing");
    for (const auto& ex : examples) {
      out << ex.qid << '\t';
      for (std::size_t i = 0; i < ex.answer.size(); ++i) out << (i ? " " : "") << ex.answer[i];
      out << '\n';
    }
  }
  std::filesystem::rename(tmp, path);
}

std::map<std::size_t, std::vector<TokenId>> read_label_cache(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::missing_artifact, "teacher label cache " + path.string() + " not found; run train-teacher first");
  std::map<std::size_t, std::vector<TokenId>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) fail(ErrorCode::format, path.string() + ":" + std::to_string(line_no) + ": missing tab");
    std::size_t qid = 0;
    try {
      qid = std::stoul(line.substr(0, tab));
    } catch (const std::exception&) {
      fail(ErrorCode::format, path.string() + ":" + std::to_string(line_no) + ": bad query id");
    }
    std::vector<TokenId> ids;
    std::istringstream ss(line.substr(tab + 1));
    TokenId t;
    while (ss >> t) ids.push_back(t);
    if (!ss.eof()) fail(ErrorCode::format, path.string() + ":" + std::to_string(line_no) + ": bad token id");
    out[qid] = std::move(ids);
  }
  return out;
}

void apply_label_cache(std::vector<TrainingExample>& examples,
                       const std::map<std::size_t, std::vector<TokenId>>& cache) {
  for (auto& ex : examples) {
    auto it = cache.find(ex.qid);
    if (it == cache.end()) {
      fail(ErrorCode::missing_artifact, "teacher label cache has no entry for query " + std::to_string(ex.qid));
    }
    ex.answer = it->second;
  }
}

// ---------------------------------------------------------------------------

PiscoModel::PiscoModel(const Transformer& base_model, std::size_t l, LoraConfig lora, std::uint64_t seed)
    : base(base_model),
      compressor(AdapterRole::compressor, base, lora, seed),
      decoder(AdapterRole::decoder, base, lora, seed + 1),
      memory(l, base) {
  base.set_trainable(false);
}

std::vector<Parameter*> PiscoModel::configure_trainable(TrainableSet mode) {
  base.set_trainable(false);
  std::vector<Parameter*> out;
  for (Parameter* p : compressor.parameters()) {
    p->trainable = true;
    out.push_back(p);
  }
  memory.parameter().trainable = true;
  out.push_back(&memory.parameter());
  for (Parameter* p : decoder.parameters()) {
    p->trainable = mode == TrainableSet::full;
    if (p->trainable) out.push_back(p);
  }
  return out;
}

std::vector<const Parameter*> PiscoModel::all_parameters() const {
  std::vector<const Parameter*> out = base.parameters();
  for (const Parameter* p : compressor.parameters()) out.push_back(p);
  for (const Parameter* p : decoder.parameters()) out.push_back(p);
  out.push_back(&memory.parameter());
  return out;
}

void PiscoModel::save(const std::filesystem::path& path) const { save_checkpoint(path, all_parameters()); }

void PiscoModel::load(const std::filesystem::path& path) {
  std::vector<Parameter*> all = base.parameters();
  for (Parameter* p : compressor.parameters()) all.push_back(p);
  for (Parameter* p : decoder.parameters()) all.push_back(p);
  all.push_back(&memory.parameter());
  load_checkpoint(path, all);
}

ExampleLoss student_example_loss(Tape& tape, PiscoModel& model, const TrainingExample& ex,
                                 std::span<const DocumentChunk> chunks, const CompiledPrompt& prompt,
                                 std::mt19937_64* dropout_rng) {
  if (ex.answer.empty()) fail(ErrorCode::invalid_argument, "example " + std::to_string(ex.qid) + " has no answer");
  const CompressorView view = model.compressor_view();
  std::vector<Var> docs;
  std::vector<std::size_t> lengths;
  for (std::size_t id : ex.docs) {
    if (id >= chunks.size()) fail(ErrorCode::invalid_argument, "example references unknown chunk " + std::to_string(id));
    docs.push_back(compress_graph(tape, view, chunks[id].tokens, dropout_rng));
    lengths.push_back(model.l());
  }
  const std::size_t prompt_len = prompt.length(ex.query.size(), lengths);
  const auto forced = without_last(ex.answer);
  Var inputs = decoder_input_graph(tape, model.base, ex.query, docs, prompt, forced);
  GraphOptions opts;
  opts.adapters = &model.decoder;
  opts.logits_from = prompt_len - 1;
  opts.dropout_rng = dropout_rng;
  GraphOutput out = model.base.forward(tape, inputs, opts);
  SkdLoss l = skd_loss(*out.logits, ex.answer);
  return {l.sum, l.tokens};
}

TrainReport train(PiscoModel& model, std::span<const TrainingExample> examples, std::span<const DocumentChunk> chunks,
                  const CompiledPrompt& prompt, const TrainConfig& config) {
  const auto params = model.configure_trainable(config.trainable);
  return run_training(
      params, examples.size(),
      [&](Tape& tape, std::size_t i, std::mt19937_64* rng) {
        return student_example_loss(tape, model, examples[i], chunks, prompt, rng);
      },
      config);
}

TrainReport sft_raw_labels(PiscoModel& model, std::vector<TrainingExample> examples, std::span<const QAPair> qa,
                           const Vocabulary& vocab, std::span<const DocumentChunk> chunks,
                           const CompiledPrompt& prompt, const TrainConfig& config) {
  attach_gold_answers(examples, qa, vocab, false);
  return train(model, examples, chunks, prompt, config);
}

StudentRuntime::StudentRuntime(const PiscoModel& model)
    : compressor(model.base, &model.compressor),
      decoder(model.base, &model.decoder),
      memory(model.memory.parameter().value) {}

DocumentEmbeddings StudentRuntime::compress(std::size_t doc_id, std::span<const TokenId> tokens,
                                            MacCounter* counter) const {
  return pisco::compress(compressor, memory, doc_id, tokens, counter);
}

std::vector<TokenId> StudentRuntime::answer(std::span<const TokenId> query, std::span<const DocumentEmbeddings> docs,
                                            const CompiledPrompt& prompt, std::size_t max_new_tokens,
                                            MacCounter* counter) const {
  const auto items = build_decoder_input(query, docs, prompt, decoder.config().max_seq_len);
  GenerateOptions opts;
  opts.max_new_tokens = max_new_tokens;
  return greedy_generate(decoder, items, opts, counter);
}

// ---------------------------------------------------------------------------

std::string_view to_string(PretrainTask t) {
  switch (t) {
    case PretrainTask::ae: return "ae";
    case PretrainTask::tc: return "tc";
    case PretrainTask::kbtc: return "kbtc";
    case PretrainTask::multi_kbtc: return "multi_kbtc";
  }
  return "?";
}

TokenId task_token(PretrainTask t) {
  switch (t) {
    case PretrainTask::ae: return special::task_ae;
    case PretrainTask::tc: return special::task_tc;
    case PretrainTask::kbtc: return special::task_kbtc;
    case PretrainTask::multi_kbtc: return special::task_multi_kbtc;
  }
  return special::unk;
}

namespace {

std::size_t find_span(std::span<const TokenId> doc, std::span<const TokenId> keyword) {
  if (keyword.empty()) fail(ErrorCode::invalid_argument, "keyword is empty");
  auto it = std::search(doc.begin(), doc.end(), keyword.begin(), keyword.end());
  if (it == doc.end()) fail(ErrorCode::invalid_argument, "keyword not found in document");
  return static_cast<std::size_t>(it - doc.begin());
}

std::vector<TokenId> continuation(std::span<const TokenId> doc, std::span<const TokenId> keyword) {
  const std::size_t p = find_span(doc, keyword);
  if (p + keyword.size() >= doc.size()) fail(ErrorCode::invalid_argument, "keyword ends the document; nothing to continue");
  return {doc.begin() + static_cast<std::ptrdiff_t>(p + keyword.size()), doc.end()};
}

}  // namespace

PretrainExample make_ae_example(std::span<const TokenId> doc) {
  if (doc.empty()) fail(ErrorCode::invalid_argument, "auto-encoding needs a non-empty document");
  PretrainExample ex;
  ex.task = PretrainTask::ae;
  ex.docs.emplace_back(doc.begin(), doc.end());
  ex.target.assign(doc.begin(), doc.end());
  return ex;
}

PretrainExample make_tc_example(std::span<const TokenId> doc, std::size_t split) {
  if (split == 0 || split >= doc.size()) {
    fail(ErrorCode::invalid_argument, "continuation split " + std::to_string(split) + " outside (0, " +
                                          std::to_string(doc.size()) + ")");
  }
  PretrainExample ex;
  ex.task = PretrainTask::tc;
  ex.docs.emplace_back(doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(split));
  ex.target.assign(doc.begin() + static_cast<std::ptrdiff_t>(split), doc.end());
  return ex;
}

PretrainExample make_kbtc_example(std::span<const TokenId> doc, std::span<const TokenId> keyword) {
  PretrainExample ex;
  ex.task = PretrainTask::kbtc;
  ex.target = continuation(doc, keyword);
  ex.docs.emplace_back(doc.begin(), doc.end());
  ex.keyword.assign(keyword.begin(), keyword.end());
  return ex;
}

PretrainExample make_multi_kbtc_example(std::span<const std::vector<TokenId>> docs, std::size_t target_doc,
                                        std::span<const TokenId> keyword) {
  if (target_doc >= docs.size()) fail(ErrorCode::invalid_argument, "target document index out of range");
  PretrainExample ex;
  ex.task = PretrainTask::multi_kbtc;
  ex.target = continuation(docs[target_doc], keyword);
  ex.docs.assign(docs.begin(), docs.end());
  ex.keyword.assign(keyword.begin(), keyword.end());
  return ex;
}

std::vector<TokenId> sample_keyword(std::span<const TokenId> doc, std::mt19937_64& rng) {
  if (doc.size() < 5) {
    fail(ErrorCode::invalid_argument, "document of " + std::to_string(doc.size()) + " tokens is shorter than a keyword span");
  }
  const std::size_t max_span = std::min<std::size_t>(8, doc.size() - 2);
  const std::size_t span = std::uniform_int_distribution<std::size_t>(3, max_span)(rng);
  const std::size_t p = std::uniform_int_distribution<std::size_t>(1, doc.size() - span - 1)(rng);
  return {doc.begin() + static_cast<std::ptrdiff_t>(p), doc.begin() + static_cast<std::ptrdiff_t>(p + span)};
}

std::vector<InputItem> pretrain_prompt(const StudentRuntime& runtime, const PretrainExample& ex) {
  std::vector<InputItem> items{InputItem::token(special::bos)};
  for (std::size_t i = 0; i < ex.docs.size(); ++i) {
    if (i > 0) items.push_back(InputItem::token(special::sep));
    const auto emb = runtime.compress(i, ex.docs[i]);
    const std::size_t d = emb.vectors.cols();
    for (std::size_t s = 0; s < emb.l(); ++s) {
      const Scalar* row = emb.vectors.data() + s * d;
      items.push_back(InputItem::embedding(std::vector<Scalar>(row, row + d)));
    }
  }
  items.push_back(InputItem::token(task_token(ex.task)));
  for (TokenId t : ex.keyword) items.push_back(InputItem::token(t));
  return items;
}

ExampleLoss pretrain_example_loss(Tape& tape, PiscoModel& model, const PretrainExample& ex,
                                  std::mt19937_64* dropout_rng) {
  if (ex.target.empty()) fail(ErrorCode::invalid_argument, "pretraining example has an empty target");
  const CompressorView view = model.compressor_view();
  std::vector<Var> parts;
  const TokenId bos[] = {special::bos};
  const TokenId sep[] = {special::sep};
  parts.push_back(model.base.embed_tokens(tape, bos));
  for (std::size_t i = 0; i < ex.docs.size(); ++i) {
    if (i > 0) parts.push_back(model.base.embed_tokens(tape, sep));
    parts.push_back(compress_graph(tape, view, ex.docs[i], dropout_rng));
  }
  std::vector<TokenId> tail{task_token(ex.task)};
  tail.insert(tail.end(), ex.keyword.begin(), ex.keyword.end());
  std::size_t prompt_len = 1 + ex.docs.size() * model.l() + (ex.docs.size() - 1) + tail.size();
  std::vector<TokenId> labels = ex.target;
  labels.push_back(special::eos);
  tail.insert(tail.end(), ex.target.begin(), ex.target.end());
  parts.push_back(model.base.embed_tokens(tape, tail));
  GraphOptions opts;
  opts.adapters = &model.decoder;
  opts.logits_from = prompt_len - 1;
  opts.dropout_rng = dropout_rng;
  GraphOutput out = model.base.forward(tape, concat_rows(parts), opts);
  SkdLoss l = skd_loss(*out.logits, labels);
  return {l.sum, l.tokens};
}

double Mixture::weight(PretrainTask t) const {
  switch (t) {
    case PretrainTask::ae: return ae;
    case PretrainTask::tc: return tc;
    case PretrainTask::kbtc: return kbtc;
    case PretrainTask::multi_kbtc: return multi_kbtc;
  }
  return 0.0;
}

void Mixture::validate() const {
  const double total = ae + tc + kbtc + multi_kbtc;
  if (ae < 0 || tc < 0 || kbtc < 0 || multi_kbtc < 0) fail(ErrorCode::config, "mixture weights must be non-negative");
  if (total == 0) fail(ErrorCode::config, "empty pretraining mixture");
  if (std::abs(total - 1.0) > 1e-6) fail(ErrorCode::config, "mixture weights sum to " + std::to_string(total) + ", not 1");
}

Mixture Mixture::parse(std::string_view text) {
  if (text == "ae") return {1, 0, 0, 0};
  if (text == "mix1") return {0.5, 0.5, 0, 0};
  if (text == "mix2") return {0.25, 0.25, 0.5, 0};
  if (text == "mix3") return {0, 0.5, 0.5, 0};
  if (text == "mix4") return {0, 0.25, 0.75, 0};
  if (text == "mix5") return {0, 0.25, 0.25, 0.5};
  Mixture m;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto item = text.substr(pos, end - pos);
    const auto eq = item.find('=');
    if (eq == std::string_view::npos) fail(ErrorCode::config, "mixture entry \"" + std::string(item) + "\" lacks '='");
    const std::string key(item.substr(0, eq));
    double w = 0.0;
    try {
      w = std::stod(std::string(item.substr(eq + 1)));
    } catch (const std::exception&) {
      fail(ErrorCode::config, "mixture weight for " + key + " is not a number");
    }
    if (key == "ae") m.ae = w;
    else if (key == "tc") m.tc = w;
    else if (key == "kbtc") m.kbtc = w;
    else if (key == "multi_kbtc" || key == "mkbtc") m.multi_kbtc = w;
    else fail(ErrorCode::config, "unknown pretraining task " + key);
    pos = end + 1;
  }
  m.validate();
  return m;
}

PretrainExample sample_pretrain_example(const Mixture& mixture, std::span<const DocumentChunk> docs,
                                        std::size_t multi_docs, std::mt19937_64& rng,
                                        std::optional<PretrainTask> force) {
  if (docs.empty()) fail(ErrorCode::invalid_argument, "no documents to build pretraining examples from");
  PretrainTask task;
  if (force) {
    task = *force;
  } else {
    std::discrete_distribution<int> pick({mixture.ae, mixture.tc, mixture.kbtc, mixture.multi_kbtc});
    task = kPretrainTasks[pick(rng)];
  }
  auto any_doc = [&]() -> const std::vector<TokenId>& {
    return docs[std::uniform_int_distribution<std::size_t>(0, docs.size() - 1)(rng)].tokens;
  };
  switch (task) {
    case PretrainTask::ae: return make_ae_example(any_doc());
    case PretrainTask::tc: {
      const auto& d = any_doc();
      if (d.size() < 2) return make_ae_example(d);
      return make_tc_example(d, std::uniform_int_distribution<std::size_t>(1, d.size() - 1)(rng));
    }
    case PretrainTask::kbtc: {
      const auto& d = any_doc();
      const auto kw = sample_keyword(d, rng);
      return make_kbtc_example(d, kw);
    }
    case PretrainTask::multi_kbtc: {
      const std::size_t n = std::max<std::size_t>(1, std::min(multi_docs, docs.size()));
      std::vector<std::size_t> ids(docs.size());
      std::iota(ids.begin(), ids.end(), 0);
      std::shuffle(ids.begin(), ids.end(), rng);
      std::vector<std::vector<TokenId>> chosen;
      for (std::size_t i = 0; i < n; ++i) chosen.push_back(docs[ids[i]].tokens);
      const std::size_t target = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      const auto kw = sample_keyword(chosen[target], rng);
      return make_multi_kbtc_example(chosen, target, kw);
    }
  }
  fail(ErrorCode::invalid_argument, "unknown pretraining task");
}

double pretrain_rouge(const StudentRuntime& runtime, std::span<const PretrainExample> examples) {
  if (examples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : examples) {
    const auto items = pretrain_prompt(runtime, ex);
    GenerateOptions opts;
    opts.max_new_tokens = std::max(kMaxAnswerTokens, ex.target.size() + 1);
    auto out = greedy_generate(runtime.decoder, items, opts);
    if (!out.empty() && out.back() == special::eos) out.pop_back();
    total += rouge_l(out, ex.target);
  }
  return total / static_cast<double>(examples.size());
}

PretrainReport pretrain(PiscoModel& model, std::span<const DocumentChunk> train_docs,
                        std::span<const DocumentChunk> heldout_docs, const PretrainConfig& config) {
  config.mixture.validate();
  std::mt19937_64 rng(config.train.seed ^ 0x9e37ULL);
  std::vector<PretrainExample> examples;
  const std::size_t n = config.steps * config.train.batch_size;
  examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    examples.push_back(sample_pretrain_example(config.mixture, train_docs, config.multi_docs, rng));
  }
  TrainConfig tc = config.train;
  tc.max_steps = config.steps;
  tc.eval_fraction = 0.0;
  const auto params = model.configure_trainable(tc.trainable);
  PretrainReport report;
  report.train = run_training(
      params, examples.size(),
      [&](Tape& tape, std::size_t i, std::mt19937_64* drop) {
        return pretrain_example_loss(tape, model, examples[i], drop);
      },
      tc);

  const StudentRuntime runtime(model);
  std::mt19937_64 eval_rng(config.train.seed ^ 0xe7a1ULL);
  const std::size_t count = std::min(config.eval_docs, heldout_docs.size());
  for (PretrainTask t : kPretrainTasks) {
    std::vector<PretrainExample> held;
    for (std::size_t i = 0; i < count; ++i) {
      held.push_back(sample_pretrain_example(config.mixture, heldout_docs, config.multi_docs, eval_rng, t));
    }
    report.rouge_l[std::string(to_string(t))] = pretrain_rouge(runtime, held);
  }
  return report;
}

}  // namespace PISCO_ABI
}  // namespace pisco
