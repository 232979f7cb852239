#include "pisco/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "pisco/checkpoint.hpp"

#ifndef PISCO_VERSION
#define PISCO_VERSION "0.0.0"
#endif
#ifndef PISCO_GIT_REVISION
#define PISCO_GIT_REVISION "unknown"
#endif

namespace pisco {
inline namespace PISCO_ABI {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view code_version() {
  static const std::string v = std::string(PISCO_VERSION) + "+" + PISCO_GIT_REVISION;
  return v;
}

void Manifest::write(const fs::path& path) const {
  json j{{"stage", stage},
         {"name", name},
         {"config_hash", config_hash},
         {"code_version", code_version},
         {"seed", seed},
         {"config", config},
         {"inputs", inputs},
         {"metrics", metrics},
         {"seconds", seconds}};
  fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot open " + tmp.string() + " for writing");
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

Manifest Manifest::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::missing_artifact, "missing manifest " + path.string());
  Manifest m;
  try {
    const json j = json::parse(in);
    m.stage = j.at("stage");
    m.name = j.at("name");
    m.config_hash = j.at("config_hash");
    m.code_version = j.at("code_version");
    m.seed = j.at("seed");
    m.config = j.at("config");
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.metrics = j.at("metrics").get<std::map<std::string, double>>();
    m.seconds = j.at("seconds");
  } catch (const json::exception& e) {
    fail(ErrorCode::format, path.string() + ": " + e.what());
  }
  return m;
}

std::vector<TrainingExample> Dataset::train_examples() const {
  std::vector<TrainingExample> out;
  for (const auto& ex : examples) {
    if (!qa[ex.qid].test) out.push_back(ex);
  }
  return out;
}

std::vector<TrainingExample> Dataset::test_examples(std::size_t limit) const {
  std::vector<TrainingExample> out;
  for (const auto& ex : examples) {
    if (qa[ex.qid].test && (limit == 0 || out.size() < limit)) out.push_back(ex);
  }
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

const std::vector<std::string>& stage_keys(std::string_view stage) {
  static const std::map<std::string, std::vector<std::string>, std::less<>> table{
      {"data", {"run.seed", "data.entities", "data.extra_worlds", "data.filler_rate", "data.test_fraction", "data.k"}},
      {"teacher",
       {"model.layers", "model.d_model", "model.heads", "model.d_ff", "model.max_seq_len", "optim.weight_decay",
        "optim.clip_norm", "optim.warmup_ratio", "teacher.warm_epochs", "teacher.warm_lr", "teacher.epochs",
        "teacher.lr", "teacher.batch"}},
      {"pretrain",
       {"compress.l", "lora.rank", "lora.alpha", "lora.dropout", "optim.weight_decay", "optim.clip_norm",
        "optim.warmup_ratio", "pretrain.mixture", "pretrain.steps", "pretrain.lr", "pretrain.batch",
        "pretrain.eval_docs"}},
      {"distill",
       {"compress.l", "lora.rank", "lora.alpha", "lora.dropout", "optim.weight_decay", "optim.clip_norm",
        "optim.warmup_ratio", "distill.frozen_decoder", "distill.epochs", "distill.lr", "distill.batch",
        "distill.init"}},
      {"sft",
       {"compress.l", "lora.rank", "lora.alpha", "lora.dropout", "optim.weight_decay", "optim.clip_norm",
        "optim.warmup_ratio", "distill.frozen_decoder", "distill.epochs", "distill.lr", "distill.batch",
        "distill.init"}},
      {"compress", {}},
      {"eval", {"eval.model", "eval.use_store", "eval.max_new_tokens", "eval.limit"}},
      {"nih", {"eval.model", "eval.max_new_tokens", "nih.sizes", "nih.depths", "nih.trials"}},
      {"analyze", {"eval.model", "analysis.docs"}},
      {"bench",
       {"eval.model", "bench.doc_tokens", "bench.query_tokens", "bench.answer_tokens", "bench.warmup",
        "bench.repetitions", "bench.memory_mb"}},
  };
  const auto it = table.find(stage);
  if (it == table.end()) fail(ErrorCode::invalid_argument, "unknown stage " + std::string(stage));
  return it->second;
}

}  // namespace

Pipeline::Pipeline(RunConfig config, LogFn log) : config_(std::move(config)), log_(std::move(log)) {
  config_.validate();
}

void Pipeline::log(const std::string& message) const {
  if (log_) log_(message);
}

fs::path Pipeline::data_dir() const { return config_.run_dir / "data"; }
fs::path Pipeline::model_path(std::string_view name) const {
  return config_.run_dir / "models" / (std::string(name) + ".ckpt");
}
fs::path Pipeline::manifest_path(std::string_view name) const {
  return config_.run_dir / "manifests" / (std::string(name) + ".json");
}
fs::path Pipeline::loss_log_path(std::string_view name) const {
  return config_.run_dir / "models" / (std::string(name) + "_loss.csv");
}
fs::path Pipeline::labels_path() const { return config_.run_dir / "labels" / "teacher.tsv"; }
fs::path Pipeline::store_path(std::string_view name) const {
  return config_.run_dir / "stores" / (std::string(name) + ".bin");
}
fs::path Pipeline::report_dir() const { return config_.run_dir / "reports"; }

std::string Pipeline::stage_hash(std::string_view stage, std::string_view /*name*/) const {
  std::string text = std::string(stage) + ":" + config_.hash(stage_keys(stage));
  auto input = [&](std::string_view upstream) {
    const auto path = manifest_path(upstream);
    text += "|" + std::string(upstream) + "=" + (fs::exists(path) ? Manifest::read(path).config_hash : "missing");
  };
  if (stage == "data") return fnv1a_hex(text);
  input("data");
  if (stage == "teacher") return fnv1a_hex(text);
  input("teacher");
  if ((stage == "distill" || stage == "sft") && !config_.distill_init.empty()) input(config_.distill_init);
  if (stage == "compress") input(config_.model);
  if ((stage == "eval" || stage == "nih" || stage == "analyze" || stage == "bench") && config_.model != "teacher") {
    input(config_.model);
    if (stage == "eval" && config_.use_store) input("store_" + config_.model);
  }
  return fnv1a_hex(text);
}

bool Pipeline::up_to_date(std::string_view stage, std::string_view name) const {
  const auto path = manifest_path(name);
  if (!fs::exists(path)) return false;
  const Manifest m = Manifest::read(path);
  return m.stage == stage && m.config_hash == stage_hash(stage, name);
}

void Pipeline::require(std::string_view stage, std::string_view name, std::string_view command) const {
  const auto path = manifest_path(name);
  if (!fs::exists(path)) {
    fail(ErrorCode::missing_artifact,
         "missing " + std::string(stage) + " artifact '" + std::string(name) + "' in " + config_.run_dir.string() +
             "; run `pisco " + std::string(command) + "` first");
  }
  if (Manifest::read(path).stage != stage) {
    fail(ErrorCode::missing_artifact, "artifact '" + std::string(name) + "' is not a " + std::string(stage) + " output");
  }
}

Manifest Pipeline::start(std::string_view stage, std::string_view name) const {
  Manifest m;
  m.stage = stage;
  m.name = name;
  m.config_hash = stage_hash(stage, name);
  m.code_version = code_version();
  m.seed = config_.seed;
  m.config = config_.serialize();
  return m;
}

void Pipeline::finish(Manifest& m, double seconds, std::string_view name) const {
  m.seconds = seconds;
  m.write(manifest_path(name));
  log(m.stage + " '" + std::string(name) + "' done in " + std::to_string(static_cast<long>(seconds)) + " s, hash " +
      m.config_hash);
}

// ---------------------------------------------------------------------------

Manifest Pipeline::gen_data() {
  if (!force && up_to_date("data", "data")) {
    log("data up to date");
    return Manifest::read(manifest_path("data"));
  }
  const auto t0 = Clock::now();
  Manifest m = start("data", "data");
  const Vocabulary vocab = build_vocabulary(config_.synth_spec());
  std::vector<DocumentChunk> chunks;
  std::vector<QAPair> qa;
  std::vector<TrainingExample> examples;
  for (std::size_t w = 0; w <= config_.extra_worlds; ++w) {
    const SyntheticWorld world = gen_synthetic(config_.synth_spec(w));
    auto local = chunk_corpus(world.documents, vocab);
    const Bm25Index index(local);
    auto ex = retrieve_examples(world.qa, index, vocab, config_.k);
    const std::size_t chunk_offset = chunks.size(), qa_offset = qa.size();
    for (auto& c : local) {
      c.id += chunk_offset;
      chunks.push_back(std::move(c));
    }
    for (std::size_t i = 0; i < world.qa.size(); ++i) {
      QAPair q = world.qa[i];
      q.id = qa_offset + i;
      for (auto& g : q.gold_docs) g += chunk_offset;
      q.test = q.test && w == 0;
      qa.push_back(std::move(q));
      ex[i].qid = qa_offset + i;
      for (auto& d : ex[i].docs) d += chunk_offset;
      examples.push_back(std::move(ex[i]));
    }
    if (w == 0) m.metrics["world0_chunks"] = static_cast<double>(chunks.size());
  }
  fs::create_directories(data_dir());
  write_corpus_jsonl(data_dir() / "corpus.jsonl", chunks);
  write_qa_jsonl(data_dir() / "qa.jsonl", qa);
  {
    std::ofstream out(data_dir() / "retrieval.jsonl", std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write retrieval results");
    for (const auto& ex : examples) out << json{{"qid", ex.qid}, {"docs", ex.docs}}.dump() << '\n';
  }
  std::size_t top1 = 0, tests = 0;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    top1 += !examples[i].docs.empty() && examples[i].docs[0] == qa[i].gold_docs[0];
    tests += qa[i].test;
  }
  m.metrics["chunks"] = static_cast<double>(chunks.size());
  m.metrics["questions"] = static_cast<double>(qa.size());
  m.metrics["test_questions"] = static_cast<double>(tests);
  m.metrics["retrieval_top1"] = static_cast<double>(top1) / static_cast<double>(qa.size());
  m.metrics["vocab_size"] = static_cast<double>(vocab.size());
  dataset_.reset();
  finish(m, since(t0), "data");
  return m;
}

const Dataset& Pipeline::dataset() {
  if (dataset_) return *dataset_;
  require("data", "data", "gen-data");
  if (!up_to_date("data", "data")) {
    fail(ErrorCode::missing_artifact, "data in " + config_.run_dir.string() +
                                          " was generated with a different config; rerun `pisco gen-data`");
  }
  const Manifest m = Manifest::read(manifest_path("data"));
  Dataset d;
  d.spec = config_.synth_spec();
  d.vocab = build_vocabulary(d.spec);
  d.prompt = CompiledPrompt::compile(PromptTemplate{}, d.vocab);
  d.chunks = read_corpus_jsonl(data_dir() / "corpus.jsonl", d.vocab);
  d.qa = read_qa_jsonl(data_dir() / "qa.jsonl");
  d.world0_chunks = static_cast<std::size_t>(m.metrics.at("world0_chunks"));
  std::ifstream in(data_dir() / "retrieval.jsonl");
  if (!in) fail(ErrorCode::missing_artifact, "missing retrieval.jsonl; rerun `pisco gen-data`");
  std::string line;
  while (std::getline(in, line)) {
    const json j = json::parse(line);
    TrainingExample ex;
    ex.qid = j.at("qid");
    ex.docs = j.at("docs").get<std::vector<std::size_t>>();
    if (ex.qid >= d.qa.size()) fail(ErrorCode::format, "retrieval.jsonl names an unknown question");
    for (std::size_t doc : ex.docs) {
      if (doc >= d.chunks.size()) fail(ErrorCode::format, "retrieval.jsonl names an unknown chunk");
    }
    ex.query = d.vocab.tokenize(d.qa[ex.qid].question);
    d.examples.push_back(std::move(ex));
  }
  if (d.examples.size() != d.qa.size()) fail(ErrorCode::format, "retrieval.jsonl does not cover every question");
  dataset_ = std::move(d);
  return *dataset_;
}

std::vector<DocumentChunk> Pipeline::heldout_documents() const {
  const SynthSpec spec = config_.synth_spec(1000);
  const SyntheticWorld world = gen_synthetic(spec);
  return chunk_corpus(world.documents, build_vocabulary(config_.synth_spec()));
}

// ---------------------------------------------------------------------------

Transformer Pipeline::load_teacher() {
  const Dataset& d = dataset();
  require("teacher", "teacher", "train-teacher");
  Transformer t(config_.model_config(d.vocab.size()), config_.seed);
  load_checkpoint(model_path("teacher"), t.parameters());
  return t;
}

PiscoModel Pipeline::load_student(std::string_view name) {
  const Dataset& d = dataset();
  const auto path = manifest_path(name);
  if (!fs::exists(path)) {
    fail(ErrorCode::missing_artifact, "no model '" + std::string(name) + "' in " + config_.run_dir.string() +
                                          "; run `pisco distill`, `pisco sft-raw` or `pisco pretrain` first");
  }
  const Manifest m = Manifest::read(path);
  if (m.stage != "distill" && m.stage != "sft" && m.stage != "pretrain") {
    fail(ErrorCode::missing_artifact, "'" + std::string(name) + "' is a " + m.stage + " artifact, not a model");
  }
  const Transformer base(config_.model_config(d.vocab.size()), config_.seed);
  PiscoModel model(base, config_.l, config_.lora_config(), config_.seed);
  model.load(model_path(name));
  return model;
}

Manifest Pipeline::train_teacher() {
  if (!force && up_to_date("teacher", "teacher")) {
    log("teacher up to date");
    return Manifest::read(manifest_path("teacher"));
  }
  const Dataset& d = dataset();
  const auto t0 = Clock::now();
  Manifest m = start("teacher", "teacher");
  Transformer teacher(config_.model_config(d.vocab.size()), config_.seed);
  auto examples = d.train_examples();
  attach_gold_answers(examples, d.qa, d.vocab, true);

  TrainConfig tc;
  tc.batch_size = config_.teacher_batch;
  tc.adamw = config_.adamw();
  tc.warmup_ratio = config_.warmup_ratio;
  tc.seed = config_.seed;
  tc.on_step = [&](std::size_t step, double loss, double) {
    if (step % 50 == 0) log("teacher step " + std::to_string(step) + " loss " + std::to_string(loss));
  };
  fs::create_directories(model_path("teacher").parent_path());
  if (config_.teacher_warm_epochs > 0) {
    auto warm = examples;
    for (auto& ex : warm) ex.docs.resize(std::min<std::size_t>(ex.docs.size(), 1));
    tc.epochs = config_.teacher_warm_epochs;
    tc.lr = config_.teacher_warm_lr;
    tc.loss_log = loss_log_path("teacher_warm");
    const TrainReport r = pisco::train_teacher(teacher, warm, d.chunks, d.prompt, tc);
    m.metrics["warm_final_eval_loss"] = r.final_eval_loss;
  }
  tc.epochs = config_.teacher_epochs;
  tc.lr = config_.teacher_lr;
  tc.loss_log = loss_log_path("teacher");
  const TrainReport r = pisco::train_teacher(teacher, examples, d.chunks, d.prompt, tc);
  m.metrics["final_eval_loss"] = r.final_eval_loss;
  m.metrics["steps"] = static_cast<double>(r.steps);
  save_checkpoint(model_path("teacher"), std::as_const(teacher).parameters());

  log("labelling " + std::to_string(examples.size()) + " training questions with the teacher");
  const InferenceWeights weights(teacher);
  auto labelled = d.train_examples();
  const auto labels = label_with_teacher(weights, labelled, d.chunks, d.prompt, config_.workers);
  fs::create_directories(labels_path().parent_path());
  write_label_cache(labels_path(), labelled);
  std::size_t correct = 0, dropped = 0;
  for (std::size_t i = 0; i < labelled.size(); ++i) {
    correct += match_accuracy(answer_text(d.vocab, labelled[i].answer), d.qa[labelled[i].qid].answers);
    dropped += labels[i].dropped_docs;
  }
  m.metrics["label_train_match"] = static_cast<double>(correct) / static_cast<double>(labelled.size());
  m.metrics["label_dropped_docs"] = static_cast<double>(dropped);
  finish(m, since(t0), "teacher");
  return m;
}

Manifest Pipeline::pretrain() {
  const std::string name = config_.pretrain_name;
  if (!force && up_to_date("pretrain", name)) {
    log("pretrain '" + name + "' up to date");
    return Manifest::read(manifest_path(name));
  }
  const Dataset& d = dataset();
  const Transformer teacher = load_teacher();
  const auto t0 = Clock::now();
  Manifest m = start("pretrain", name);
  PiscoModel model(teacher, config_.l, config_.lora_config(), config_.seed);
  PretrainConfig pc;
  pc.mixture = Mixture::parse(config_.mixture);
  pc.steps = config_.pretrain_steps;
  pc.eval_docs = config_.pretrain_eval_docs;
  pc.train.batch_size = config_.pretrain_batch;
  pc.train.lr = config_.pretrain_lr;
  pc.train.adamw = config_.adamw();
  pc.train.warmup_ratio = config_.warmup_ratio;
  pc.train.seed = config_.seed;
  pc.train.loss_log = loss_log_path(name);
  pc.train.on_step = [&](std::size_t step, double loss, double) {
    if (step % 50 == 0) log("pretrain step " + std::to_string(step) + " loss " + std::to_string(loss));
  };
  fs::create_directories(model_path(name).parent_path());
  const auto heldout = heldout_documents();
  const PretrainReport r = pisco::pretrain(model, d.chunks, heldout, pc);
  model.save(model_path(name));
  for (const auto& [task, score] : r.rouge_l) m.metrics["rouge_l_" + task] = score;
  m.metrics["final_train_loss"] = r.train.curve.empty() ? 0.0 : r.train.curve.back().train_loss;
  m.inputs["teacher"] = Manifest::read(manifest_path("teacher")).config_hash;
  finish(m, since(t0), name);
  return m;
}

Manifest Pipeline::train_student(bool raw_labels) {
  const std::string stage = raw_labels ? "sft" : "distill";
  const std::string name = raw_labels ? config_.sft_name : config_.distill_name;
  if (!force && up_to_date(stage, name)) {
    log(stage + " '" + name + "' up to date");
    return Manifest::read(manifest_path(name));
  }
  const Dataset& d = dataset();
  const Transformer teacher = load_teacher();
  auto examples = d.train_examples();
  if (!raw_labels) {
    if (!fs::exists(labels_path())) {
      fail(ErrorCode::missing_artifact, "missing teacher labels " + labels_path().string() + "; run `pisco train-teacher` first");
    }
    apply_label_cache(examples, read_label_cache(labels_path()));
  }
  const auto t0 = Clock::now();
  Manifest m = start(stage, name);
  m.inputs["teacher"] = Manifest::read(manifest_path("teacher")).config_hash;
  PiscoModel model(teacher, config_.l, config_.lora_config(), config_.seed);
  if (!config_.distill_init.empty()) {
    require("pretrain", config_.distill_init, "pretrain --name " + config_.distill_init);
    model.load(model_path(config_.distill_init));
    m.inputs[config_.distill_init] = Manifest::read(manifest_path(config_.distill_init)).config_hash;
  }
  TrainConfig tc;
  tc.batch_size = config_.distill_batch;
  tc.lr = config_.distill_lr;
  tc.epochs = config_.distill_epochs;
  tc.adamw = config_.adamw();
  tc.warmup_ratio = config_.warmup_ratio;
  tc.seed = config_.seed;
  tc.trainable = config_.frozen_decoder ? TrainableSet::frozen_decoder : TrainableSet::full;
  tc.loss_log = loss_log_path(name);
  tc.checkpoint = model_path(name + ".diverged");
  tc.on_step = [&](std::size_t step, double loss, double) {
    if (step % 50 == 0) log(stage + " step " + std::to_string(step) + " loss " + std::to_string(loss));
  };
  fs::create_directories(model_path(name).parent_path());
  const TrainReport r = raw_labels ? sft_raw_labels(model, examples, d.qa, d.vocab, d.chunks, d.prompt, tc)
                                   : train(model, examples, d.chunks, d.prompt, tc);
  model.save(model_path(name));
  m.metrics["initial_eval_loss"] = r.initial_eval_loss;
  m.metrics["final_eval_loss"] = r.final_eval_loss;
  m.metrics["steps"] = static_cast<double>(r.steps);
  finish(m, since(t0), name);
  return m;
}

Manifest Pipeline::distill() { return train_student(false); }
Manifest Pipeline::sft_raw() { return train_student(true); }

Manifest Pipeline::compress() {
  const std::string name = config_.model;
  if (name == "teacher") fail(ErrorCode::config, "the teacher reads plain text; choose a compression model");
  const std::string store_name = "store_" + name;
  if (!force && up_to_date("compress", store_name)) {
    log("store for '" + name + "' up to date");
    return Manifest::read(manifest_path(store_name));
  }
  const Dataset& d = dataset();
  const PiscoModel model = load_student(name);
  const auto t0 = Clock::now();
  Manifest m = start("compress", store_name);
  const StudentRuntime rt(model);
  fs::create_directories(store_path(name).parent_path());
  // A store left by an older model must not be resumed.
  if (fs::exists(store_path(name))) fs::remove(store_path(name));
  CompressCorpusOptions opts;
  opts.workers = config_.workers;
  opts.progress = [&](std::size_t done, std::size_t total) {
    if (done % 500 == 0 || done == total) log("compressed " + std::to_string(done) + "/" + std::to_string(total));
  };
  const EmbeddingStore store = compress_corpus(d.chunks, rt.compressor, rt.memory, store_path(name), opts);
  m.inputs[name] = Manifest::read(manifest_path(name)).config_hash;
  m.metrics["documents"] = static_cast<double>(store.size());
  finish(m, since(t0), store_name);
  return m;
}

EvalResult Pipeline::eval() {
  const Dataset& d = dataset();
  const std::string name = config_.model;
  const auto test = d.test_examples(config_.eval_limit);
  const auto t0 = Clock::now();
  Manifest m = start("eval", "eval_" + name);
  EvalResult result;
  if (name == "teacher") {
    const Transformer teacher = load_teacher();
    const InferenceWeights w(teacher);
    result.report = evaluate_qa(corpus_answerer(teacher_answerer(w, d.prompt, config_.max_new_tokens), d.chunks),
                                test, d.qa, d.vocab, config_.workers);
    m.inputs["teacher"] = Manifest::read(manifest_path("teacher")).config_hash;
  } else {
    const PiscoModel model = load_student(name);
    const StudentRuntime rt(model);
    m.inputs[name] = Manifest::read(manifest_path(name)).config_hash;
    if (config_.use_store) {
      const std::string store_name = "store_" + name;
      if (!fs::exists(manifest_path(store_name))) {
        fail(ErrorCode::missing_artifact, "no compressed store for '" + name + "'; run `pisco compress --model " +
                                              name + "` first or pass --no-store");
      }
      if (!up_to_date("compress", store_name)) {
        fail(ErrorCode::missing_artifact,
             "compressed store for '" + name + "' predates the model; rerun `pisco compress --model " + name + "`");
      }
      const EmbeddingStore store = EmbeddingStore::load(store_path(name));
      m.inputs[store_name] = Manifest::read(manifest_path(store_name)).config_hash;
      result.report = evaluate_qa(store_answerer(rt, store, d.prompt, config_.max_new_tokens), test, d.qa, d.vocab,
                                  config_.workers);
    } else {
      result.report = evaluate_qa(corpus_answerer(student_answerer(rt, d.prompt, config_.max_new_tokens), d.chunks),
                                  test, d.qa, d.vocab, config_.workers);
    }
  }
  result.summary = result.report.summary();
  fs::create_directories(report_dir());
  result.report.write_jsonl(report_dir() / ("eval_" + name + ".jsonl"));
  result.report.write_summary(report_dir() / ("eval_" + name + ".json"), m.config_hash);
  m.metrics["match"] = result.summary.match;
  m.metrics["f1"] = result.summary.f1;
  m.metrics["recall"] = result.summary.recall;
  m.metrics["recall3gram"] = result.summary.recall3gram;
  m.metrics["count"] = static_cast<double>(result.summary.count);
  finish(m, since(t0), "eval_" + name);
  return result;
}

NIHGrid Pipeline::nih() {
  const Dataset& d = dataset();
  const std::string name = config_.model;
  const auto t0 = Clock::now();
  Manifest m = start("nih", "nih_" + name);
  NIHGrid grid;
  if (name == "teacher") {
    const Transformer teacher = load_teacher();
    const InferenceWeights w(teacher);
    grid = nih_run(teacher_answerer(w, d.prompt, config_.max_new_tokens), d.spec, d.vocab, config_.nih_config());
    m.inputs["teacher"] = Manifest::read(manifest_path("teacher")).config_hash;
  } else {
    const PiscoModel model = load_student(name);
    const StudentRuntime rt(model);
    grid = nih_run(student_answerer(rt, d.prompt, config_.max_new_tokens), d.spec, d.vocab, config_.nih_config());
    m.inputs[name] = Manifest::read(manifest_path(name)).config_hash;
  }
  fs::create_directories(report_dir());
  grid.write_csv(report_dir() / ("nih_" + name + ".csv"), m.config_hash);
  m.metrics["mean"] = grid.mean();
  finish(m, since(t0), "nih_" + name);
  return grid;
}

AnalysisResult Pipeline::analyze() {
  const Dataset& d = dataset();
  const std::string name = config_.model;
  if (name == "teacher") fail(ErrorCode::config, "analysis needs a compression model, not the teacher");
  const PiscoModel model = load_student(name);
  const auto t0 = Clock::now();
  Manifest m = start("analyze", "analysis_" + name);
  m.inputs[name] = Manifest::read(manifest_path(name)).config_hash;
  const StudentRuntime rt(model);
  const Tensor& table = model.base.token_embedding().value;
  const Tensor& head = model.base.head().value;
  const double scale = model.base.embedding_scale();

  auto docs = heldout_documents();
  docs.resize(std::min(docs.size(), config_.analysis_docs));
  if (docs.empty()) fail(ErrorCode::config, "analysis.docs must be positive");
  // Function words and punctuation are not content.
  std::vector<TokenId> skip(special::first_word);
  for (TokenId t = 0; t < special::first_word; ++t) skip[static_cast<std::size_t>(t)] = t;
  for (const char* w : {"the", "of", "is", "a", "an", "and", ".", ",", "its", "it", "has", "was"}) {
    if (d.vocab.contains(w)) skip.push_back(d.vocab.id(w));
  }

  const fs::path dir = report_dir() / ("analysis_" + name);
  fs::create_directories(dir);
  AnalysisResult result;
  std::vector<CosineMap> maps;
  std::vector<LabeledVector> points;
  std::vector<std::vector<Scalar>> token_vectors, compressed_vectors;
  std::set<TokenId> seen;
  double coverage = 0;
  for (const auto& doc : docs) {
    const DocumentEmbeddings e = rt.compress(doc.id, doc.tokens);
    maps.push_back(cosine_map(doc.tokens, e, table));
    const LensAttribution lens = lens_topk(e.vectors, head, 10);
    coverage += lens_coverage(lens, doc.tokens, skip);
    if (doc.id < 4) {
      write_cosine_map_csv(dir / ("cosine_doc" + std::to_string(doc.id) + ".csv"), maps.back());
      write_lens_csv(dir / ("lens_doc" + std::to_string(doc.id) + ".csv"), lens, d.vocab);
    }
    for (std::size_t s = 0; s < e.l(); ++s) {
      const auto row = e.vectors.row(s);
      compressed_vectors.emplace_back(row.begin(), row.end());
      points.push_back({PointKind::compressed_embedding, "doc" + std::to_string(doc.id) + "_m" + std::to_string(s),
                        compressed_vectors.back()});
    }
    for (TokenId t : doc.tokens) {
      if (!seen.insert(t).second) continue;
      const auto row = table.row(static_cast<std::size_t>(t));
      std::vector<Scalar> v(row.begin(), row.end());
      for (auto& x : v) x = static_cast<Scalar>(x * scale);
      token_vectors.push_back(v);
      points.push_back({PointKind::doc_token, d.vocab.token(t), std::move(v)});
    }
  }
  const Tensor& memory = model.memory.parameter().value;
  for (std::size_t s = 0; s < memory.rows(); ++s) {
    const auto row = memory.row(s);
    points.push_back({PointKind::memory_token, "mem" + std::to_string(s), {row.begin(), row.end()}});
  }
  result.docs = docs.size();
  result.spatial = spatial_specialization(maps);
  result.lens_coverage = coverage / static_cast<double>(docs.size());
  result.separation = centroid_separation(token_vectors, compressed_vectors);
  write_projection_jsonl(dir / "projection.jsonl", project_2d(points), points);
  {
    const Tensor avg = average_cosine_map(maps, 16);
    std::ofstream out(dir / "cosine_average.csv", std::ios::trunc);
    out << "# config_hash " << m.config_hash << "\n";
    for (std::size_t s = 0; s < avg.rows(); ++s) {
      for (std::size_t b = 0; b < avg.cols(); ++b) out << (b ? "," : "") << avg[s * avg.cols() + b];
      out << '\n';
    }
  }
  m.metrics["spatial_spearman"] = result.spatial.spearman;
  m.metrics["lens_coverage"] = result.lens_coverage;
  m.metrics["centroid_distance"] = result.separation.centroid_distance;
  m.metrics["token_spread"] = result.separation.token_spread;
  m.metrics["docs"] = static_cast<double>(result.docs);
  {
    json j{{"config_hash", m.config_hash},
           {"spatial_spearman", result.spatial.spearman},
           {"mean_peak", result.spatial.mean_peak},
           {"lens_coverage", result.lens_coverage},
           {"centroid_distance", result.separation.centroid_distance},
           {"token_spread", result.separation.token_spread},
           {"outside_token_distribution", result.separation.outside()}};
    std::ofstream out(dir / "summary.json", std::ios::trunc);
    out << j.dump(2) << '\n';
  }
  finish(m, since(t0), "analysis_" + name);
  return result;
}

EfficiencyReport Pipeline::bench() {
  const Dataset& d = dataset();
  const std::string name = config_.model;
  if (name == "teacher") fail(ErrorCode::config, "bench compares the teacher with a compression model; choose one");
  const Transformer teacher = load_teacher();
  const PiscoModel model = load_student(name);
  const auto t0 = Clock::now();
  Manifest m = start("bench", "bench_" + name);
  m.inputs["teacher"] = Manifest::read(manifest_path("teacher")).config_hash;
  m.inputs[name] = Manifest::read(manifest_path(name)).config_hash;
  const InferenceWeights full(teacher);
  const StudentRuntime rt(model);
  const EfficiencyReport r = latency_bench(full, rt.decoder, d.prompt, config_.bench_config());
  fs::create_directories(report_dir());
  r.write_json(report_dir() / ("bench_" + name + ".json"), m.config_hash);
  m.metrics["flops_ratio"] = r.flops_ratio();
  m.metrics["time_ratio"] = r.time_ratio();
  m.metrics["count_mismatch"] = r.count_mismatch();
  finish(m, since(t0), "bench_" + name);
  return r;
}

}  // namespace PISCO_ABI
}  // namespace pisco
