#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "pisco/distill.hpp"
#include "pisco/metrics.hpp"

using namespace pisco;

namespace {

struct Fixture {
  SynthSpec spec;
  Vocabulary vocab;
  SyntheticWorld world;
  std::vector<DocumentChunk> chunks;
  CompiledPrompt prompt;
  ModelConfig config;

  Fixture() {
    spec.entity_count = 12;
    vocab = build_vocabulary(spec);
    world = gen_synthetic(spec);
    chunks = chunk_corpus(world.documents, vocab);
    prompt = CompiledPrompt::compile(PromptTemplate{}, vocab);
    config.n_layers = 1;
    config.d_model = 16;
    config.n_heads = 2;
    config.d_ff = 32;
    config.vocab_size = vocab.size();
    config.max_seq_len = 700;
  }

  std::vector<TrainingExample> examples(std::size_t k = 2) const {
    Bm25Index index(chunks);
    auto ex = retrieve_examples(world.qa, index, vocab, k);
    attach_gold_answers(ex, world.qa, vocab, true);
    return ex;
  }
};

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("pisco_test_" + name);
}

std::vector<float> vals(const Tensor& t) {
  const auto s = t.values();
  return {s.begin(), s.end()};
}

LoraConfig small_lora() {
  LoraConfig c;
  c.rank = 2;
  c.alpha = 4;
  return c;
}

}  // namespace

TEST_CASE("skd loss ignores prompt rows") {
  Tape tape;
  Tensor logits = Tensor::matrix(5, 4);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n;
  for (auto& v : logits.values()) v = n(rng);
  const std::vector<TokenId> answer{1, 3};
  Var x = tape.constant(logits);
  const SkdLoss full = skd_loss(x, answer, 3);
  for (std::size_t i = 0; i < 12; ++i) logits[i] = 100.f * n(rng);
  const SkdLoss changed = skd_loss(tape.constant(logits), answer, 3);
  CHECK(full.sum.value().item() == doctest::Approx(changed.sum.value().item()));
  CHECK(full.tokens == 2);
  CHECK_THROWS_AS(skd_loss(x, answer, 2), Error);
  CHECK_THROWS_AS(skd_loss(tape.constant(Tensor::matrix(3, 4)), std::vector<TokenId>{}, 3), Error);
}

TEST_CASE("skd loss of uniform logits is r ln V, of confident one-hot logits near zero") {
  Tape tape;
  const std::vector<TokenId> answer{0, 5, 2, 7};
  const SkdLoss uniform = skd_loss(tape.constant(Tensor::matrix(4, 9)), answer);
  CHECK(uniform.sum.value().item() == doctest::Approx(4 * std::log(9.0)).epsilon(1e-5));
  CHECK(uniform.mean == doctest::Approx(std::log(9.0)).epsilon(1e-5));
  Tensor hot = Tensor::matrix(4, 9);
  for (std::size_t r = 0; r < 4; ++r) hot[r * 9 + static_cast<std::size_t>(answer[r])] = 60.f;
  CHECK(skd_loss(tape.constant(hot), answer).mean < 1e-6);
}

TEST_CASE("compressed length contract and determinism") {
  Fixture f;
  Transformer base(f.config, 3);
  PiscoModel model(base, 8, small_lora(), 4);
  const StudentRuntime rt(model);
  const auto a = rt.compress(0, f.chunks[0].tokens);
  const auto b = rt.compress(0, f.chunks[0].tokens);
  CHECK(a.l() == 8);
  CHECK(a.vectors.cols() == f.config.d_model);
  CHECK(vals(a.vectors) == vals(b.vectors));
  CHECK(a.compression_rate() == doctest::Approx(static_cast<double>(f.chunks[0].tokens.size()) / 8));

  Tape tape(false);
  const Var g = compress_graph(tape, model.compressor_view(), f.chunks[0].tokens);
  for (std::size_t i = 0; i < g.value().size(); ++i) CHECK(g.value()[i] == doctest::Approx(a.vectors[i]).epsilon(1e-4));

  std::vector<std::size_t> lengths{8, 8, 8};
  const std::vector<TokenId> q{f.vocab.id("what")};
  const std::vector<DocumentEmbeddings> docs{a, a, a};
  CHECK(build_decoder_input(q, docs, f.prompt, 1000).size() == f.prompt.length(1, lengths));
  CHECK(f.prompt.length(1, lengths) == f.prompt.template_tokens() + 1 + 24 + 2);
  CHECK_THROWS_AS(build_decoder_input(q, docs, f.prompt, 30), Error);
}

TEST_CASE("memory token count is bounded") {
  Fixture f;
  Transformer base(f.config, 3);
  CHECK_THROWS_AS(MemoryTokenSet(0, base), Error);
  CHECK_THROWS_AS(MemoryTokenSet(17, base), Error);
  CHECK_NOTHROW(MemoryTokenSet(16, base));
}

TEST_CASE("gradient of the student loss reaches memory and compressor adapters") {
  Fixture f;
  Transformer base(f.config, 5);
  PiscoModel model(base, 4, small_lora(), 6);
  const auto params = model.configure_trainable(TrainableSet::full);
  for (Parameter* p : params) p->zero_grad();
  // Nonzero B so gradients flow into every A.
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n(0.f, 0.05f);
  for (Parameter* p : model.compressor.parameters()) {
    for (auto& v : p->value.values()) v = n(rng);
  }
  for (Parameter* p : model.decoder.parameters()) {
    for (auto& v : p->value.values()) v = n(rng);
  }
  const auto ex = f.examples(2);
  Tape tape;
  const ExampleLoss loss = student_example_loss(tape, model, ex[0], f.chunks, f.prompt, nullptr);
  tape.backward(loss.sum);
  auto norm = [](const Parameter& p) {
    double s = 0;
    for (float g : p.grad.values()) s += double(g) * g;
    return s;
  };
  CHECK(norm(model.memory.parameter()) > 0);
  double c = 0, d = 0;
  for (Parameter* p : model.compressor.parameters()) c += norm(*p);
  for (Parameter* p : model.decoder.parameters()) d += norm(*p);
  CHECK(c > 0);
  CHECK(d > 0);
  for (Parameter* p : model.base.parameters()) CHECK((p->grad.empty() || norm(*p) == 0));
}

TEST_CASE("frozen decoder training leaves decoder adapters bit-identical") {
  Fixture f;
  Transformer base(f.config, 7);
  PiscoModel model(base, 4, small_lora(), 8);
  std::vector<std::vector<float>> before;
  for (Parameter* p : model.decoder.parameters()) before.push_back(vals(p->value));
  std::vector<std::vector<float>> base_before;
  for (Parameter* p : model.base.parameters()) base_before.push_back(vals(p->value));
  const float mem0 = model.memory.parameter().value[0];
  TrainConfig tc;
  tc.batch_size = 4;
  tc.lr = 1e-2;
  tc.max_steps = 3;
  tc.trainable = TrainableSet::frozen_decoder;
  const auto ex = f.examples(1);
  train(model, std::span(ex).first(12), f.chunks, f.prompt, tc);
  std::size_t i = 0;
  for (Parameter* p : model.decoder.parameters()) CHECK(vals(p->value) == before[i++]);
  i = 0;
  for (Parameter* p : model.base.parameters()) CHECK(vals(p->value) == base_before[i++]);
  CHECK(model.memory.parameter().value[0] != mem0);
}

TEST_CASE("training reduces the loss on a small set") {
  Fixture f;
  Transformer teacher(f.config, 9);
  auto ex = f.examples(1);
  ex.resize(16);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.lr = 1e-2;
  tc.epochs = 30;
  tc.eval_fraction = 0.0;
  const auto report = train_teacher(teacher, ex, f.chunks, f.prompt, tc);
  REQUIRE(report.curve.size() >= 2);
  CHECK(report.curve.back().train_loss < 0.5 * report.curve.front().train_loss);
}

TEST_CASE("loss log has one row per step") {
  Fixture f;
  Transformer teacher(f.config, 10);
  auto ex = f.examples(1);
  ex.resize(10);
  TrainConfig tc;
  tc.batch_size = 5;
  tc.epochs = 2;
  tc.eval_fraction = 0.2;
  tc.loss_log = temp_path("loss.csv");
  const auto report = train_teacher(teacher, ex, f.chunks, f.prompt, tc);
  std::ifstream in(tc.loss_log);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,train_loss,eval_loss,lr,grad_norm");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == report.steps);
  CHECK(report.eval_examples == 2);
  std::filesystem::remove(tc.loss_log);
}

TEST_CASE("label cache round trip and soundness") {
  Fixture f;
  auto ex = f.examples(1);
  const auto path = temp_path("labels.tsv");
  write_label_cache(path, ex);
  const auto cache = read_label_cache(path);
  auto copy = ex;
  for (auto& e : copy) e.answer.clear();
  apply_label_cache(copy, cache);
  for (std::size_t i = 0; i < ex.size(); ++i) CHECK(copy[i].answer == ex[i].answer);
  copy.push_back(TrainingExample{999999, {}, {}, {}});
  CHECK_THROWS_AS(apply_label_cache(copy, cache), Error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_label_cache(path), Error);
}

TEST_CASE("teacher labelling does not depend on worker count") {
  Fixture f;
  Transformer teacher(f.config, 11);
  const InferenceWeights w(teacher);
  auto a = f.examples(2);
  a.resize(6);
  auto b = a;
  label_with_teacher(w, a, f.chunks, f.prompt, 1);
  label_with_teacher(w, b, f.chunks, f.prompt, 3);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].answer == b[i].answer);
}

TEST_CASE("teacher drops trailing documents that do not fit") {
  Fixture f;
  ModelConfig c = f.config;
  c.max_seq_len = 200;
  Transformer teacher(c, 12);
  const InferenceWeights w(teacher);
  const auto ex = f.examples(3);
  std::vector<std::vector<TokenId>> docs;
  for (std::size_t id : ex[0].docs) docs.push_back(f.chunks[id].tokens);
  const auto label = teacher_generate(w, ex[0].query, docs, f.prompt, 8);
  CHECK(label.dropped_docs >= 2);
  CHECK(label.tokens.size() <= 8);
}

TEST_CASE("pretraining examples") {
  const std::vector<TokenId> doc{30, 31, 32, 33, 34, 35, 36, 37, 38, 39};
  const auto ae = make_ae_example(doc);
  CHECK(ae.target == doc);
  const auto tc = make_tc_example(doc, 4);
  CHECK(tc.docs[0] == std::vector<TokenId>(doc.begin(), doc.begin() + 4));
  CHECK(tc.target == std::vector<TokenId>(doc.begin() + 4, doc.end()));
  const std::vector<TokenId> kw{33, 34};
  const auto kb = make_kbtc_example(doc, kw);
  CHECK(kb.target == std::vector<TokenId>(doc.begin() + 5, doc.end()));
  CHECK_THROWS_AS(make_kbtc_example(doc, std::vector<TokenId>{99}), Error);
  CHECK_THROWS_AS(make_kbtc_example(doc, std::vector<TokenId>{38, 39}), Error);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto k = sample_keyword(doc, rng);
    CHECK(k.size() >= 3);
    CHECK(k.size() <= 8);
    CHECK_NOTHROW(make_kbtc_example(doc, k));
  }
}

TEST_CASE("mixtures parse presets and explicit weights") {
  CHECK(Mixture::parse("ae").ae == 1.0);
  const Mixture m = Mixture::parse("ae=0.25,tc=0.75");
  CHECK(m.tc == 0.75);
  CHECK_THROWS_AS(Mixture::parse("ae=0.5"), Error);
  CHECK_THROWS_AS(Mixture::parse("xx=1"), Error);
  for (const char* p : {"mix1", "mix2", "mix3", "mix4", "mix5"}) CHECK_NOTHROW(Mixture::parse(p).validate());
}

TEST_CASE("rouge-l over token ids agrees with the LCS oracle on pretraining-sized sequences") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> len(0, 40), tok(25, 40);
  for (int i = 0; i < 50; ++i) {
    std::vector<TokenId> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
    for (auto& t : a) t = tok(rng);
    for (auto& t : b) t = tok(rng);
    CHECK(rouge_l(a, b) == oracle::rouge_l(a, b));
  }
}

TEST_CASE("model checkpoint round trip") {
  Fixture f;
  Transformer base(f.config, 13);
  PiscoModel a(base, 4, small_lora(), 14);
  a.memory.parameter().value[3] = 0.75f;
  const auto path = temp_path("model.ckpt");
  a.save(path);
  PiscoModel b(base, 4, small_lora(), 99);
  b.load(path);
  CHECK(b.memory.parameter().value[3] == 0.75f);
  for (std::size_t i = 0; i < a.compressor.parameters().size(); ++i) {
    CHECK(vals(a.compressor.parameters()[i]->value) == vals(b.compressor.parameters()[i]->value));
  }
  std::filesystem::remove(path);
}
