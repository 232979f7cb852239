#include <cmath>
#include <random>

#include "doctest.h"
#include "pisco/inference.hpp"
#include "pisco/model.hpp"
#include "pisco/synth.hpp"

using namespace pisco;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 64;
  c.vocab_size = 50;
  c.max_seq_len = 40;
  return c;
}

std::vector<TokenId> random_ids(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> ids(n);
  for (auto& t : ids) t = d(rng);
  return ids;
}

Tensor graph_logits(Transformer& m, std::span<const TokenId> ids, LoraAdapterSet* lora = nullptr) {
  Tape tape(false);
  GraphOptions go;
  go.adapters = lora;
  return m.forward(tape, m.embed_tokens(tape, ids), go).logits->value();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST_CASE("zero-initialised adapters leave logits unchanged") {
  Transformer m(tiny_config(), 1);
  LoraAdapterSet lora(AdapterRole::decoder, m, LoraConfig{}, 2);
  std::mt19937_64 rng(3);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const auto ids = random_ids(rng, 1 + static_cast<std::size_t>(i % 30), 50);
    worst = std::max(worst, max_abs_diff(graph_logits(m, ids), graph_logits(m, ids, &lora)));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("merged inference weights match the graph") {
  Transformer m(tiny_config(), 4);
  LoraAdapterSet lora(AdapterRole::compressor, m, LoraConfig{}, 5);
  std::mt19937_64 rng(6);
  std::normal_distribution<float> n(0.f, 0.05f);
  for (Parameter* p : lora.parameters()) {
    for (auto& v : p->value.values()) v = n(rng);
  }
  const auto ids = random_ids(rng, 17, 50);
  const Tensor ref = graph_logits(m, ids, &lora);
  InferenceWeights w(m, &lora);
  DecodeSession s(w);
  const auto items = token_items(ids);
  s.append(items);
  const auto last = s.logits_last();
  for (std::size_t v = 0; v < 50; ++v) CHECK(last[v] == doctest::Approx(ref[16 * 50 + v]).epsilon(1e-4));
}

TEST_CASE("incremental decoding equals one-shot prefill") {
  Transformer m(tiny_config(), 7);
  InferenceWeights w(m);
  std::mt19937_64 rng(8);
  const auto ids = random_ids(rng, 12, 50);
  const auto items = token_items(ids);
  DecodeSession all(w);
  const Tensor full = all.append(items);
  DecodeSession step(w);
  step.append(std::span<const InputItem>(items.data(), 5));
  for (std::size_t i = 5; i < ids.size(); ++i) {
    const Tensor h = step.append(std::span<const InputItem>(&items[i], 1));
    for (std::size_t j = 0; j < 32; ++j) CHECK(h[j] == doctest::Approx(full[i * 32 + j]).epsilon(1e-4));
  }
}

TEST_CASE("causal: appending tokens does not change earlier logits") {
  Transformer m(tiny_config(), 9);
  std::mt19937_64 rng(10);
  auto ids = random_ids(rng, 8, 50);
  const Tensor a = graph_logits(m, ids);
  ids.push_back(3);
  ids.push_back(17);
  const Tensor b = graph_logits(m, ids);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5));
}

TEST_CASE("embedding items stand in for token rows") {
  Transformer m(tiny_config(), 11);
  InferenceWeights w(m);
  const std::vector<TokenId> ids{4, 9, 13};
  std::vector<InputItem> mixed = token_items(ids);
  const auto row = m.token_embedding().value.row(9);
  std::vector<Scalar> v(row.begin(), row.end());
  for (auto& x : v) x *= m.embedding_scale();
  mixed[1] = InputItem::embedding(v);
  DecodeSession a(w), b(w);
  const Tensor ha = a.append(token_items(ids));
  const Tensor hb = b.append(mixed);
  CHECK(max_abs_diff(ha, hb) < 1e-6);
  std::vector<InputItem> bad{InputItem::embedding(std::vector<Scalar>(5, 0.f))};
  DecodeSession c(w);
  CHECK_THROWS_AS(c.append(bad), Error);
}

TEST_CASE("greedy decoding rejects empty and oversized prompts") {
  Transformer m(tiny_config(), 12);
  InferenceWeights w(m);
  CHECK_THROWS_AS(greedy_generate(w, {}), Error);
  std::vector<TokenId> ids(41, 5);
  CHECK_THROWS_AS(greedy_generate(w, token_items(ids)), Error);
}

TEST_CASE("argmax breaks ties toward the lowest id") {
  const std::vector<Scalar> flat(7, 0.5f);
  CHECK(argmax(flat) == 0);
  const std::vector<Scalar> two{0.f, 2.f, 1.f, 2.f};
  CHECK(argmax(two) == 1);
}

TEST_CASE("invalid configs are rejected") {
  ModelConfig c = tiny_config();
  c.n_heads = 5;
  CHECK_THROWS_AS(Transformer(c, 0), Error);
  c = tiny_config();
  c.d_model = 36;
  c.n_heads = 12;  // head width 3 is odd
  CHECK_THROWS_AS(Transformer(c, 0), Error);
}

TEST_CASE("rotary model has no position table") {
  ModelConfig c = tiny_config();
  Transformer rope(c, 0);
  c.rope = false;
  Transformer learned(c, 0);
  CHECK(learned.parameter_count() == rope.parameter_count() + c.max_seq_len * c.d_model);
}

TEST_CASE("vocabulary round trip over synthetic text") {
  SynthSpec spec;
  spec.entity_count = 20;
  const Vocabulary v = build_vocabulary(spec);
  const auto world = gen_synthetic(spec);
  for (const auto& d : world.documents) {
    const auto ids = v.tokenize(d);
    for (TokenId t : ids) CHECK(t != special::unk);
    CHECK(v.detokenize(ids) == d);
  }
  CHECK(v.tokenize("zebra")[0] == special::unk);
}
