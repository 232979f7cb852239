#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "pisco/rag_store.hpp"
#include "pisco/synth.hpp"

using namespace pisco;

namespace {

// Direct evaluation of the BM25 formula from raw term counts.
double bm25_oracle(const std::vector<std::vector<TokenId>>& docs, std::span<const TokenId> query, std::size_t d,
                   double k1 = 1.2, double b = 0.75) {
  double avg = 0;
  for (const auto& doc : docs) avg += static_cast<double>(doc.size());
  avg /= static_cast<double>(docs.size());
  const double N = static_cast<double>(docs.size());
  double score = 0;
  for (TokenId q : query) {
    double df = 0;
    for (const auto& doc : docs) df += std::count(doc.begin(), doc.end(), q) > 0;
    const double tf = static_cast<double>(std::count(docs[d].begin(), docs[d].end(), q));
    if (tf == 0) continue;
    const double idf = std::log(1.0 + (N - df + 0.5) / (df + 0.5));
    const double len = static_cast<double>(docs[d].size());
    score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avg));
  }
  return score;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("pisco_test_" + name);
}

}  // namespace

TEST_CASE("chunking splits long documents into 128-token pieces") {
  Vocabulary v;
  v.add("w");
  std::string doc;
  for (int i = 0; i < 300; ++i) doc += i ? " w" : "w";
  const std::vector<std::string> docs{doc, "w w"};
  const auto chunks = chunk_corpus(docs, v);
  REQUIRE(chunks.size() == 4);
  CHECK(chunks[0].tokens.size() == 128);
  CHECK(chunks[1].tokens.size() == 128);
  CHECK(chunks[2].tokens.size() == 44);
  CHECK(chunks[3].tokens.size() == 2);
  for (std::size_t i = 0; i < chunks.size(); ++i) CHECK(chunks[i].id == i);
}

TEST_CASE("bm25 scores match a brute-force oracle") {
  std::mt19937_64 rng(1);
  Vocabulary v;
  for (int i = 0; i < 30; ++i) v.add("t" + std::to_string(i));
  std::uniform_int_distribution<int> len(5, 60), word(0, 29);
  std::vector<std::string> texts;
  for (int d = 0; d < 50; ++d) {
    std::string s;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) s += (i ? " t" : "t") + std::to_string(word(rng) % (d % 2 ? 30 : 12));
    texts.push_back(s);
  }
  const auto chunks = chunk_corpus(texts, v);
  std::vector<std::vector<TokenId>> raw;
  for (const auto& c : chunks) raw.push_back(c.tokens);
  Bm25Index index(chunks);
  for (int q = 0; q < 20; ++q) {
    std::vector<TokenId> query;
    for (int i = 0; i < 3; ++i) query.push_back(v.id("t" + std::to_string(word(rng))));
    std::vector<std::pair<double, std::size_t>> expected;
    for (std::size_t d = 0; d < raw.size(); ++d) {
      const double s = bm25_oracle(raw, query, d);
      CHECK(index.score(query, d) == doctest::Approx(s).epsilon(1e-9));
      expected.push_back({-s, d});
    }
    std::sort(expected.begin(), expected.end());
    const auto top = index.retrieve(query, 5);
    REQUIRE(top.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(top[i].score == doctest::Approx(-expected[i].first).epsilon(1e-9));
      if (i + 1 < expected.size() && expected[i].first != expected[i + 1].first) {
        CHECK(top[i].doc_id == expected[i].second);
      }
    }
  }
  CHECK_THROWS_AS(index.retrieve(std::vector<TokenId>{v.id("t1")}, 0), Error);
}

TEST_CASE("postings are sorted by document id") {
  SynthSpec spec;
  spec.entity_count = 40;
  const auto world = gen_synthetic(spec);
  const auto v = build_vocabulary(spec);
  const auto chunks = chunk_corpus(world.documents, v);
  Bm25Index index(chunks);
  for (TokenId t = special::first_word; t < static_cast<TokenId>(v.size()); ++t) {
    const auto& p = index.postings(t);
    for (std::size_t i = 1; i < p.size(); ++i) CHECK(p[i - 1].doc_id < p[i].doc_id);
  }
}

TEST_CASE("synthetic world is deterministic and retrievable") {
  SynthSpec spec;
  spec.entity_count = 60;
  spec.seed = 4;
  const auto a = gen_synthetic(spec);
  const auto b = gen_synthetic(spec);
  CHECK(a.documents == b.documents);
  REQUIRE(a.qa.size() == b.qa.size());
  const auto v = build_vocabulary(spec);
  const auto chunks = chunk_corpus(a.documents, v);
  CHECK(chunks.size() == a.documents.size());
  for (const auto& c : chunks) CHECK(c.tokens.size() <= spec.doc_max_tokens);
  Bm25Index index(chunks);
  std::size_t top1 = 0, tests = 0;
  for (const auto& q : a.qa) {
    CHECK(a.qa[0].answers.size() >= 1);
    tests += q.test;
    const auto hit = index.retrieve(v.tokenize(q.question), 5);
    top1 += hit[0].doc_id == q.gold_docs[0];
    bool seen = false;
    for (const auto& h : hit) seen = seen || h.doc_id == q.gold_docs[0];
    CHECK(seen);
  }
  CHECK(top1 == a.qa.size());
  CHECK(tests > 0);
  CHECK(tests < a.qa.size());
}

TEST_CASE("documents state the facts their questions ask about") {
  SynthSpec spec;
  spec.entity_count = 30;
  const auto w = gen_synthetic(spec);
  for (const auto& q : w.qa) {
    const std::string& doc = w.documents[q.gold_docs[0]];
    CHECK(doc.find(q.answers[0]) != std::string::npos);
  }
}

TEST_CASE("haystack places the needle at the requested depth") {
  SynthSpec spec;
  const auto v = build_vocabulary(spec);
  for (double depth : {0.0, 0.5, 1.0}) {
    const auto h = make_haystack(spec, 3, depth, 17);
    REQUIRE(h.documents.size() == 3);
    std::size_t total = 0, before = 0;
    bool found = false;
    const std::string needle = h.qa.long_answer;
    for (std::size_t i = 0; i < h.documents.size(); ++i) {
      const auto& d = h.documents[i];
      CHECK(v.tokenize(d).size() <= spec.doc_max_tokens);
      const auto pos = d.find(needle);
      if (pos != std::string::npos) {
        found = true;
        CHECK(i == h.needle_doc);
        before = total + v.tokenize(d.substr(0, pos)).size();
      }
      total += v.tokenize(d).size();
    }
    REQUIRE(found);
    CHECK(std::abs(static_cast<double>(before) / static_cast<double>(total) - depth) < 0.15);
  }
  CHECK(make_haystack(spec, 2, 0.3, 5).documents == make_haystack(spec, 2, 0.3, 5).documents);
}

TEST_CASE("embedding store round trip and exact size") {
  EmbeddingStore store(4, 6);
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n;
  for (std::size_t id : {3u, 0u, 9u}) {
    DocumentEmbeddings e;
    e.doc_id = id;
    e.source_token_count = 64 + id;
    e.vectors = Tensor::matrix(4, 6);
    for (auto& x : e.vectors.values()) x = n(rng);
    store.add(std::move(e));
  }
  const auto path = temp_path("store.bin");
  store.persist(path);
  CHECK(std::filesystem::file_size(path) == EmbeddingStore::file_size(4, 6, 3));
  const auto back = EmbeddingStore::load(path);
  CHECK(back == store);
  CHECK(back.get(9).compression_rate() == doctest::Approx(73.0 / 4.0));
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 1);
  CHECK_THROWS_AS(EmbeddingStore::load(path), Error);
  std::filesystem::remove(path);
}

TEST_CASE("corpus and qa jsonl round trip") {
  SynthSpec spec;
  spec.entity_count = 10;
  const auto w = gen_synthetic(spec);
  const auto v = build_vocabulary(spec);
  const auto chunks = chunk_corpus(w.documents, v);
  const auto cpath = temp_path("corpus.jsonl");
  const auto qpath = temp_path("qa.jsonl");
  write_corpus_jsonl(cpath, chunks);
  write_qa_jsonl(qpath, w.qa);
  const auto back = read_corpus_jsonl(cpath, v);
  REQUIRE(back.size() == chunks.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].id == chunks[i].id);
    CHECK(back[i].tokens == chunks[i].tokens);
  }
  const auto qa = read_qa_jsonl(qpath);
  REQUIRE(qa.size() == w.qa.size());
  for (std::size_t i = 0; i < qa.size(); ++i) {
    CHECK(qa[i].question == w.qa[i].question);
    CHECK(qa[i].answers == w.qa[i].answers);
    CHECK(qa[i].test == w.qa[i].test);
  }
  std::filesystem::remove(cpath);
  std::filesystem::remove(qpath);
}
