#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "pisco/metrics.hpp"

using namespace pisco;

using oracle::random_cases;

TEST_CASE("normalize examples") {
  CHECK(normalize("An Apple a Day.") == "apple day");
  CHECK(normalize("  THE   answer!! ") == "answer");
  CHECK(normalize("") == "");
  CHECK(normalize("¿Qué?  «ÉTÉ»") == "qué été");
  CHECK(normalize("don't") == "dont");
  CHECK(normalize("price: 5€") == "price 5");
}

TEST_CASE("normalize is idempotent") {
  for (const auto& c : random_cases(3, 200)) {
    const std::string once = normalize(oracle::text(c.prediction));
    CHECK(normalize(once) == once);
  }
}

TEST_CASE("match accuracy examples") {
  const std::vector<std::string> paris{"Paris"};
  CHECK(match_accuracy("It is in  PARIS.", paris) == 1);
  const std::vector<std::string> answer{"42"};
  CHECK(match_accuracy("forty-two", answer) == 0);
  const std::vector<std::string> two{"rome", "paris"};
  CHECK(match_accuracy("paris", two) == 1);
  CHECK_THROWS(match_accuracy("x", std::span<const std::string>{}));
}

TEST_CASE("f1 and recall examples") {
  const std::vector<std::string> same{"blue sky"};
  CHECK(token_f1("blue sky", same) == 1.0);
  CHECK(token_recall("blue sky", same) == 1.0);
  CHECK(recall_3gram("blue sky", same) == 1.0);
  CHECK(rouge_l("blue sky", "blue sky") == 1.0);
  const std::vector<std::string> other{"red sea"};
  CHECK(token_f1("blue sky", other) == 0.0);
  const std::vector<std::string> half{"blue sea"};
  CHECK(token_f1("blue sky", half) == doctest::Approx(0.5));
  const std::vector<std::string> empty{""};
  CHECK(token_f1("blue", empty) == 0.0);
  CHECK(recall_3gram("", other) == 0.0);
}

TEST_CASE("recall 3gram counts distinct label trigrams") {
  const std::vector<std::string> label{"abcde"};
  CHECK(recall_3gram("xxabcxx", label) == doctest::Approx(1.0 / 3.0));
  const std::vector<std::string> short_label{"ab"};
  CHECK(recall_3gram("xxabxx", short_label) == 1.0);
  CHECK(recall_3gram("xxaxbx", short_label) == 0.0);
}

TEST_CASE("metrics agree with brute-force oracles on random cases") {
  for (const auto& c : random_cases(11, 200)) {
    const std::string pred = oracle::text(c.prediction);
    INFO("prediction [" << pred << "]");
    CHECK(normalize(pred) == oracle::normalize(c.prediction));
    for (std::size_t i = 0; i < c.labels.size(); ++i) {
      CHECK(normalize(c.label_text[i]) == oracle::normalize(c.labels[i]));
    }
    CHECK(match_accuracy(pred, c.label_text) == oracle::match(c.prediction, c.labels));
    CHECK(token_f1(pred, c.label_text) == oracle::f1(c.prediction, c.labels));
    CHECK(token_recall(pred, c.label_text) == oracle::recall(c.prediction, c.labels));
    CHECK(recall_3gram(pred, c.label_text) == oracle::recall_3gram(c.prediction, c.labels));
  }
}

TEST_CASE("rouge-l agrees with the LCS oracle") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> len(0, 14), tok(0, 5);
  for (int i = 0; i < 200; ++i) {
    std::vector<TokenId> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
    for (auto& t : a) t = tok(rng);
    for (auto& t : b) t = tok(rng);
    CHECK(rouge_l(a, b) == oracle::rouge_l(a, b));
  }
}

TEST_CASE("metric report aggregates equal recomputation") {
  MetricReport report;
  report.add(score_prediction(0, "paris", {"Paris"}));
  report.add(score_prediction(1, "rome", {"Paris"}));
  report.add(score_prediction(2, "in paris france", {"paris", "lyon"}));
  const MetricSummary s = report.summary();
  CHECK(s.count == 3);
  double m = 0, f = 0;
  for (const auto& r : report.records) {
    m += r.match;
    f += r.f1;
  }
  CHECK(s.match == doctest::Approx(m / 3));
  CHECK(s.f1 == doctest::Approx(f / 3));
}
