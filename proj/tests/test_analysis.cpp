#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "pisco/analysis.hpp"
#include "pisco/model.hpp"

using namespace pisco;

namespace {

std::vector<Scalar> random_vec(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<float> n;
  std::vector<Scalar> v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

// Textbook formula, valid without ties.
double spearman_no_ties(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  auto rank = [&](const std::vector<double>& v) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = 1;
      for (std::size_t j = 0; j < n; ++j) r[i] += v[j] < v[i];
    }
    return r;
  };
  const auto ra = rank(a), rb = rank(b);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  const double nn = static_cast<double>(n);
  return 1 - 6 * s / (nn * (nn * nn - 1));
}

}  // namespace

TEST_CASE("cosine basics") {
  const std::vector<Scalar> a{1, 2, 3}, b{-2, 1, 0}, z{0, 0, 0};
  CHECK(cosine(a, a) == doctest::Approx(1.0));
  CHECK(cosine(a, b) == doctest::Approx(0.0));
  CHECK(cosine(a, b) == cosine(b, a));
  CHECK(cosine(a, z) == 0.0);
  const std::vector<Scalar> two{1, 2};
  CHECK_THROWS_AS(cosine(a, two), Error);
}

TEST_CASE("cosine map entries are bounded and finite") {
  std::mt19937_64 rng(1);
  Tensor table = Tensor::matrix(20, 6);
  for (auto& x : table.values()) x = random_vec(rng, 1)[0];
  DocumentEmbeddings e;
  e.vectors = Tensor::matrix(3, 6);
  for (auto& x : e.vectors.values()) x = random_vec(rng, 1)[0];
  const std::vector<TokenId> doc{1, 5, 5, 19, 0};
  const CosineMap m = cosine_map(doc, e, table);
  CHECK(m.l() == 3);
  CHECK(m.tokens() == 5);
  for (float v : m.matrix.values()) {
    CHECK(std::isfinite(v));
    CHECK(std::abs(v) <= 1.0f);
  }
  // Row 0 equal to token 5's embedding peaks at its positions.
  std::copy_n(table.data() + 5 * 6, 6, e.vectors.data());
  const CosineMap m2 = cosine_map(doc, e, table);
  CHECK(m2.matrix[1] == doctest::Approx(1.0));
  DocumentEmbeddings bad;
  bad.vectors = Tensor::matrix(2, 4);
  CHECK_THROWS_AS(cosine_map(doc, bad, table), Error);
}

TEST_CASE("spearman matches the rank-difference formula without ties") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(9), b(9);
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng);
    CHECK(spearman(a, b) == doctest::Approx(spearman_no_ties(a, b)).epsilon(1e-12));
  }
  const std::vector<double> up{1, 2, 3, 4}, down{9, 7, 5, 1}, tied{1, 1, 2, 2};
  CHECK(spearman(up, up) == doctest::Approx(1.0));
  CHECK(spearman(up, down) == doctest::Approx(-1.0));
  CHECK(spearman(up, tied) == doctest::Approx(2 / std::sqrt(5.0)));
}

TEST_CASE("spatial specialization detects diagonal maps") {
  std::vector<CosineMap> maps;
  for (std::size_t T : {40u, 64u}) {
    CosineMap m;
    m.matrix = Tensor::matrix(4, T);
    for (std::size_t s = 0; s < 4; ++s) m.matrix[s * T + (s * (T - 1)) / 3] = 1.0f;
    maps.push_back(m);
  }
  const auto s = spatial_specialization(maps);
  CHECK(s.spearman == doctest::Approx(1.0));
  CHECK(s.mean_peak[0] == doctest::Approx(0.0));
  const Tensor avg = average_cosine_map(maps, 8);
  CHECK(avg.rows() == 4);
  CHECK(avg.cols() == 8);
}

TEST_CASE("logit lens through a tied head ranks the token itself first") {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 64;
  c.vocab_size = 40;
  c.max_seq_len = 16;
  Transformer m(c, 3);
  const Tensor& head = m.head().value;
  const LensAttribution lens = lens_topk(head, head, 10);
  REQUIRE(lens.top.size() == 40);
  for (std::size_t t = 0; t < 40; ++t) CHECK(lens.top[t][0].token == static_cast<TokenId>(t));
  for (const auto& row : lens.top) {
    for (std::size_t i = 1; i < row.size(); ++i) CHECK(row[i - 1].logit >= row[i].logit);
  }
}

TEST_CASE("logit lens is deterministic, tie-broken by id and scale invariant") {
  Tensor head = Tensor::matrix(6, 2);
  const float rows[6][2] = {{1, 0}, {0, 1}, {1, 0}, {-1, 0}, {1, 0}, {0.5f, 0.5f}};
  for (std::size_t i = 0; i < 6; ++i) std::copy_n(rows[i], 2, head.data() + i * 2);
  Tensor v = Tensor::matrix(1, 2);
  v[0] = 2;
  const auto a = lens_topk(v, head, 6);
  std::vector<TokenId> order;
  for (const auto& e : a.top[0]) order.push_back(e.token);
  CHECK(order == std::vector<TokenId>{0, 2, 4, 5, 1, 3});
  v[0] = 7.5f;
  const auto b = lens_topk(v, head, 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(b.top[0][i].token == a.top[0][i].token);
  CHECK_THROWS_AS(lens_topk(v, head, 7), Error);
  CHECK_THROWS_AS(lens_topk(v, head, 0), Error);
}

TEST_CASE("full lens ranking is a permutation and coverage counts content tokens") {
  std::mt19937_64 rng(4);
  Tensor head = Tensor::matrix(12, 5);
  for (auto& x : head.values()) x = random_vec(rng, 1)[0];
  Tensor v = Tensor::matrix(2, 5);
  for (auto& x : v.values()) x = random_vec(rng, 1)[0];
  const auto lens = lens_topk(v, head, 12);
  std::vector<TokenId> ids;
  for (const auto& e : lens.top[0]) ids.push_back(e.token);
  std::sort(ids.begin(), ids.end());
  std::vector<TokenId> all(12);
  std::iota(all.begin(), all.end(), 0);
  CHECK(ids == all);
  const std::vector<TokenId> doc{1, 2, 2, 3};
  CHECK(lens_coverage(lens, doc) == 1.0);
  const auto top1 = lens_topk(v, head, 1);
  const std::vector<TokenId> skip{top1.top[0][0].token};
  const std::vector<TokenId> only{top1.top[0][0].token};
  CHECK(lens_coverage(top1, only, skip) == 0.0);
}

TEST_CASE("pca on 2-d data preserves pairwise distances") {
  std::mt19937_64 rng(5);
  std::vector<LabeledVector> vs;
  for (int i = 0; i < 12; ++i) vs.push_back({PointKind::doc_token, "p" + std::to_string(i), random_vec(rng, 2)});
  const auto p = project_2d(vs);
  REQUIRE(p.points.size() == vs.size());
  for (std::size_t i = 0; i < vs.size(); ++i) {
    for (std::size_t j = i + 1; j < vs.size(); ++j) {
      const double dx = vs[i].values[0] - vs[j].values[0], dy = vs[i].values[1] - vs[j].values[1];
      const double px = p.points[i].x - p.points[j].x, py = p.points[i].y - p.points[j].y;
      CHECK(std::hypot(px, py) == doctest::Approx(std::hypot(dx, dy)).epsilon(1e-4));
    }
  }
  CHECK(p.explained_variance[0] + p.explained_variance[1] == doctest::Approx(1.0));
}

TEST_CASE("pca maps duplicates together and is deterministic") {
  std::mt19937_64 rng(6);
  std::vector<LabeledVector> vs;
  for (int i = 0; i < 6; ++i) vs.push_back({PointKind::memory_token, "m", random_vec(rng, 8)});
  vs.push_back(vs[2]);
  const auto a = project_2d(vs);
  const auto b = project_2d(vs);
  CHECK(a.points[6].x == a.points[2].x);
  CHECK(a.points[6].y == a.points[2].y);
  for (std::size_t i = 0; i < vs.size(); ++i) CHECK(a.points[i].x == b.points[i].x);
  vs.resize(2);
  CHECK_THROWS_AS(project_2d(vs), Error);
}

TEST_CASE("centroid separation") {
  const std::vector<std::vector<Scalar>> tokens{{0, 0}, {2, 0}, {0, 2}, {2, 2}};
  const std::vector<std::vector<Scalar>> far{{10, 10}, {12, 10}};
  const auto s = centroid_separation(tokens, far);
  CHECK(s.centroid_distance == doctest::Approx(std::hypot(10.0, 9.0)));
  CHECK(s.token_spread == doctest::Approx((4 * 2 + 2 * std::sqrt(8.0)) / 6));
  CHECK(s.outside());
  const std::vector<std::vector<Scalar>> near{{1, 1}};
  CHECK_FALSE(centroid_separation(tokens, near).outside());
}
