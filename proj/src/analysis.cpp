#include "pisco/analysis.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>

#include "pisco/error.hpp"

namespace pisco {
inline namespace PISCO_ABI {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot open " + path.string() + " for writing");
  return out;
}

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

double distance(std::span<const Scalar> a, std::span<const Scalar> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

std::vector<Scalar> centroid(std::span<const std::vector<Scalar>> vs) {
  std::vector<double> acc(vs.front().size(), 0.0);
  for (const auto& v : vs) {
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
  }
  std::vector<Scalar> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<Scalar>(acc[i] / static_cast<double>(vs.size()));
  return out;
}

}  // namespace

double cosine(std::span<const Scalar> a, std::span<const Scalar> b) {
  if (a.size() != b.size()) {
    fail(ErrorCode::shape_mismatch, "cosine of vectors of width " + std::to_string(a.size()) + " and " +
                                        std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

CosineMap cosine_map(std::span<const TokenId> doc_tokens, const DocumentEmbeddings& embeddings,
                     const Tensor& token_table) {
  const Tensor& e = embeddings.vectors;
  if (e.cols() != token_table.cols()) {
    fail(ErrorCode::shape_mismatch, "embeddings of width " + std::to_string(e.cols()) + " vs token table width " +
                                        std::to_string(token_table.cols()));
  }
  CosineMap map;
  map.doc_id = embeddings.doc_id;
  map.matrix = Tensor::matrix(e.rows(), doc_tokens.size());
  for (std::size_t t = 0; t < doc_tokens.size(); ++t) {
    const TokenId id = doc_tokens[t];
    if (id < 0 || static_cast<std::size_t>(id) >= token_table.rows()) {
      fail(ErrorCode::invalid_argument, "token id " + std::to_string(id) + " outside the token table");
    }
    for (std::size_t s = 0; s < e.rows(); ++s) {
      map.matrix[s * doc_tokens.size() + t] =
          static_cast<Scalar>(cosine(e.row(s), token_table.row(static_cast<std::size_t>(id))));
    }
  }
  return map;
}

Tensor average_cosine_map(std::span<const CosineMap> maps, std::size_t bins) {
  if (maps.empty() || bins == 0) fail(ErrorCode::invalid_argument, "average_cosine_map: no maps or bins");
  const std::size_t l = maps.front().l();
  std::vector<double> sum(l * bins, 0.0);
  std::vector<double> count(l * bins, 0.0);
  for (const auto& m : maps) {
    if (m.l() != l) fail(ErrorCode::shape_mismatch, "average_cosine_map: maps disagree on l");
    const std::size_t T = m.tokens();
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t b = std::min(bins - 1, t * bins / T);
      for (std::size_t s = 0; s < l; ++s) {
        sum[s * bins + b] += m.matrix[s * T + t];
        count[s * bins + b] += 1.0;
      }
    }
  }
  Tensor out = Tensor::matrix(l, bins);
  for (std::size_t i = 0; i < sum.size(); ++i) out[i] = static_cast<Scalar>(count[i] > 0 ? sum[i] / count[i] : 0.0);
  return out;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) fail(ErrorCode::invalid_argument, "spearman: need two equal series of length >= 2");
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / static_cast<double>(ra.size());
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / static_cast<double>(rb.size());
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

SpatialSpecialization spatial_specialization(std::span<const CosineMap> maps) {
  if (maps.empty()) fail(ErrorCode::invalid_argument, "spatial_specialization: no maps");
  const std::size_t l = maps.front().l();
  SpatialSpecialization out;
  out.mean_peak.assign(l, 0.0);
  for (const auto& m : maps) {
    if (m.l() != l) fail(ErrorCode::shape_mismatch, "spatial_specialization: maps disagree on l");
    const std::size_t T = m.tokens();
    if (T == 0) fail(ErrorCode::invalid_argument, "spatial_specialization: empty document");
    for (std::size_t s = 0; s < l; ++s) {
      const Scalar* row = m.matrix.data() + s * T;
      const std::size_t peak = static_cast<std::size_t>(std::max_element(row, row + T) - row);
      out.mean_peak[s] += T > 1 ? static_cast<double>(peak) / static_cast<double>(T - 1) : 0.0;
    }
  }
  for (double& p : out.mean_peak) p /= static_cast<double>(maps.size());
  std::vector<double> index(l);
  std::iota(index.begin(), index.end(), 0.0);
  out.spearman = l >= 2 ? spearman(index, out.mean_peak) : 0.0;
  return out;
}

LensAttribution lens_topk(const Tensor& embeddings, const Tensor& head, std::size_t k) {
  if (embeddings.cols() != head.cols()) {
    fail(ErrorCode::shape_mismatch, "lens: embedding width " + std::to_string(embeddings.cols()) +
                                        " vs head width " + std::to_string(head.cols()));
  }
  const std::size_t V = head.rows();
  if (k == 0 || k > V) fail(ErrorCode::invalid_argument, "lens: k = " + std::to_string(k) + " outside [1, vocab]");
  LensAttribution out;
  std::vector<Scalar> logits(V);
  std::vector<TokenId> ids(V);
  for (std::size_t r = 0; r < embeddings.rows(); ++r) {
    const auto v = embeddings.row(r);
    for (std::size_t t = 0; t < V; ++t) {
      const auto h = head.row(t);
      double s = 0.0;
      for (std::size_t j = 0; j < v.size(); ++j) s += static_cast<double>(v[j]) * h[j];
      logits[t] = static_cast<Scalar>(s);
    }
    std::iota(ids.begin(), ids.end(), TokenId{0});
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](TokenId a, TokenId b) {
      const Scalar la = logits[static_cast<std::size_t>(a)], lb = logits[static_cast<std::size_t>(b)];
      return la != lb ? la > lb : a < b;
    });
    std::vector<LensEntry> top;
    for (std::size_t i = 0; i < k; ++i) top.push_back({ids[i], logits[static_cast<std::size_t>(ids[i])]});
    out.top.push_back(std::move(top));
  }
  return out;
}

double lens_coverage(const LensAttribution& lens, std::span<const TokenId> doc_tokens, std::span<const TokenId> skip) {
  const std::set<TokenId> skipped(skip.begin(), skip.end());
  std::set<TokenId> content;
  for (TokenId t : doc_tokens) {
    if (!skipped.count(t)) content.insert(t);
  }
  if (content.empty()) return 0.0;
  std::set<TokenId> seen;
  for (const auto& row : lens.top) {
    for (const auto& e : row) seen.insert(e.token);
  }
  std::size_t hit = 0;
  for (TokenId t : content) hit += seen.count(t);
  return static_cast<double>(hit) / static_cast<double>(content.size());
}

std::string_view to_string(PointKind kind) {
  switch (kind) {
    case PointKind::doc_token: return "doc-token";
    case PointKind::memory_token: return "memory-token";
    case PointKind::compressed_embedding: return "compressed-embedding";
  }
  return "?";
}

Projection2D project_2d(std::span<const LabeledVector> vectors) {
  if (vectors.size() < 3) fail(ErrorCode::invalid_argument, "project_2d: need at least 3 vectors");
  const std::size_t d = vectors.front().values.size();
  if (d < 2) fail(ErrorCode::invalid_argument, "project_2d: vectors need at least 2 dimensions");
  const auto n = static_cast<Eigen::Index>(vectors.size());
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& v = vectors[static_cast<std::size_t>(i)].values;
    if (v.size() != d) fail(ErrorCode::shape_mismatch, "project_2d: vectors disagree on width");
    for (std::size_t j = 0; j < d; ++j) X(i, static_cast<Eigen::Index>(j)) = v[j];
  }
  X.rowwise() -= X.colwise().mean();
  const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const auto dd = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd W(dd, 2);
  Projection2D out;
  const double total = std::max(eig.eigenvalues().sum(), 0.0);
  for (Eigen::Index c = 0; c < 2; ++c) {
    Eigen::VectorXd w = eig.eigenvectors().col(dd - 1 - c);
    Eigen::Index arg = 0;
    w.cwiseAbs().maxCoeff(&arg);
    if (w(arg) < 0) w = -w;
    W.col(c) = w;
    out.explained_variance[c] = total > 0 ? eig.eigenvalues()(dd - 1 - c) / total : 0.0;
  }
  const Eigen::MatrixXd P = X * W;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& v = vectors[static_cast<std::size_t>(i)];
    out.points.push_back({v.kind, v.label, P(i, 0), P(i, 1)});
  }
  return out;
}

CentroidSeparation centroid_separation(std::span<const std::vector<Scalar>> tokens,
                                       std::span<const std::vector<Scalar>> compressed) {
  if (tokens.size() < 2 || compressed.empty()) {
    fail(ErrorCode::invalid_argument, "centroid_separation: need two token vectors and one compressed vector");
  }
  CentroidSeparation out;
  out.centroid_distance = distance(centroid(tokens), centroid(compressed));
  double s = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t j = i + 1; j < tokens.size(); ++j) {
      s += distance(tokens[i], tokens[j]);
      ++pairs;
    }
  }
  out.token_spread = s / static_cast<double>(pairs);
  return out;
}

void write_cosine_map_csv(const std::filesystem::path& path, const CosineMap& map) {
  auto out = open_out(path);
  out << "embedding";
  for (std::size_t t = 0; t < map.tokens(); ++t) out << ",pos_" << t;
  out << '\n';
  for (std::size_t s = 0; s < map.l(); ++s) {
    out << s;
    for (std::size_t t = 0; t < map.tokens(); ++t) out << ',' << map.matrix[s * map.tokens() + t];
    out << '\n';
  }
}

void write_lens_csv(const std::filesystem::path& path, const LensAttribution& lens, const Vocabulary& vocab) {
  auto out = open_out(path);
  out << "embedding,rank,token_id,token,logit\n";
  for (std::size_t s = 0; s < lens.top.size(); ++s) {
    for (std::size_t r = 0; r < lens.top[s].size(); ++r) {
      const auto& e = lens.top[s][r];
      out << s << ',' << r << ',' << e.token << ',' << vocab.token(e.token) << ',' << e.logit << '\n';
    }
  }
}

void write_projection_jsonl(const std::filesystem::path& path, const Projection2D& projection,
                            std::span<const LabeledVector> vectors) {
  if (projection.points.size() != vectors.size()) {
    fail(ErrorCode::invalid_argument, "projection and vector counts differ");
  }
  auto out = open_out(path);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const auto& p = projection.points[i];
    out << nlohmann::json{{"kind", to_string(p.kind)},
                          {"label", p.label},
                          {"x", p.x},
                          {"y", p.y},
                          {"vector", vectors[i].values}}
               .dump()
        << '\n';
  }
}

}  // namespace PISCO_ABI
}  // namespace pisco
