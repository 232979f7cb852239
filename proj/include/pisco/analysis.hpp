#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pisco/rag_store.hpp"
#include "pisco/tensor.hpp"
#include "pisco/vocab.hpp"

namespace pisco {
inline namespace PISCO_ABI {

/// Cosine of two equal-length vectors; 0 when either is zero.
double cosine(std::span<const Scalar> a, std::span<const Scalar> b);

struct CosineMap {
  std::size_t doc_id = 0;
  Tensor matrix;  // [l, T]

  std::size_t l() const noexcept { return matrix.rows(); }
  std::size_t tokens() const noexcept { return matrix.cols(); }
};

/// Similarity of each compressed embedding with the input embedding of each
/// document token. token_table is the decoder's [vocab, d] table.
CosineMap cosine_map(std::span<const TokenId> doc_tokens, const DocumentEmbeddings& embeddings,
                     const Tensor& token_table);

/// Mean over documents after resampling every row onto bins equal-width
/// relative positions, [l, bins].
Tensor average_cosine_map(std::span<const CosineMap> maps, std::size_t bins);

/// Rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

struct SpatialSpecialization {
  std::vector<double> mean_peak;  // per embedding index, relative position in [0, 1]
  double spearman = 0.0;          // embedding index vs mean_peak
};

/// Where each embedding index peaks along the document, averaged over maps.
SpatialSpecialization spatial_specialization(std::span<const CosineMap> maps);

struct LensEntry {
  TokenId token = 0;
  Scalar logit = 0;
};

struct LensAttribution {
  std::vector<std::vector<LensEntry>> top;  // per embedding, logits descending
};

/// Top-k tokens of head * v for each row v of embeddings; ties go to the
/// lower token id.
LensAttribution lens_topk(const Tensor& embeddings, const Tensor& head, std::size_t k = 10);

/// Share of the distinct document tokens (ignoring ids in skip) found in
/// the union of the top lists.
double lens_coverage(const LensAttribution& lens, std::span<const TokenId> doc_tokens,
                     std::span<const TokenId> skip = {});

enum class PointKind { doc_token, memory_token, compressed_embedding };
std::string_view to_string(PointKind kind);

struct LabeledVector {
  PointKind kind = PointKind::doc_token;
  std::string label;
  std::vector<Scalar> values;
};

struct ProjectedPoint {
  PointKind kind = PointKind::doc_token;
  std::string label;
  double x = 0.0;
  double y = 0.0;
};

struct Projection2D {
  std::vector<ProjectedPoint> points;
  double explained_variance[2] = {0.0, 0.0};
};

/// PCA onto the top two components. Each component's sign makes its
/// largest-magnitude loading positive.
Projection2D project_2d(std::span<const LabeledVector> vectors);

struct CentroidSeparation {
  double centroid_distance = 0.0;  // compressed centroid to token centroid
  double token_spread = 0.0;       // mean pairwise distance among tokens

  bool outside() const noexcept { return centroid_distance > token_spread; }
};

CentroidSeparation centroid_separation(std::span<const std::vector<Scalar>> tokens,
                                       std::span<const std::vector<Scalar>> compressed);

void write_cosine_map_csv(const std::filesystem::path& path, const CosineMap& map);
/// Columns: embedding, rank, token_id, token, logit.
void write_lens_csv(const std::filesystem::path& path, const LensAttribution& lens, const Vocabulary& vocab);
/// One JSON object per point with its coordinates and raw vector.
void write_projection_jsonl(const std::filesystem::path& path, const Projection2D& projection,
                            std::span<const LabeledVector> vectors);

}  // namespace PISCO_ABI
}  // namespace pisco
