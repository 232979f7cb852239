#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pisco/synth.hpp"
#include "pisco/tensor.hpp"
#include "pisco/vocab.hpp"

namespace pisco {
inline namespace PISCO_ABI {

inline constexpr std::size_t kChunkTokens = 128;

struct DocumentChunk {
  std::size_t id = 0;
  std::vector<TokenId> tokens;
  std::string text;
};

/// Splits each document into consecutive chunks of at most chunk_tokens
/// tokens. Chunk ids are dense and follow document order.
std::vector<DocumentChunk> chunk_corpus(std::span<const std::string> documents, const Vocabulary& vocab,
                                        std::size_t chunk_tokens = kChunkTokens);

struct ScoredDoc {
  std::size_t doc_id = 0;
  double score = 0.0;
};

/// Okapi BM25 over token ids.
class Bm25Index {
 public:
  struct Posting {
    std::size_t doc_id;
    std::uint32_t tf;
  };

  explicit Bm25Index(std::span<const DocumentChunk> chunks, double k1 = 1.2, double b = 0.75);

  /// Top-k documents by score, ties broken by ascending doc_id.
  std::vector<ScoredDoc> retrieve(std::span<const TokenId> query, std::size_t k = 5) const;
  /// Score of one document; zero when no query term occurs in it.
  double score(std::span<const TokenId> query, std::size_t doc_id) const;

  std::size_t size() const noexcept { return lengths_.size(); }
  double idf(TokenId term) const;
  const std::vector<Posting>& postings(TokenId term) const;

 private:
  double k1_, b_;
  double avg_length_ = 0.0;
  std::vector<std::size_t> lengths_;
  std::unordered_map<TokenId, std::vector<Posting>> index_;
};

/// The l compressed vectors of one document.
struct DocumentEmbeddings {
  std::size_t doc_id = 0;
  Tensor vectors;  // [l, d_model]
  std::size_t source_token_count = 0;

  std::size_t l() const { return vectors.rows(); }
  double compression_rate() const { return static_cast<double>(source_token_count) / static_cast<double>(l()); }
};

// Layout (little-endian): "PSEM", u32 version, u64 l, u64 d_model, u64 count,
// then count x (u64 doc_id, u64 byte offset, u64 source tokens), then the
// f32 records. Offsets are measured from the start of the file.
inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::size_t kStoreHeaderBytes = 32;

class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  EmbeddingStore(std::size_t l, std::size_t d_model) : l_(l), d_(d_model) {}

  std::size_t l() const noexcept { return l_; }
  std::size_t d_model() const noexcept { return d_; }
  std::size_t size() const noexcept { return docs_.size(); }
  bool empty() const noexcept { return docs_.empty(); }
  const std::vector<DocumentEmbeddings>& documents() const noexcept { return docs_; }

  void add(DocumentEmbeddings doc);
  bool contains(std::size_t doc_id) const { return by_id_.count(doc_id) != 0; }
  const DocumentEmbeddings& get(std::size_t doc_id) const;

  /// Atomic write through a temporary file.
  void persist(const std::filesystem::path& path) const;
  static EmbeddingStore load(const std::filesystem::path& path);
  static std::size_t file_size(std::size_t l, std::size_t d_model, std::size_t count);

  friend bool operator==(const EmbeddingStore& a, const EmbeddingStore& b);

 private:
  std::size_t l_ = 0, d_ = 0;
  std::vector<DocumentEmbeddings> docs_;
  std::unordered_map<std::size_t, std::size_t> by_id_;
};

// JSON-lines corpus: {"id", "text"} per chunk. QA: {"id", "question",
// "answers", "long_answer", "gold_chunks", "split", "hops"}.
void write_corpus_jsonl(const std::filesystem::path& path, std::span<const DocumentChunk> chunks);
std::vector<DocumentChunk> read_corpus_jsonl(const std::filesystem::path& path, const Vocabulary& vocab);
void write_qa_jsonl(const std::filesystem::path& path, std::span<const QAPair> qa);
std::vector<QAPair> read_qa_jsonl(const std::filesystem::path& path);

}  // namespace PISCO_ABI
}  // namespace pisco
