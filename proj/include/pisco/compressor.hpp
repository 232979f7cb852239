#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pisco/inference.hpp"
#include "pisco/model.hpp"
#include "pisco/rag_store.hpp"
#include "pisco/vocab.hpp"

namespace pisco {
inline namespace PISCO_ABI {

inline constexpr std::size_t kMaxDocumentTokens = 128;

/// l trainable vectors appended to every document on the compressor side.
/// Initialised from the reserved memory-token rows of the token table.
class MemoryTokenSet {
 public:
  MemoryTokenSet(std::size_t l, const Transformer& base);

  std::size_t l() const noexcept { return embeddings_.value.rows(); }
  Parameter& parameter() noexcept { return embeddings_; }
  const Parameter& parameter() const noexcept { return embeddings_; }

 private:
  Parameter embeddings_;  // [l, d_model]
};

/// Prompt layout around the retrieved documents. The user text must contain
/// <DOC> before <QUESTION>; <DOC> expands to the k documents joined by SEP.
struct PromptTemplate {
  bool bos = true;
  std::string system = "you are a helpful assistant .";
  std::string user = "background : <DOC> question : <QUESTION>";
  std::string assistant = "answer :";

  /// No system text, no BOS, no answer cue: [docs, question].
  static PromptTemplate bare();
};

/// A template tokenised into the three fixed spans around documents and
/// question.
struct CompiledPrompt {
  std::vector<TokenId> prefix;  // before the documents
  std::vector<TokenId> middle;  // between documents and question
  std::vector<TokenId> suffix;  // after the question

  static CompiledPrompt compile(const PromptTemplate& t, const Vocabulary& vocab);
  std::size_t template_tokens() const { return prefix.size() + middle.size() + suffix.size(); }
  /// Total positions for k documents of the given lengths.
  std::size_t length(std::size_t query_tokens, std::span<const std::size_t> doc_lengths) const;
};

/// The compressor side of a trained model: base weights, the compressor
/// adapters and the memory tokens.
struct CompressorView {
  Transformer* base;
  LoraAdapterSet* adapters;
  MemoryTokenSet* memory;
};

/// Differentiable compression of one document: returns the final hidden
/// states at the l memory positions, [l, d_model].
Var compress_graph(Tape& tape, const CompressorView& c, std::span<const TokenId> doc_tokens,
                   std::mt19937_64* dropout_rng = nullptr);

/// Inference compression with merged compressor weights.
DocumentEmbeddings compress(const InferenceWeights& compressor, const Tensor& memory, std::size_t doc_id,
                            std::span<const TokenId> doc_tokens, MacCounter* counter = nullptr);

struct CompressCorpusOptions {
  /// Persist the store every this many documents (0 = only at the end).
  std::size_t persist_every = 64;
  std::size_t workers = 1;
  std::function<void(std::size_t done, std::size_t total)> progress;
};

/// Compresses every chunk in order into the store at path. An existing store
/// at path is resumed: documents already present are not recomputed.
EmbeddingStore compress_corpus(std::span<const DocumentChunk> chunks, const InferenceWeights& compressor,
                               const Tensor& memory, const std::filesystem::path& path,
                               const CompressCorpusOptions& options = {});

/// Decoder input: prefix, each document's l vectors separated by SEP,
/// middle, question, suffix.
std::vector<InputItem> build_decoder_input(std::span<const TokenId> query, std::span<const DocumentEmbeddings> docs,
                                           const CompiledPrompt& prompt, std::size_t max_seq_len);

/// Same layout with plain document tokens in place of embeddings.
std::vector<TokenId> build_text_input(std::span<const TokenId> query, std::span<const std::vector<TokenId>> docs,
                                      const CompiledPrompt& prompt);

/// Differentiable decoder input from compressed documents, [T, d_model].
/// Trailing tokens (teacher-forced answer) follow the suffix.
Var decoder_input_graph(Tape& tape, Transformer& base, std::span<const TokenId> query, std::span<const Var> docs,
                        const CompiledPrompt& prompt, std::span<const TokenId> trailing = {});

}  // namespace PISCO_ABI
}  // namespace pisco
