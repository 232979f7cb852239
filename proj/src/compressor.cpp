#include "pisco/compressor.hpp"

#include <algorithm>
#include <thread>

#include "pisco/error.hpp"

namespace pisco {
inline namespace PISCO_ABI {

MemoryTokenSet::MemoryTokenSet(std::size_t l, const Transformer& base) {
  if (l == 0) fail(ErrorCode::invalid_argument, "memory token count l must be positive");
  if (l > special::max_memory_tokens) {
    fail(ErrorCode::invalid_argument, "l = " + std::to_string(l) + " exceeds the " +
                                          std::to_string(special::max_memory_tokens) + " reserved memory ids");
  }
  const Tensor& table = base.token_embedding().value;
  const std::size_t d = table.cols();
  Tensor init = Tensor::matrix(l, d);
  for (std::size_t s = 0; s < l; ++s) {
    const auto row = table.row(static_cast<std::size_t>(Vocabulary::memory_token(s)));
    std::transform(row.begin(), row.end(), init.data() + s * d,
                   [&](Scalar v) { return v * base.embedding_scale(); });
  }
  embeddings_ = Parameter("memory", std::move(init));
}

PromptTemplate PromptTemplate::bare() {
  PromptTemplate t;
  t.bos = false;
  t.system.clear();
  t.user = "<DOC> <QUESTION>";
  t.assistant.clear();
  return t;
}

CompiledPrompt CompiledPrompt::compile(const PromptTemplate& t, const Vocabulary& vocab) {
  const auto doc = t.user.find("<DOC>");
  const auto question = t.user.find("<QUESTION>");
  if (doc == std::string::npos || question == std::string::npos) {
    fail(ErrorCode::config, "prompt template: user text needs <DOC> and <QUESTION>");
  }
  if (t.user.find("<DOC>", doc + 1) != std::string::npos ||
      t.user.find("<QUESTION>", question + 1) != std::string::npos) {
    fail(ErrorCode::config, "prompt template: each placeholder must appear once");
  }
  if (question < doc) fail(ErrorCode::config, "prompt template: <DOC> must precede <QUESTION>");
  auto append = [&](std::vector<TokenId>& out, std::string_view text) {
    for (TokenId id : vocab.tokenize(text)) {
      if (id == special::unk) fail(ErrorCode::config, "prompt template: word outside vocabulary in \"" + std::string(text) + "\"");
      out.push_back(id);
    }
  };
  CompiledPrompt p;
  if (t.bos) p.prefix.push_back(special::bos);
  append(p.prefix, t.system);
  append(p.prefix, std::string_view(t.user).substr(0, doc));
  append(p.middle, std::string_view(t.user).substr(doc + 5, question - doc - 5));
  append(p.suffix, std::string_view(t.user).substr(question + 10));
  append(p.suffix, t.assistant);
  return p;
}

std::size_t CompiledPrompt::length(std::size_t query_tokens, std::span<const std::size_t> doc_lengths) const {
  std::size_t n = template_tokens() + query_tokens;
  for (std::size_t len : doc_lengths) n += len;
  if (!doc_lengths.empty()) n += doc_lengths.size() - 1;
  return n;
}

// ---------------------------------------------------------------------------

namespace {

void check_document(std::span<const TokenId> doc_tokens) {
  if (doc_tokens.empty()) fail(ErrorCode::invalid_argument, "compress: empty document");
  if (doc_tokens.size() > kMaxDocumentTokens) {
    fail(ErrorCode::invalid_argument, "compress: document of " + std::to_string(doc_tokens.size()) +
                                          " tokens exceeds " + std::to_string(kMaxDocumentTokens));
  }
}

}  // namespace

Var compress_graph(Tape& tape, const CompressorView& c, std::span<const TokenId> doc_tokens,
                   std::mt19937_64* dropout_rng) {
  check_document(doc_tokens);
  std::vector<TokenId> ids;
  ids.reserve(doc_tokens.size() + 1);
  ids.push_back(special::bos);
  ids.insert(ids.end(), doc_tokens.begin(), doc_tokens.end());
  Var mem = tape.param(c.memory->parameter());
  Var inputs = concat_rows({c.base->embed_tokens(tape, ids), mem});
  GraphOptions opts;
  opts.adapters = c.adapters;
  opts.compute_logits = false;
  opts.dropout_rng = dropout_rng;
  GraphOutput out = c.base->forward(tape, inputs, opts);
  const std::size_t T = inputs.rows();
  return slice_rows(out.hidden, T - c.memory->l(), T);
}

DocumentEmbeddings compress(const InferenceWeights& compressor, const Tensor& memory, std::size_t doc_id,
                            std::span<const TokenId> doc_tokens, MacCounter* counter) {
  check_document(doc_tokens);
  const std::size_t l = memory.rows();
  const std::size_t d = memory.cols();
  if (l == 0) fail(ErrorCode::invalid_argument, "compress: l must be positive");
  std::vector<InputItem> items;
  items.reserve(doc_tokens.size() + 1 + l);
  items.push_back(InputItem::token(special::bos));
  for (TokenId t : doc_tokens) items.push_back(InputItem::token(t));
  for (std::size_t s = 0; s < l; ++s) {
    items.push_back(InputItem::embedding(std::vector<Scalar>(memory.data() + s * d, memory.data() + (s + 1) * d)));
  }
  DecodeSession session(compressor, counter);
  const Tensor hidden = session.append(items);
  DocumentEmbeddings out;
  out.doc_id = doc_id;
  out.source_token_count = doc_tokens.size();
  out.vectors = Tensor::matrix(l, d);
  const std::size_t first = items.size() - l;
  std::copy_n(hidden.data() + first * d, l * d, out.vectors.data());
  return out;
}

EmbeddingStore compress_corpus(std::span<const DocumentChunk> chunks, const InferenceWeights& compressor,
                               const Tensor& memory, const std::filesystem::path& path,
                               const CompressCorpusOptions& options) {
  const std::size_t l = memory.rows();
  const std::size_t d = memory.cols();
  EmbeddingStore store(l, d);
  if (!path.empty() && std::filesystem::exists(path)) {
    store = EmbeddingStore::load(path);
    if (store.l() != l || store.d_model() != d) {
      fail(ErrorCode::format, path.string() + ": existing store has l=" + std::to_string(store.l()) +
                                  ", d=" + std::to_string(store.d_model()) + "; cannot resume");
    }
  }
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    if (!store.contains(chunks[i].id)) todo.push_back(i);
  }
  const std::size_t workers = std::max<std::size_t>(1, options.workers);
  const std::size_t block = options.persist_every == 0 ? std::max<std::size_t>(todo.size(), 1) : options.persist_every;
  for (std::size_t begin = 0; begin < todo.size(); begin += block) {
    const std::size_t end = std::min(todo.size(), begin + block);
    std::vector<DocumentEmbeddings> done(end - begin);
    auto run = [&](std::size_t w) {
      for (std::size_t i = begin + w; i < end; i += workers) {
        const DocumentChunk& c = chunks[todo[i]];
        done[i - begin] = compress(compressor, memory, c.id, c.tokens);
      }
    };
    if (workers == 1) {
      run(0);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    }
    for (auto& e : done) store.add(std::move(e));
    if (!path.empty()) {
      try {
        store.persist(path);
      } catch (const Error& e) {
        fail(e.code(), "while persisting after doc " + std::to_string(chunks[todo[end - 1]].id) + ": " + e.what());
      }
    }
    if (options.progress) options.progress(store.size(), chunks.size());
  }
  if (!path.empty() && todo.empty() && !std::filesystem::exists(path)) store.persist(path);
  return store;
}

// ---------------------------------------------------------------------------

std::vector<InputItem> build_decoder_input(std::span<const TokenId> query, std::span<const DocumentEmbeddings> docs,
                                           const CompiledPrompt& prompt, std::size_t max_seq_len) {
  std::vector<std::size_t> lengths;
  for (const auto& d : docs) lengths.push_back(d.l());
  const std::size_t total = prompt.length(query.size(), lengths);
  if (total > max_seq_len) {
    fail(ErrorCode::overflow, "decoder input of " + std::to_string(total) + " positions exceeds max_seq_len " +
                                  std::to_string(max_seq_len));
  }
  std::vector<InputItem> items;
  items.reserve(total);
  for (TokenId t : prompt.prefix) items.push_back(InputItem::token(t));
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i > 0) items.push_back(InputItem::token(special::sep));
    const Tensor& v = docs[i].vectors;
    for (std::size_t s = 0; s < v.rows(); ++s) {
      items.push_back(InputItem::embedding(std::vector<Scalar>(v.data() + s * v.cols(), v.data() + (s + 1) * v.cols())));
    }
  }
  for (TokenId t : prompt.middle) items.push_back(InputItem::token(t));
  for (TokenId t : query) items.push_back(InputItem::token(t));
  for (TokenId t : prompt.suffix) items.push_back(InputItem::token(t));
  return items;
}

std::vector<TokenId> build_text_input(std::span<const TokenId> query, std::span<const std::vector<TokenId>> docs,
                                      const CompiledPrompt& prompt) {
  std::vector<TokenId> ids(prompt.prefix);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i > 0) ids.push_back(special::sep);
    ids.insert(ids.end(), docs[i].begin(), docs[i].end());
  }
  ids.insert(ids.end(), prompt.middle.begin(), prompt.middle.end());
  ids.insert(ids.end(), query.begin(), query.end());
  ids.insert(ids.end(), prompt.suffix.begin(), prompt.suffix.end());
  return ids;
}

Var decoder_input_graph(Tape& tape, Transformer& base, std::span<const TokenId> query, std::span<const Var> docs,
                        const CompiledPrompt& prompt, std::span<const TokenId> trailing) {
  std::vector<Var> parts;
  std::vector<TokenId> pending(prompt.prefix);
  auto flush = [&] {
    if (!pending.empty()) parts.push_back(base.embed_tokens(tape, pending));
    pending.clear();
  };
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i > 0) pending.push_back(special::sep);
    flush();
    parts.push_back(docs[i]);
  }
  pending.insert(pending.end(), prompt.middle.begin(), prompt.middle.end());
  pending.insert(pending.end(), query.begin(), query.end());
  pending.insert(pending.end(), prompt.suffix.begin(), prompt.suffix.end());
  pending.insert(pending.end(), trailing.begin(), trailing.end());
  flush();
  if (parts.empty()) fail(ErrorCode::invalid_argument, "decoder input is empty");
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

}  // namespace PISCO_ABI
}  // namespace pisco
