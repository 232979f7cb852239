#include "pisco/rag_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "pisco/error.hpp"

namespace pisco {
inline namespace PISCO_ABI {

std::vector<DocumentChunk> chunk_corpus(std::span<const std::string> documents, const Vocabulary& vocab,
                                        std::size_t chunk_tokens) {
  if (chunk_tokens == 0) fail(ErrorCode::invalid_argument, "chunk size must be positive");
  std::vector<DocumentChunk> out;
  for (const auto& doc : documents) {
    const auto words = split_whitespace(doc);
    for (std::size_t begin = 0; begin < words.size(); begin += chunk_tokens) {
      const std::size_t end = std::min(words.size(), begin + chunk_tokens);
      DocumentChunk c;
      c.id = out.size();
      for (std::size_t i = begin; i < end; ++i) {
        c.tokens.push_back(vocab.id(words[i]));
        if (i > begin) c.text += ' ';
        c.text += words[i];
      }
      out.push_back(std::move(c));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

Bm25Index::Bm25Index(std::span<const DocumentChunk> chunks, double k1, double b) : k1_(k1), b_(b) {
  std::size_t total = 0;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    if (chunks[i].id != i) fail(ErrorCode::invalid_argument, "chunk ids must be dense from 0");
    lengths_.push_back(chunks[i].tokens.size());
    total += chunks[i].tokens.size();
    std::map<TokenId, std::uint32_t> tf;
    for (TokenId t : chunks[i].tokens) ++tf[t];
    for (auto [term, n] : tf) index_[term].push_back(Posting{i, n});
  }
  if (!lengths_.empty()) avg_length_ = static_cast<double>(total) / static_cast<double>(lengths_.size());
}

const std::vector<Bm25Index::Posting>& Bm25Index::postings(TokenId term) const {
  static const std::vector<Posting> none;
  auto it = index_.find(term);
  return it == index_.end() ? none : it->second;
}

double Bm25Index::idf(TokenId term) const {
  const auto df = static_cast<double>(postings(term).size());
  const auto n = static_cast<double>(lengths_.size());
  return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
}

double Bm25Index::score(std::span<const TokenId> query, std::size_t doc_id) const {
  if (doc_id >= lengths_.size()) fail(ErrorCode::invalid_argument, "doc_id out of range");
  const double norm = k1_ * (1.0 - b_ + b_ * static_cast<double>(lengths_[doc_id]) / avg_length_);
  double s = 0.0;
  for (TokenId t : query) {
    const auto& p = postings(t);
    auto it = std::lower_bound(p.begin(), p.end(), doc_id,
                               [](const Posting& x, std::size_t id) { return x.doc_id < id; });
    if (it == p.end() || it->doc_id != doc_id) continue;
    const double tf = it->tf;
    s += idf(t) * tf * (k1_ + 1.0) / (tf + norm);
  }
  return s;
}

std::vector<ScoredDoc> Bm25Index::retrieve(std::span<const TokenId> query, std::size_t k) const {
  if (lengths_.empty()) fail(ErrorCode::invalid_argument, "retrieve: empty index");
  if (k == 0) fail(ErrorCode::invalid_argument, "retrieve: k must be at least 1");
  std::vector<double> scores(lengths_.size(), 0.0);
  for (TokenId t : query) {
    const double w = idf(t);
    for (const Posting& p : postings(t)) {
      const double norm = k1_ * (1.0 - b_ + b_ * static_cast<double>(lengths_[p.doc_id]) / avg_length_);
      scores[p.doc_id] += w * p.tf * (k1_ + 1.0) / (p.tf + norm);
    }
  }
  std::vector<ScoredDoc> all;
  all.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) all.push_back({i, scores[i]});
  const std::size_t keep = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                    [](const ScoredDoc& a, const ScoredDoc& b) {
                      return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
                    });
  all.resize(keep);
  return all;
}

// ---------------------------------------------------------------------------

void EmbeddingStore::add(DocumentEmbeddings doc) {
  if (doc.vectors.rank() != 2 || doc.vectors.rows() != l_ || doc.vectors.cols() != d_) {
    fail(ErrorCode::shape_mismatch, "store expects [" + std::to_string(l_) + ", " + std::to_string(d_) +
                                        "] records, got " + to_string(doc.vectors.shape()));
  }
  if (contains(doc.doc_id)) fail(ErrorCode::invalid_argument, "doc " + std::to_string(doc.doc_id) + " already stored");
  by_id_.emplace(doc.doc_id, docs_.size());
  docs_.push_back(std::move(doc));
}

const DocumentEmbeddings& EmbeddingStore::get(std::size_t doc_id) const {
  auto it = by_id_.find(doc_id);
  if (it == by_id_.end()) fail(ErrorCode::missing_artifact, "doc " + std::to_string(doc_id) + " not in store");
  return docs_[it->second];
}

std::size_t EmbeddingStore::file_size(std::size_t l, std::size_t d_model, std::size_t count) {
  return kStoreHeaderBytes + 24 * count + count * l * d_model * 4;
}

void EmbeddingStore::persist(const std::filesystem::path& path) const {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot open " + tmp.string() + " for writing");
    binio::write_magic(out, "PSEM");
    binio::write_le<std::uint32_t>(out, kStoreVersion);
    binio::write_le<std::uint64_t>(out, l_);
    binio::write_le<std::uint64_t>(out, d_);
    binio::write_le<std::uint64_t>(out, docs_.size());
    const std::size_t record = l_ * d_ * 4;
    std::size_t offset = kStoreHeaderBytes + 24 * docs_.size();
    for (const auto& doc : docs_) {
      binio::write_le<std::uint64_t>(out, doc.doc_id);
      binio::write_le<std::uint64_t>(out, offset);
      binio::write_le<std::uint64_t>(out, doc.source_token_count);
      offset += record;
    }
    for (const auto& doc : docs_) {
      for (Scalar v : doc.vectors.values()) binio::write_le<float>(out, static_cast<float>(v));
    }
    if (!out) fail(ErrorCode::io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::io, "cannot rename " + tmp.string() + ": " + ec.message());
}

EmbeddingStore EmbeddingStore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open embedding store " + path.string());
  binio::expect_magic(in, "PSEM", path.string());
  const auto version = binio::read_le<std::uint32_t>(in, "store version");
  if (version != kStoreVersion) {
    fail(ErrorCode::format, path.string() + ": unsupported store version " + std::to_string(version));
  }
  const auto l = binio::read_le<std::uint64_t>(in, "l");
  const auto d = binio::read_le<std::uint64_t>(in, "d_model");
  const auto count = binio::read_le<std::uint64_t>(in, "count");
  if (l == 0 || d == 0) fail(ErrorCode::format, path.string() + ": zero-sized records");
  const auto expected = file_size(l, d, count);
  const auto actual = std::filesystem::file_size(path);
  if (actual != expected) {
    fail(ErrorCode::format, path.string() + ": truncated or oversized store (" + std::to_string(actual) +
                                " bytes, expected " + std::to_string(expected) + ")");
  }
  struct Entry {
    std::uint64_t id, offset, tokens;
  };
  std::vector<Entry> table(count);
  for (auto& e : table) {
    e.id = binio::read_le<std::uint64_t>(in, "offset table");
    e.offset = binio::read_le<std::uint64_t>(in, "offset table");
    e.tokens = binio::read_le<std::uint64_t>(in, "offset table");
  }
  EmbeddingStore store(l, d);
  for (const auto& e : table) {
    if (e.offset + l * d * 4 > actual) fail(ErrorCode::format, path.string() + ": record offset out of range");
    in.seekg(static_cast<std::streamoff>(e.offset));
    DocumentEmbeddings doc;
    doc.doc_id = e.id;
    doc.source_token_count = e.tokens;
    doc.vectors = Tensor::matrix(l, d);
    for (Scalar& v : doc.vectors.values()) v = binio::read_le<float>(in, "record of doc " + std::to_string(e.id));
    store.add(std::move(doc));
  }
  return store;
}

bool operator==(const EmbeddingStore& a, const EmbeddingStore& b) {
  if (a.l_ != b.l_ || a.d_ != b.d_ || a.docs_.size() != b.docs_.size()) return false;
  for (std::size_t i = 0; i < a.docs_.size(); ++i) {
    const auto& x = a.docs_[i];
    const auto& y = b.docs_[i];
    if (x.doc_id != y.doc_id || x.source_token_count != y.source_token_count || !(x.vectors == y.vectors)) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot open " + path.string() + " for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::missing_artifact, "cannot open " + path.string());
  return in;
}

}  // namespace

void write_corpus_jsonl(const std::filesystem::path& path, std::span<const DocumentChunk> chunks) {
  auto out = open_out(path);
  for (const auto& c : chunks) out << nlohmann::json{{"id", c.id}, {"text", c.text}}.dump() << '\n';
}

std::vector<DocumentChunk> read_corpus_jsonl(const std::filesystem::path& path, const Vocabulary& vocab) {
  auto in = open_in(path);
  std::vector<DocumentChunk> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      DocumentChunk c;
      c.id = j.at("id").get<std::size_t>();
      c.text = j.at("text").get<std::string>();
      c.tokens = vocab.tokenize(c.text);
      out.push_back(std::move(c));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::format, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_qa_jsonl(const std::filesystem::path& path, std::span<const QAPair> qa) {
  auto out = open_out(path);
  for (const auto& q : qa) {
    nlohmann::json j{{"id", q.id},
                     {"question", q.question},
                     {"answers", q.answers},
                     {"long_answer", q.long_answer},
                     {"gold_chunks", q.gold_docs},
                     {"split", q.test ? "test" : "train"},
                     {"hops", q.hops}};
    out << j.dump() << '\n';
  }
}

std::vector<QAPair> read_qa_jsonl(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<QAPair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      QAPair q;
      q.id = j.at("id").get<std::size_t>();
      q.question = j.at("question").get<std::string>();
      q.answers = j.at("answers").get<std::vector<std::string>>();
      q.long_answer = j.value("long_answer", std::string());
      q.gold_docs = j.value("gold_chunks", std::vector<std::size_t>{});
      q.test = j.value("split", std::string("train")) == "test";
      q.hops = j.value("hops", 1);
      out.push_back(std::move(q));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::format, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace PISCO_ABI
}  // namespace pisco
