#include "pisco/vocab.hpp"

#include <fstream>

#include "pisco/error.hpp"

namespace pisco {
inline namespace PISCO_ABI {

std::vector<std::string_view> split_whitespace(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* s : {"<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "<ae>", "<tc>", "<kbtc>", "<mkbtc>"}) {
    add(s);
  }
  for (std::size_t i = 0; i < special::max_memory_tokens; ++i) add("<mem" + std::to_string(i) + ">");
}

TokenId Vocabulary::add(std::string_view word) {
  if (word.empty() || word.find_first_of(" \t\r\n") != std::string_view::npos) {
    fail(ErrorCode::invalid_argument, "vocabulary entries must be non-empty and whitespace-free");
  }
  std::string key(word);
  if (auto it = ids_.find(key); it != ids_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(key);
  ids_.emplace(std::move(key), id);
  return id;
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  return it == ids_.end() ? special::unk : it->second;
}

bool Vocabulary::contains(std::string_view word) const { return ids_.count(std::string(word)) != 0; }

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    fail(ErrorCode::invalid_argument, "token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::memory_token(std::size_t slot) {
  if (slot >= special::max_memory_tokens) {
    fail(ErrorCode::invalid_argument, "memory slot " + std::to_string(slot) + " exceeds reserved range");
  }
  return special::first_memory + static_cast<TokenId>(slot);
}

std::vector<TokenId> Vocabulary::tokenize(std::string_view text) const {
  std::vector<TokenId> out;
  for (auto w : split_whitespace(text)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId t : ids) {
    if (t == special::pad || t == special::bos || t == special::eos) continue;
    if (!out.empty()) out += ' ';
    out += token(t);
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot read vocabulary " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    if (lineno < v.tokens_.size()) {
      if (line != v.tokens_[lineno]) {
        fail(ErrorCode::format, path.string() + ": reserved token mismatch at line " + std::to_string(lineno + 1));
      }
    } else {
      if (v.add(line) != static_cast<TokenId>(lineno)) {
        fail(ErrorCode::format, path.string() + ": duplicate token '" + line + "'");
      }
    }
    ++lineno;
  }
  return v;
}

}  // namespace PISCO_ABI
}  // namespace pisco
