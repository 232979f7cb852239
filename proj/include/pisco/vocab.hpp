#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pisco/precision.hpp"

namespace pisco {
inline namespace PISCO_ABI {

/// Reserved ids. Word ids start after the memory-token block.
namespace special {
inline constexpr TokenId pad = 0;
inline constexpr TokenId unk = 1;
inline constexpr TokenId bos = 2;
inline constexpr TokenId eos = 3;
inline constexpr TokenId sep = 4;
inline constexpr TokenId task_ae = 5;
inline constexpr TokenId task_tc = 6;
inline constexpr TokenId task_kbtc = 7;
inline constexpr TokenId task_multi_kbtc = 8;
inline constexpr TokenId first_memory = 9;
inline constexpr std::size_t max_memory_tokens = 16;
inline constexpr TokenId first_word = first_memory + static_cast<TokenId>(max_memory_tokens);
}  // namespace special

/// Word-level vocabulary over whitespace-separated text.
class Vocabulary {
 public:
  Vocabulary();

  TokenId add(std::string_view word);
  /// Id of a word, or UNK.
  TokenId id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const noexcept { return tokens_.size(); }
  static bool is_special(TokenId id) noexcept { return id >= 0 && id < special::first_word; }
  static TokenId memory_token(std::size_t slot);

  std::vector<TokenId> tokenize(std::string_view text) const;
  /// Joins tokens with single spaces. PAD, BOS and EOS are dropped.
  std::string detokenize(std::span<const TokenId> ids) const;

  /// One token per line; line number is the id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

std::vector<std::string_view> split_whitespace(std::string_view text);

}  // namespace PISCO_ABI
}  // namespace pisco
