#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rceg {

using TokenId = std::int32_t;

/// Fixed special ids shared by every vocabulary.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kNewline = 4;
inline constexpr TokenId kFirstByte = 5;
inline constexpr TokenId kFirstWord = kFirstByte + 256;

inline constexpr bool is_special(TokenId id) { return id >= kPad && id <= kUnk; }
inline constexpr bool is_byte_token(TokenId id) {
  return id >= kFirstByte && id < kFirstWord;
}

/// Whitespace-split word vocabulary with a 256-entry byte fallback.
/// Layout: 4 specials, the newline token, 256 byte tokens, then words.
class Vocab {
 public:
  Vocab();

  /// Builds from the whitespace-separated words of `texts`, most frequent
  /// first (ties lexicographic), capped at `max_size` total entries.
  static Vocab build(std::span<const std::string> texts, std::size_t max_size = 2048);
  static Vocab from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Id of a word token; byte and special entries never match.
  std::optional<TokenId> lookup_word(std::string_view word) const;
  std::optional<TokenId> lookup(std::string_view token) const;

  std::vector<TokenId> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void index();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace rceg
