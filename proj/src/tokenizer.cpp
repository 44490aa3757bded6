#include "rceg/tokenizer.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "rceg/errors.hpp"

namespace rceg {
namespace {

std::string byte_name(unsigned value) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "<0x%02X>", value);
  return buf;
}

std::vector<std::string> base_tokens() {
  std::vector<std::string> t = {"<pad>", "<bos>", "<eos>", "<unk>", "\n"};
  for (unsigned b = 0; b < 256; ++b) t.push_back(byte_name(b));
  return t;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r'; }

template <typename F>
void for_each_word(std::string_view line, F&& fn) {
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    const auto start = i;
    while (i < line.size() && !is_space(line[i])) ++i;
    if (i > start) fn(line.substr(start, i - start));
  }
}

}  // namespace

Vocab::Vocab() : tokens_(base_tokens()) { index(); }

void Vocab::index() {
  ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = ids_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) {
      throw Error(ErrorCode::kValidation, "duplicate vocabulary entry '" + tokens_[i] + "'");
    }
  }
}

Vocab Vocab::build(std::span<const std::string> texts, std::size_t max_size) {
  Vocab v;
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    std::size_t start = 0;
    while (start <= text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      for_each_word(std::string_view(text).substr(start, end - start),
                    [&](std::string_view w) { ++counts[std::string(w)]; });
      start = end + 1;
    }
  }
  std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (auto& [word, count] : sorted) {
    if (v.tokens_.size() >= max_size) break;
    if (v.ids_.count(word)) continue;
    v.tokens_.push_back(word);
    v.ids_.emplace(word, static_cast<TokenId>(v.tokens_.size() - 1));
  }
  return v;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  const auto base = base_tokens();
  if (tokens.size() < base.size() ||
      !std::equal(base.begin(), base.end(), tokens.begin())) {
    throw Error(ErrorCode::kValidation, "vocabulary does not start with the reserved tokens");
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  v.index();
  return v;
}

std::optional<TokenId> Vocab::lookup(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> Vocab::lookup_word(std::string_view word) const {
  auto id = lookup(word);
  if (!id || *id < kFirstWord) return std::nullopt;
  return id;
}

std::vector<TokenId> Vocab::tokenize(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t start = 0;
  bool first_line = true;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    if (!first_line) out.push_back(kNewline);
    first_line = false;
    bool prev_fallback = false;
    for_each_word(text.substr(start, end - start), [&](std::string_view w) {
      if (auto id = lookup_word(w)) {
        out.push_back(*id);
        prev_fallback = false;
        return;
      }
      // Adjacent byte runs would merge on detokenize; keep the space.
      if (prev_fallback) out.push_back(kFirstByte + ' ');
      for (unsigned char c : w) out.push_back(kFirstByte + c);
      prev_fallback = true;
    });
    start = end + 1;
  }
  return out;
}

std::string Vocab::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  enum class Prev { kLineStart, kWord, kByte } prev = Prev::kLineStart;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size() || is_special(id)) continue;
    if (id == kNewline) {
      out += '\n';
      prev = Prev::kLineStart;
    } else if (is_byte_token(id)) {
      if (prev == Prev::kWord) out += ' ';
      out += static_cast<char>(id - kFirstByte);
      prev = Prev::kByte;
    } else {
      if (prev != Prev::kLineStart) out += ' ';
      out += tokens_[static_cast<std::size_t>(id)];
      prev = Prev::kWord;
    }
  }
  return out;
}

}  // namespace rceg
