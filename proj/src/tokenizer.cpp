#include "dygrasp/tokenizer.hpp"

#include "dygrasp/hashing.hpp"

namespace dygrasp {
namespace {

bool is_word_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
         (c >= '0' && c <= '9') || c == '_' || c >= 0x80;
}

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
         c == '\v';
}

}  // namespace

std::vector<std::string_view> split_tokens(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
    } else if (is_word_byte(c)) {
      std::size_t j = i;
      while (j < n && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
      out.push_back(text.substr(i, j - i));
      i = j;
    } else {
      out.push_back(text.substr(i, 1));
      ++i;
    }
  }
  return out;
}

std::size_t count_mock_tokens(std::string_view text) {
  return split_tokens(text).size();
}

TokenId token_id(std::string_view token) {
  return static_cast<TokenId>(fnv1a64(token) & 0x7fffffffULL);
}

std::vector<TokenId> token_ids(std::string_view text) {
  std::vector<TokenId> ids;
  for (auto t : split_tokens(text)) ids.push_back(token_id(t));
  return ids;
}

}  // namespace dygrasp
