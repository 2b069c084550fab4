#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace dygrasp {

using TokenId = std::int64_t;

// Word/punctuation splitter: a token is a maximal run of [A-Za-z0-9_] or
// non-ASCII bytes, or a single other non-space character. So
// "visit bookstore, buy notebook" has 5 tokens.
std::vector<std::string_view> split_tokens(std::string_view text);

std::size_t count_mock_tokens(std::string_view text);

// Stable 31-bit id for a token string.
TokenId token_id(std::string_view token);

std::vector<TokenId> token_ids(std::string_view text);

}  // namespace dygrasp
