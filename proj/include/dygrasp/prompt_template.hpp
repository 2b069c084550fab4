#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace dygrasp {

// A template file holds up to three sections introduced by marker lines:
//
//   @@header
//   ... {node_text} {prev_description} {segment_interactions} ...
//   @@interaction
//   [{timestamp}] ({role}) {edge_text} | counterpart: {counterpart_text}
//   @@footer
//   ...
//
// `{{` and `}}` produce literal braces. Unknown placeholders are rejected at
// parse time.
struct PromptTemplate {
  std::string header;
  std::string interaction;
  std::string footer;
  std::uint64_t hash = 0;  // over the raw file contents

  static PromptTemplate parse(std::string_view text);
  static PromptTemplate load(const std::filesystem::path& path);

  static PromptTemplate default_recent();
  static PromptTemplate default_global();

  std::string hash_hex() const;
  bool has_segment_slot() const;
};

// Substitutes placeholders; every placeholder used must be in `values`.
std::string render_placeholders(std::string_view pattern,
                                const std::map<std::string, std::string, std::less<>>& values);

// Text used when a text field is empty.
inline constexpr std::string_view kNoText = "(no text)";

std::string format_timestamp(double t);

}  // namespace dygrasp
