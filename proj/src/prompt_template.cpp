#include "dygrasp/prompt_template.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "dygrasp/error.hpp"
#include "dygrasp/hashing.hpp"

namespace dygrasp {
namespace {

const std::set<std::string, std::less<>>& known_placeholders() {
  static const std::set<std::string, std::less<>> names = {
      "node_text",  "role",           "counterpart_text",    "edge_text",
      "timestamp",  "prev_description", "segment_interactions"};
  return names;
}

// Visits literal text and placeholder names in order.
template <typename OnText, typename OnSlot>
void scan(std::string_view pattern, OnText on_text, OnSlot on_slot) {
  std::size_t i = 0;
  while (i < pattern.size()) {
    char c = pattern[i];
    if (c == '{' && i + 1 < pattern.size() && pattern[i + 1] == '{') {
      on_text("{");
      i += 2;
    } else if (c == '}' && i + 1 < pattern.size() && pattern[i + 1] == '}') {
      on_text("}");
      i += 2;
    } else if (c == '{') {
      auto close = pattern.find('}', i);
      if (close == std::string_view::npos) {
        fail(ErrorKind::kInvalidConfig, "unterminated placeholder in template");
      }
      on_slot(pattern.substr(i + 1, close - i - 1));
      i = close + 1;
    } else {
      auto next = pattern.find_first_of("{}", i + 1);
      if (next == std::string_view::npos) next = pattern.size();
      on_text(pattern.substr(i, next - i));
      i = next;
    }
  }
}

void check_placeholders(std::string_view pattern) {
  scan(pattern, [](std::string_view) {}, [](std::string_view name) {
    if (!known_placeholders().contains(name)) {
      fail(ErrorKind::kInvalidConfig,
           "unknown placeholder {" + std::string(name) + "} in template");
    }
  });
}

std::string strip_trailing_newlines(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

}  // namespace

std::string render_placeholders(
    std::string_view pattern,
    const std::map<std::string, std::string, std::less<>>& values) {
  std::string out;
  scan(pattern, [&](std::string_view text) { out.append(text); },
       [&](std::string_view name) {
         auto it = values.find(name);
         if (it == values.end()) {
           fail(ErrorKind::kInvalidConfig,
                "placeholder {" + std::string(name) + "} cannot be resolved here");
         }
         out.append(it->second);
       });
  return out;
}

PromptTemplate PromptTemplate::parse(std::string_view text) {
  PromptTemplate t;
  t.hash = fnv1a64(text);
  std::string* current = nullptr;
  std::istringstream in{std::string(text)};
  std::string line;
  bool saw_marker = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "@@header") {
      current = &t.header;
      saw_marker = true;
      continue;
    }
    if (line == "@@interaction") {
      current = &t.interaction;
      saw_marker = true;
      continue;
    }
    if (line == "@@footer") {
      current = &t.footer;
      saw_marker = true;
      continue;
    }
    if (!current) {
      if (line.empty()) continue;
      fail(ErrorKind::kInvalidConfig,
           "template text before the first @@header/@@interaction/@@footer marker");
    }
    current->append(line).push_back('\n');
  }
  if (!saw_marker) fail(ErrorKind::kInvalidConfig, "template has no sections");
  t.header = strip_trailing_newlines(t.header);
  t.interaction = strip_trailing_newlines(t.interaction);
  t.footer = strip_trailing_newlines(t.footer);
  if (t.interaction.empty()) {
    fail(ErrorKind::kInvalidConfig, "template needs an @@interaction section");
  }
  check_placeholders(t.header);
  check_placeholders(t.interaction);
  check_placeholders(t.footer);
  return t;
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kInvalidConfig, "cannot open template " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

PromptTemplate PromptTemplate::default_recent() {
  return parse(
      "@@header\n"
      "The following is the chronological interaction history of one node in a "
      "dynamic graph.\n"
      "Node description: {node_text}\n"
      "Read the interactions in order; each may depend on the ones before it.\n"
      "@@interaction\n"
      "[{timestamp}] ({role}) {edge_text} | counterpart: {counterpart_text}\n"
      "@@footer\n"
      "(end of history)\n");
}

PromptTemplate PromptTemplate::default_global() {
  return parse(
      "@@header\n"
      "Node description: {node_text}\n"
      "Summary of the node so far: {prev_description}\n"
      "Interactions in the latest period:\n"
      "{segment_interactions}\n"
      "@@interaction\n"
      "[{timestamp}] ({role}) {edge_text} | counterpart: {counterpart_text}\n"
      "@@footer\n"
      "Update the summary of this node's current characteristics and interests "
      "in a few sentences.\n");
}

std::string PromptTemplate::hash_hex() const { return hex64(hash); }

bool PromptTemplate::has_segment_slot() const {
  return header.find("{segment_interactions}") != std::string::npos ||
         footer.find("{segment_interactions}") != std::string::npos;
}

std::string format_timestamp(double t) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, t);
  return std::string(buf, p);
}

}  // namespace dygrasp
