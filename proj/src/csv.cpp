#include "dygrasp/csv.hpp"

#include "dygrasp/error.hpp"

namespace dygrasp::csv {

Reader::Reader(std::istream& in, std::string source_name)
    : in_(in), source_(std::move(source_name)) {}

std::optional<Record> Reader::next() {
  Record rec;
  rec.line = line_;
  std::string field;
  bool in_quotes = false;
  bool any = false;
  bool field_quoted = false;
  int ch;
  while ((ch = in_.get()) != EOF) {
    any = true;
    char c = static_cast<char>(ch);
    if (in_quotes) {
      if (c == '"') {
        if (in_.peek() == '"') {
          in_.get();
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line_;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && field.empty() && !field_quoted) {
      in_quotes = true;
      field_quoted = true;
    } else if (c == ',') {
      rec.fields.push_back(std::move(field));
      field.clear();
      field_quoted = false;
    } else if (c == '\n') {
      ++line_;
      if (!field.empty() && field.back() == '\r') field.pop_back();
      rec.fields.push_back(std::move(field));
      return rec;
    } else {
      field.push_back(c);
    }
  }
  if (in_quotes) {
    fail(ErrorKind::kData,
         source_ + ":" + std::to_string(rec.line) + ": unterminated quote");
  }
  if (!any) return std::nullopt;
  if (!field.empty() && field.back() == '\r') field.pop_back();
  rec.fields.push_back(std::move(field));
  return rec;
}

std::string quote(std::string_view field) {
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

void write_row(std::ostream& out, const std::vector<std::string>& fields,
               const std::vector<bool>& force_quote) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out << ',';
    const auto& f = fields[i];
    bool needs = (i < force_quote.size() && force_quote[i]) ||
                 f.find_first_of(",\"\n\r") != std::string::npos;
    if (needs) {
      out << quote(f);
    } else {
      out << f;
    }
  }
  out << '\n';
}

}  // namespace dygrasp::csv
