#pragma once

#include <cstddef>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace dygrasp::csv {

struct Record {
  std::size_t line = 0;  // 1-based line where the record starts
  std::vector<std::string> fields;
};

// RFC 4180 reader: quoted fields may contain commas, doubled quotes and
// newlines. Throws Error(kData) on an unterminated quote.
class Reader {
 public:
  Reader(std::istream& in, std::string source_name);

  std::optional<Record> next();

 private:
  std::istream& in_;
  std::string source_;
  std::size_t line_ = 1;
};

void write_row(std::ostream& out, const std::vector<std::string>& fields,
               const std::vector<bool>& force_quote = {});

std::string quote(std::string_view field);

}  // namespace dygrasp::csv
