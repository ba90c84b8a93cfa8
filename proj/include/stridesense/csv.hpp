#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace stridesense {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index by名 header name; throws ParseError if absent.
  std::size_t column(const std::string& name) const;
};

// Minimal RFC-4180 subset: fields may be quoted, quotes escape as "".
// Newlines inside quoted fields are not supported (the corpus formats never
// need them). Throws ParseError with line context on malformed input.
CsvTable read_csv(const std::filesystem::path& path);

std::string csv_escape(const std::string& field);

void write_csv(const std::filesystem::path& path,
               const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// Deterministic number formatting used by every emitted table.
std::string format_double(double v);
std::string format_fixed(double v, int decimals);

}  // namespace stridesense
