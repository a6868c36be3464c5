#pragma once

#include <string>
#include <vector>

// Small file and CSV helpers shared by the pipeline and the CLI.
namespace cracknet::io {

// Writes to <path>.tmp and renames over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

// Fixed six-decimal rendering used by every CSV.
std::string fixed6(double v);

std::vector<std::string> split_csv_line(const std::string& line);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index by header name; DataError when absent.
  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::string& path);

// Joins fields with ',' and appends '\n'.
std::string csv_row(const std::vector<std::string>& fields);

}  // namespace cracknet::io
