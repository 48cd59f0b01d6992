#pragma once

#include <charconv>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "virm/tensor.hpp"

namespace virm {

/// Shortest decimal representation that round-trips the exact double value,
/// so emitted CSVs are byte-stable and parse back bit-identically.
inline std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("csv: not a number: '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed on " + path);
}

inline bool is_numeric_field(const std::string& s) {
  if (s.empty()) return false;
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

/// Reads a feature matrix from CSV. An optional header row is detected by
/// non-numeric fields; leading `env` and `label` columns (the dataset export
/// layout) are dropped so exported datasets can feed the overlap command
/// directly.
inline Tensor read_features_csv(const std::string& path) {
  const auto lines = read_lines(path);
  std::size_t first_row = 0;
  std::size_t skip_cols = 0;
  if (!lines.empty()) {
    const auto head = split_csv_line(lines[0]);
    bool any_non_numeric = false;
    for (const auto& f : head) {
      if (!is_numeric_field(f)) any_non_numeric = true;
    }
    if (any_non_numeric) {
      first_row = 1;
      if (head.size() >= 2 && head[0] == "env" && head[1] == "label") skip_cols = 2;
    }
  }
  std::vector<std::vector<double>> rows;
  for (std::size_t i = first_row; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto fields = split_csv_line(lines[i]);
    if (fields.size() <= skip_cols) {
      throw FormatError("csv: row " + std::to_string(i + 1) + " of " + path + " has only " +
                        std::to_string(fields.size()) + " fields");
    }
    std::vector<double> row;
    row.reserve(fields.size() - skip_cols);
    for (std::size_t j = skip_cols; j < fields.size(); ++j) row.push_back(parse_double(fields[j]));
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw FormatError("csv: ragged row " + std::to_string(i + 1) + " in " + path);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError("csv: no data rows in " + path);
  Tensor t({rows.size(), rows.front().size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.front().size(); ++j) t(i, j) = rows[i][j];
  return t;
}

}  // namespace virm
