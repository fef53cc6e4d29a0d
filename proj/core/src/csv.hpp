// SPDX-License-Identifier: Apache-2.0
// Minimal reader for the flat comma-separated files this library writes.
#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "countadapt/common.hpp"

namespace countadapt::csv {

using Row = std::vector<std::string>;

inline Row split(const std::string& line) {
  Row out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(std::move(field));
  return out;
}

/// Reads a file whose first line must equal `header`; every row must have header.size() fields.
inline std::vector<Row> read(const std::filesystem::path& path, const Row& header) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || split(line) != header) {
    std::string want;
    for (const auto& h : header) want += (want.empty() ? "" : ",") + h;
    throw Error(ErrorCode::format_error, path.string() + ": expected header '" + want + "'");
  }
  std::vector<Row> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    Row r = split(line);
    if (r.size() != header.size()) {
      throw Error(ErrorCode::format_error,
                  path.string() + ":" + std::to_string(lineno) + ": wrong field count");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline double to_double(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw Error(ErrorCode::format_error, "not a number: '" + s + "'");
  }
  return v;
}

inline long long to_int(const std::string& s) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw Error(ErrorCode::format_error, "not an integer: '" + s + "'");
  }
  return v;
}

inline std::string format(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace countadapt::csv
