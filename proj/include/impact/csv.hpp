// Copyright 2026 The IMPACT Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef IMPACT_CSV_HPP
#define IMPACT_CSV_HPP

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "impact/error.hpp"

namespace impact::csv {

using Row = std::vector<std::string>;

inline Row parse_line(const std::string& line) {
  Row fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  fields.push_back(std::move(field));
  return fields;
}

inline std::string escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_float(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_row(const Row& row) {
  std::string out;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out.push_back(',');
    out += escape(row[i]);
  }
  return out;
}

/// Reads every non-empty line. Lines starting with '#' are returned in
/// `comments` when provided and skipped otherwise.
inline std::vector<Row> read_file(const std::string& path, std::vector<std::string>* comments = nullptr) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIoFailure, "cannot open " + path);
  std::vector<Row> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (comments) comments->push_back(line.substr(1));
      continue;
    }
    rows.push_back(parse_line(line));
  }
  return rows;
}

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path) {
    require(out_.good(), ErrorCode::kIoFailure, "cannot write " + path);
  }
  void comment(const std::string& text) { out_ << '#' << text << '\n'; }
  void row(const Row& r) { out_ << format_row(r) << '\n'; }
  std::ostream& stream() { return out_; }
  void close() {
    out_.close();
    require(!out_.fail(), ErrorCode::kIoFailure, "write failed");
  }

 private:
  std::ofstream out_;
};

}  // namespace impact::csv

#endif  // IMPACT_CSV_HPP
