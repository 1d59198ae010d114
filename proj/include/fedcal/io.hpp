//
// Copyright 2026 The fedcal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#pragma once

// Response CSV files: header `student_id,item_1,...,item_J`, one student per
// line, integer cells. Errors name the file and the 1-based line.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fedcal/errors.hpp"
#include "fedcal/irt_model.hpp"

namespace fedcal {

struct RawResponses {
  std::string path;
  std::size_t items = 0;
  std::vector<std::string> ids;
  std::vector<int> data;
  std::vector<std::size_t> lines;  // source line of each row
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::string where(const std::string& path, std::size_t line) {
  return path + ":" + std::to_string(line) + ": ";
}

}  // namespace detail

inline RawResponses read_raw_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  RawResponses raw;
  raw.path = path;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    const auto cells = detail::split_csv_line(trimmed);
    if (!header) {
      if (cells.size() < 2 || detail::trim(cells[0]) != "student_id") {
        throw ValidationError(detail::where(path, lineno) + "header must be student_id,item_1,...,item_J");
      }
      for (std::size_t j = 1; j < cells.size(); ++j) {
        if (detail::trim(cells[j]) != "item_" + std::to_string(j)) {
          throw ValidationError(detail::where(path, lineno) + "expected column item_" + std::to_string(j));
        }
      }
      raw.items = cells.size() - 1;
      header = true;
      continue;
    }
    if (cells.size() != raw.items + 1) {
      throw ValidationError(detail::where(path, lineno) + "expected " + std::to_string(raw.items + 1) +
                            " fields, found " + std::to_string(cells.size()));
    }
    raw.ids.emplace_back(detail::trim(cells[0]));
    for (std::size_t j = 1; j < cells.size(); ++j) {
      const std::string cell(detail::trim(cells[j]));
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (cell.empty() || used != cell.size()) {
        throw ValidationError(detail::where(path, lineno) + "item_" + std::to_string(j) +
                              " is not an integer: '" + cell + "'");
      }
      if (v < 0) {
        throw ValidationError(detail::where(path, lineno) + "item_" + std::to_string(j) +
                              " is negative");
      }
      raw.data.push_back(v);
    }
    raw.lines.push_back(lineno);
  }
  if (!header) throw ValidationError(detail::where(path, 1) + "missing header");
  return raw;
}

// Category counts covering every file: max observed score + 1, at least 2.
inline std::vector<int> infer_categories(std::span<const RawResponses> files) {
  if (files.empty()) throw ConfigError("no data files");
  std::vector<int> cats(files.front().items, 2);
  for (const auto& f : files) {
    if (f.items != cats.size()) {
      throw ValidationError(f.path + ": has " + std::to_string(f.items) + " items, " +
                            files.front().path + " has " + std::to_string(cats.size()));
    }
    for (std::size_t i = 0; i < f.data.size(); ++i) {
      const std::size_t j = i % f.items;
      cats[j] = std::max(cats[j], f.data[i] + 1);
    }
  }
  return cats;
}

inline ResponseMatrix to_matrix(const RawResponses& raw, std::span<const int> categories) {
  if (raw.items != categories.size()) {
    throw ValidationError(raw.path + ": has " + std::to_string(raw.items) + " items, model has " +
                          std::to_string(categories.size()));
  }
  for (std::size_t i = 0; i < raw.data.size(); ++i) {
    const std::size_t j = i % raw.items;
    if (raw.data[i] >= categories[j]) {
      throw ValidationError(detail::where(raw.path, raw.lines[i / raw.items]) + "item_" +
                            std::to_string(j + 1) + " = " + std::to_string(raw.data[i]) +
                            " is outside 0.." + std::to_string(categories[j] - 1));
    }
  }
  return ResponseMatrix(std::vector<int>(categories.begin(), categories.end()), raw.data);
}

inline ResponseMatrix read_response_csv(const std::string& path, std::span<const int> categories) {
  return to_matrix(read_raw_csv(path), categories);
}

inline void write_response_csv(const std::filesystem::path& path, const ResponseMatrix& x,
                               const std::string& id_prefix = "s") {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "student_id";
  for (std::size_t j = 0; j < x.items(); ++j) out << ",item_" << j + 1;
  out << "\n";
  for (std::size_t i = 0; i < x.rows(); ++i) {
    out << id_prefix << i + 1;
    for (int v : x.row(i)) out << "," << v;
    out << "\n";
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": invalid JSON: " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace fedcal
