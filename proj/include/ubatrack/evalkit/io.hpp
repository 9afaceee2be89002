#pragma once

// Ground-truth and result text files: one "x,y,w,h" line per frame (results
// append ",conf"); "0,0,0,0" marks an absent target.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ubatrack/evalkit/metrics.hpp"

namespace ubatrack {

namespace detail {

inline std::vector<double> parse_csv_line(const std::string& line, const std::string& where) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t end = line.find(',', pos);
    std::string field = line.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    const auto first = field.find_first_not_of(" \t\r");
    const auto last = field.find_last_not_of(" \t\r");
    field = first == std::string::npos ? "" : field.substr(first, last - first + 1);
    double v = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (field.empty() || ec != std::errc() || ptr != field.data() + field.size()) {
      throw FormatError(where + ": cannot parse number '" + field + "'");
    }
    out.push_back(v);
    if (end == std::string::npos) break;
    pos = end + 1;
  }
  return out;
}

inline std::vector<std::vector<double>> read_rows(const std::string& path, std::size_t fields) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto row = parse_csv_line(line, path + ":" + std::to_string(rows.size() + 1));
    if (row.size() != fields) {
      throw FormatError(path + ":" + std::to_string(rows.size() + 1) + ": expected " + std::to_string(fields) +
                        " fields, got " + std::to_string(row.size()));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline GroundTruth gt_from_box(const Box& b) {
  const bool absent = b.x == 0 && b.y == 0 && b.w == 0 && b.h == 0;
  return {b, !absent};
}

inline void check_line_count(const std::string& path, std::size_t lines, std::size_t frames) {
  if (lines != frames) {
    throw FormatError(path + ": " + std::to_string(lines) + " lines for " + std::to_string(frames) + " frames");
  }
}

inline std::vector<GroundTruth> read_groundtruth(const std::string& path) {
  std::vector<GroundTruth> out;
  for (const auto& r : detail::read_rows(path, 4)) out.push_back(gt_from_box({r[0], r[1], r[2], r[3]}));
  return out;
}

inline void write_groundtruth(const std::string& path, const std::vector<GroundTruth>& gt) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  for (const auto& g : gt) {
    const Box b = g.present ? g.box : Box{};
    f << detail::format_number(b.x) << ',' << detail::format_number(b.y) << ',' << detail::format_number(b.w) << ','
      << detail::format_number(b.h) << '\n';
  }
  if (!f) throw Error("write failed for " + path);
}

// Fills boxes and confidence; gt is left to the caller.
inline SequenceResult read_results(const std::string& path) {
  SequenceResult r;
  for (const auto& row : detail::read_rows(path, 5)) {
    r.boxes.push_back({row[0], row[1], row[2], row[3]});
    r.confidence.push_back(row[4]);
  }
  return r;
}

inline void write_results(const std::string& path, const SequenceResult& r) {
  if (r.confidence.size() != r.boxes.size()) throw ShapeError("write_results: box and confidence counts differ");
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  for (std::size_t i = 0; i < r.boxes.size(); ++i) {
    const auto& b = r.boxes[i];
    f << detail::format_number(b.x) << ',' << detail::format_number(b.y) << ',' << detail::format_number(b.w) << ','
      << detail::format_number(b.h) << ',' << detail::format_number(r.confidence[i]) << '\n';
  }
  if (!f) throw Error("write failed for " + path);
}

}  // namespace ubatrack
