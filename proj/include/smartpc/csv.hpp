#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "smartpc/errors.hpp"
#include "smartpc/format.hpp"

namespace smartpc {

using CsvRow = std::vector<std::string>;

/// RFC-4180 field quoting: fields containing a comma, quote, CR or LF are
/// wrapped in quotes with inner quotes doubled.
inline std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline void write_csv_row(std::ostream& out, const CsvRow& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out << ',';
    out << csv_escape(row[i]);
  }
  out << '\n';
}

inline void write_csv(const std::filesystem::path& path, const CsvRow& header, const std::vector<CsvRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_csv_row(out, header);
  for (const auto& r : rows) {
    if (r.size() != header.size())
      throw InvalidArgument("write_csv: row has " + std::to_string(r.size()) + " fields, header has " +
                            std::to_string(header.size()));
    write_csv_row(out, r);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

/// Parses RFC-4180 text (quoted fields may span lines; CRLF or LF endings).
/// Every record must have as many fields as the first.
inline std::vector<CsvRow> parse_csv(std::istream& in, const std::string& origin) {
  std::vector<CsvRow> rows;
  CsvRow row;
  std::string field;
  bool quoted = false, field_started = false;
  std::size_t line = 1, record_line = 1;
  const auto end_record = [&] {
    row.push_back(std::move(field));
    field.clear();
    if (!rows.empty() && row.size() != rows.front().size())
      throw ParseError(origin, record_line,
                       "expected " + std::to_string(rows.front().size()) + " fields, found " + std::to_string(row.size()));
    rows.push_back(std::move(row));
    row.clear();
    field_started = false;
  };
  char c;
  while (in.get(c)) {
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field += '"';
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"' && field.empty() && !field_started) {
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = true;
    } else if (c == '\r' && in.peek() == '\n') {
      // swallowed; the LF ends the record
    } else if (c == '\n') {
      end_record();
      record_line = ++line;
    } else {
      field += c;
      field_started = true;
    }
  }
  if (quoted) throw ParseError(origin, record_line, "unterminated quoted field");
  if (field_started || !field.empty() || !row.empty()) end_record();
  return rows;
}

inline std::vector<CsvRow> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return parse_csv(in, path.string());
}

// ---------------------------------------------------------------------------
// Metrics

/// One result line: accuracy of `mode` on a (corruption, severity) stream.
/// Clean data uses corruption "clean" and severity 0.
struct MetricsRow {
  std::string corruption = "clean";
  int severity = 0;
  std::string mode;
  std::size_t views = 0;
  std::size_t samples = 0;
  double accuracy = 0.0;
  double samples_per_second = 0.0;
  double samples_per_second_std = 0.0;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

inline const CsvRow& metrics_header() {
  static const CsvRow h{"corruption", "severity", "mode", "views", "samples", "accuracy", "samples_per_second",
                        "samples_per_second_std"};
  return h;
}

/// Accuracy is written with 4 decimals, throughput with full precision.
inline void write_metrics(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  std::vector<CsvRow> out;
  out.reserve(rows.size());
  for (const auto& r : rows)
    out.push_back({r.corruption, std::to_string(r.severity), r.mode, std::to_string(r.views), std::to_string(r.samples),
                   format_fixed(r.accuracy, 4), format_double(r.samples_per_second),
                   format_double(r.samples_per_second_std)});
  write_csv(path, metrics_header(), out);
}

inline std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty() || rows.front() != metrics_header())
    throw FormatError(path.string() + ": missing or unexpected metrics header");
  std::vector<MetricsRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto num = [&](std::size_t col) {
      const auto v = parse_double(r[col]);
      if (!v) throw ParseError(path.string(), i + 1, "bad number in column '" + metrics_header()[col] + "'");
      return *v;
    };
    MetricsRow m;
    m.corruption = r[0];
    m.severity = static_cast<int>(num(1));
    m.mode = r[2];
    m.views = static_cast<std::size_t>(num(3));
    m.samples = static_cast<std::size_t>(num(4));
    m.accuracy = num(5);
    m.samples_per_second = num(6);
    m.samples_per_second_std = num(7);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace smartpc
