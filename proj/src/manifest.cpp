#include "dsvpr/manifest.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "dsvpr/errors.hpp"

namespace dsvpr {

namespace {

constexpr const char* kHeader = "id,path,easting,northing,heading,frame_index";

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

double parse_double(const std::string& s, std::size_t line_no, const char* field) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw DataError("manifest line " + std::to_string(line_no) + ": bad " + field + " '" + s + "'");
  return v;
}

std::int64_t parse_int(const std::string& s, std::size_t line_no, const char* field) {
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw DataError("manifest line " + std::to_string(line_no) + ": bad " + field + " '" + s + "'");
  return v;
}

std::string fmt_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest '" + path + "'");
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(f, line)) throw DataError("manifest '" + path + "' is empty");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kHeader)
    throw DataError("manifest line 1: expected header '" + std::string(kHeader) + "'");

  std::vector<ManifestRow> rows;
  std::unordered_set<std::string> seen;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != 6)
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 6 fields, got " +
                      std::to_string(fields.size()));
    ManifestRow row;
    row.id = fields[0];
    if (row.id.empty())
      throw DataError("manifest line " + std::to_string(line_no) + ": empty id");
    if (!seen.insert(row.id).second)
      throw DataError("manifest line " + std::to_string(line_no) + ": duplicate id '" + row.id + "'");
    row.path = fields[1];
    row.easting = parse_double(fields[2], line_no, "easting");
    row.northing = parse_double(fields[3], line_no, "northing");
    if (!fields[4].empty()) {
      const double h = parse_double(fields[4], line_no, "heading");
      if (h < 0.0 || h >= 360.0)
        throw DataError("manifest line " + std::to_string(line_no) +
                        ": heading must lie in [0, 360)");
      row.heading = h;
    }
    if (!fields[5].empty()) row.frame_index = parse_int(fields[5], line_no, "frame_index");
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ostringstream out;
  out << kHeader << '\n';
  for (const auto& r : rows) {
    out << r.id << ',' << r.path << ',' << fmt_double(r.easting) << ',' << fmt_double(r.northing)
        << ',';
    if (r.heading) out << fmt_double(*r.heading);
    out << ',';
    if (r.frame_index) out << *r.frame_index;
    out << '\n';
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open manifest '" + path + "' for writing");
  f << out.str();
  if (!f) throw DataError("short write to manifest '" + path + "'");
}

}  // namespace dsvpr
