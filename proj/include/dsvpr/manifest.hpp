#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace dsvpr {

struct ManifestRow {
  std::string id;
  std::string path;  // empty means the image is rendered procedurally
  double easting = 0.0;
  double northing = 0.0;
  std::optional<double> heading;  // compass degrees in [0, 360)
  std::optional<std::int64_t> frame_index;
};

// CSV with the fixed header `id,path,easting,northing,heading,frame_index`.
// heading and frame_index cells may be empty. Parse failures report the
// 1-based line number.
std::vector<ManifestRow> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);

}  // namespace dsvpr
