#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dsvpr/tensor.hpp"

namespace dsvpr {

// splitmix64 finalizer; good enough to key procedural content.
std::uint64_t mix64(std::uint64_t x);

// Deterministic procedural scene for a map position. Positions in the same
// 25 m cell share their base pattern, so views of one place look alike
// while distinct places diverge. Heading rotates grating phases and the
// jitter seed adds per-image pixel noise, which is how query views of a
// known place end up similar but not identical. Returns [3 x side x side]
// with values in [0, 1].
Tensor render_place_image(double easting, double northing, double heading_deg,
                          std::uint64_t jitter_seed, int side);

struct SyntheticPoint {
  std::string id;
  double easting = 0.0;
  double northing = 0.0;
  std::optional<double> heading;
  std::optional<std::int64_t> frame;
};

// Axis-aligned street grid: streets every `street_spacing` meters in both
// directions across a square extent, sampled every `point_spacing` meters.
// Headings alternate direction per street; intersections appear once per
// crossing street, so coincident points are expected.
std::vector<SyntheticPoint> manhattan_grid(double extent, double street_spacing,
                                           double point_spacing, double origin_e = 0.0,
                                           double origin_n = 0.0);

// One straight street at a compass bearing, sampled every `point_spacing`
// meters, every point heading along the street.
std::vector<SyntheticPoint> single_street(double bearing_deg, double length,
                                          double point_spacing, double origin_e = 0.0,
                                          double origin_n = 0.0);

}  // namespace dsvpr
