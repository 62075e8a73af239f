#include "dsvpr/synthetic.hpp"

#include <cmath>
#include <cstdio>

#include "dsvpr/errors.hpp"
#include "dsvpr/rng.hpp"

namespace dsvpr {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Tensor render_place_image(double easting, double northing, double heading_deg,
                          std::uint64_t jitter_seed, int side) {
  if (side < 1) throw ParameterError("render_place_image: side must be >= 1");
  const auto cell_e = static_cast<std::int64_t>(std::floor(easting / 25.0));
  const auto cell_n = static_cast<std::int64_t>(std::floor(northing / 25.0));
  const std::uint64_t key =
      mix64(mix64(static_cast<std::uint64_t>(cell_e) * 0x100000001b3ull) ^
            static_cast<std::uint64_t>(cell_n));
  Rng cell_rng(key);

  constexpr int kGratings = 3;
  const double heading_rad = heading_deg * M_PI / 180.0;
  std::vector<double> out(static_cast<std::size_t>(3) * side * side);
  Rng jitter(jitter_seed);
  for (int c = 0; c < 3; ++c) {
    double kx[kGratings], ky[kGratings], phase[kGratings], amp[kGratings];
    double amp_total = 0.0;
    for (int g = 0; g < kGratings; ++g) {
      kx[g] = cell_rng.uniform(-0.3, 0.3);
      ky[g] = cell_rng.uniform(-0.3, 0.3);
      // Heading turns into a phase shift, so views of a place from
      // different directions stay correlated without being equal.
      phase[g] = cell_rng.uniform(0.0, 2.0 * M_PI) + heading_rad * cell_rng.uniform(0.5, 2.0);
      amp[g] = cell_rng.uniform(0.5, 1.0);
      amp_total += amp[g];
    }
    const double base = 0.5 + cell_rng.uniform(-0.2, 0.2);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        double v = 0.0;
        for (int g = 0; g < kGratings; ++g)
          v += amp[g] * std::sin(kx[g] * x + ky[g] * y + phase[g]);
        v = base + 0.4 * v / amp_total + jitter.uniform(-0.02, 0.02);
        out[(static_cast<std::size_t>(c) * side + y) * side + x] =
            std::min(1.0, std::max(0.0, v));
      }
    }
  }
  return Tensor::from_data({3, side, side}, std::move(out));
}

namespace {

std::string point_id(const char* prefix, std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%06zu", prefix, n);
  return buf;
}

}  // namespace

std::vector<SyntheticPoint> manhattan_grid(double extent, double street_spacing,
                                           double point_spacing, double origin_e,
                                           double origin_n) {
  if (extent <= 0 || street_spacing <= 0 || point_spacing <= 0)
    throw ParameterError("manhattan_grid: extents and spacings must be positive");
  std::vector<SyntheticPoint> points;
  const auto streets = static_cast<int>(std::floor(extent / street_spacing)) + 1;
  const auto steps = static_cast<int>(std::floor(extent / point_spacing)) + 1;
  std::size_t counter = 0;
  for (int s = 0; s < streets; ++s) {  // east-west streets
    const double n = origin_n + s * street_spacing;
    const double heading = (s % 2 == 0) ? 90.0 : 270.0;
    for (int t = 0; t < steps; ++t) {
      points.push_back({point_id("p", counter++), origin_e + t * point_spacing, n, heading,
                        static_cast<std::int64_t>(t)});
    }
  }
  for (int s = 0; s < streets; ++s) {  // north-south streets
    const double e = origin_e + s * street_spacing;
    const double heading = (s % 2 == 0) ? 0.0 : 180.0;
    for (int t = 0; t < steps; ++t) {
      points.push_back({point_id("p", counter++), e, origin_n + t * point_spacing, heading,
                        static_cast<std::int64_t>(t)});
    }
  }
  return points;
}

std::vector<SyntheticPoint> single_street(double bearing_deg, double length,
                                          double point_spacing, double origin_e,
                                          double origin_n) {
  if (length <= 0 || point_spacing <= 0)
    throw ParameterError("single_street: length and spacing must be positive");
  const double rad = bearing_deg * M_PI / 180.0;
  const double de = std::sin(rad), dn = std::cos(rad);  // compass: 0 deg = north
  double heading = std::fmod(bearing_deg, 360.0);
  if (heading < 0) heading += 360.0;
  std::vector<SyntheticPoint> points;
  const auto steps = static_cast<int>(std::floor(length / point_spacing)) + 1;
  for (int t = 0; t < steps; ++t) {
    const double d = t * point_spacing;
    points.push_back({point_id("s", static_cast<std::size_t>(t)), origin_e + d * de,
                      origin_n + d * dn, heading, static_cast<std::int64_t>(t)});
  }
  return points;
}

}  // namespace dsvpr
