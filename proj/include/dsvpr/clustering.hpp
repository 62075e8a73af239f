#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dsvpr/hdbscan.hpp"

namespace dsvpr {

struct UtmLocation {
  std::string id;
  double easting = 0.0;
  double northing = 0.0;
  std::optional<double> heading;  // compass degrees, 0 = north, clockwise
  std::optional<std::int64_t> frame_index;
};

struct PartitionConfig {
  double block_width = 10.0;       // meters per block along an axis
  int group_count = 5;             // blocks cycle through this many groups per axis
  double retention_radius = 7.5;   // keep members this close to the class peak
  double min_separation = 40.0;    // minimum peak-to-peak distance inside a group
  double focal_distance = 15.0;    // focal point offset along each principal direction
  int min_cluster_size = 10;
  double density_radius = 7.5;     // neighborhood for the peak-density count
  double heading_tolerance = 45.0; // max |heading - bearing| for image selection
  std::uint64_t seed = 0;          // echoed into outputs; the pipeline itself is deterministic

  void validate() const;  // throws ConfigError
};

// One place class: a density cluster reduced to the members near its peak,
// plus the geometry used to pick which images face along the street.
struct ClassCluster {
  std::string class_id;
  std::string source;  // "east", "north" or "merged"
  int group_index = 0; // 1-based over the 2N groups
  std::string peak_id;
  double peak_e = 0.0, peak_n = 0.0;
  double centroid_e = 0.0, centroid_n = 0.0;
  double dir1_e = 0.0, dir1_n = 0.0;  // principal street direction, unit
  double dir2_e = 0.0, dir2_n = 0.0;  // orthogonal complement, unit
  double focal1_e = 0.0, focal1_n = 0.0;
  double focal2_e = 0.0, focal2_n = 0.0;
  std::vector<UtmLocation> members;       // sorted by id
  std::vector<std::string> selected_ids;  // members facing either focal point
};

struct AxisStats {
  int clusters = 0;
  int noise_points = 0;
  std::int64_t members_before_retention = 0;
  std::int64_t members_after_retention = 0;
  int classes_before_prune = 0;
  int classes_after_prune = 0;
  int dropped_degenerate = 0;
};

struct PartitionStats {
  std::int64_t locations_total = 0;
  AxisStats east, north;
  int merged_classes_before_prune = 0;
  int merged_classes_after_prune = 0;
  int merged_dropped_degenerate = 0;
  std::int64_t distinct_retained_ids = 0;
  double retained_fraction = 0.0;
  std::int64_t selected_images_total = 0;
};

struct GroupPartition {
  int group_index = 0;      // 1..2N; east groups come first
  std::string axis;         // "east" or "north"
  int block_group = 0;      // 1..N within the axis
  std::vector<ClassCluster> classes;
};

struct Partition {
  PartitionConfig config;
  std::vector<GroupPartition> groups;       // always exactly 2N entries
  std::vector<ClassCluster> merged_catalog; // both axes combined and re-pruned
  PartitionStats stats;
};

// 1-based block group for one coordinate: blocks of `block_width` meters
// cycle through `group_count` groups along the axis.
int block_group(double coordinate, double min_coordinate, double block_width, int group_count);

struct GroupAssignment {
  double min_easting = 0.0, min_northing = 0.0;
  std::vector<int> east, north;  // 1-based group per location
};
GroupAssignment assign_groups(const std::vector<UtmLocation>& locations,
                              const PartitionConfig& cfg);

// HDBSCAN over a subset of locations; labels come back aligned to `subset`.
HdbscanResult density_cluster(const std::vector<UtmLocation>& locations,
                              const std::vector<std::size_t>& subset, int min_cluster_size);

// Member with the most neighbors within `radius` (closed ball, counting
// itself); ties resolve to the lexicographically smallest id.
std::size_t peak_density(const std::vector<UtmLocation>& locations,
                         const std::vector<std::size_t>& member_idx, double radius);

// Members within the closed ball of `radius` around the peak.
std::vector<std::size_t> radius_retain(const std::vector<UtmLocation>& locations,
                                       const std::vector<std::size_t>& member_idx,
                                       std::size_t peak, double radius);

// Greedy separation filter: classes ordered by size descending (ties by
// smaller peak id) survive if their peak is at least `min_separation` away
// from every survivor so far. Exactly `min_separation` counts as far enough.
std::vector<ClassCluster> prune_close(std::vector<ClassCluster> classes, double min_separation);

// Combined catalog across axes: classes whose peaks coincide collapse into
// one "merged" class over the union of their members, then the whole list
// is pruned again.
std::vector<ClassCluster> merge_directions(const std::vector<ClassCluster>& east,
                                           const std::vector<ClassCluster>& north,
                                           const PartitionConfig& cfg);

// Fills centroid, unit principal directions (each sign-fixed so its first
// nonzero component is positive) and the two focal points. Throws
// DegenerateGeometryError when the members are coincident.
void principal_directions_and_focals(ClassCluster& cls, double focal_distance);

// Compass bearing from one point toward another, degrees in [0, 360).
double compass_bearing(double from_e, double from_n, double to_e, double to_n);

// Ids of members whose heading points within `tolerance_deg` of the bearing
// toward the focal point. Members without a heading always pass, as does a
// member standing exactly on the focal point.
std::vector<std::string> select_images_toward_focal(const std::vector<UtmLocation>& members,
                                                    double focal_e, double focal_n,
                                                    double tolerance_deg);

// Full pipeline: per-axis block grouping, density clustering, peak
// retention, separation pruning, geometry, image selection, cross-axis
// merge and stage statistics. Degenerate classes are dropped with a warning
// on stderr. Throws ConfigError if nothing survives.
Partition build_partition(const std::vector<UtmLocation>& locations, const PartitionConfig& cfg);

std::string partition_to_json(const Partition& p);
Partition partition_from_json(const std::string& text);

}  // namespace dsvpr
