#pragma once

#include <array>
#include <vector>

namespace dsvpr {

struct HdbscanResult {
  std::vector<int> labels;  // -1 for noise, otherwise compact 0-based ids
  int cluster_count = 0;
};

// Density clustering over 2-D points: mutual-reachability single linkage,
// condensed by minimum cluster size, clusters extracted by excess of mass.
// The tree root competes like any other cluster, so a dataset that is one
// dense blob yields that blob instead of all-noise. Fewer than
// min_cluster_size points are all noise. Deterministic: ties in the spanning
// tree and linkage order are broken by point index.
HdbscanResult hdbscan(const std::vector<std::array<double, 2>>& points, int min_cluster_size);

}  // namespace dsvpr
