#include "dsvpr/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "dsvpr/errors.hpp"

namespace dsvpr {

namespace {

double dist2d(double ae, double an, double be, double bn) {
  return std::hypot(ae - be, an - bn);
}

void sort_members_by_id(std::vector<UtmLocation>& members) {
  std::sort(members.begin(), members.end(),
            [](const UtmLocation& a, const UtmLocation& b) { return a.id < b.id; });
}

void fill_selected(ClassCluster& cls, double tolerance_deg) {
  auto s1 = select_images_toward_focal(cls.members, cls.focal1_e, cls.focal1_n, tolerance_deg);
  auto s2 = select_images_toward_focal(cls.members, cls.focal2_e, cls.focal2_n, tolerance_deg);
  s1.insert(s1.end(), s2.begin(), s2.end());
  std::sort(s1.begin(), s1.end());
  s1.erase(std::unique(s1.begin(), s1.end()), s1.end());
  cls.selected_ids = std::move(s1);
}

}  // namespace

void PartitionConfig::validate() const {
  if (!(block_width > 0.0)) throw ConfigError("block_width must be positive");
  if (group_count < 1) throw ConfigError("group_count must be >= 1");
  if (!(retention_radius > 0.0)) throw ConfigError("retention_radius must be positive");
  if (min_separation < 0.0) throw ConfigError("min_separation must be >= 0");
  if (!(focal_distance > 0.0)) throw ConfigError("focal_distance must be positive");
  if (min_cluster_size < 2) throw ConfigError("min_cluster_size must be >= 2");
  if (!(density_radius > 0.0)) throw ConfigError("density_radius must be positive");
  if (heading_tolerance < 0.0 || heading_tolerance > 180.0)
    throw ConfigError("heading_tolerance must lie in [0, 180]");
}

int block_group(double coordinate, double min_coordinate, double block_width, int group_count) {
  if (!(block_width > 0.0) || group_count < 1)
    throw ConfigError("block_group: invalid block width or group count");
  const double period = block_width * group_count;
  double r = std::fmod(coordinate - min_coordinate, period);
  if (r < 0.0) r += period;
  int j = static_cast<int>(std::floor(r / block_width)) + 1;
  if (j > group_count) j = group_count;  // guards the r == period float edge
  return j;
}

GroupAssignment assign_groups(const std::vector<UtmLocation>& locations,
                              const PartitionConfig& cfg) {
  cfg.validate();
  if (locations.empty()) throw ConfigError("assign_groups: no locations");
  GroupAssignment out;
  out.min_easting = locations[0].easting;
  out.min_northing = locations[0].northing;
  for (const auto& l : locations) {
    out.min_easting = std::min(out.min_easting, l.easting);
    out.min_northing = std::min(out.min_northing, l.northing);
  }
  out.east.reserve(locations.size());
  out.north.reserve(locations.size());
  for (const auto& l : locations) {
    out.east.push_back(block_group(l.easting, out.min_easting, cfg.block_width, cfg.group_count));
    out.north.push_back(
        block_group(l.northing, out.min_northing, cfg.block_width, cfg.group_count));
  }
  return out;
}

HdbscanResult density_cluster(const std::vector<UtmLocation>& locations,
                              const std::vector<std::size_t>& subset, int min_cluster_size) {
  std::vector<std::array<double, 2>> pts;
  pts.reserve(subset.size());
  for (std::size_t i : subset) pts.push_back({locations[i].easting, locations[i].northing});
  return hdbscan(pts, min_cluster_size);
}

std::size_t peak_density(const std::vector<UtmLocation>& locations,
                         const std::vector<std::size_t>& member_idx, double radius) {
  if (member_idx.empty()) throw ParameterError("peak_density: empty member set");
  std::size_t best = member_idx[0];
  int best_count = -1;
  for (std::size_t i : member_idx) {
    int count = 0;
    for (std::size_t j : member_idx)
      if (dist2d(locations[i].easting, locations[i].northing, locations[j].easting,
                 locations[j].northing) <= radius)
        ++count;
    if (count > best_count || (count == best_count && locations[i].id < locations[best].id)) {
      best_count = count;
      best = i;
    }
  }
  return best;
}

std::vector<std::size_t> radius_retain(const std::vector<UtmLocation>& locations,
                                       const std::vector<std::size_t>& member_idx,
                                       std::size_t peak, double radius) {
  std::vector<std::size_t> kept;
  for (std::size_t i : member_idx)
    if (dist2d(locations[i].easting, locations[i].northing, locations[peak].easting,
               locations[peak].northing) <= radius)
      kept.push_back(i);
  return kept;
}

std::vector<ClassCluster> prune_close(std::vector<ClassCluster> classes, double min_separation) {
  std::sort(classes.begin(), classes.end(), [](const ClassCluster& a, const ClassCluster& b) {
    if (a.members.size() != b.members.size()) return a.members.size() > b.members.size();
    return a.peak_id < b.peak_id;
  });
  std::vector<ClassCluster> kept;
  for (auto& c : classes) {
    bool ok = true;
    for (const auto& k : kept) {
      if (dist2d(c.peak_e, c.peak_n, k.peak_e, k.peak_n) < min_separation) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(std::move(c));
  }
  return kept;
}

void principal_directions_and_focals(ClassCluster& cls, double focal_distance) {
  if (cls.members.empty()) throw ParameterError("principal_directions: class has no members");
  const double n = static_cast<double>(cls.members.size());
  double ce = 0.0, cn = 0.0;
  for (const auto& m : cls.members) {
    ce += m.easting;
    cn += m.northing;
  }
  ce /= n;
  cn /= n;
  double a = 0.0, b = 0.0, c2 = 0.0;
  for (const auto& m : cls.members) {
    const double de = m.easting - ce, dn = m.northing - cn;
    a += de * de;
    b += de * dn;
    c2 += dn * dn;
  }
  a /= n;
  b /= n;
  c2 /= n;
  if (a == 0.0 && b == 0.0 && c2 == 0.0)
    throw DegenerateGeometryError("class '" + cls.class_id + "' has coincident members");

  double v1e, v1n;
  if (b == 0.0) {
    if (a >= c2) {
      v1e = 1.0;
      v1n = 0.0;
    } else {
      v1e = 0.0;
      v1n = 1.0;
    }
  } else {
    const double lam1 = 0.5 * (a + c2) + std::sqrt(0.25 * (a - c2) * (a - c2) + b * b);
    v1e = b;
    v1n = lam1 - a;
    const double norm = std::hypot(v1e, v1n);
    v1e /= norm;
    v1n /= norm;
  }
  // Sign convention: first nonzero component positive.
  if (v1e < 0.0 || (v1e == 0.0 && v1n < 0.0)) {
    v1e = -v1e;
    v1n = -v1n;
  }
  double v2e = -v1n, v2n = v1e;
  if (v2e < 0.0 || (v2e == 0.0 && v2n < 0.0)) {
    v2e = -v2e;
    v2n = -v2n;
  }

  cls.centroid_e = ce;
  cls.centroid_n = cn;
  cls.dir1_e = v1e;
  cls.dir1_n = v1n;
  cls.dir2_e = v2e;
  cls.dir2_n = v2n;
  cls.focal1_e = ce + focal_distance * v1e;
  cls.focal1_n = cn + focal_distance * v1n;
  cls.focal2_e = ce + focal_distance * v2e;
  cls.focal2_n = cn + focal_distance * v2n;
}

double compass_bearing(double from_e, double from_n, double to_e, double to_n) {
  double deg = std::atan2(to_e - from_e, to_n - from_n) * 180.0 / M_PI;
  if (deg < 0.0) deg += 360.0;
  if (deg >= 360.0) deg -= 360.0;
  return deg;
}

std::vector<std::string> select_images_toward_focal(const std::vector<UtmLocation>& members,
                                                    double focal_e, double focal_n,
                                                    double tolerance_deg) {
  std::vector<std::string> out;
  for (const auto& m : members) {
    if (!m.heading) {
      out.push_back(m.id);
      continue;
    }
    if (m.easting == focal_e && m.northing == focal_n) {
      out.push_back(m.id);  // standing on the focal point, no bearing exists
      continue;
    }
    const double bearing = compass_bearing(m.easting, m.northing, focal_e, focal_n);
    double diff = std::fmod(*m.heading - bearing, 360.0);
    if (diff > 180.0) diff -= 360.0;
    if (diff < -180.0) diff += 360.0;
    if (std::abs(diff) <= tolerance_deg) out.push_back(m.id);
  }
  return out;
}

namespace {

struct AxisOutcome {
  std::vector<GroupPartition> groups;
  std::vector<ClassCluster> all_classes;
  AxisStats stats;
};

AxisOutcome process_axis(const std::vector<UtmLocation>& locations,
                         const std::vector<int>& assignment, const std::string& axis,
                         int group_index_offset, const PartitionConfig& cfg) {
  AxisOutcome out;
  const char prefix = axis == "east" ? 'e' : 'n';
  for (int j = 1; j <= cfg.group_count; ++j) {
    std::vector<std::size_t> subset;
    for (std::size_t i = 0; i < locations.size(); ++i)
      if (assignment[i] == j) subset.push_back(i);

    std::vector<ClassCluster> candidates;
    if (!subset.empty()) {
      const HdbscanResult hd = density_cluster(locations, subset, cfg.min_cluster_size);
      out.stats.clusters += hd.cluster_count;
      for (int lbl : hd.labels)
        if (lbl < 0) ++out.stats.noise_points;
      for (int c = 0; c < hd.cluster_count; ++c) {
        std::vector<std::size_t> midx;
        for (std::size_t k = 0; k < subset.size(); ++k)
          if (hd.labels[k] == c) midx.push_back(subset[k]);
        out.stats.members_before_retention += static_cast<std::int64_t>(midx.size());
        const std::size_t peak = peak_density(locations, midx, cfg.density_radius);
        const auto kept = radius_retain(locations, midx, peak, cfg.retention_radius);
        out.stats.members_after_retention += static_cast<std::int64_t>(kept.size());

        ClassCluster cls;
        cls.source = axis;
        cls.group_index = group_index_offset + j;
        cls.peak_id = locations[peak].id;
        cls.peak_e = locations[peak].easting;
        cls.peak_n = locations[peak].northing;
        cls.class_id = std::string(1, prefix) + "." + cls.peak_id;
        for (std::size_t k : kept) cls.members.push_back(locations[k]);
        sort_members_by_id(cls.members);
        try {
          principal_directions_and_focals(cls, cfg.focal_distance);
        } catch (const DegenerateGeometryError&) {
          ++out.stats.dropped_degenerate;
          std::fprintf(stderr, "warning: dropping class %s, members are coincident\n",
                       cls.class_id.c_str());
          continue;
        }
        fill_selected(cls, cfg.heading_tolerance);
        candidates.push_back(std::move(cls));
      }
    }
    out.stats.classes_before_prune += static_cast<int>(candidates.size());
    auto pruned = prune_close(std::move(candidates), cfg.min_separation);
    std::sort(pruned.begin(), pruned.end(),
              [](const ClassCluster& a, const ClassCluster& b) { return a.peak_id < b.peak_id; });
    out.stats.classes_after_prune += static_cast<int>(pruned.size());
    for (const auto& c : pruned) out.all_classes.push_back(c);
    out.groups.push_back({group_index_offset + j, axis, j, std::move(pruned)});
  }
  return out;
}

std::vector<ClassCluster> merge_axes(const std::vector<ClassCluster>& east,
                                     const std::vector<ClassCluster>& north,
                                     const PartitionConfig& cfg, int* coalesced_before_prune,
                                     int* dropped_degenerate) {
  std::vector<ClassCluster> combined = east;
  std::unordered_map<std::string, std::size_t> by_peak;
  for (std::size_t i = 0; i < combined.size(); ++i) by_peak[combined[i].peak_id] = i;
  std::vector<char> alive(combined.size(), 1);

  for (const auto& nc : north) {
    auto it = by_peak.find(nc.peak_id);
    if (it == by_peak.end()) {
      by_peak[nc.peak_id] = combined.size();
      combined.push_back(nc);
      alive.push_back(1);
      continue;
    }
    // Same physical peak seen from both axes: one place class.
    ClassCluster merged = combined[it->second];
    merged.source = "merged";
    merged.class_id = "m." + merged.peak_id;
    for (const auto& m : nc.members) merged.members.push_back(m);
    sort_members_by_id(merged.members);
    merged.members.erase(std::unique(merged.members.begin(), merged.members.end(),
                                     [](const UtmLocation& a, const UtmLocation& b) {
                                       return a.id == b.id;
                                     }),
                         merged.members.end());
    try {
      principal_directions_and_focals(merged, cfg.focal_distance);
    } catch (const DegenerateGeometryError&) {
      if (dropped_degenerate) ++*dropped_degenerate;
      std::fprintf(stderr, "warning: dropping class %s, members are coincident\n",
                   merged.class_id.c_str());
      alive[it->second] = 0;
      continue;
    }
    fill_selected(merged, cfg.heading_tolerance);
    combined[it->second] = std::move(merged);
  }

  std::vector<ClassCluster> live;
  for (std::size_t i = 0; i < combined.size(); ++i)
    if (alive[i]) live.push_back(std::move(combined[i]));
  if (coalesced_before_prune) *coalesced_before_prune = static_cast<int>(live.size());
  auto pruned = prune_close(std::move(live), cfg.min_separation);
  std::sort(pruned.begin(), pruned.end(),
            [](const ClassCluster& a, const ClassCluster& b) { return a.peak_id < b.peak_id; });
  return pruned;
}

}  // namespace

std::vector<ClassCluster> merge_directions(const std::vector<ClassCluster>& east,
                                           const std::vector<ClassCluster>& north,
                                           const PartitionConfig& cfg) {
  return merge_axes(east, north, cfg, nullptr, nullptr);
}

Partition build_partition(const std::vector<UtmLocation>& locations,
                          const PartitionConfig& cfg) {
  cfg.validate();
  if (locations.empty()) throw ConfigError("build_partition: no locations");
  {
    std::unordered_set<std::string> seen;
    for (const auto& l : locations)
      if (!seen.insert(l.id).second)
        throw DataError("build_partition: duplicate location id '" + l.id + "'");
  }

  const GroupAssignment assignment = assign_groups(locations, cfg);
  Partition p;
  p.config = cfg;
  p.stats.locations_total = static_cast<std::int64_t>(locations.size());

  AxisOutcome east = process_axis(locations, assignment.east, "east", 0, cfg);
  AxisOutcome north = process_axis(locations, assignment.north, "north", cfg.group_count, cfg);
  p.stats.east = east.stats;
  p.stats.north = north.stats;
  p.groups = std::move(east.groups);
  for (auto& g : north.groups) p.groups.push_back(std::move(g));

  p.merged_catalog = merge_axes(east.all_classes, north.all_classes, cfg,
                                &p.stats.merged_classes_before_prune,
                                &p.stats.merged_dropped_degenerate);
  p.stats.merged_classes_after_prune = static_cast<int>(p.merged_catalog.size());

  std::unordered_set<std::string> retained;
  std::int64_t selected_total = 0;
  std::size_t class_total = 0;
  for (const auto& g : p.groups) {
    class_total += g.classes.size();
    for (const auto& c : g.classes) {
      selected_total += static_cast<std::int64_t>(c.selected_ids.size());
      for (const auto& m : c.members) retained.insert(m.id);
    }
  }
  if (class_total == 0) throw ConfigError("build_partition: no classes survived");
  p.stats.distinct_retained_ids = static_cast<std::int64_t>(retained.size());
  p.stats.retained_fraction =
      static_cast<double>(retained.size()) / static_cast<double>(locations.size());
  p.stats.selected_images_total = selected_total;
  return p;
}

// ----- JSON round trip -----

namespace {

using Json = nlohmann::ordered_json;

Json location_to_json(const UtmLocation& m) {
  Json j;
  j["id"] = m.id;
  j["easting"] = m.easting;
  j["northing"] = m.northing;
  if (m.heading) j["heading"] = *m.heading;
  else j["heading"] = nullptr;
  if (m.frame_index) j["frame_index"] = *m.frame_index;
  else j["frame_index"] = nullptr;
  return j;
}

UtmLocation location_from_json(const Json& j) {
  UtmLocation m;
  m.id = j.at("id").get<std::string>();
  m.easting = j.at("easting").get<double>();
  m.northing = j.at("northing").get<double>();
  if (!j.at("heading").is_null()) m.heading = j.at("heading").get<double>();
  if (!j.at("frame_index").is_null()) m.frame_index = j.at("frame_index").get<std::int64_t>();
  return m;
}

Json class_to_json(const ClassCluster& c) {
  Json j;
  j["class_id"] = c.class_id;
  j["source"] = c.source;
  j["group_index"] = c.group_index;
  j["peak_id"] = c.peak_id;
  j["peak"] = {c.peak_e, c.peak_n};
  j["centroid"] = {c.centroid_e, c.centroid_n};
  j["direction1"] = {c.dir1_e, c.dir1_n};
  j["direction2"] = {c.dir2_e, c.dir2_n};
  j["focal1"] = {c.focal1_e, c.focal1_n};
  j["focal2"] = {c.focal2_e, c.focal2_n};
  j["members"] = Json::array();
  for (const auto& m : c.members) j["members"].push_back(location_to_json(m));
  j["selected_ids"] = c.selected_ids;
  return j;
}

ClassCluster class_from_json(const Json& j) {
  ClassCluster c;
  c.class_id = j.at("class_id").get<std::string>();
  c.source = j.at("source").get<std::string>();
  c.group_index = j.at("group_index").get<int>();
  c.peak_id = j.at("peak_id").get<std::string>();
  c.peak_e = j.at("peak").at(0).get<double>();
  c.peak_n = j.at("peak").at(1).get<double>();
  c.centroid_e = j.at("centroid").at(0).get<double>();
  c.centroid_n = j.at("centroid").at(1).get<double>();
  c.dir1_e = j.at("direction1").at(0).get<double>();
  c.dir1_n = j.at("direction1").at(1).get<double>();
  c.dir2_e = j.at("direction2").at(0).get<double>();
  c.dir2_n = j.at("direction2").at(1).get<double>();
  c.focal1_e = j.at("focal1").at(0).get<double>();
  c.focal1_n = j.at("focal1").at(1).get<double>();
  c.focal2_e = j.at("focal2").at(0).get<double>();
  c.focal2_n = j.at("focal2").at(1).get<double>();
  for (const auto& m : j.at("members")) c.members.push_back(location_from_json(m));
  c.selected_ids = j.at("selected_ids").get<std::vector<std::string>>();
  return c;
}

Json config_to_json(const PartitionConfig& cfg) {
  Json j;
  j["block_width"] = cfg.block_width;
  j["group_count"] = cfg.group_count;
  j["retention_radius"] = cfg.retention_radius;
  j["min_separation"] = cfg.min_separation;
  j["focal_distance"] = cfg.focal_distance;
  j["min_cluster_size"] = cfg.min_cluster_size;
  j["density_radius"] = cfg.density_radius;
  j["heading_tolerance"] = cfg.heading_tolerance;
  j["seed"] = cfg.seed;
  return j;
}

PartitionConfig config_from_json(const Json& j) {
  PartitionConfig cfg;
  cfg.block_width = j.at("block_width").get<double>();
  cfg.group_count = j.at("group_count").get<int>();
  cfg.retention_radius = j.at("retention_radius").get<double>();
  cfg.min_separation = j.at("min_separation").get<double>();
  cfg.focal_distance = j.at("focal_distance").get<double>();
  cfg.min_cluster_size = j.at("min_cluster_size").get<int>();
  cfg.density_radius = j.at("density_radius").get<double>();
  cfg.heading_tolerance = j.at("heading_tolerance").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

Json axis_stats_to_json(const AxisStats& s) {
  Json j;
  j["clusters"] = s.clusters;
  j["noise_points"] = s.noise_points;
  j["members_before_retention"] = s.members_before_retention;
  j["members_after_retention"] = s.members_after_retention;
  j["classes_before_prune"] = s.classes_before_prune;
  j["classes_after_prune"] = s.classes_after_prune;
  j["dropped_degenerate"] = s.dropped_degenerate;
  return j;
}

AxisStats axis_stats_from_json(const Json& j) {
  AxisStats s;
  s.clusters = j.at("clusters").get<int>();
  s.noise_points = j.at("noise_points").get<int>();
  s.members_before_retention = j.at("members_before_retention").get<std::int64_t>();
  s.members_after_retention = j.at("members_after_retention").get<std::int64_t>();
  s.classes_before_prune = j.at("classes_before_prune").get<int>();
  s.classes_after_prune = j.at("classes_after_prune").get<int>();
  s.dropped_degenerate = j.at("dropped_degenerate").get<int>();
  return s;
}

}  // namespace

std::string partition_to_json(const Partition& p) {
  Json j;
  j["config"] = config_to_json(p.config);
  j["groups"] = Json::array();
  for (const auto& g : p.groups) {
    Json gj;
    gj["group_index"] = g.group_index;
    gj["axis"] = g.axis;
    gj["block_group"] = g.block_group;
    gj["classes"] = Json::array();
    for (const auto& c : g.classes) gj["classes"].push_back(class_to_json(c));
    j["groups"].push_back(std::move(gj));
  }
  j["merged_catalog"] = Json::array();
  for (const auto& c : p.merged_catalog) j["merged_catalog"].push_back(class_to_json(c));
  Json st;
  st["locations_total"] = p.stats.locations_total;
  st["east"] = axis_stats_to_json(p.stats.east);
  st["north"] = axis_stats_to_json(p.stats.north);
  st["merged_classes_before_prune"] = p.stats.merged_classes_before_prune;
  st["merged_classes_after_prune"] = p.stats.merged_classes_after_prune;
  st["merged_dropped_degenerate"] = p.stats.merged_dropped_degenerate;
  st["distinct_retained_ids"] = p.stats.distinct_retained_ids;
  st["retained_fraction"] = p.stats.retained_fraction;
  st["selected_images_total"] = p.stats.selected_images_total;
  j["stats"] = std::move(st);
  return j.dump(2) + "\n";
}

Partition partition_from_json(const std::string& text) {
  try {
    const Json j = Json::parse(text);
    Partition p;
    p.config = config_from_json(j.at("config"));
    for (const auto& gj : j.at("groups")) {
      GroupPartition g;
      g.group_index = gj.at("group_index").get<int>();
      g.axis = gj.at("axis").get<std::string>();
      g.block_group = gj.at("block_group").get<int>();
      for (const auto& cj : gj.at("classes")) g.classes.push_back(class_from_json(cj));
      p.groups.push_back(std::move(g));
    }
    for (const auto& cj : j.at("merged_catalog"))
      p.merged_catalog.push_back(class_from_json(cj));
    const Json& st = j.at("stats");
    p.stats.locations_total = st.at("locations_total").get<std::int64_t>();
    p.stats.east = axis_stats_from_json(st.at("east"));
    p.stats.north = axis_stats_from_json(st.at("north"));
    p.stats.merged_classes_before_prune = st.at("merged_classes_before_prune").get<int>();
    p.stats.merged_classes_after_prune = st.at("merged_classes_after_prune").get<int>();
    p.stats.merged_dropped_degenerate = st.at("merged_dropped_degenerate").get<int>();
    p.stats.distinct_retained_ids = st.at("distinct_retained_ids").get<std::int64_t>();
    p.stats.retained_fraction = st.at("retained_fraction").get<double>();
    p.stats.selected_images_total = st.at("selected_images_total").get<std::int64_t>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("partition json: ") + e.what());
  }
}

}  // namespace dsvpr
