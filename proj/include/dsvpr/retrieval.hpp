#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

namespace dsvpr {

struct DbEntry {
  std::string id;
  std::optional<std::array<double, 2>> position;  // easting, northing
  std::optional<std::int64_t> frame;
  std::vector<float> descriptor;  // unit length within 1e-5
};

// Flat store of unit-norm descriptors behind the .dsfv format. Entry order
// is insertion order and serialization is a pure function of the contents.
class DescriptorDb {
 public:
  explicit DescriptorDb(int dim);

  void add(DbEntry entry);  // validates width, norm and id uniqueness
  int dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<DbEntry>& entries() const { return entries_; }
  const DbEntry& entry(std::size_t i) const { return entries_.at(i); }

  void save(const std::string& path) const;
  static DescriptorDb load(const std::string& path);

 private:
  int dim_;
  std::vector<DbEntry> entries_;
  std::unordered_set<std::string> ids_;
};

struct SearchHit {
  std::size_t index = 0;  // into db.entries()
  std::string id;
  double score = 0.0;  // inner product; cosine for unit vectors
};

// Exact top-k by inner product, descending, ties broken by ascending id.
// k is clamped to the database size.
std::vector<SearchHit> search_topk(const DescriptorDb& db, const std::vector<float>& query,
                                   int k);

struct GroundTruth {
  enum class Kind { Geo, Frame };
  Kind kind = Kind::Geo;
  double radius = 25.0;        // meters, Kind::Geo
  std::int64_t window = 2;     // frames either side, Kind::Frame
};

struct RecallReport {
  std::vector<int> ns;
  std::vector<double> recall;           // aligned with ns
  std::int64_t queries_evaluated = 0;   // queries that have at least one relevant entry
  std::int64_t queries_skipped = 0;     // queries with no relevant entry at all
};

// Recall@N over all query descriptors: a query scores at N if any of its
// top-N results is relevant (within the geo radius, or the frame window).
// Queries with no relevant database entry are excluded from the ratio.
// Missing metadata needed by the ground-truth rule raises ConfigError.
RecallReport recall_at_n(const DescriptorDb& db, const DescriptorDb& queries,
                         const std::vector<int>& ns, const GroundTruth& gt);

}  // namespace dsvpr
