#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dsvpr/errors.hpp"
#include "dsvpr/retrieval.hpp"
#include "dsvpr/rng.hpp"

using namespace dsvpr;

namespace {

std::vector<float> unit_descriptor(int dim, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  for (auto& x : v) {
    x = static_cast<float>(rng.normal());
    norm += static_cast<double>(x) * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x = static_cast<float>(x / norm);
  // One more float-precision pass so the stored norm is as close to 1 as
  // the format itself can represent.
  double n2 = 0.0;
  for (auto x : v) n2 += static_cast<double>(x) * x;
  n2 = std::sqrt(n2);
  for (auto& x : v) x = static_cast<float>(x / n2);
  return v;
}

DbEntry entry(std::string id, std::vector<float> d) {
  DbEntry e;
  e.id = std::move(id);
  e.descriptor = std::move(d);
  return e;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("descriptor files round trip bit for bit") {
  Rng rng(61);
  DescriptorDb db(4);

  DbEntry full = entry("q000001", unit_descriptor(4, rng));
  full.position = {{331000.25, 5621000.5}};
  full.frame = 42;
  db.add(full);

  DbEntry pos_only = entry("q000002", unit_descriptor(4, rng));
  pos_only.position = {{331010.0, 5621020.0}};
  db.add(pos_only);

  DbEntry frame_only = entry("q000003", unit_descriptor(4, rng));
  frame_only.frame = -7;
  db.add(frame_only);

  db.add(entry("q000004", unit_descriptor(4, rng)));

  const std::string path = "rt.dsfv";
  db.save(path);
  const DescriptorDb r = DescriptorDb::load(path);

  REQUIRE(r.size() == db.size());
  REQUIRE(r.dim() == 4);
  for (std::size_t i = 0; i < db.size(); ++i) {
    const DbEntry& a = db.entry(i);
    const DbEntry& b = r.entry(i);
    CHECK(a.id == b.id);
    CHECK(a.position == b.position);
    CHECK(a.frame == b.frame);
    REQUIRE(a.descriptor.size() == b.descriptor.size());
    CHECK(std::memcmp(a.descriptor.data(), b.descriptor.data(),
                      a.descriptor.size() * sizeof(float)) == 0);
  }

  const std::string again = "rt2.dsfv";
  r.save(again);
  CHECK(slurp(path) == slurp(again));
  std::remove(path.c_str());
  std::remove(again.c_str());
}

TEST_CASE("descriptor file corruption reports offsets") {
  Rng rng(62);
  DescriptorDb db(3);
  db.add(entry("a", unit_descriptor(3, rng)));
  const std::string path = "bad.dsfv";
  db.save(path);
  const std::string good = slurp(path);

  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = '?';
    spit(path, bad);
    CHECK_THROWS_WITH_AS(DescriptorDb::load(path), doctest::Contains("byte offset 0)"),
                         FormatError);
  }
  SUBCASE("bad version") {
    std::string bad = good;
    bad[4] = 7;
    spit(path, bad);
    CHECK_THROWS_WITH_AS(DescriptorDb::load(path), doctest::Contains("byte offset 4)"),
                         FormatError);
  }
  SUBCASE("unknown flag bits") {
    std::string bad = good;
    // Layout: magic 4, version 1, dim 4, count 8, id_len 2, id 1, flags.
    bad[20] = static_cast<char>(0x80);
    spit(path, bad);
    CHECK_THROWS_AS(DescriptorDb::load(path), FormatError);
  }
  SUBCASE("truncated descriptor data") {
    spit(path, good.substr(0, good.size() - 2));
    CHECK_THROWS_AS(DescriptorDb::load(path), FormatError);
  }
  SUBCASE("trailing bytes") {
    spit(path, good + "x");
    CHECK_THROWS_AS(DescriptorDb::load(path), FormatError);
  }
  std::remove(path.c_str());
}

TEST_CASE("the database validates entries as they arrive") {
  Rng rng(63);
  DescriptorDb db(3);
  db.add(entry("a", unit_descriptor(3, rng)));

  CHECK_THROWS_AS(db.add(entry("a", unit_descriptor(3, rng))), DataError);  // duplicate
  CHECK_THROWS_AS(db.add(entry("", unit_descriptor(3, rng))), DataError);   // empty id
  CHECK_THROWS_AS(db.add(entry("b", {1.0f, 0.0f})), DataError);             // wrong width

  auto off = unit_descriptor(3, rng);
  for (auto& x : off) x *= 0.9f;
  CHECK_THROWS_AS(db.add(entry("c", off)), DataError);  // norm 0.9 is far from unit

  CHECK_THROWS_AS(DescriptorDb(0), ConfigError);
}

TEST_CASE("search is exact, tie-broken by id, and clamps k") {
  DescriptorDb db(2);
  db.add(entry("bbb", {1.0f, 0.0f}));
  db.add(entry("aaa", {1.0f, 0.0f}));  // same descriptor, later insertion
  db.add(entry("ccc", {0.0f, 1.0f}));

  const std::vector<float> q{1.0f, 0.0f};
  const auto top = search_topk(db, q, 10);  // k larger than the db clamps
  REQUIRE(top.size() == 3);
  CHECK(top[0].id == "aaa");  // tie with bbb resolves by id
  CHECK(top[1].id == "bbb");
  CHECK(top[0].score == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(top[2].id == "ccc");

  CHECK(search_topk(db, q, 0).empty());
  CHECK(search_topk(db, q, 2).size() == 2);
  CHECK_THROWS_AS(search_topk(db, {1.0f}, 1), DimensionError);
}

TEST_CASE("recall matches a brute-force oracle on random data") {
  Rng rng(64);
  const int dim = 8;
  DescriptorDb db(dim);
  std::vector<DbEntry> db_entries;
  for (int i = 0; i < 40; ++i) {
    DbEntry e = entry("d" + std::to_string(100 + i), unit_descriptor(dim, rng));
    e.position = {{rng.uniform(0.0, 200.0), rng.uniform(0.0, 200.0)}};
    db_entries.push_back(e);
    db.add(e);
  }
  DescriptorDb queries(dim);
  std::vector<DbEntry> q_entries;
  for (int i = 0; i < 15; ++i) {
    DbEntry e = entry("q" + std::to_string(100 + i), unit_descriptor(dim, rng));
    e.position = {{rng.uniform(0.0, 200.0), rng.uniform(0.0, 200.0)}};
    q_entries.push_back(e);
    queries.add(e);
  }

  GroundTruth gt;
  gt.kind = GroundTruth::Kind::Geo;
  gt.radius = 25.0;
  const std::vector<int> ns{1, 5, 10};
  const RecallReport rep = recall_at_n(db, queries, ns, gt);

  // Brute force: rank by the same double-accumulated inner product, break
  // ties by id, count first relevant rank per query.
  std::vector<std::int64_t> oracle_hits(ns.size(), 0);
  std::int64_t evaluated = 0, skipped = 0;
  for (const auto& q : q_entries) {
    auto rel = [&](const DbEntry& d) {
      return std::hypot((*q.position)[0] - (*d.position)[0],
                        (*q.position)[1] - (*d.position)[1]) <= gt.radius;
    };
    if (std::none_of(db_entries.begin(), db_entries.end(), rel)) {
      ++skipped;
      continue;
    }
    ++evaluated;
    std::vector<std::pair<double, std::string>> ranked;
    std::vector<std::size_t> order(db_entries.size());
    for (std::size_t i = 0; i < db_entries.size(); ++i) {
      double s = 0.0;
      for (int j = 0; j < dim; ++j)
        s += static_cast<double>(db_entries[i].descriptor[static_cast<std::size_t>(j)]) *
             static_cast<double>(q.descriptor[static_cast<std::size_t>(j)]);
      ranked.push_back({s, db_entries[i].id});
      order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (ranked[a].first != ranked[b].first) return ranked[a].first > ranked[b].first;
      return ranked[a].second < ranked[b].second;
    });
    std::size_t first = order.size();
    for (std::size_t r = 0; r < order.size(); ++r)
      if (rel(db_entries[order[r]])) {
        first = r;
        break;
      }
    for (std::size_t k = 0; k < ns.size(); ++k)
      if (first < static_cast<std::size_t>(ns[k])) ++oracle_hits[k];
  }

  CHECK(rep.queries_evaluated == evaluated);
  CHECK(rep.queries_skipped == skipped);
  REQUIRE(evaluated > 0);
  for (std::size_t k = 0; k < ns.size(); ++k)
    CHECK(rep.recall[k] == static_cast<double>(oracle_hits[k]) / static_cast<double>(evaluated));

  // Recall is monotone in the cutoff.
  CHECK(rep.recall[0] <= rep.recall[1]);
  CHECK(rep.recall[1] <= rep.recall[2]);
}

TEST_CASE("frame ground truth uses a symmetric window") {
  Rng rng(65);
  const int dim = 4;
  DescriptorDb db(dim);
  for (int i = 0; i < 4; ++i) {
    DbEntry e = entry("f" + std::to_string(i), unit_descriptor(dim, rng));
    e.frame = (i == 3) ? 10 : i;
    db.add(e);
  }
  DescriptorDb queries(dim);
  DbEntry q = entry("q", db.entry(3).descriptor);  // nearest neighbor is frame 10
  q.frame = 1;
  queries.add(q);

  GroundTruth gt;
  gt.kind = GroundTruth::Kind::Frame;
  gt.window = 2;
  const RecallReport rep = recall_at_n(db, queries, {1, 4}, gt);
  CHECK(rep.queries_evaluated == 1);
  // Top hit is frame 10 (same descriptor) which is outside the window, so
  // recall@1 misses; the window members appear later in the ranking.
  CHECK(rep.recall[0] == 0.0);
  CHECK(rep.recall[1] == 1.0);
}

TEST_CASE("queries with no relevant entry are skipped, not counted") {
  Rng rng(66);
  DescriptorDb db(3);
  DbEntry a = entry("a", unit_descriptor(3, rng));
  a.position = {{0.0, 0.0}};
  db.add(a);

  DescriptorDb queries(3);
  DbEntry far = entry("far", unit_descriptor(3, rng));
  far.position = {{5000.0, 5000.0}};
  queries.add(far);

  GroundTruth gt;
  const RecallReport rep = recall_at_n(db, queries, {1}, gt);
  CHECK(rep.queries_evaluated == 0);
  CHECK(rep.queries_skipped == 1);
  CHECK(rep.recall[0] == 0.0);
}

TEST_CASE("recall demands the metadata its ground truth needs") {
  Rng rng(67);
  DescriptorDb db(3);
  db.add(entry("nometa", unit_descriptor(3, rng)));  // no position, no frame

  DescriptorDb queries(3);
  DbEntry q = entry("q", unit_descriptor(3, rng));
  q.position = {{0.0, 0.0}};
  q.frame = 0;
  queries.add(q);

  GroundTruth geo;
  CHECK_THROWS_WITH_AS(recall_at_n(db, queries, {1}, geo), doctest::Contains("nometa"),
                       ConfigError);
  GroundTruth frame;
  frame.kind = GroundTruth::Kind::Frame;
  CHECK_THROWS_AS(recall_at_n(db, queries, {1}, frame), ConfigError);

  CHECK_THROWS_AS(recall_at_n(db, queries, {}, geo), ConfigError);
  CHECK_THROWS_AS(recall_at_n(db, queries, {0}, geo), ConfigError);
  CHECK_THROWS_AS(recall_at_n(DescriptorDb(3), queries, {1}, geo), ConfigError);
}
