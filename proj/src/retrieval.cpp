#include "dsvpr/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "dsvpr/errors.hpp"

namespace dsvpr {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'F', 'V'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kFlagPosition = 0x01;
constexpr std::uint8_t kFlagFrame = 0x02;

void append_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::uint64_t pos = 0;

  void need(std::uint64_t n, const char* what) {
    if (pos + n > buf.size())
      throw FormatError(std::string("descriptor file truncated while reading ") + what, pos);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i)
      v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

DescriptorDb::DescriptorDb(int dim) : dim_(dim) {
  if (dim < 1) throw ConfigError("descriptor width must be >= 1");
}

void DescriptorDb::add(DbEntry entry) {
  if (entry.id.empty() || entry.id.size() > 65535)
    throw DataError("descriptor id length must be in [1, 65535]");
  if (static_cast<int>(entry.descriptor.size()) != dim_)
    throw DataError("descriptor for '" + entry.id + "' has width " +
                    std::to_string(entry.descriptor.size()) + ", expected " +
                    std::to_string(dim_));
  double norm_sq = 0.0;
  for (float v : entry.descriptor) norm_sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(norm_sq);
  if (std::abs(norm - 1.0) > 1e-5)
    throw DataError("descriptor for '" + entry.id + "' is not unit length (norm " +
                    std::to_string(norm) + ")");
  if (!ids_.insert(entry.id).second)
    throw DataError("duplicate descriptor id '" + entry.id + "'");
  entries_.push_back(std::move(entry));
}

void DescriptorDb::save(const std::string& path) const {
  std::string out;
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  append_u32(out, static_cast<std::uint32_t>(dim_));
  append_u64(out, static_cast<std::uint64_t>(entries_.size()));
  for (const auto& e : entries_) {
    append_u16(out, static_cast<std::uint16_t>(e.id.size()));
    out.append(e.id);
    std::uint8_t flags = 0;
    if (e.position) flags |= kFlagPosition;
    if (e.frame) flags |= kFlagFrame;
    out.push_back(static_cast<char>(flags));
    if (e.position) {
      append_u64(out, std::bit_cast<std::uint64_t>((*e.position)[0]));
      append_u64(out, std::bit_cast<std::uint64_t>((*e.position)[1]));
    }
    if (e.frame) append_u64(out, std::bit_cast<std::uint64_t>(*e.frame));
    for (float v : e.descriptor) append_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("short write to '" + path + "'");
}

DescriptorDb DescriptorDb::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for reading");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  const std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw FormatError("bad magic, not a descriptor file", 0);
  const std::uint8_t version = r.u8("version");
  if (version != kVersion)
    throw FormatError("unsupported descriptor file version " + std::to_string(version), 4);
  const std::uint32_t dim = r.u32("descriptor width");
  if (dim == 0) throw FormatError("descriptor width is zero", 5);
  const std::uint64_t count = r.u64("entry count");

  DescriptorDb db(static_cast<int>(dim));
  for (std::uint64_t i = 0; i < count; ++i) {
    DbEntry e;
    const std::uint16_t id_len = r.u16("id length");
    if (id_len == 0) throw FormatError("empty descriptor id", r.pos - 2);
    e.id = r.bytes(id_len, "id");
    const std::uint8_t flags = r.u8("flags");
    if (flags & ~(kFlagPosition | kFlagFrame))
      throw FormatError("unknown flag bits in entry '" + e.id + "'", r.pos - 1);
    if (flags & kFlagPosition) {
      const double pe = std::bit_cast<double>(r.u64("position"));
      const double pn = std::bit_cast<double>(r.u64("position"));
      e.position = {pe, pn};
    }
    if (flags & kFlagFrame) e.frame = std::bit_cast<std::int64_t>(r.u64("frame"));
    e.descriptor.resize(dim);
    r.need(static_cast<std::uint64_t>(dim) * 4, "descriptor data");
    for (auto& v : e.descriptor) v = std::bit_cast<float>(r.u32("descriptor data"));
    db.add(std::move(e));
  }
  if (r.pos != buf.size()) throw FormatError("trailing bytes after last entry", r.pos);
  return db;
}

std::vector<SearchHit> search_topk(const DescriptorDb& db, const std::vector<float>& query,
                                   int k) {
  if (static_cast<int>(query.size()) != db.dim())
    throw DimensionError("search_topk: query width does not match database");
  const auto clamped = static_cast<std::size_t>(
      std::clamp<std::int64_t>(k, 0, static_cast<std::int64_t>(db.size())));
  std::vector<SearchHit> hits;
  hits.reserve(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto& d = db.entry(i).descriptor;
    double score = 0.0;
    for (std::size_t j = 0; j < d.size(); ++j)
      score += static_cast<double>(d[j]) * static_cast<double>(query[j]);
    hits.push_back({i, db.entry(i).id, score});
  }
  std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  hits.resize(clamped);
  return hits;
}

RecallReport recall_at_n(const DescriptorDb& db, const DescriptorDb& queries,
                         const std::vector<int>& ns, const GroundTruth& gt) {
  if (ns.empty()) throw ConfigError("recall_at_n: no cutoffs given");
  for (int n : ns)
    if (n < 1) throw ConfigError("recall_at_n: cutoffs must be >= 1");
  if (db.size() == 0) throw ConfigError("recall_at_n: empty database");
  if (db.dim() != queries.dim())
    throw DimensionError("recall_at_n: query and database widths differ");

  auto relevant = [&](const DbEntry& q, const DbEntry& d) {
    if (gt.kind == GroundTruth::Kind::Geo) {
      if (!q.position || !d.position)
        throw ConfigError("recall_at_n: entry '" + (q.position ? d.id : q.id) +
                          "' has no position but geo ground truth was requested");
      return std::hypot((*q.position)[0] - (*d.position)[0],
                        (*q.position)[1] - (*d.position)[1]) <= gt.radius;
    }
    if (!q.frame || !d.frame)
      throw ConfigError("recall_at_n: entry '" + (q.frame ? d.id : q.id) +
                        "' has no frame index but frame ground truth was requested");
    return std::llabs(static_cast<long long>(*q.frame - *d.frame)) <=
           static_cast<long long>(gt.window);
  };

  const int max_n = *std::max_element(ns.begin(), ns.end());
  RecallReport report;
  report.ns = ns;
  report.recall.assign(ns.size(), 0.0);
  std::vector<std::int64_t> hits_at(ns.size(), 0);
  for (const auto& q : queries.entries()) {
    bool any_relevant = false;
    for (const auto& d : db.entries())
      if (relevant(q, d)) {
        any_relevant = true;
        break;
      }
    if (!any_relevant) {
      ++report.queries_skipped;
      continue;
    }
    ++report.queries_evaluated;
    const auto top = search_topk(db, q.descriptor, max_n);
    // First relevant rank decides every cutoff at once.
    std::size_t first_relevant = top.size();
    for (std::size_t r = 0; r < top.size(); ++r)
      if (relevant(q, db.entry(top[r].index))) {
        first_relevant = r;
        break;
      }
    for (std::size_t i = 0; i < ns.size(); ++i)
      if (first_relevant < static_cast<std::size_t>(ns[i])) ++hits_at[i];
  }
  if (report.queries_evaluated > 0)
    for (std::size_t i = 0; i < ns.size(); ++i)
      report.recall[i] =
          static_cast<double>(hits_at[i]) / static_cast<double>(report.queries_evaluated);
  return report;
}

}  // namespace dsvpr
