#include "dsvpr/weight_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "dsvpr/errors.hpp"

namespace dsvpr {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'W', 'T'};
constexpr std::uint8_t kVersion = 1;

void append_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_f32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  append_u32(out, bits);
}

// Cursor over a loaded byte buffer; every read checks the remaining length
// and reports the failing offset so truncated files are diagnosable.
struct Reader {
  const std::string& buf;
  std::uint64_t pos = 0;

  void need(std::uint64_t n, const char* what) {
    if (pos + n > buf.size())
      throw FormatError(std::string("weight file truncated while reading ") + what, pos);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

std::int64_t count_elements(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

void WeightStore::put(std::string name, std::vector<std::int64_t> shape,
                      std::vector<float> values) {
  if (name.empty() || name.size() > std::numeric_limits<std::uint16_t>::max())
    throw DataError("weight name length must be in [1, 65535]");
  if (shape.size() > 255) throw DataError("weight rank exceeds 255");
  for (auto d : shape)
    if (d <= 0 || d > std::numeric_limits<std::uint32_t>::max())
      throw DataError("weight extent out of range for '" + name + "'");
  if (count_elements(shape) != static_cast<std::int64_t>(values.size()))
    throw DataError("weight value count does not match shape for '" + name + "'");
  if (index_.count(name)) throw DataError("duplicate weight name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(shape), std::move(values)});
}

void WeightStore::put_tensor(const std::string& name, const Tensor& t) {
  std::vector<float> values(t.data().size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(t.data()[i]);
  put(name, t.shape(), std::move(values));
}

bool WeightStore::contains(const std::string& name) const { return index_.count(name) != 0; }

const WeightEntry& WeightStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw DataError("weight '" + name + "' not found");
  return entries_[it->second];
}

Tensor WeightStore::tensor(const std::string& name, bool requires_grad) const {
  const WeightEntry& e = get(name);
  std::vector<double> values(e.values.begin(), e.values.end());
  return Tensor::from_data(e.shape, std::move(values), requires_grad);
}

void WeightStore::save(const std::string& path) const {
  if (entries_.size() > std::numeric_limits<std::uint32_t>::max())
    throw DataError("too many weights to serialize");
  std::string out;
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  append_u32(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    append_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out.append(e.name);
    out.push_back(static_cast<char>(e.shape.size()));
    for (auto d : e.shape) append_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.values) append_f32(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("short write to '" + path + "'");
}

WeightStore WeightStore::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for reading");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  const std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw FormatError("bad magic, not a weight file", 0);
  const std::uint8_t version = r.u8("version");
  if (version != kVersion)
    throw FormatError("unsupported weight file version " + std::to_string(version), 4);
  const std::uint32_t count = r.u32("tensor count");

  WeightStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16("name length");
    if (name_len == 0) throw FormatError("empty weight name", r.pos - 2);
    std::string name = r.bytes(name_len, "name");
    const std::uint8_t rank = r.u8("rank");
    std::vector<std::int64_t> shape(rank);
    std::int64_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t extent = r.u32("extent");
      if (extent == 0) throw FormatError("zero extent in '" + name + "'", r.pos - 4);
      shape[d] = static_cast<std::int64_t>(extent);
      numel *= shape[d];
    }
    std::vector<float> values(static_cast<std::size_t>(numel));
    r.need(static_cast<std::uint64_t>(numel) * 4, "tensor data");
    for (auto& v : values) v = r.f32("tensor data");
    store.put(std::move(name), std::move(shape), std::move(values));
  }
  if (r.pos != buf.size())
    throw FormatError("trailing bytes after last tensor", r.pos);
  return store;
}

}  // namespace dsvpr
