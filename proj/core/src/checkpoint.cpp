#include "dsd/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "dsd/error.hpp"

namespace dsd::io {

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

bool Checkpoint::has_prefix(std::string_view prefix) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& e) { return e.first.starts_with(prefix); });
}

namespace {

constexpr char kMagic[4] = {'D', 'S', 'D', '1'};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  std::vector<unsigned char> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : bytes_(b) {}
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) throw DataError(std::string("checkpoint: truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_++]} << (8 * i);
    return v;
  }
  std::span<const unsigned char> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const unsigned char> payload) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  std::size_t off = 0;
  while (off < payload.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(payload.size() - off, 1u << 30));
    crc = crc32(crc, payload.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& checkpoint) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u8(1);  // little-endian payload
  w.u8(0);
  w.u8(0);
  w.u8(0);
  w.u64(checkpoint.step);
  w.u32(static_cast<std::uint32_t>(checkpoint.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : checkpoint.tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    w.u64(offset);
    w.u64(t.numel());
    offset += 8 * t.numel();
  }
  w.u64(offset);
  const std::size_t payload_start = w.bytes.size();
  for (const auto& entry : checkpoint.tensors)
    for (double v : entry.second.data()) w.f64(v);
  const std::uint32_t crc =
      crc_of(std::span<const unsigned char>(w.bytes).subspan(payload_start, w.bytes.size() - payload_start));
  w.u32(crc);
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw DataError("checkpoint: bad magic (expected DSD1)");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  if (r.u8("endianness flag") != 1) throw DataError("checkpoint: only little-endian payloads are supported");
  r.take(3, "reserved bytes");
  Checkpoint out;
  out.step = r.u64("step");
  const auto count = r.u32("tensor count");

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset, count;
  };
  std::vector<Entry> dir;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto len = r.u32("name length");
    const auto name = r.take(len, "tensor name");
    e.name.assign(name.begin(), name.end());
    if (e.name.empty() || !names.insert(e.name).second)
      throw DataError("checkpoint: empty or duplicate tensor name in directory");
    const auto rank = r.u32("rank");
    if (rank > 16) throw DataError("checkpoint: implausible rank for " + e.name);
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.u64("dimension"));
    e.offset = r.u64("offset");
    e.count = r.u64("element count");
    if (numel(e.shape) != e.count) throw DataError("checkpoint: element count disagrees with shape for " + e.name);
    dir.push_back(std::move(e));
  }
  const auto payload_size = r.u64("payload size");
  if (payload_size % 8 != 0) throw DataError("checkpoint: payload size is not a multiple of 8");
  if (r.remaining() < payload_size + 4) throw DataError("checkpoint: truncated payload");
  const auto payload = r.take(payload_size, "payload");
  const auto stored_crc = r.u32("checksum");
  if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes after checksum");
  if (crc_of(payload) != stored_crc) throw DataError("checkpoint: checksum mismatch (payload corrupted)");

  // Directory extents must be in bounds and pairwise disjoint.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> extents;
  for (const auto& e : dir) {
    if (e.offset % 8 != 0 || e.offset > payload_size || e.count > (payload_size - e.offset) / 8)
      throw DataError("checkpoint: tensor " + e.name + " lies outside the payload");
    extents.emplace_back(e.offset, e.offset + 8 * e.count);
  }
  std::sort(extents.begin(), extents.end());
  for (std::size_t i = 1; i < extents.size(); ++i)
    if (extents[i].first < extents[i - 1].second) throw DataError("checkpoint: overlapping tensor extents");

  for (const auto& e : dir) {
    std::vector<double> v(e.count);
    for (std::uint64_t k = 0; k < e.count; ++k) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= std::uint64_t{payload[e.offset + 8 * k + b]} << (8 * b);
      v[k] = std::bit_cast<double>(bits);
    }
    out.tensors.emplace_back(e.name, Tensor(e.shape, std::move(v)));
  }
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_latents(const std::filesystem::path& path, const Tensor& latents) {
  Checkpoint c;
  c.tensors.emplace_back("latents", latents.detached());
  write_checkpoint(path, c);
}

Tensor read_latents(const std::filesystem::path& path) {
  const auto c = read_checkpoint(path);
  const Tensor* t = c.find("latents");
  if (!t) throw DataError(path.string() + ": no tensor named latents");
  return *t;
}

}  // namespace dsd::io
