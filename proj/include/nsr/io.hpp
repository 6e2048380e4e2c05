#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "nsr/nn.hpp"
#include "nsr/schedule.hpp"
#include "nsr/tensor.hpp"

// Binary file formats. All integers little-endian; all floats IEEE float32.
//   RVT1 tensor:      "RVT1" | u8 ndim | u32 dims[] | f32 payload (row-major)
//   checkpoint:       magic4 | u64 step | u64 seed | u32 cfg_len | cfg text
//                     | u32 count | count x (u32 name_len | name | RVT1 blob)
//   RVI1 index maps:  "RVI1" | u8 K | K x (u16 h | u16 w | u32 idx[h*w])
//   images:           binary PPM (P6), maxval 255

namespace nsr {

struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

namespace detail {

struct ByteWriter {
  std::vector<uint8_t> buf;
  void raw(const void* p, size_t n) {
    const uint8_t* b = (const uint8_t*)p;
    buf.insert(buf.end(), b, b + n);
  }
  void u8(uint8_t v) { buf.push_back(v); }
  void u16(uint16_t v) {
    for (int i = 0; i < 2; ++i) buf.push_back((uint8_t)(v >> (8 * i)));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back((uint8_t)(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back((uint8_t)(v >> (8 * i)));
  }
  void f32s(const float* p, size_t n) {
    static_assert(sizeof(float) == 4);
    raw(p, n * 4);
  }
  void str(const std::string& s) {
    u32((uint32_t)s.size());
    raw(s.data(), s.size());
  }
};

struct ByteReader {
  const uint8_t* p;
  size_t n, pos = 0;
  std::string where;
  ByteReader(const std::vector<uint8_t>& b, std::string w) : p(b.data()), n(b.size()), where(std::move(w)) {}
  void need(size_t k) {
    if (pos + k > n) throw IoError(where + ": truncated file at byte " + std::to_string(pos));
  }
  void raw(void* dst, size_t k) {
    need(k);
    std::memcpy(dst, p + pos, k);
    pos += k;
  }
  uint8_t u8() {
    need(1);
    return p[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = (uint16_t)(p[pos] | (p[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= (uint32_t)p[pos + (size_t)i] << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)p[pos + (size_t)i] << (8 * i);
    pos += 8;
    return v;
  }
  std::string str() {
    uint32_t k = u32();
    need(k);
    std::string s((const char*)p + pos, k);
    pos += k;
    return s;
  }
  bool done() const { return pos == n; }
};

}  // namespace detail

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  f.seekg(0, std::ios::end);
  std::vector<uint8_t> buf((size_t)f.tellg());
  f.seekg(0);
  f.read((char*)buf.data(), (std::streamsize)buf.size());
  if (!f) throw IoError("read failed for " + path);
  return buf;
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& buf) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot create " + path);
  f.write((const char*)buf.data(), (std::streamsize)buf.size());
  if (!f) throw IoError("write failed for " + path);
}

// ---- RVT1 ----

namespace detail {
inline void tensor_blob(ByteWriter& w, const Shape& shape, const std::vector<float>& val) {
  w.raw("RVT1", 4);
  w.u8((uint8_t)shape.size());
  for (int d : shape) w.u32((uint32_t)d);
  w.f32s(val.data(), val.size());
}

inline std::pair<Shape, std::vector<float>> read_tensor_blob(ByteReader& r) {
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "RVT1", 4) != 0)
    throw IoError(r.where + ": bad tensor magic at byte " + std::to_string(r.pos - 4));
  uint8_t nd = r.u8();
  if (nd == 0 || nd > 8) throw IoError(r.where + ": tensor rank " + std::to_string(nd) + " out of range");
  Shape s((size_t)nd);
  int64_t count = 1;
  for (auto& d : s) {
    d = (int)r.u32();
    if (d <= 0) throw IoError(r.where + ": nonpositive dimension");
    count *= d;
    if (count > (int64_t)1 << 31) throw IoError(r.where + ": tensor too large");
  }
  std::vector<float> v((size_t)count);
  r.raw(v.data(), (size_t)count * 4);
  return {std::move(s), std::move(v)};
}
}  // namespace detail

inline void write_tensor(const std::string& path, const Tensor& t) {
  detail::ByteWriter w;
  detail::tensor_blob(w, t.shape(), t.vec());
  write_file_bytes(path, w.buf);
}

inline Tensor read_tensor(const std::string& path) {
  auto bytes = read_file_bytes(path);
  detail::ByteReader r(bytes, path);
  auto [s, v] = detail::read_tensor_blob(r);
  if (!r.done()) throw IoError(path + ": trailing bytes after tensor payload");
  return Tensor::from(std::move(s), std::move(v), false);
}

// ---- checkpoints ----

struct Checkpoint {
  std::string magic;  // 4 chars
  uint64_t step = 0;
  uint64_t seed = 0;
  std::string config_text;  // key=value lines
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline std::vector<uint8_t> encode_checkpoint(const Checkpoint& c) {
  if (c.magic.size() != 4) throw UsageError("checkpoint magic must be 4 chars");
  detail::ByteWriter w;
  w.raw(c.magic.data(), 4);
  w.u64(c.step);
  w.u64(c.seed);
  w.str(c.config_text);
  w.u32((uint32_t)c.tensors.size());
  for (auto& [name, t] : c.tensors) {
    w.str(name);
    detail::tensor_blob(w, t.shape(), t.vec());
  }
  return std::move(w.buf);
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  write_file_bytes(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::string& path, const std::string& expected_magic) {
  auto bytes = read_file_bytes(path);
  detail::ByteReader r(bytes, path);
  Checkpoint c;
  char magic[4];
  r.raw(magic, 4);
  c.magic.assign(magic, 4);
  if (c.magic != expected_magic)
    throw IoError(path + ": magic '" + c.magic + "' does not match expected '" + expected_magic + "'");
  c.step = r.u64();
  c.seed = r.u64();
  c.config_text = r.str();
  uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    auto [s, v] = detail::read_tensor_blob(r);
    c.tensors.emplace_back(std::move(name), Tensor::from(std::move(s), std::move(v), false));
  }
  if (!r.done()) throw IoError(path + ": trailing bytes after last tensor");
  return c;
}

inline void save_store(const std::string& path, const std::string& magic, uint64_t step,
                       uint64_t seed, const std::string& config_text, const ParamStore& ps) {
  Checkpoint c;
  c.magic = magic;
  c.step = step;
  c.seed = seed;
  c.config_text = config_text;
  for (auto& [n, t] : ps.items) c.tensors.emplace_back(n, t);
  save_checkpoint(path, c);
}

// copies matching records into the store; extra records in the file are
// ignored so a superset checkpoint can feed a smaller module
inline Checkpoint load_store(const std::string& path, const std::string& magic, ParamStore& ps) {
  Checkpoint c = load_checkpoint(path, magic);
  for (auto& [name, t] : ps.items) {
    const Tensor* rec = c.find(name);
    if (!rec) throw IoError(path + ": missing tensor '" + name + "'");
    if (rec->shape() != t.shape())
      throw IoError(path + ": tensor '" + name + "' has shape " + shape_str(rec->shape()) +
                    ", store expects " + shape_str(t.shape()));
    t.vec() = rec->vec();
  }
  return c;
}

// ---- index maps ----

inline void save_index_maps(const std::string& path, const std::vector<IndexMap>& maps) {
  detail::ByteWriter w;
  w.raw("RVI1", 4);
  w.u8((uint8_t)maps.size());
  for (const auto& m : maps) {
    w.u16((uint16_t)m.h);
    w.u16((uint16_t)m.w);
    if ((int)m.idx.size() != m.h * m.w) throw UsageError("index map payload size mismatch");
    for (int v : m.idx) w.u32((uint32_t)v);
  }
  write_file_bytes(path, w.buf);
}

inline std::vector<IndexMap> load_index_maps(const std::string& path) {
  auto bytes = read_file_bytes(path);
  detail::ByteReader r(bytes, path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "RVI1", 4) != 0) throw IoError(path + ": bad index map magic");
  uint8_t k = r.u8();
  std::vector<IndexMap> maps((size_t)k);
  for (auto& m : maps) {
    m.h = r.u16();
    m.w = r.u16();
    if (m.h < 1 || m.w < 1) throw IoError(path + ": empty scale grid");
    m.idx.resize((size_t)m.h * m.w);
    for (auto& v : m.idx) v = (int)r.u32();
  }
  if (!r.done()) throw IoError(path + ": trailing bytes after index maps");
  return maps;
}

// ---- PPM images ----

inline void write_ppm(const std::string& path, const Tensor& img) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw ShapeError("write_ppm: expected [3xHxW], got " + shape_str(img.shape()));
  const int H = img.dim(1), W = img.dim(2);
  std::string header = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  std::vector<uint8_t> buf(header.begin(), header.end());
  buf.reserve(buf.size() + (size_t)H * W * 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = img.at({c, y, x});
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        buf.push_back((uint8_t)(v * 255.f + 0.5f));
      }
  write_file_bytes(path, buf);
}

inline Tensor read_ppm(const std::string& path) {
  auto bytes = read_file_bytes(path);
  size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && (bytes[pos] == ' ' || bytes[pos] == '\n' || bytes[pos] == '\t' ||
                                  bytes[pos] == '\r' || bytes[pos] == '#')) {
      if (bytes[pos] == '#')
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      else
        ++pos;
    }
    std::string t;
    while (pos < bytes.size() && bytes[pos] > ' ') t += (char)bytes[pos++];
    if (t.empty()) throw IoError(path + ": truncated header");
    return t;
  };
  if (token() != "P6") throw IoError(path + ": not a binary PPM");
  int W, H, maxv;
  try {
    W = std::stoi(token());
    H = std::stoi(token());
    maxv = std::stoi(token());
  } catch (const std::exception&) {
    throw IoError(path + ": malformed header");
  }
  if (W < 1 || H < 1 || maxv != 255) throw IoError(path + ": unsupported PPM geometry");
  ++pos;  // single whitespace after maxval
  if (pos + (size_t)W * H * 3 > bytes.size()) throw IoError(path + ": truncated pixel data");
  std::vector<float> v((size_t)3 * H * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        v[((size_t)c * H + y) * W + x] = (float)bytes[pos + ((size_t)y * W + x) * 3 + (size_t)c] / 255.f;
  return Tensor::from({3, H, W}, std::move(v), false);
}

// ---- hashing ----

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const uint8_t* p = (const uint8_t*)data;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t hash_store(const ParamStore& ps) {
  uint64_t h = 1469598103934665603ull;
  for (auto& [n, t] : ps.items) {
    h = fnv1a64(n.data(), n.size(), h);
    h = fnv1a64(t.data(), (size_t)t.numel() * 4, h);
  }
  return h;
}

}  // namespace nsr
