#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfactor/tensor.hpp"

namespace xfactor {

// Versioned tensor container. Layout:
//   "XFCK" | u32 version | u32 meta_len | meta bytes (JSON, may be empty)
//   repeated: u32 name_len | name | u8 dtype (0=f32, 1=f64) | u32 rank
//             | rank x u64 dims | little-endian row-major payload
// Round-trips are bit-exact.
struct CheckpointRecord {
  uint8_t dtype = 0;
  Shape shape;
  std::vector<char> payload;
};

struct Checkpoint {
  uint32_t version = 1;
  std::string meta;
  std::vector<std::pair<std::string, CheckpointRecord>> records;

  const CheckpointRecord* find(const std::string& name) const {
    for (const auto& [n, r] : records)
      if (n == name) return &r;
    return nullptr;
  }
};

namespace detail {
template <typename U>
void write_raw(std::ostream& os, const U& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}
template <typename U>
U read_raw(std::istream& is) {
  U v;
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
}  // namespace detail

template <typename T>
CheckpointRecord to_record(const std::vector<T>& data, const Shape& shape) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  CheckpointRecord rec;
  rec.dtype = std::is_same_v<T, float> ? 0 : 1;
  rec.shape = shape;
  rec.payload.resize(data.size() * sizeof(T));
  std::memcpy(rec.payload.data(), data.data(), rec.payload.size());
  return rec;
}

template <typename T>
CheckpointRecord to_record(const Tensor<T>& t) {
  return to_record(t.data(), t.shape());
}

template <typename T>
std::vector<T> record_values(const CheckpointRecord& rec) {
  const uint8_t want = std::is_same_v<T, float> ? 0 : 1;
  if (rec.dtype != want) throw std::runtime_error("checkpoint: dtype mismatch");
  std::vector<T> out(rec.payload.size() / sizeof(T));
  std::memcpy(out.data(), rec.payload.data(), rec.payload.size());
  return out;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp);
    os.write("XFCK", 4);
    detail::write_raw<uint32_t>(os, ckpt.version);
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(ckpt.meta.size()));
    os.write(ckpt.meta.data(), static_cast<std::streamsize>(ckpt.meta.size()));
    for (const auto& [name, rec] : ckpt.records) {
      detail::write_raw<uint32_t>(os, static_cast<uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_raw<uint8_t>(os, rec.dtype);
      detail::write_raw<uint32_t>(os, static_cast<uint32_t>(rec.shape.size()));
      for (int64_t d : rec.shape) detail::write_raw<uint64_t>(os, static_cast<uint64_t>(d));
      os.write(rec.payload.data(), static_cast<std::streamsize>(rec.payload.size()));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("checkpoint: rename failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "XFCK", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  Checkpoint ckpt;
  ckpt.version = detail::read_raw<uint32_t>(is);
  const uint32_t meta_len = detail::read_raw<uint32_t>(is);
  ckpt.meta.resize(meta_len);
  is.read(ckpt.meta.data(), meta_len);
  if (!is) throw std::runtime_error("checkpoint: truncated meta");
  while (true) {
    uint32_t name_len;
    is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (is.eof()) break;
    if (!is) throw std::runtime_error("checkpoint: truncated record header");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    CheckpointRecord rec;
    rec.dtype = detail::read_raw<uint8_t>(is);
    const uint32_t rank = detail::read_raw<uint32_t>(is);
    int64_t numel = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      rec.shape.push_back(static_cast<int64_t>(detail::read_raw<uint64_t>(is)));
      numel *= rec.shape.back();
    }
    const size_t elem = rec.dtype == 0 ? sizeof(float) : sizeof(double);
    rec.payload.resize(static_cast<size_t>(numel) * elem);
    is.read(rec.payload.data(), static_cast<std::streamsize>(rec.payload.size()));
    if (!is) throw std::runtime_error("checkpoint: truncated payload for " + name);
    ckpt.records.emplace_back(std::move(name), std::move(rec));
  }
  return ckpt;
}

}  // namespace xfactor
