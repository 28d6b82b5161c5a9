#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pairaug/common.hpp"
#include "pairaug/tensor.hpp"

namespace pairaug::io {

// Little-endian primitive packing. The on-disk formats are defined as LE
// regardless of host order.

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void f32_into(float* dst, size_t count) {
    need(count * 4);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(dst, buf_.data() + pos_, count * 4);
    } else {
      for (size_t i = 0; i < count; ++i) {
        uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
          bits |= static_cast<uint32_t>(static_cast<uint8_t>(buf_[pos_ + i * 4 + b])) << (8 * b);
        std::memcpy(dst + i, &bits, 4);
      }
    }
    pos_ += count * 4;
  }
  size_t pos() const { return pos_; }
  size_t remaining() const { return buf_.size() - pos_; }
  void expect_end() const {
    PAIRAUG_CHECK(pos_ == buf_.size(), SchemaError, what_, ": ", buf_.size() - pos_,
                  " trailing bytes");
  }

 private:
  void need(size_t n) const {
    PAIRAUG_CHECK(pos_ + n <= buf_.size(), SchemaError, what_, ": truncated (need ", n,
                  " bytes at offset ", pos_, ", have ", buf_.size() - pos_, ")");
  }
  const std::string& buf_;
  std::string what_;
  size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  PAIRAUG_CHECK(in.good(), IoError, "cannot open ", path.string(), " for reading");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  PAIRAUG_CHECK(!in.bad(), IoError, "read failed for ", path.string());
  return buf;
}

/// Writes via a temp file in the same directory, then renames into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    PAIRAUG_CHECK(out.good(), IoError, "cannot open ", tmp.string(), " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    PAIRAUG_CHECK(out.good(), IoError, "write failed for ", tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  PAIRAUG_CHECK(!ec, IoError, "rename ", tmp.string(), " -> ", path.string(), ": ", ec.message());
}

// ---------------------------------------------------------------------------
// tensor file format: "PATN" magic, u32 version, u32 rank, u64 dims[rank],
// then row-major float32 little-endian payload.
// ---------------------------------------------------------------------------

inline constexpr char kTensorMagic[4] = {'P', 'A', 'T', 'N'};
inline constexpr uint32_t kTensorVersion = 1;

inline std::string encode_tensor(const nn::Tensor<float>& t) {
  std::string out;
  out.reserve(16 + t.shape.size() * 8 + t.data.size() * 4);
  out.append(kTensorMagic, 4);
  put_u32(out, kTensorVersion);
  put_u32(out, static_cast<uint32_t>(t.shape.size()));
  for (int64_t d : t.shape) put_u64(out, static_cast<uint64_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    const size_t off = out.size();
    out.resize(off + t.data.size() * 4);
    std::memcpy(out.data() + off, t.data.data(), t.data.size() * 4);
  } else {
    for (float v : t.data) put_f32(out, v);
  }
  return out;
}

inline nn::Tensor<float> decode_tensor(const std::string& bytes, const std::string& what) {
  ByteReader r(bytes, what);
  const std::string magic = r.bytes(4);
  PAIRAUG_CHECK(std::memcmp(magic.data(), kTensorMagic, 4) == 0, SchemaError, what,
                ": bad tensor magic");
  const uint32_t version = r.u32();
  PAIRAUG_CHECK(version == kTensorVersion, SchemaError, what, ": unsupported tensor version ",
                version);
  const uint32_t rank = r.u32();
  PAIRAUG_CHECK(rank <= 8, SchemaError, what, ": implausible rank ", rank);
  std::vector<int64_t> shape(rank);
  int64_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    const uint64_t d = r.u64();
    PAIRAUG_CHECK(d > 0 && d <= (1ull << 32), SchemaError, what, ": implausible dim ", d);
    shape[i] = static_cast<int64_t>(d);
    numel *= shape[i];
  }
  nn::Tensor<float> t(shape);
  r.f32_into(t.data.data(), static_cast<size_t>(numel));
  r.expect_end();
  return t;
}

inline void save_tensor(const std::filesystem::path& path, const nn::Tensor<float>& t) {
  write_file_atomic(path, encode_tensor(t));
}

inline nn::Tensor<float> load_tensor(const std::filesystem::path& path) {
  return decode_tensor(read_file(path), path.string());
}

}  // namespace pairaug::io
