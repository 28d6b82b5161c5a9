#pragma once

#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "pairaug/io.hpp"
#include "pairaug/sha256.hpp"
#include "pairaug/tensor.hpp"

namespace pairaug {

/// Named-tensor container with metadata. On disk: "PACK" magic, u32 version,
/// u64 header length, JSON header (schema_version, meta, tensor directory),
/// float32 LE payload, then a 32-byte sha256 of everything preceding it.
/// The digest doubles as the content hash, so identical state always
/// serializes to identical bytes.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, nn::Tensor<float>>> tensors;

  const nn::Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  std::string encode() const {
    nlohmann::ordered_json header;
    header["schema_version"] = kVersion;
    header["meta"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : meta) header["meta"][k] = v;
    auto dir = nlohmann::ordered_json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
      dir.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
      offset += static_cast<uint64_t>(t.numel()) * 4;
    }
    header["tensors"] = std::move(dir);
    const std::string hjson = header.dump();

    std::string out;
    out.append("PACK", 4);
    io::put_u32(out, kVersion);
    io::put_u64(out, hjson.size());
    out += hjson;
    for (const auto& [name, t] : tensors) {
      (void)name;
      if constexpr (std::endian::native == std::endian::little) {
        const size_t off = out.size();
        out.resize(off + t.data.size() * 4);
        std::memcpy(out.data() + off, t.data.data(), t.data.size() * 4);
      } else {
        for (float v : t.data) io::put_f32(out, v);
      }
    }
    Sha256 h;
    h.update(out.data(), out.size());
    out += h.digest_bytes();
    return out;
  }

  /// Hex sha256 of the serialized state (the digest stored in the trailer).
  std::string content_hash() const {
    const std::string bytes = encode();
    return Sha256::to_hex(bytes.substr(bytes.size() - 32));
  }

  void save(const std::filesystem::path& path) const { io::write_file_atomic(path, encode()); }

  static Checkpoint decode(const std::string& bytes, const std::string& what) {
    PAIRAUG_CHECK(bytes.size() >= 4 + 4 + 8 + 32, SchemaError, what, ": checkpoint too small");
    const std::string body = bytes.substr(0, bytes.size() - 32);
    const std::string trailer = bytes.substr(bytes.size() - 32);
    Sha256 h;
    h.update(body.data(), body.size());
    PAIRAUG_CHECK(h.digest_bytes() == trailer, ChecksumError, what,
                  ": checkpoint digest mismatch (corrupt or truncated file)");

    io::ByteReader r(body, what);
    PAIRAUG_CHECK(r.bytes(4) == "PACK", SchemaError, what, ": bad checkpoint magic");
    const uint32_t version = r.u32();
    PAIRAUG_CHECK(version == kVersion, SchemaError, what, ": unsupported checkpoint version ",
                  version);
    const uint64_t hlen = r.u64();
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(r.bytes(hlen));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(cat(what, ": malformed checkpoint header: ", e.what()));
    }
    PAIRAUG_CHECK(header.value("schema_version", 0u) == kVersion, SchemaError, what,
                  ": header schema_version mismatch");

    Checkpoint ck;
    for (const auto& [k, v] : header.at("meta").items())
      ck.meta[k] = v.get<std::string>();
    for (const auto& entry : header.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
      nn::Tensor<float> t(shape);
      r.f32_into(t.data.data(), t.data.size());
      ck.tensors.emplace_back(name, std::move(t));
    }
    r.expect_end();
    return ck;
  }

  static Checkpoint load(const std::filesystem::path& path) {
    return decode(io::read_file(path), path.string());
  }
};

}  // namespace pairaug
