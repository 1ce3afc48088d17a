#pragma once

// Binary checkpoint container.
//
// Layout (integers little-endian):
//   magic "VDPC" | version u32 | body | crc32 u32
// where body =
//   config_len u32 | config utf-8 key=value block |
//   tensor_count u32 | tensor*
// and each tensor =
//   name_len u32 | name | rank u32 | dims u64 x rank | payload f64-LE x size
// The trailing CRC-32 (IEEE, 0xEDB88320) covers the whole body, so any
// truncation or bit flip after the version field is detected before a single
// tensor is handed to the caller.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "vdp/config.hpp"
#include "vdp/errors.hpp"

namespace vdp {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 4> kCheckpointMagic{'V', 'D', 'P', 'C'};

inline std::uint32_t crc32(const unsigned char* data, std::size_t len,
                           std::uint32_t seed = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = seed ^ 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  TrainConfig config;
  std::uint64_t epoch = 0;
  std::uint64_t adam_steps = 0;
  std::vector<double> val_history;   // one validation objective per epoch
  std::vector<NamedTensor> params;   // model parameters, canonical order
  std::vector<NamedTensor> adam_m;   // first moments, same order/names
  std::vector<NamedTensor> adam_v;   // second moments
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f64(std::vector<unsigned char>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

inline void put_bytes(std::vector<unsigned char>& out, const std::string& s) {
  out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
  const unsigned char* p;
  std::size_t remaining;

  void need(std::size_t n) const {
    if (n > remaining) {
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            "checkpoint truncated: wanted " + std::to_string(n) +
                                " more bytes, have " + std::to_string(remaining));
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    p += 4;
    remaining -= 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    p += 8;
    remaining -= 8;
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    remaining -= n;
    return s;
  }
};

inline void put_tensor(std::vector<unsigned char>& body, const NamedTensor& t) {
  put_u32(body, static_cast<std::uint32_t>(t.name.size()));
  put_bytes(body, t.name);
  put_u32(body, static_cast<std::uint32_t>(t.shape.size()));
  for (auto s : t.shape) put_u64(body, s);
  for (double v : t.data) put_f64(body, v);
}

inline NamedTensor get_tensor(Reader& r) {
  NamedTensor t;
  t.name = r.bytes(r.u32());
  const std::uint32_t rank = r.u32();
  if (rank > 8) {
    throw CheckpointError(CheckpointError::Kind::Malformed,
                          "checkpoint tensor '" + t.name + "' has implausible rank " +
                              std::to_string(rank));
  }
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint64_t dim = r.u64();
    t.shape.push_back(static_cast<std::size_t>(dim));
    n *= static_cast<std::size_t>(dim);
  }
  r.need(n * 8);
  t.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) t.data[i] = r.f64();
  return t;
}

}  // namespace detail

inline void checkpoint_save(const Checkpoint& ckpt, const std::string& path) {
  std::vector<unsigned char> body;
  const std::string cfg = serialize_config(ckpt.config);
  detail::put_u32(body, static_cast<std::uint32_t>(cfg.size()));
  detail::put_bytes(body, cfg);

  std::vector<NamedTensor> meta;
  meta.push_back({"meta.epoch", {}, {static_cast<double>(ckpt.epoch)}});
  meta.push_back({"meta.adam_steps", {}, {static_cast<double>(ckpt.adam_steps)}});
  meta.push_back({"meta.val_history", {ckpt.val_history.size()}, ckpt.val_history});

  const std::size_t count =
      ckpt.params.size() + ckpt.adam_m.size() + ckpt.adam_v.size() + meta.size();
  detail::put_u32(body, static_cast<std::uint32_t>(count));
  for (const auto& t : ckpt.params) detail::put_tensor(body, t);
  for (const auto& t : ckpt.adam_m) {
    detail::put_tensor(body, {"adam.m." + t.name, t.shape, t.data});
  }
  for (const auto& t : ckpt.adam_v) {
    detail::put_tensor(body, {"adam.v." + t.name, t.shape, t.data});
  }
  for (const auto& t : meta) detail::put_tensor(body, t);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(kCheckpointMagic.data(), 4);
  unsigned char ver[4];
  for (int i = 0; i < 4; ++i) ver[i] = static_cast<unsigned char>((kCheckpointVersion >> (8 * i)) & 0xFFu);
  out.write(reinterpret_cast<const char*>(ver), 4);
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  const std::uint32_t crc = crc32(body.data(), body.size());
  unsigned char cb[4];
  for (int i = 0; i < 4; ++i) cb[i] = static_cast<unsigned char>((crc >> (8 * i)) & 0xFFu);
  out.write(reinterpret_cast<const char*>(cb), 4);
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline Checkpoint checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12) {
    throw CheckpointError(CheckpointError::Kind::Truncated,
                          "checkpoint '" + path + "' is too short (" +
                              std::to_string(bytes.size()) + " bytes)");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::BadMagic,
                          "checkpoint '" + path + "' does not start with VDPC");
  }
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= static_cast<std::uint32_t>(bytes[4 + i]) << (8 * i);
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                          "checkpoint '" + path + "' has format version " +
                              std::to_string(version) + ", this build reads " +
                              std::to_string(kCheckpointVersion));
  }
  const std::size_t body_len = bytes.size() - 12;
  const unsigned char* body = bytes.data() + 8;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) {
    stored_crc |= static_cast<std::uint32_t>(bytes[8 + body_len + i]) << (8 * i);
  }
  if (crc32(body, body_len) != stored_crc) {
    throw CheckpointError(CheckpointError::Kind::ChecksumMismatch,
                          "checkpoint '" + path + "' failed its CRC-32 check");
  }

  detail::Reader r{body, body_len};
  Checkpoint ckpt;
  const std::string cfg_text = r.bytes(r.u32());
  try {
    ckpt.config = parse_config(cfg_text);
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointError::Kind::Malformed,
                          std::string("checkpoint config block rejected: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  bool saw_epoch = false, saw_steps = false, saw_history = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t = detail::get_tensor(r);
    if (t.name == "meta.epoch") {
      ckpt.epoch = static_cast<std::uint64_t>(t.data.at(0));
      saw_epoch = true;
    } else if (t.name == "meta.adam_steps") {
      ckpt.adam_steps = static_cast<std::uint64_t>(t.data.at(0));
      saw_steps = true;
    } else if (t.name == "meta.val_history") {
      ckpt.val_history = std::move(t.data);
      saw_history = true;
    } else if (t.name.rfind("adam.m.", 0) == 0) {
      t.name.erase(0, 7);
      ckpt.adam_m.push_back(std::move(t));
    } else if (t.name.rfind("adam.v.", 0) == 0) {
      t.name.erase(0, 7);
      ckpt.adam_v.push_back(std::move(t));
    } else {
      ckpt.params.push_back(std::move(t));
    }
  }
  if (r.remaining != 0) {
    throw CheckpointError(CheckpointError::Kind::Malformed,
                          "checkpoint '" + path + "' has " + std::to_string(r.remaining) +
                              " unexpected trailing bytes in its body");
  }
  if (!saw_epoch || !saw_steps || !saw_history) {
    throw CheckpointError(CheckpointError::Kind::MissingTensor,
                          "checkpoint '" + path + "' is missing bookkeeping tensors");
  }
  return ckpt;
}

}  // namespace vdp
