#pragma once
// Model checkpoint container.
//
//   magic "VFCK" | u16 version (1) | u64 payload length | payload | u32 CRC32(payload)
//   payload: u32 config length, config text (RunConfig::serialize)
//            u32 tensor count, then per tensor:
//              u16 name length, name, u8 ndim, u32 dims[ndim], f32 values (row-major)
//
// All integers and floats little-endian.

#include <string>
#include <utility>
#include <vector>

#include "binio.hpp"
#include "config.hpp"
#include "model.hpp"

namespace vf {

inline constexpr char kCheckpointMagic[4] = {'V', 'F', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  binio::Writer p;
  const std::string cfg = ck.config.serialize();
  p.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
  p.bytes(cfg.data(), cfg.size());
  p.put<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    p.str16(name);
    p.put<std::uint8_t>(static_cast<std::uint8_t>(t.ndim()));
    for (Index d : t.shape()) p.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    p.bytes(t.data().data(), t.data().size() * sizeof(float));
  }
  binio::Writer out;
  out.bytes(kCheckpointMagic, 4);
  out.put<std::uint16_t>(kCheckpointVersion);
  out.put<std::uint64_t>(p.size());
  out.bytes(p.buffer().data(), p.size());
  out.put<std::uint32_t>(binio::crc32(p.buffer().data(), p.size()));
  return out.buffer();
}

inline Checkpoint decode_checkpoint(const std::string& buf, const std::string& what = "checkpoint") {
  binio::Reader r(buf, what);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw BadMagicError(what + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version));
  const auto len = r.get<std::uint64_t>();
  r.need(len + 4);
  const std::string payload = buf.substr(r.pos(), len);
  const std::uint32_t stored = [&] {
    std::uint32_t v;
    std::memcpy(&v, buf.data() + r.pos() + len, 4);
    return v;
  }();
  if (binio::crc32(payload.data(), payload.size()) != stored) throw ChecksumError(what + ": CRC mismatch");
  if (r.remaining() != len + 4) throw FormatError(what + ": trailing bytes after checksum");

  binio::Reader p(payload, what);
  Checkpoint ck;
  const auto cfg_len = p.get<std::uint32_t>();
  std::string cfg(cfg_len, '\0');
  p.bytes(cfg.data(), cfg_len);
  try {
    ck.config = RunConfig::parse(cfg, what + " config");
  } catch (const ValidationError& e) {
    throw FormatError(what + ": embedded config is invalid: " + e.what());
  }
  const auto n = p.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = p.str16();
    const auto ndim = p.get<std::uint8_t>();
    Shape shape(ndim);
    for (auto& d : shape) d = p.get<std::uint32_t>();
    Buffer<float> values(static_cast<std::size_t>(numel_of(shape)));
    p.bytes(values.data(), values.size() * sizeof(float));
    ck.tensors.emplace_back(std::move(name), Tensor<float>::from(shape, std::move(values)));
  }
  if (p.remaining() != 0) throw FormatError(what + ": unexpected bytes after the last tensor");
  return ck;
}

template <class S>
Checkpoint make_checkpoint(VistaFormer<S>& model, const RunConfig& cfg) {
  Checkpoint ck;
  ck.config = cfg;
  ck.config.model = model.config();
  for (auto& [name, t] : model.named_parameters()) ck.tensors.emplace_back(name, t.template cast<float>());
  return ck;
}

// Copies checkpoint tensors into a model with the same parameter layout.
template <class S>
void load_weights(VistaFormer<S>& model, const Checkpoint& ck) {
  auto params = model.named_parameters();
  if (params.size() != ck.tensors.size())
    throw FormatError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const auto& [cname, ct] = ck.tensors[i];
    if (name != cname) throw FormatError("checkpoint tensor " + std::to_string(i) + " is '" + cname + "', expected '" + name + "'");
    if (t.shape() != ct.shape())
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(ct.shape()) + ", expected " +
                        shape_str(t.shape()));
    auto dst = t.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<S>(ct.data()[j]);
  }
}

template <class S>
void save_checkpoint(VistaFormer<S>& model, const RunConfig& cfg, const std::string& path) {
  binio::write_file(path, encode_checkpoint(make_checkpoint(model, cfg)));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  return decode_checkpoint(binio::read_file(path), path);
}

// Rebuilds the model described by the checkpoint and loads its weights.
inline std::pair<VistaFormer<float>, RunConfig> load_model(const std::string& path) {
  const Checkpoint ck = read_checkpoint(path);
  auto model = VistaFormer<float>::build(ck.config.model, 0);
  load_weights(model, ck);
  return {std::move(model), ck.config};
}

}  // namespace vf
