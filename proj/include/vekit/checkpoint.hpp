#pragma once

// VEC1 checkpoints: magic "VEC1", u16-prefixed architecture tag, u32 tensor
// count, then per tensor a u16-prefixed name, u32 rank, u32 dims and the
// float32 payload. Little-endian throughout.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "vekit/binary_io.hpp"
#include "vekit/models.hpp"

namespace vekit {

inline binary::Writer encode_checkpoint(const ModelParams& p) {
  binary::Writer w;
  w.bytes("VEC1");
  w.str16(to_string(p.arch()));
  w.u32(static_cast<std::uint32_t>(p.tensors().size()));
  for (const auto& [name, t] : p.tensors()) {
    w.str16(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (auto v : t.data) w.f32(static_cast<float>(v));
  }
  return w;
}

inline void save_checkpoint(const std::string& path, const ModelParams& p) { encode_checkpoint(p).save(path); }

/// Parses and validates a checkpoint against its architecture schema. All
/// tensors come back trainable except the embedding, which is frozen.
inline ModelParams decode_checkpoint(binary::Reader r) {
  const auto magic = r.bytes(4, "magic");
  if (magic != "VEC1") throw FormatError("not a VEC1 checkpoint (magic '" + magic + "')");
  const auto tag = r.str16("architecture tag");
  const auto arch = parse_architecture(tag);
  if (!arch) throw FormatError("unknown architecture tag '" + tag + "'");
  const std::size_t count = r.u32("tensor count");
  std::map<std::string, Tensor> tensors;
  for (std::size_t i = 0; i < count; ++i) {
    const auto at = r.offset();
    auto name = r.str16("tensor name");
    const std::size_t rank = r.u32("tensor rank");
    if (rank == 0 || rank > 4) throw CorruptionError(at, "tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.u32("tensor dim");
      if (d == 0) throw CorruptionError(at, "tensor '" + name + "' has a zero dimension");
      numel *= d;
    }
    if (r.remaining() < numel * 4) throw CorruptionError(r.offset(), "truncated payload for tensor '" + name + "'");
    std::vector<real> data(numel);
    for (auto& v : data) {
      const auto pos = r.offset();
      const float f = r.f32("tensor payload");
      if (!std::isfinite(f)) throw CorruptionError(pos, "non-finite value in tensor '" + name + "'");
      v = static_cast<real>(f);
    }
    Tensor t(std::move(shape), std::move(data));
    t.requires_grad = name != "embedding";
    if (!tensors.emplace(name, std::move(t)).second) throw FormatError("duplicate tensor '" + name + "'");
  }
  if (r.remaining() != 0) throw CorruptionError(r.offset(), "trailing bytes after the last tensor");
  const auto dims = infer_dims(*arch, tensors);
  return ModelParams(*arch, dims, std::move(tensors));
}

inline ModelParams load_checkpoint(const std::string& path) { return decode_checkpoint(binary::Reader::from_file(path)); }

}  // namespace vekit
