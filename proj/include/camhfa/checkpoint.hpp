#pragma once

// Checkpoint file, little-endian:
//   "CMCK" | u32 version=1
//   | u32 N | u32 F | u32 D | u32 G | u32 L | u32 E | u32 C
//   | f64 omega_k_raw[N+1] | f64 omega_v_raw[N+1] | f64 s_k[F*D] | f64 s_v[F*D]
//   | f64 queries[G*L*D] | f64 w_out[G*D*E] | f64 b_out[E] | f64 class_weights[C*E]
//   | f64 margin | f64 scale | u32 margin_type (0 = aam, 1 = am)

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "camhfa/binary_io.hpp"
#include "camhfa/error.hpp"
#include "camhfa/train.hpp"

namespace camhfa {

inline constexpr std::string_view kCheckpointMagic = "CMCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const Model& model) {
  model.pooling.validate();
  model.head.validate();
  const PoolingDims d = model.pooling.dims();
  if (model.head.embed_dim() != d.embed_dim) {
    throw DimensionError("classifier embed dim " + std::to_string(model.head.embed_dim()) +
                         " does not match pooling embed dim " + std::to_string(d.embed_dim));
  }
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  for (std::size_t v : {d.layers - 1, d.feature_dim, d.compressed_dim, d.heads, d.context,
                        d.embed_dim, model.head.num_classes()}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  Model copy = model;
  copy.for_each_tensor([&w](const Tensor& t) { w.f64s(t.data()); });
  w.f64(model.head.margin);
  w.f64(model.head.scale);
  w.u32(static_cast<std::uint32_t>(model.head.margin_type));
  return w.buffer();
}

inline Model decode_checkpoint(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != kCheckpointMagic) throw ParseError("bad magic: not a checkpoint", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")",
                     4);
  }
  const std::uint64_t dims_at = r.offset();
  PoolingDims d;
  d.layers = std::size_t{r.u32("N")} + 1;
  d.feature_dim = r.u32("F");
  d.compressed_dim = r.u32("D");
  d.heads = r.u32("G");
  d.context = r.u32("L");
  d.embed_dim = r.u32("E");
  const std::size_t classes = r.u32("C");
  try {
    d.validate();
  } catch (const ConfigError& e) {
    throw ParseError(std::string("invalid dimensions: ") + e.what(), dims_at);
  }
  if (classes == 0) throw ParseError("invalid dimensions: zero classes", dims_at);

  Model m;
  m.pooling.omega_k_raw = Tensor({d.layers});
  m.pooling.omega_v_raw = Tensor({d.layers});
  m.pooling.s_k = Tensor({d.feature_dim, d.compressed_dim});
  m.pooling.s_v = Tensor({d.feature_dim, d.compressed_dim});
  m.pooling.queries = Tensor({d.heads, d.context, d.compressed_dim});
  m.pooling.w_out = Tensor({d.heads * d.compressed_dim, d.embed_dim});
  m.pooling.b_out = Tensor({d.embed_dim});
  m.head.class_weights = Tensor({classes, d.embed_dim});
  m.for_each_tensor([&r](Tensor& t) { r.f64s(t.data(), "parameter tensor"); });
  m.head.margin = r.f64("margin");
  m.head.scale = r.f64("scale");
  const std::uint32_t type = r.u32("margin type");
  if (type > 1) throw ParseError("unknown margin type " + std::to_string(type), r.offset() - 4);
  m.head.margin_type = static_cast<MarginType>(type);
  if (!r.at_end()) r.fail("trailing bytes after checkpoint");
  return m;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  io::write_file(path, encode_checkpoint(model));
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace camhfa
