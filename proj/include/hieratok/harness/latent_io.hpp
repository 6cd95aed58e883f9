#pragma once

// "HLAT" latent dumps: magic, u32 count, u32 dim, then count * dim f32 LE.

#include <string>
#include <vector>

#include "hieratok/harness/checkpoint.hpp"

namespace hieratok {

struct LatentDump {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<float> values;  // row-major count x dim
};

inline std::vector<std::uint8_t> encode_latents(const LatentDump& d) {
  if (d.values.size() != d.count * d.dim) throw DimensionError("latent dump: values do not match count x dim");
  detail::ByteWriter w;
  w.raw("HLAT");
  w.u32(static_cast<std::uint32_t>(d.count));
  w.u32(static_cast<std::uint32_t>(d.dim));
  for (float v : d.values) w.f32(v);
  return std::move(w.bytes);
}

inline LatentDump decode_latents(const std::vector<std::uint8_t>& bytes, const std::string& context = "latents") {
  detail::ByteReader r(bytes, context);
  if (r.raw(4, "magic") != "HLAT") r.fail("not an HLAT file", 0);
  LatentDump d;
  d.count = r.u32("count");
  d.dim = r.u32("dim");
  if (d.dim == 0) r.fail("dim must be positive", 8);
  if (static_cast<unsigned __int128>(d.count) * d.dim * 4 > bytes.size()) r.fail("truncated while reading values", 12);
  d.values.resize(d.count * d.dim);
  for (auto& v : d.values) v = r.f32("values");
  if (!r.done()) r.fail("trailing bytes after values", r.pos());
  return d;
}

inline void save_latents(const std::string& path, const LatentDump& d) {
  detail::write_file_atomically(path, encode_latents(d));
}

inline LatentDump load_latents(const std::string& path) { return decode_latents(read_file_bytes(path), path); }

}  // namespace hieratok
