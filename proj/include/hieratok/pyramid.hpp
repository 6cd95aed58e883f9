#pragma once

// Multi-scale token pyramid: scale schedules, the two downsamplers that turn
// the encoder's base token map into coarser maps, multi-scale positional
// encodings, and the matching ground-truth image pyramid.
//
// Token maps are channels-last, [B, g, g, d]. Images are [B, 3, H, W].

#include <bit>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "hieratok/errors.hpp"
#include "hieratok/numerics/ops.hpp"
#include "hieratok/numerics/rng.hpp"

namespace hieratok {

/// Ascending grid side lengths; the last one is the encoder's base grid.
struct ScaleSchedule {
  std::vector<std::size_t> grids;
  std::vector<std::size_t> counts;  // grids[s]^2
  std::size_t total = 0;

  std::size_t levels() const { return grids.size(); }
  std::size_t base_grid() const { return grids.back(); }
  std::size_t top() const { return grids.size() - 1; }

  /// First row of level s in the concatenated sequence.
  std::size_t offset(std::size_t level) const {
    std::size_t off = 0;
    for (std::size_t s = 0; s < level; ++s) off += counts[s];
    return off;
  }

  /// Level owning row `token` of the concatenated sequence.
  std::size_t level_of(std::size_t token) const {
    for (std::size_t s = 0; s < counts.size(); ++s) {
      if (token < counts[s]) return s;
      token -= counts[s];
    }
    throw IndexError("level_of: token index beyond schedule total " + std::to_string(total));
  }

  bool operator==(const ScaleSchedule&) const = default;
};

inline ScaleSchedule build_schedule(std::size_t base_grid, std::vector<std::size_t> grids) {
  if (grids.empty()) throw ScheduleError("schedule: empty grid list");
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (grids[i] == 0) throw ScheduleError("schedule: grid sizes must be positive");
    if (i > 0 && grids[i] <= grids[i - 1]) throw ScheduleError("schedule: grids must be strictly ascending");
  }
  if (grids.back() != base_grid) {
    throw ScheduleError("schedule: last grid " + std::to_string(grids.back()) + " must equal base grid " +
                        std::to_string(base_grid));
  }
  ScaleSchedule s;
  s.grids = std::move(grids);
  for (std::size_t g : s.grids) {
    s.counts.push_back(g * g);
    s.total += g * g;
  }
  return s;
}

/// Parses "1,2,4,8".
inline std::vector<std::size_t> parse_grid_list(const std::string& text) {
  std::vector<std::size_t> grids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    const auto last = item.find_last_not_of(" \t");
    if (first == std::string::npos) throw ScheduleError("schedule: empty entry in '" + text + "'");
    item = item.substr(first, last - first + 1);
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || v <= 0) throw ScheduleError("schedule: invalid grid size '" + item + "'");
    grids.push_back(static_cast<std::size_t>(v));
  }
  if (grids.empty()) throw ScheduleError("schedule: empty grid list");
  return grids;
}

inline std::string format_grid_list(const std::vector<std::size_t>& grids) {
  std::string out;
  for (std::size_t i = 0; i < grids.size(); ++i) out += (i ? "," : "") + std::to_string(grids[i]);
  return out;
}

template <typename T>
struct TokenPyramid {
  std::vector<Tensor<T>> maps;  // [B, g_s, g_s, d], ascending
  Tensor<T> concatenated;       // [B, total, d], low-to-high
  ScaleSchedule schedule;
};

namespace detail {

template <typename T>
void check_token_map(const char* op, const Tensor<T>& z, std::size_t grid) {
  if (z.rank() != 4 || z.shape()[1] != grid || z.shape()[2] != grid) {
    throw DimensionError(std::string(op) + ": expected token map [B," + std::to_string(grid) + "," +
                         std::to_string(grid) + ",d], got " + to_string(z.shape()));
  }
}

// [B,g,g,d] <-> [B,d,g,g]
template <typename T>
Tensor<T> to_channels_first(const Tensor<T>& z) {
  return permute(z, {0, 3, 1, 2});
}

template <typename T>
Tensor<T> to_channels_last(const Tensor<T>& z) {
  return permute(z, {0, 2, 3, 1});
}

template <typename T>
Tensor<T> pool_tokens(const Tensor<T>& z, std::size_t grid) {
  if (z.shape()[1] == grid) return z;
  return to_channels_last(area_pool(to_channels_first(z), grid, grid));
}

}  // namespace detail

/// Concatenates per-level maps into one low-to-high sequence.
template <typename T>
TokenPyramid<T> assemble_pyramid(std::vector<Tensor<T>> maps, const ScaleSchedule& schedule) {
  if (maps.size() != schedule.levels()) throw DimensionError("pyramid: level count differs from schedule");
  std::vector<Tensor<T>> rows;
  for (std::size_t s = 0; s < maps.size(); ++s) {
    detail::check_token_map("pyramid", maps[s], schedule.grids[s]);
    const auto& sh = maps[s].shape();
    rows.push_back(reshape(maps[s], {sh[0], schedule.counts[s], sh[3]}));
  }
  TokenPyramid<T> p;
  p.concatenated = rows.size() == 1 ? rows[0] : concat(rows, 1);
  p.maps = std::move(maps);
  p.schedule = schedule;
  return p;
}

/// Inverse of assemble_pyramid: cuts [B, total, d] back into [B, g_s, g_s, d] maps.
template <typename T>
std::vector<Tensor<T>> split_levels(const Tensor<T>& sequence, const ScaleSchedule& schedule) {
  if (sequence.rank() != 3 || sequence.shape()[1] != schedule.total) {
    throw DimensionError("split_levels: expected [B," + std::to_string(schedule.total) + ",d], got " +
                         to_string(sequence.shape()));
  }
  const std::size_t b = sequence.shape()[0], d = sequence.shape()[2];
  std::vector<Tensor<T>> maps;
  std::size_t off = 0;
  for (std::size_t s = 0; s < schedule.levels(); ++s) {
    const std::size_t g = schedule.grids[s];
    Tensor<T> part = schedule.levels() == 1 ? sequence : slice(sequence, 1, off, off + schedule.counts[s]);
    maps.push_back(reshape(part, {b, g, g, d}));
    off += schedule.counts[s];
  }
  return maps;
}

/// Parameter-free pyramid: every level is the area-pooled base map.
template <typename T>
TokenPyramid<T> downsample_interp(const Tensor<T>& z_base, const ScaleSchedule& schedule) {
  detail::check_token_map("downsample_interp", z_base, schedule.base_grid());
  std::vector<Tensor<T>> maps;
  for (std::size_t g : schedule.grids) maps.push_back(detail::pool_tokens(z_base, g));
  return assemble_pyramid(std::move(maps), schedule);
}

/// Per-level chains of stride-2, 2x2, d->d convolutions. chains[s] holds
/// log2(base/g_s) kernels of shape [d, d, 2, 2]; the top level has none.
template <typename T>
struct ConvDownsampler {
  std::vector<std::vector<Tensor<T>>> chains;
};

/// Throws ConfigError unless every base/g_s ratio is a power of two.
inline void require_dyadic(const ScaleSchedule& schedule) {
  const std::size_t base = schedule.base_grid();
  for (std::size_t g : schedule.grids) {
    if (base % g != 0 || !std::has_single_bit(base / g)) {
      throw ConfigError("conv downsampling needs power-of-two ratios between the base grid (" + std::to_string(base) +
                        ") and every scale; grid " + std::to_string(g) +
                        " is not reachable, use downsample_mode=interp");
    }
  }
}

inline std::size_t chain_length(const ScaleSchedule& schedule, std::size_t level) {
  return static_cast<std::size_t>(std::countr_zero(schedule.base_grid() / schedule.grids[level]));
}

template <typename T>
ConvDownsampler<T> make_conv_downsampler(const ScaleSchedule& schedule, std::size_t width, Rng& rng,
                                         double init_std = 0.02) {
  require_dyadic(schedule);
  ConvDownsampler<T> ds;
  for (std::size_t s = 0; s + 1 < schedule.levels(); ++s) {
    std::vector<Tensor<T>> chain;
    for (std::size_t i = 0; i < chain_length(schedule, s); ++i) {
      std::vector<T> w(width * width * 4);
      for (auto& v : w) v = static_cast<T>(rng.truncated_normal(init_std));
      chain.emplace_back(Shape{width, width, 2, 2}, std::move(w), true);
    }
    ds.chains.push_back(std::move(chain));
  }
  return ds;
}

/// Kernels that reproduce 2x2 block averaging, channel by channel.
template <typename T>
ConvDownsampler<T> averaging_conv_downsampler(const ScaleSchedule& schedule, std::size_t width) {
  require_dyadic(schedule);
  ConvDownsampler<T> ds;
  for (std::size_t s = 0; s + 1 < schedule.levels(); ++s) {
    std::vector<Tensor<T>> chain;
    for (std::size_t i = 0; i < chain_length(schedule, s); ++i) {
      Tensor<T> k = Tensor<T>::zeros({width, width, 2, 2}, true);
      auto kv = k.mutable_data();
      for (std::size_t c = 0; c < width; ++c)
        for (std::size_t j = 0; j < 4; ++j) kv[(c * width + c) * 4 + j] = T(0.25);
      chain.push_back(k);
    }
    ds.chains.push_back(std::move(chain));
  }
  return ds;
}

/// Learnable pyramid: level s applies its own kernel chain to the base map.
template <typename T>
TokenPyramid<T> downsample_conv(const ConvDownsampler<T>& params, const Tensor<T>& z_base,
                                const ScaleSchedule& schedule) {
  require_dyadic(schedule);
  detail::check_token_map("downsample_conv", z_base, schedule.base_grid());
  if (params.chains.size() + 1 != schedule.levels())
    throw DimensionError("downsample_conv: kernel chains do not match the schedule");
  std::vector<Tensor<T>> maps;
  for (std::size_t s = 0; s + 1 < schedule.levels(); ++s) {
    if (params.chains[s].size() != chain_length(schedule, s))
      throw DimensionError("downsample_conv: chain length mismatch at level " + std::to_string(s));
    Tensor<T> h = detail::to_channels_first(z_base);
    for (const auto& k : params.chains[s]) h = conv2d(h, k, 2);
    maps.push_back(detail::to_channels_last(h));
  }
  maps.push_back(z_base);
  return assemble_pyramid(std::move(maps), schedule);
}

/// Learnable spatial grid [g_S, g_S, d] plus one embedding per scale [S, d].
template <typename T>
struct PEParams {
  Tensor<T> spatial;
  Tensor<T> per_scale;
};

template <typename T>
PEParams<T> make_pe_params(const ScaleSchedule& schedule, std::size_t width, Rng& rng, double init_std = 0.02) {
  auto init = [&](Shape shape) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.truncated_normal(init_std));
    return Tensor<T>(std::move(shape), std::move(v), true);
  };
  PEParams<T> pe;
  pe.spatial = init({schedule.base_grid(), schedule.base_grid(), width});
  pe.per_scale = init({schedule.levels(), width});
  return pe;
}

/// PE for level s = area_pool(spatial -> g_s x g_s) + per_scale[s]. Returns [g_s, g_s, d] per level.
template <typename T>
std::vector<Tensor<T>> positional_encoding(const PEParams<T>& pe, const ScaleSchedule& schedule) {
  const std::size_t g_top = schedule.base_grid();
  if (pe.spatial.rank() != 3 || pe.spatial.shape()[0] != g_top || pe.spatial.shape()[1] != g_top)
    throw DimensionError("positional_encoding: spatial grid " + to_string(pe.spatial.shape()) +
                         " does not match base grid " + std::to_string(g_top));
  const std::size_t d = pe.spatial.shape()[2];
  if (pe.per_scale.rank() != 2 || pe.per_scale.shape()[0] != schedule.levels() || pe.per_scale.shape()[1] != d)
    throw DimensionError("positional_encoding: per-scale table " + to_string(pe.per_scale.shape()) +
                         " does not match schedule");
  const Tensor<T> batched = reshape(pe.spatial, {1, g_top, g_top, d});
  std::vector<Tensor<T>> out;
  for (std::size_t s = 0; s < schedule.levels(); ++s) {
    const std::size_t g = schedule.grids[s];
    Tensor<T> spatial = reshape(detail::pool_tokens(batched, g), {g, g, d});
    Tensor<T> scale_row = reshape(slice(pe.per_scale, 0, s, s + 1), {d});
    out.push_back(add(spatial, scale_row));
  }
  return out;
}

/// Ground truth per level: x area-pooled to (g_s * patch)^2; the top level is x.
template <typename T>
std::vector<Tensor<T>> image_pyramid(const Tensor<T>& x, const ScaleSchedule& schedule, std::size_t patch) {
  const std::size_t side = schedule.base_grid() * patch;
  if (x.rank() != 4 || x.shape()[2] != side || x.shape()[3] != side) {
    throw DimensionError("image_pyramid: expected [B,C," + std::to_string(side) + "," + std::to_string(side) +
                         "], got " + to_string(x.shape()));
  }
  std::vector<Tensor<T>> out;
  for (std::size_t s = 0; s < schedule.levels(); ++s) {
    const std::size_t px = schedule.grids[s] * patch;
    out.push_back(s == schedule.top() ? x : area_pool(x, px, px));
  }
  return out;
}

}  // namespace hieratok
