#pragma once

// In-memory image datasets: a seeded synthetic generator and a loader for
// folders of same-size P6 files. Images are cached planar [3, S, S] in [-1, 1].

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "hieratok/errors.hpp"
#include "hieratok/harness/ppm.hpp"
#include "hieratok/numerics/rng.hpp"
#include "hieratok/numerics/tensor.hpp"

namespace hieratok {

struct ImageRecord {
  std::string path;  // file path, or "synthetic:<index>"
  std::vector<float> pixels;
};

struct Dataset {
  std::size_t image_size = 0;
  std::vector<ImageRecord> images;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
};

namespace detail {

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Two to four oriented sinusoidal ramps per channel, then one to three flat
// rectangles or discs. Values are quantized to 8 bits so a PPM round trip is
// lossless.
inline PpmImage synthetic_image(std::size_t size, Rng rng) {
  const double s = static_cast<double>(size);
  std::vector<double> rgb(size * size * 3, 0.0);
  for (std::size_t c = 0; c < 3; ++c) {
    const double base = 0.2 + 0.6 * rng.uniform();
    const std::size_t waves = 2 + rng.below(3);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) rgb[(y * size + x) * 3 + c] = base;
    for (std::size_t w = 0; w < waves; ++w) {
      const double freq = 0.5 + 3.5 * rng.uniform();
      const double angle = 2 * std::numbers::pi * rng.uniform();
      const double phase = 2 * std::numbers::pi * rng.uniform();
      const double amp = 0.25 * rng.uniform() / static_cast<double>(w + 1);
      const double fx = std::cos(angle) * freq / s, fy = std::sin(angle) * freq / s;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          rgb[(y * size + x) * 3 + c] +=
              amp * std::sin(2 * std::numbers::pi * (fx * static_cast<double>(x) + fy * static_cast<double>(y)) + phase);
    }
  }
  const std::size_t shapes = 1 + rng.below(3);
  for (std::size_t k = 0; k < shapes; ++k) {
    const bool disc = rng.below(2) == 1;
    const double cx = s * rng.uniform(), cy = s * rng.uniform();
    const double rx = s * (0.08 + 0.22 * rng.uniform()), ry = s * (0.08 + 0.22 * rng.uniform());
    const double color[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (static_cast<double>(x) + 0.5 - cx) / rx, dy = (static_cast<double>(y) + 0.5 - cy) / ry;
        const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (std::size_t c = 0; c < 3; ++c) rgb[(y * size + x) * 3 + c] = color[c];
      }
  }
  PpmImage img;
  img.width = size;
  img.height = size;
  img.rgb.resize(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i)
    img.rgb[i] = static_cast<std::uint8_t>(std::lround(255.0 * clamp01(rgb[i])));
  return img;
}

}  // namespace detail

/// Image i depends only on (seed, i), so datasets of different counts share prefixes.
inline std::vector<PpmImage> synthetic_images(std::size_t count, std::size_t size, std::uint64_t seed) {
  if (size == 0) throw ConfigError("synthetic_images: size must be positive");
  std::vector<PpmImage> out;
  out.reserve(count);
  const Rng root(seed, 0x5EED);
  for (std::size_t i = 0; i < count; ++i) out.push_back(detail::synthetic_image(size, root.fork(i)));
  return out;
}

inline Dataset synthetic_dataset(std::size_t count, std::size_t size, std::uint64_t seed) {
  Dataset ds;
  ds.image_size = size;
  const auto imgs = synthetic_images(count, size, seed);
  for (std::size_t i = 0; i < imgs.size(); ++i) ds.images.push_back({"synthetic:" + std::to_string(i), ppm_to_planar(imgs[i])});
  return ds;
}

/// Every regular *.ppm file in `dir`, in lexicographic path order. All must be size x size.
inline Dataset load_image_folder(const std::string& dir, std::size_t size) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw FormatError("data directory not found: " + dir, 0);
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (ext == ".ppm") paths.push_back(entry.path().string());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw FormatError("no .ppm images in " + dir, 0);
  Dataset ds;
  ds.image_size = size;
  for (const auto& p : paths) {
    const PpmImage img = load_ppm(p);
    if (img.width != size || img.height != size) {
      throw FormatError(p + ": image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                            ", expected " + std::to_string(size) + "x" + std::to_string(size),
                        0);
    }
    ds.images.push_back({p, ppm_to_planar(img)});
  }
  return ds;
}

struct DataSplit {
  Dataset train;
  Dataset eval;
};

/// The last floor(fraction * N) images form the eval split. A nonzero fraction
/// always leaves at least one training image.
inline DataSplit split_dataset(const Dataset& ds, double fraction) {
  if (!(fraction >= 0 && fraction < 1)) throw ConfigError("eval_fraction must be in [0, 1)");
  const auto n_eval = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ds.size())));
  DataSplit out;
  out.train.image_size = out.eval.image_size = ds.image_size;
  const std::size_t n_train = ds.size() - std::min(n_eval, ds.size());
  out.train.images.assign(ds.images.begin(), ds.images.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.eval.images.assign(ds.images.begin() + static_cast<std::ptrdiff_t>(n_train), ds.images.end());
  return out;
}

/// Fisher-Yates permutation of [0, n) determined by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(seed, 0x5A4F).fork(epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

/// Stacks the selected images into a [B, 3, S, S] tensor.
template <typename T = float>
Tensor<T> make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  const std::size_t per = 3 * ds.image_size * ds.image_size;
  std::vector<T> data(indices.size() * per);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& px = ds.images.at(indices[b]).pixels;
    std::copy(px.begin(), px.end(), data.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return Tensor<T>({indices.size(), 3, ds.image_size, ds.image_size}, std::move(data));
}

/// Walks epochs of shuffled indices and yields fixed-size batches; the short
/// tail of an epoch is dropped unless the epoch is smaller than one batch.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(batch), seed_(seed) {
    if (n == 0) throw ConfigError("training split is empty");
    if (batch == 0) throw ConfigError("batch_size must be positive");
  }

  std::vector<std::size_t> next() {
    const std::size_t take = std::min(batch_, n_);
    if (order_.empty() || pos_ + take > order_.size()) {
      if (!order_.empty()) ++epoch_;
      order_ = epoch_order(n_, seed_, epoch_);
      pos_ = 0;
    }
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + take));
    pos_ += take;
    return out;
  }

  std::uint64_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const { return std::max<std::size_t>(1, n_ / batch_); }

 private:
  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace hieratok
