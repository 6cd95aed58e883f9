#pragma once

// Reconstruction quality metrics on images stored in [-1, 1]. Both metrics
// rescale to [0, 1] before measuring.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "hieratok/errors.hpp"
#include "hieratok/numerics/tensor.hpp"

namespace hieratok {

inline constexpr double kPsnrCap = 99.0;

struct SsimOptions {
  std::size_t window = 8;
  double c1 = 1e-4;  // (0.01)^2
  double c2 = 9e-4;  // (0.03)^2
};

/// PSNR of one image pair of `n` values each, peak 1 in the [0, 1] domain.
template <typename T>
double psnr(const T* a, const T* b, std::size_t n) {
  double se = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = (static_cast<double>(a[i]) - static_cast<double>(b[i])) * 0.5;
    se += d * d;
  }
  const double mse = se / static_cast<double>(n);
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

namespace detail {

// (h+1) x (w+1) inclusive prefix sums.
inline std::vector<double> integral_image(const std::vector<double>& v, std::size_t h, std::size_t w) {
  std::vector<double> s((h + 1) * (w + 1), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    double row = 0;
    for (std::size_t x = 0; x < w; ++x) {
      row += v[y * w + x];
      s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
    }
  }
  return s;
}

inline double box_sum(const std::vector<double>& s, std::size_t w, std::size_t y, std::size_t x, std::size_t k) {
  const std::size_t W = w + 1;
  return s[(y + k) * W + x + k] - s[y * W + x + k] - s[(y + k) * W + x] + s[y * W + x];
}

}  // namespace detail

/// Mean local SSIM over all valid window positions (stride 1) and channels of
/// one [C, H, W] image pair. Window statistics use population variance.
template <typename T>
double ssim(const T* a, const T* b, std::size_t channels, std::size_t height, std::size_t width,
            const SsimOptions& opt = {}) {
  const std::size_t k = opt.window;
  if (k == 0 || k > height || k > width) {
    throw ConfigError("ssim: window " + std::to_string(k) + " does not fit a " + std::to_string(height) + "x" +
                      std::to_string(width) + " image");
  }
  const std::size_t hw = height * width;
  const double area = static_cast<double>(k * k);
  double total = 0;
  std::vector<double> x(hw), y(hw), xx(hw), yy(hw), xy(hw);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      x[i] = (static_cast<double>(a[c * hw + i]) + 1.0) * 0.5;
      y[i] = (static_cast<double>(b[c * hw + i]) + 1.0) * 0.5;
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto sx = detail::integral_image(x, height, width), sy = detail::integral_image(y, height, width);
    const auto sxx = detail::integral_image(xx, height, width), syy = detail::integral_image(yy, height, width);
    const auto sxy = detail::integral_image(xy, height, width);
    for (std::size_t r = 0; r + k <= height; ++r)
      for (std::size_t q = 0; q + k <= width; ++q) {
        const double mx = detail::box_sum(sx, width, r, q, k) / area;
        const double my = detail::box_sum(sy, width, r, q, k) / area;
        const double vx = detail::box_sum(sxx, width, r, q, k) / area - mx * mx;
        const double vy = detail::box_sum(syy, width, r, q, k) / area - my * my;
        const double cxy = detail::box_sum(sxy, width, r, q, k) / area - mx * my;
        total += ((2 * mx * my + opt.c1) * (2 * cxy + opt.c2)) / ((mx * mx + my * my + opt.c1) * (vx + vy + opt.c2));
      }
  }
  const double windows = static_cast<double>((height - k + 1) * (width - k + 1) * channels);
  return total / windows;
}

template <typename T>
void check_same_images(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() || a.shape().size() != 4) {
    throw ShapeError(std::string(op) + ": expected two equal [B, C, H, W] tensors, got " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  }
}

/// Per-image PSNR over a [B, C, H, W] batch.
template <typename T>
std::vector<double> psnr_per_image(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_images("psnr", a, b);
  const auto& s = a.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  std::vector<double> out(s[0]);
  for (std::size_t i = 0; i < s[0]; ++i) out[i] = psnr(a.data().data() + i * per, b.data().data() + i * per, per);
  return out;
}

/// Per-image SSIM over a [B, C, H, W] batch.
template <typename T>
std::vector<double> ssim_per_image(const Tensor<T>& a, const Tensor<T>& b, const SsimOptions& opt = {}) {
  check_same_images("ssim", a, b);
  const auto& s = a.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  std::vector<double> out(s[0]);
  for (std::size_t i = 0; i < s[0]; ++i)
    out[i] = ssim(a.data().data() + i * per, b.data().data() + i * per, s[1], s[2], s[3], opt);
  return out;
}

}  // namespace hieratok
