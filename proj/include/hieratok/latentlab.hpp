#pragma once

// Latent-space uniformity analysis: deterministic 2-D principal projection,
// Gaussian KDE on a grid, and density-uniformity statistics. Also the
// commutation residual between decoding a coarse level and pooling the
// full-resolution decode.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "hieratok/errors.hpp"
#include "hieratok/numerics/ops.hpp"
#include "hieratok/tokenizer.hpp"

#include <Eigen/Dense>

namespace hieratok {

using Point2 = std::array<double, 2>;

struct Projection {
  std::vector<Point2> points;
  std::array<double, 2> variance{0.0, 0.0};  // variance along each kept axis
  double residual_variance = 0.0;           // total variance not captured
  std::vector<std::string> warnings;
};

/// Centers the rows of `flat` (count x dim, row-major) and projects them onto
/// the top two covariance eigenvectors. Each eigenvector is sign-fixed so its
/// largest-magnitude coordinate is positive. Axes with (numerically) zero
/// variance are filled with zeros and reported in `warnings`.
inline Projection project2d(const std::vector<double>& flat, std::size_t dim) {
  if (dim == 0 || flat.size() % dim != 0) throw DimensionError("project2d: data size is not a multiple of dim");
  const std::size_t n = flat.size() / dim;
  if (n < 3) throw DimensionError("project2d: need at least 3 points, got " + std::to_string(n));
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> raw(
      flat.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  const Eigen::RowVectorXd center = raw.colwise().mean();
  const Eigen::MatrixXd centered = raw.rowwise() - center;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const Eigen::VectorXd evals = solver.eigenvalues();  // ascending
  const Eigen::MatrixXd evecs = solver.eigenvectors();
  const double trace = cov.trace();
  const double tol = 1e-12 * std::max(trace, std::numeric_limits<double>::min());

  Projection out;
  out.points.assign(n, Point2{0.0, 0.0});
  double kept = 0;
  for (std::size_t a = 0; a < 2; ++a) {
    const Eigen::Index col = static_cast<Eigen::Index>(dim) - 1 - static_cast<Eigen::Index>(a);
    if (col < 0 || trace <= 0 || evals(col) <= tol) {
      out.warnings.push_back("project2d: axis " + std::to_string(a) + " is degenerate; filled with zeros");
      continue;
    }
    Eigen::VectorXd v = evecs.col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd coord = centered * v;
    for (std::size_t i = 0; i < n; ++i) out.points[i][a] = coord(static_cast<Eigen::Index>(i));
    out.variance[a] = evals(col);
    kept += evals(col);
  }
  out.residual_variance = std::max(0.0, trace - kept);
  return out;
}

/// Scott's rule on the pooled per-axis spread: n^(-1/6) * sqrt((var_x + var_y) / 2).
inline double scott_bandwidth(const std::vector<Point2>& pts) {
  if (pts.empty()) return 0.0;
  const double n = static_cast<double>(pts.size());
  double var = 0;
  for (std::size_t a = 0; a < 2; ++a) {
    double m = 0;
    for (const auto& p : pts) m += p[a];
    m /= n;
    double v = 0;
    for (const auto& p : pts) v += (p[a] - m) * (p[a] - m);
    var += v / n;
  }
  return std::pow(n, -1.0 / 6.0) * std::sqrt(var / 2.0);
}

struct DensityGrid {
  std::size_t grid = 0;
  double bandwidth = 0;
  std::array<double, 2> lo{}, hi{};
  std::vector<double> density;  // grid x grid, row-major over (y, x), sums to 1
};

/// Isotropic Gaussian KDE evaluated at the cell centers of a grid x grid
/// lattice covering the bounding box padded by `padding` bandwidths.
inline DensityGrid kde_density(const std::vector<Point2>& pts, std::size_t grid, double bandwidth,
                               double padding = 3.0) {
  if (!(bandwidth > 0) || !std::isfinite(bandwidth)) throw ConfigError("kde_density: bandwidth must be positive");
  if (grid == 0) throw ConfigError("kde_density: grid must be positive");
  if (pts.empty()) throw DimensionError("kde_density: no points");
  DensityGrid out;
  out.grid = grid;
  out.bandwidth = bandwidth;
  for (std::size_t a = 0; a < 2; ++a) {
    double lo = pts[0][a], hi = pts[0][a];
    for (const auto& p : pts) {
      lo = std::min(lo, p[a]);
      hi = std::max(hi, p[a]);
    }
    out.lo[a] = lo - padding * bandwidth;
    out.hi[a] = hi + padding * bandwidth;
  }
  const double cx = (out.hi[0] - out.lo[0]) / static_cast<double>(grid);
  const double cy = (out.hi[1] - out.lo[1]) / static_cast<double>(grid);
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  // Exponents are shifted by the smallest squared distance so the grid
  // cannot underflow to all zeros.
  double dmin = std::numeric_limits<double>::infinity();
  for (std::size_t iy = 0; iy < grid; ++iy)
    for (std::size_t ix = 0; ix < grid; ++ix) {
      const double x = out.lo[0] + (static_cast<double>(ix) + 0.5) * cx;
      const double y = out.lo[1] + (static_cast<double>(iy) + 0.5) * cy;
      for (const auto& p : pts) {
        const double d = (x - p[0]) * (x - p[0]) + (y - p[1]) * (y - p[1]);
        dmin = std::min(dmin, d);
      }
    }
  out.density.assign(grid * grid, 0.0);
  double total = 0;
  for (std::size_t iy = 0; iy < grid; ++iy)
    for (std::size_t ix = 0; ix < grid; ++ix) {
      const double x = out.lo[0] + (static_cast<double>(ix) + 0.5) * cx;
      const double y = out.lo[1] + (static_cast<double>(iy) + 0.5) * cy;
      double acc = 0;
      for (const auto& p : pts) {
        const double d = (x - p[0]) * (x - p[0]) + (y - p[1]) * (y - p[1]);
        acc += std::exp(-(d - dmin) * inv);
      }
      out.density[iy * grid + ix] = acc;
      total += acc;
    }
  for (auto& v : out.density) v /= total;
  return out;
}

struct LatentStats {
  double density_cv = 0;
  double gini = 0;
  double norm_entropy = 0;
  std::size_t n_points = 0;
  std::size_t grid_size = 0;
  double bandwidth = 0;
};

/// CV (population std / mean), Gini (sorted-rank form of mean absolute
/// pairwise difference over 2 * mean) and entropy normalized by ln(cells).
inline LatentStats uniformity_metrics(const std::vector<double>& densities) {
  if (densities.empty()) throw NumericError("uniformity_metrics: no cells");
  double total = 0;
  for (double v : densities) {
    if (!(v >= 0) || !std::isfinite(v)) throw NumericError("uniformity_metrics: densities must be finite and >= 0");
    total += v;
  }
  if (total <= 0) throw NumericError("uniformity_metrics: all densities are zero; metrics are undefined");
  const double n = static_cast<double>(densities.size());
  const double mean = total / n;
  double var = 0;
  for (double v : densities) var += (v - mean) * (v - mean);
  LatentStats s;
  s.density_cv = std::sqrt(var / n) / mean;

  std::vector<double> sorted = densities;
  std::sort(sorted.begin(), sorted.end());
  double weighted = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i)
    weighted += (2.0 * static_cast<double>(i + 1) - n - 1.0) * sorted[i];
  s.gini = std::max(0.0, weighted / (n * total));

  if (densities.size() == 1) {
    s.norm_entropy = 1.0;
  } else {
    double h = 0;
    for (double v : densities)
      if (v > 0) {
        const double p = v / total;
        h -= p * std::log(p);
      }
    s.norm_entropy = std::min(1.0, h / std::log(n));
  }
  s.grid_size = static_cast<std::size_t>(std::lround(std::sqrt(n)));
  return s;
}

struct AnalysisOptions {
  std::size_t grid = 64;
  double padding = 3.0;    // in bandwidths
  double bandwidth = 0.0;  // 0: Scott's rule
};

struct LatentReport {
  LatentStats stats;
  Projection projection;
};

/// project2d -> kde_density -> uniformity_metrics.
inline LatentReport analyze_latents(const std::vector<double>& flat, std::size_t dim, const AnalysisOptions& opt = {}) {
  LatentReport r;
  r.projection = project2d(flat, dim);
  double h = opt.bandwidth > 0 ? opt.bandwidth : scott_bandwidth(r.projection.points);
  if (!(h > 0)) {
    r.projection.warnings.push_back("analyze: zero spread, bandwidth falls back to 1");
    h = 1.0;
  }
  const DensityGrid grid = kde_density(r.projection.points, opt.grid, h, opt.padding);
  r.stats = uniformity_metrics(grid.density);
  r.stats.n_points = r.projection.points.size();
  r.stats.grid_size = opt.grid;
  r.stats.bandwidth = h;
  return r;
}

/// Per-level relative error ||decode_s(Z) - pool_s(decode_top(Z))|| / (||pool_s(decode_top(Z))|| + eps)
/// in eval mode with the deterministic latent.
template <typename T>
double commutation_residual(const TokenizerModel<T>& m, const Tensor<T>& x, std::size_t level, double eps = 1e-12) {
  if (level >= m.schedule.levels()) {
    throw IndexError("commutation_residual: level " + std::to_string(level) + " out of range for " +
                     std::to_string(m.schedule.levels()) + " levels");
  }
  NoGradGuard guard;
  const auto images = decode_pyramid(m, encode(m, x).mu);
  const auto& coarse = images[level];
  const Tensor<T> pooled = area_pool(images.back(), coarse.shape()[2], coarse.shape()[3]);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < pooled.numel(); ++i) {
    const double a = static_cast<double>(coarse[i]), b = static_cast<double>(pooled[i]);
    num += (a - b) * (a - b);
    den += b * b;
  }
  return std::sqrt(num) / (std::sqrt(den) + eps);
}

}  // namespace hieratok
