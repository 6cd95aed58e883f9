#include <gtest/gtest.h>

#include <cmath>

#include "hieratok/latentlab.hpp"
#include "test_util.hpp"

namespace hieratok {
namespace {

double distance(const Point2& a, const Point2& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

// O(n^2) definition: mean over ordered pairs of |x_i - x_j|, divided by 2 * mean.
double pairwise_gini(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double diff = 0, total = 0;
  for (double a : x) {
    total += a;
    for (double b : x) diff += std::abs(a - b);
  }
  return (diff / (n * n)) / (2.0 * total / n);
}

TEST(UniformityTest, TwoCellHandValues) {
  const auto s = uniformity_metrics({1.0, 3.0});
  EXPECT_NEAR(s.density_cv, 0.5, 1e-12);
  EXPECT_NEAR(s.gini, 0.25, 1e-12);
  const double h = -(0.25 * std::log(0.25) + 0.75 * std::log(0.75)) / std::log(2.0);
  EXPECT_NEAR(s.norm_entropy, h, 1e-12);
  EXPECT_NEAR(s.norm_entropy, 0.811, 1e-3);
}

TEST(UniformityTest, UniformDensity) {
  const auto s = uniformity_metrics(std::vector<double>(4096, 0.25));
  EXPECT_NEAR(s.density_cv, 0.0, 1e-12);
  EXPECT_NEAR(s.gini, 0.0, 1e-12);
  EXPECT_NEAR(s.norm_entropy, 1.0, 1e-12);
}

TEST(UniformityTest, PointMass) {
  for (std::size_t n : {2u, 7u, 64u}) {
    std::vector<double> d(n, 0.0);
    d[n / 2] = 5.0;
    const auto s = uniformity_metrics(d);
    EXPECT_NEAR(s.gini, static_cast<double>(n - 1) / static_cast<double>(n), 1e-12);
    EXPECT_EQ(s.norm_entropy, 0.0);
    EXPECT_NEAR(s.density_cv, std::sqrt(static_cast<double>(n - 1)), 1e-12);
  }
}

TEST(UniformityTest, GiniMatchesPairwiseDefinitionAndIsScaleInvariant) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> d(1 + rng.below(50));
    for (auto& v : d) v = rng.uniform() * rng.uniform();
    d[0] += 0.1;
    const double g = uniformity_metrics(d).gini;
    EXPECT_NEAR(g, pairwise_gini(d), 1e-12);
    for (double c : {1e-6, 3.0, 1e6}) {
      auto scaled = d;
      for (auto& v : scaled) v *= c;
      EXPECT_NEAR(uniformity_metrics(scaled).gini, g, 1e-12);
    }
  }
}

TEST(UniformityTest, EntropyDropsUnderPerturbation) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> d(16, 1.0);
    d[rng.below(16)] += 0.01 + rng.uniform();
    EXPECT_LT(uniformity_metrics(d).norm_entropy, 1.0);
  }
}

TEST(UniformityTest, InvalidDensitiesThrow) {
  EXPECT_THROW(uniformity_metrics({0.0, 0.0}), NumericError);
  EXPECT_THROW(uniformity_metrics({1.0, -1.0}), NumericError);
  EXPECT_THROW(uniformity_metrics({}), NumericError);
}

TEST(KdeTest, SinglePointPeaksAtCenterSymmetrically) {
  const auto k = kde_density({{0.5, -2.0}}, 9, 0.7);
  double total = 0;
  for (double v : k.density) total += v;
  EXPECT_NEAR(total, 1.0, 1e-9);
  const std::size_t c = 4;
  for (std::size_t i = 0; i < 81; ++i) EXPECT_LE(k.density[i], k.density[c * 9 + c]);
  for (std::size_t y = 0; y < 9; ++y)
    for (std::size_t x = 0; x < 9; ++x) {
      EXPECT_NEAR(k.density[y * 9 + x], k.density[x * 9 + y], 1e-15);
      EXPECT_NEAR(k.density[y * 9 + x], k.density[(8 - y) * 9 + (8 - x)], 1e-15);
    }
}

TEST(KdeTest, MatchesDirectKernelSum) {
  const std::vector<Point2> pts{{0, 0}, {1, 2}, {-1, 0.5}, {3, 3}};
  const double h = 0.8;
  const auto k = kde_density(pts, 16, h);
  std::vector<double> raw(256);
  double total = 0;
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      const double px = -1 - 3 * h + (x + 0.5) * (4 + 6 * h) / 16;
      const double py = 0 - 3 * h + (y + 0.5) * (3 + 6 * h) / 16;
      for (const auto& p : pts)
        raw[y * 16 + x] += std::exp(-((px - p[0]) * (px - p[0]) + (py - p[1]) * (py - p[1])) / (2 * h * h));
      total += raw[y * 16 + x];
    }
  for (std::size_t i = 0; i < 256; ++i) EXPECT_NEAR(k.density[i], raw[i] / total, 1e-12);
}

TEST(KdeTest, TwoDistantPointsGiveEqualModes) {
  const auto k = kde_density({{0, 0}, {10, 0}}, 31, 0.5);
  // Row through both points: cell centers sit symmetrically about x = 5.
  const std::size_t row = 15;
  std::size_t left = 0, right = 0;
  for (std::size_t x = 0; x < 31; ++x) {
    if (x < 15 && k.density[row * 31 + x] > k.density[row * 31 + left]) left = x;
    if (x > 15 && k.density[row * 31 + x] > k.density[row * 31 + right]) right = x;
  }
  EXPECT_EQ(left + right, 30u);
  EXPECT_NEAR(k.density[row * 31 + left], k.density[row * 31 + right], 1e-15);
  EXPECT_GT(k.density[row * 31 + left], 1e3 * k.density[row * 31 + 15]);
}

TEST(KdeTest, RejectsNonPositiveBandwidth) {
  EXPECT_THROW(kde_density({{0, 0}}, 8, 0.0), ConfigError);
  EXPECT_THROW(kde_density({}, 8, 1.0), DimensionError);
}

TEST(ProjectTest, TwoDimensionalDataKeepsDistances) {
  Rng rng(3);
  std::vector<double> flat;
  for (int i = 0; i < 40; ++i) {
    flat.push_back(3.0 * rng.normal());
    flat.push_back(rng.normal() + 0.5 * flat.back());
  }
  const auto p = project2d(flat, 2);
  EXPECT_TRUE(p.warnings.empty());
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t j = 0; j < 40; ++j) {
      const Point2 a{flat[2 * i], flat[2 * i + 1]}, b{flat[2 * j], flat[2 * j + 1]};
      EXPECT_NEAR(distance(p.points[i], p.points[j]), distance(a, b), 1e-10);
    }
  // Closed-form eigenvalues of the 2x2 covariance.
  double mx = 0, my = 0;
  for (int i = 0; i < 40; ++i) {
    mx += flat[2 * i] / 40;
    my += flat[2 * i + 1] / 40;
  }
  double a = 0, b = 0, c = 0;
  for (int i = 0; i < 40; ++i) {
    const double dx = flat[2 * i] - mx, dy = flat[2 * i + 1] - my;
    a += dx * dx / 40;
    b += dx * dy / 40;
    c += dy * dy / 40;
  }
  const double r = std::sqrt((a - c) * (a - c) / 4 + b * b);
  EXPECT_NEAR(p.variance[0], (a + c) / 2 + r, 1e-10);
  EXPECT_NEAR(p.variance[1], (a + c) / 2 - r, 1e-10);
  EXPECT_NEAR(p.residual_variance, 0.0, 1e-10);
}

TEST(ProjectTest, IdenticalPointsCollapseToOrigin) {
  std::vector<double> flat;
  for (int i = 0; i < 5; ++i) flat.insert(flat.end(), {1.5, -2.0, 4.0});
  const auto p = project2d(flat, 3);
  EXPECT_EQ(p.warnings.size(), 2u);
  for (const auto& q : p.points) {
    EXPECT_EQ(q[0], 0.0);
    EXPECT_EQ(q[1], 0.0);
  }
}

TEST(ProjectTest, PlanarDataIn3dHasNoResidual) {
  Rng rng(4);
  const double u[3] = {1, 2, -1}, v[3] = {0.5, -1, 3};
  std::vector<double> flat;
  for (int i = 0; i < 50; ++i) {
    const double s = rng.normal(), t = rng.normal();
    for (int k = 0; k < 3; ++k) flat.push_back(s * u[k] + t * v[k] + 7.0);
  }
  const auto p = project2d(flat, 3);
  EXPECT_TRUE(p.warnings.empty());
  EXPECT_NEAR(p.residual_variance, 0.0, 1e-9);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = i + 1; j < 50; ++j) {
      double d3 = 0;
      for (int k = 0; k < 3; ++k) d3 += std::pow(flat[3 * i + k] - flat[3 * j + k], 2);
      EXPECT_NEAR(distance(p.points[i], p.points[j]), std::sqrt(d3), 1e-9);
    }
}

TEST(ProjectTest, OneDimensionalDataWarnsOnSecondAxis) {
  std::vector<double> flat{1, 2, 3, 4};
  const auto p = project2d(flat, 1);
  ASSERT_EQ(p.warnings.size(), 1u);
  EXPECT_NEAR(p.points[0][0], -1.5, 1e-12);
  EXPECT_EQ(p.points[0][1], 0.0);
  EXPECT_THROW(project2d({1, 2, 3, 4}, 2), DimensionError);
}

TEST(ProjectTest, SignConventionAndDeterminism) {
  Rng rng(5);
  std::vector<double> flat(60 * 4);
  for (auto& x : flat) x = rng.normal();
  const auto a = project2d(flat, 4);
  const auto b = project2d(flat, 4);
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    EXPECT_EQ(a.points[i][0], b.points[i][0]);
    EXPECT_EQ(a.points[i][1], b.points[i][1]);
  }
  // Flipping every coordinate of the data must not flip the projection's sign convention.
  auto neg = flat;
  for (auto& x : neg) x = -x;
  const auto c = project2d(neg, 4);
  for (std::size_t i = 0; i < a.points.size(); ++i) EXPECT_NEAR(c.points[i][0], -a.points[i][0], 1e-10);
  const auto ra = analyze_latents(flat, 4), rb = analyze_latents(flat, 4);
  EXPECT_EQ(ra.stats.density_cv, rb.stats.density_cv);
  EXPECT_EQ(ra.stats.gini, rb.stats.gini);
  EXPECT_EQ(ra.stats.n_points, 60u);
  EXPECT_EQ(ra.stats.grid_size, 64u);
  EXPECT_NEAR(ra.stats.bandwidth, scott_bandwidth(ra.projection.points), 0);
}

TEST(CommutationTest, TopLevelIsExactlyZero) {
  TokenizerConfig c;
  c.image_size = 16;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.enc_width = 16;
  c.dec_width = 16;
  c.heads = 2;
  c.latent_dim = 4;
  c.scales = {1, 2, 4};
  const auto m = make_model<double>(c);
  Rng rng(6);
  std::vector<double> px(2 * 3 * 16 * 16);
  for (auto& v : px) v = rng.uniform() * 2 - 1;
  const Tensor<double> x({2, 3, 16, 16}, px);
  EXPECT_EQ(commutation_residual(m, x, 2), 0.0);
  for (std::size_t s = 0; s < 2; ++s) {
    const double r = commutation_residual(m, x, s);
    EXPECT_TRUE(std::isfinite(r));
    EXPECT_GT(r, 0.0);
  }
  EXPECT_THROW(commutation_residual(m, x, 3), IndexError);
}

}  // namespace
}  // namespace hieratok
