#include <gtest/gtest.h>

#include "hieratok/numerics/grad_check.hpp"
#include "hieratok/pyramid.hpp"
#include "test_util.hpp"

namespace hieratok {
namespace {

using testing::random_tensor;
using testing::values;
using TD = Tensor<double>;

std::size_t sum_of_squares(const std::vector<std::size_t>& grids) {
  std::size_t t = 0;
  for (std::size_t g : grids) t += g * g;
  return t;
}

TEST(ScheduleTest, TokenAccountingMatchesReportedCounts) {
  EXPECT_EQ(build_schedule(16, {1, 2, 4, 8, 16}).total, 341u);
  EXPECT_EQ(build_schedule(16, {16}).total, 256u);
  EXPECT_EQ(build_schedule(8, {1, 2, 4, 8}).total - build_schedule(8, {8}).total, 21u);
}

TEST(ScheduleTest, TotalsMatchSumOfSquares) {
  const std::vector<std::vector<std::size_t>> cases{
      {1, 2, 4, 8, 12, 16}, {1, 2, 4, 8}, {3, 5, 7}, {16}, {2, 16}, {1, 16}};
  for (const auto& g : cases) {
    const auto s = build_schedule(g.back(), g);
    EXPECT_EQ(s.total, sum_of_squares(g));
    EXPECT_EQ(s.counts.size(), g.size());
  }
  EXPECT_EQ(build_schedule(16, {1, 2, 4, 8, 12, 16}).total, 485u);
}

TEST(ScheduleTest, RejectsBadGridLists) {
  EXPECT_THROW(build_schedule(8, {}), ScheduleError);
  EXPECT_THROW(build_schedule(8, {1, 4, 2, 8}), ScheduleError);
  EXPECT_THROW(build_schedule(8, {1, 2, 2, 8}), ScheduleError);
  EXPECT_THROW(build_schedule(8, {1, 2, 4}), ScheduleError);
  EXPECT_THROW(build_schedule(8, {0, 8}), ScheduleError);
}

TEST(ScheduleTest, ParseGridList) {
  EXPECT_EQ(parse_grid_list("1,2,4,8"), (std::vector<std::size_t>{1, 2, 4, 8}));
  EXPECT_EQ(parse_grid_list(" 3 , 6"), (std::vector<std::size_t>{3, 6}));
  EXPECT_THROW(parse_grid_list("1,,2"), ScheduleError);
  EXPECT_THROW(parse_grid_list("1,x"), ScheduleError);
  EXPECT_THROW(parse_grid_list("-1,2"), ScheduleError);
  EXPECT_EQ(format_grid_list({1, 2, 4}), "1,2,4");
}

TEST(ScheduleTest, LevelOfAndOffsets) {
  const auto s = build_schedule(4, {1, 2, 4});
  EXPECT_EQ(s.offset(0), 0u);
  EXPECT_EQ(s.offset(1), 1u);
  EXPECT_EQ(s.offset(2), 5u);
  EXPECT_EQ(s.level_of(0), 0u);
  EXPECT_EQ(s.level_of(4), 1u);
  EXPECT_EQ(s.level_of(20), 2u);
  EXPECT_THROW(s.level_of(21), IndexError);
}

TEST(InterpDownsampleTest, ConstantStaysConstant) {
  const auto s = build_schedule(8, {1, 2, 3, 4, 8});
  const auto p = downsample_interp(TD::full({2, 8, 8, 3}, -1.25), s);
  ASSERT_EQ(p.maps.size(), 5u);
  for (const auto& m : p.maps)
    for (double v : m.data()) EXPECT_NEAR(v, -1.25, 1e-14);
  EXPECT_EQ(p.concatenated.shape(), (Shape{2, s.total, 3}));
}

TEST(InterpDownsampleTest, CoarsestTokenIsBlockMean) {
  // 2x2 map [[a,b],[c,d]] with one channel.
  const double a = 1.5, b = -2.0, c = 0.25, d = 4.0;
  const auto p = downsample_interp(TD({1, 2, 2, 1}, {a, b, c, d}), build_schedule(2, {1, 2}));
  EXPECT_DOUBLE_EQ(p.maps[0].item(), (a + b + c + d) / 4);
}

TEST(InterpDownsampleTest, SingleLevelIsIdentity) {
  Rng rng(1);
  TD z = random_tensor(rng, {1, 16, 16, 2});
  const auto p = downsample_interp(z, build_schedule(16, {16}));
  ASSERT_EQ(p.maps.size(), 1u);
  EXPECT_EQ(values(p.maps[0]), values(z));
  EXPECT_EQ(values(p.concatenated), values(z));
}

TEST(InterpDownsampleTest, LevelMeansMatchBaseMean) {
  Rng rng(4);
  const auto s = build_schedule(8, {1, 2, 4, 8});
  for (int t = 0; t < 10; ++t) {
    TD z = random_tensor(rng, {2, 8, 8, 4});
    const auto p = downsample_interp(z, s);
    for (const auto& m : p.maps) EXPECT_NEAR(mean(m).item(), mean(z).item(), 1e-12);
  }
}

TEST(InterpDownsampleTest, RejectsWrongBaseSize) {
  EXPECT_THROW(downsample_interp(TD::zeros({1, 4, 4, 2}), build_schedule(8, {2, 8})), DimensionError);
}

TEST(PyramidTest, SplitRestacksBitExactly) {
  Rng rng(9);
  const std::vector<std::vector<std::size_t>> cases{{1, 2, 4, 8}, {3, 5, 8}, {8}, {2, 6, 7, 8}};
  for (const auto& g : cases) {
    const auto s = build_schedule(8, g);
    const auto p = downsample_interp(random_tensor(rng, {3, 8, 8, 5}), s);
    EXPECT_EQ(p.concatenated.shape()[1], s.total);
    const auto back = split_levels(p.concatenated, s);
    ASSERT_EQ(back.size(), p.maps.size());
    for (std::size_t l = 0; l < back.size(); ++l) {
      EXPECT_EQ(back[l].shape(), p.maps[l].shape());
      EXPECT_EQ(values(back[l]), values(p.maps[l]));
    }
  }
}

TEST(ConvDownsampleTest, AveragingKernelsReproduceInterp) {
  Rng rng(2);
  const auto s = build_schedule(8, {1, 2, 4, 8});
  TD z = random_tensor(rng, {2, 8, 8, 3});
  const auto conv = downsample_conv(averaging_conv_downsampler<double>(s, 3), z, s);
  const auto interp = downsample_interp(z, s);
  for (std::size_t l = 0; l < s.levels(); ++l) {
    const auto a = values(conv.maps[l]);
    const auto b = values(interp.maps[l]);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(ConvDownsampleTest, ZeroKernelsGiveZeroLevels) {
  Rng rng(3);
  const auto s = build_schedule(4, {1, 2, 4});
  auto ds = make_conv_downsampler<double>(s, 2, rng);
  for (auto& chain : ds.chains)
    for (auto& k : chain) std::fill(k.mutable_data().begin(), k.mutable_data().end(), 0.0);
  TD z = random_tensor(rng, {1, 4, 4, 2});
  const auto p = downsample_conv(ds, z, s);
  for (std::size_t l = 0; l + 1 < s.levels(); ++l)
    for (double v : p.maps[l].data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(values(p.maps.back()), values(z));
}

TEST(ConvDownsampleTest, SingleScaleAppliesNoKernels) {
  Rng rng(3);
  const auto s = build_schedule(8, {8});
  const auto ds = make_conv_downsampler<double>(s, 2, rng);
  EXPECT_TRUE(ds.chains.empty());
  TD z = random_tensor(rng, {1, 8, 8, 2});
  EXPECT_EQ(values(downsample_conv(ds, z, s).concatenated), values(z));
}

TEST(ConvDownsampleTest, ChainLengthsFollowRatios) {
  Rng rng(3);
  const auto ds = make_conv_downsampler<double>(build_schedule(8, {1, 2, 4, 8}), 2, rng);
  ASSERT_EQ(ds.chains.size(), 3u);
  EXPECT_EQ(ds.chains[0].size(), 3u);
  EXPECT_EQ(ds.chains[1].size(), 2u);
  EXPECT_EQ(ds.chains[2].size(), 1u);
}

TEST(ConvDownsampleTest, NonDyadicRatioIsConfigError) {
  Rng rng(3);
  const auto s = build_schedule(16, {1, 2, 4, 8, 12, 16});
  try {
    make_conv_downsampler<double>(s, 2, rng);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("interp"), std::string::npos);
  }
}

TEST(ConvDownsampleTest, DifferentiableInKernels) {
  Rng rng(12);
  const auto s = build_schedule(4, {1, 2, 4});
  auto ds = make_conv_downsampler<double>(s, 2, rng, 0.5);
  TD z = random_tensor(rng, {1, 4, 4, 2});
  TD w = random_tensor(rng, {1, s.total, 2});
  std::vector<TD> params;
  for (auto& c : ds.chains)
    for (auto& k : c) params.push_back(k);
  const double err = grad_check_params([&] { return sum(mul(downsample_conv(ds, z, s).concatenated, w)); }, params);
  EXPECT_LT(err, 1e-4);
}

TEST(PositionalEncodingTest, TopScaleIsSpatialWhenScaleTableIsZero) {
  Rng rng(5);
  const auto s = build_schedule(4, {1, 2, 4});
  PEParams<double> pe{random_tensor(rng, {4, 4, 3}), TD::zeros({3, 3})};
  const auto enc = positional_encoding(pe, s);
  EXPECT_EQ(values(enc[2]), values(pe.spatial));
}

TEST(PositionalEncodingTest, ZeroSpatialGivesBroadcastScaleEmbedding) {
  Rng rng(5);
  const auto s = build_schedule(4, {1, 2, 4});
  PEParams<double> pe{TD::zeros({4, 4, 3}), random_tensor(rng, {3, 3})};
  const auto enc = positional_encoding(pe, s);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(enc[l].shape(), (Shape{s.grids[l], s.grids[l], 3}));
    for (std::size_t i = 0; i < enc[l].numel(); ++i) EXPECT_EQ(enc[l][i], pe.per_scale[l * 3 + i % 3]);
  }
}

TEST(PositionalEncodingTest, ConstantSpatialPlusScaleVector) {
  const auto s = build_schedule(6, {2, 3, 6});
  const double c = 0.3;
  PEParams<double> pe{TD::full({6, 6, 2}, c), TD({3, 2}, {1, 2, 3, 4, 5, 6})};
  const auto enc = positional_encoding(pe, s);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t i = 0; i < enc[l].numel(); ++i) EXPECT_NEAR(enc[l][i], c + pe.per_scale[l * 2 + i % 2], 1e-14);
}

TEST(ImagePyramidTest, TopLevelIsInputAndConstantsStayConstant) {
  Rng rng(6);
  const auto s = build_schedule(4, {1, 2, 4});
  TD x = random_tensor(rng, {2, 3, 8, 8});
  const auto p = image_pyramid(x, s, 2);
  EXPECT_EQ(values(p[2]), values(x));
  EXPECT_EQ(p[0].shape(), (Shape{2, 3, 2, 2}));
  EXPECT_EQ(p[1].shape(), (Shape{2, 3, 4, 4}));
  const auto cp = image_pyramid(TD::full({1, 3, 8, 8}, 0.4), s, 2);
  for (const auto& l : cp)
    for (double v : l.data()) EXPECT_NEAR(v, 0.4, 1e-15);
  EXPECT_THROW(image_pyramid(x, s, 4), DimensionError);
}

TEST(ImagePyramidTest, CheckerboardPoolsToHalf) {
  std::vector<double> cb(64);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) cb[y * 8 + x] = static_cast<double>((x + y) % 2);
  const double oracle = std::accumulate(cb.begin(), cb.end(), 0.0) / 64.0;
  const auto p = image_pyramid(TD({1, 1, 8, 8}, cb), build_schedule(8, {1, 8}), 1);
  EXPECT_DOUBLE_EQ(p[0].item(), oracle);
  EXPECT_DOUBLE_EQ(oracle, 0.5);
}

}  // namespace
}  // namespace hieratok
