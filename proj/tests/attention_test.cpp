#include <gtest/gtest.h>

#include "hieratok/attention.hpp"
#include "hieratok/numerics/grad_check.hpp"
#include "test_util.hpp"

namespace hieratok {
namespace {

using testing::random_tensor;
using testing::values;
using TD = Tensor<double>;

// Nested-loop definition: level of each token, then compare levels.
bool oracle_allowed(const ScaleSchedule& s, AttentionRegime r, std::size_t q, std::size_t k) {
  std::vector<std::size_t> level;
  for (std::size_t l = 0; l < s.levels(); ++l)
    for (std::size_t i = 0; i < s.counts[l]; ++i) level.push_back(l);
  switch (r) {
    case AttentionRegime::Full:
      return true;
    case AttentionRegime::ScaleIndependent:
      return level[q] == level[k];
    case AttentionRegime::ScaleCausal:
      return level[q] >= level[k];
  }
  return false;
}

std::vector<std::vector<std::size_t>> small_schedules() {
  std::vector<std::vector<std::size_t>> out;
  for (unsigned bits = 1; bits < 256; ++bits) {
    std::vector<std::size_t> g;
    for (std::size_t i = 0; i < 8; ++i)
      if (bits & (1u << i)) g.push_back(i + 1);
    if (g.size() <= 4) out.push_back(g);
  }
  return out;
}

AttentionParams<double> identity_params(std::size_t d) {
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  return {TD({d, d}, eye), TD({d, d}, eye), TD({d, d}, eye), TD({d, d}, eye)};
}

TEST(RegimeTest, ParseAndFormatRoundTrip) {
  for (auto r : {AttentionRegime::Full, AttentionRegime::ScaleIndependent, AttentionRegime::ScaleCausal})
    EXPECT_EQ(parse_regime(to_string(r)), r);
  EXPECT_THROW(parse_regime("causal"), ConfigError);
}

TEST(MaskTest, ScaleCausalTwoLevels) {
  const auto m = build_mask(build_schedule(2, {1, 2}), AttentionRegime::ScaleCausal);
  ASSERT_EQ(m.size, 5u);
  EXPECT_TRUE(m.allowed(0, 0));
  for (std::size_t k = 1; k < 5; ++k) EXPECT_FALSE(m.allowed(0, k));
  for (std::size_t q = 1; q < 5; ++q)
    for (std::size_t k = 0; k < 5; ++k) EXPECT_TRUE(m.allowed(q, k));
}

TEST(MaskTest, ScaleIndependentTwoLevels) {
  const auto m = build_mask(build_schedule(2, {1, 2}), AttentionRegime::ScaleIndependent);
  EXPECT_TRUE(m.allowed(0, 0));
  for (std::size_t k = 1; k < 5; ++k) EXPECT_FALSE(m.allowed(0, k));
  for (std::size_t q = 1; q < 5; ++q) {
    EXPECT_FALSE(m.allowed(q, 0));
    for (std::size_t k = 1; k < 5; ++k) EXPECT_TRUE(m.allowed(q, k));
  }
}

TEST(MaskTest, FullIsAllTrue) {
  const auto m = build_mask(build_schedule(4, {1, 2, 4}), AttentionRegime::Full);
  for (auto a : m.allow) EXPECT_EQ(a, 1);
}

TEST(MaskTest, MatchesNestedLoopDefinitionForAllSmallSchedules) {
  for (const auto& g : small_schedules()) {
    const auto s = build_schedule(g.back(), g);
    for (auto r : {AttentionRegime::Full, AttentionRegime::ScaleIndependent, AttentionRegime::ScaleCausal}) {
      const auto m = build_mask(s, r);
      ASSERT_EQ(m.size, s.total);
      for (std::size_t q = 0; q < m.size; ++q) {
        bool any = false;
        for (std::size_t k = 0; k < m.size; ++k) {
          ASSERT_EQ(m.allowed(q, k), oracle_allowed(s, r, q, k));
          any = any || m.allowed(q, k);
        }
        ASSERT_TRUE(any);
      }
    }
  }
}

TEST(MhaTest, SingleTokenReturnsValueProjection) {
  Rng rng(1);
  auto p = identity_params(4);
  p.wv = random_tensor(rng, {4, 4});
  TD x = random_tensor(rng, {1, 1, 4});
  const auto mask = build_mask(build_schedule(1, {1}), AttentionRegime::Full);
  const auto y = values(masked_mha(x, p, 2, mask));
  const auto ref = values(matmul(x, p.wv));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], ref[i], 1e-15);
}

TEST(MhaTest, FullMaskMatchesUnmaskedAttentionExactly) {
  Rng rng(2);
  const auto s = build_schedule(4, {1, 2, 4});
  const auto p = make_attention_params<double>(8, rng, 0.3);
  TD x = random_tensor(rng, {2, s.total, 8});
  const auto y = values(masked_mha(x, p, 2, build_mask(s, AttentionRegime::Full)));

  // Same computation without any mask tensor.
  auto heads = [](const TD& t) { return permute(reshape(t, {2, 21, 2, 4}), {0, 2, 1, 3}); };
  TD q = heads(scale(matmul(x, p.wq), 1.0 / std::sqrt(4.0)));
  TD k = heads(matmul(x, p.wk));
  TD v = heads(matmul(x, p.wv));
  TD o = matmul(softmax(matmul(q, transpose_last(k)), 3), v);
  const auto ref = values(matmul(reshape(permute(o, {0, 2, 1, 3}), {2, 21, 8}), p.wo));
  EXPECT_EQ(y, ref);
}

TEST(MhaTest, ScaleCausalEqualsPerPrefixAttention) {
  Rng rng(3);
  const auto s = build_schedule(2, {1, 2});
  const auto p = make_attention_params<double>(4, rng, 0.5);
  TD x = random_tensor(rng, {1, 5, 4});
  const auto y = values(masked_mha(x, p, 2, build_mask(s, AttentionRegime::ScaleCausal)));

  const auto prefix1 = values(masked_mha(slice(x, 1, 0, 1), p, 2, build_mask(build_schedule(1, {1}), AttentionRegime::Full)));
  const auto full = values(masked_mha(x, p, 2, build_mask(s, AttentionRegime::Full)));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y[j], prefix1[j], 1e-14);
  for (std::size_t i = 4; i < 20; ++i) EXPECT_NEAR(y[i], full[i], 1e-14);
}

TEST(MhaTest, WidthNotDivisibleByHeads) {
  Rng rng(4);
  const auto p = make_attention_params<double>(6, rng);
  const auto mask = build_mask(build_schedule(2, {2}), AttentionRegime::Full);
  EXPECT_THROW(masked_mha(random_tensor(rng, {1, 4, 6}), p, 4, mask), ConfigError);
  EXPECT_THROW(masked_mha(random_tensor(rng, {1, 3, 6}), p, 3, mask), DimensionError);
}

TEST(MhaTest, AttentionRowsSumToOnePerHead) {
  Rng rng(5);
  const auto s = build_schedule(4, {1, 2, 4});
  const auto p = make_attention_params<double>(8, rng, 0.5);
  TD x = random_tensor(rng, {2, s.total, 8});
  for (auto r : {AttentionRegime::Full, AttentionRegime::ScaleIndependent, AttentionRegime::ScaleCausal}) {
    const auto mask = build_mask(s, r);
    const auto w = values(attention_weights(x, p, 4, mask));
    const std::size_t t = s.total;
    for (std::size_t row = 0; row < 2 * 4 * t; ++row) {
      double total = 0;
      const std::size_t q = row % t;
      for (std::size_t k = 0; k < t; ++k) {
        const double v = w[row * t + k];
        if (!mask.allowed(q, k)) {
          EXPECT_EQ(v, 0.0);
        }
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

class CausalityTest : public ::testing::Test {
 protected:
  // Two stacked blocks under the given regime; returns outputs.
  std::vector<double> run(const TD& x, AttentionRegime r) {
    const auto mask = build_mask(s, r);
    TD h = x;
    for (const auto& b : blocks) h = transformer_block(h, b, 2, mask);
    return values(h);
  }

  void SetUp() override {
    Rng rng(6);
    for (int i = 0; i < 2; ++i) blocks.push_back(make_block_params<double>(8, rng, 4, 0.3));
    x = random_tensor(rng, {2, s.total, 8});
  }

  TD perturb_level(std::size_t level) {
    std::vector<double> v = values(x);
    Rng rng(100 + level);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = s.offset(level); t < s.offset(level) + s.counts[level]; ++t)
        for (std::size_t c = 0; c < 8; ++c) v[(b * s.total + t) * 8 + c] += rng.normal();
    return TD(x.shape(), v);
  }

  ScaleSchedule s = build_schedule(4, {1, 2, 4});
  std::vector<BlockParams<double>> blocks;
  TD x;
};

TEST_F(CausalityTest, HigherScalesCannotReachLowerOnes) {
  const auto base = run(x, AttentionRegime::ScaleCausal);
  for (std::size_t t = 1; t < s.levels(); ++t) {
    const auto out = run(perturb_level(t), AttentionRegime::ScaleCausal);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t row = 0; row < s.offset(t); ++row)
        for (std::size_t c = 0; c < 8; ++c) {
          const std::size_t i = (b * s.total + row) * 8 + c;
          ASSERT_EQ(out[i], base[i]);
        }
  }
}

TEST_F(CausalityTest, IndependentScalesAreIsolated) {
  const auto base = run(x, AttentionRegime::ScaleIndependent);
  for (std::size_t t = 0; t < s.levels(); ++t) {
    const auto out = run(perturb_level(t), AttentionRegime::ScaleIndependent);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t row = 0; row < s.total; ++row) {
        if (s.level_of(row) == t) continue;
        for (std::size_t c = 0; c < 8; ++c) {
          const std::size_t i = (b * s.total + row) * 8 + c;
          ASSERT_EQ(out[i], base[i]);
        }
      }
  }
}

TEST_F(CausalityTest, FullAttentionDoesLeak) {
  const auto base = run(x, AttentionRegime::Full);
  const auto out = run(perturb_level(2), AttentionRegime::Full);
  EXPECT_NE(out[0], base[0]);
}

TEST(BlockTest, ZeroBranchesGiveIdentity) {
  Rng rng(7);
  auto p = make_block_params<double>(8, rng);
  std::fill(p.attn.wo.mutable_data().begin(), p.attn.wo.mutable_data().end(), 0.0);
  std::fill(p.fc2.mutable_data().begin(), p.fc2.mutable_data().end(), 0.0);
  TD x = random_tensor(rng, {1, 5, 8});
  EXPECT_EQ(values(transformer_block(x, p, 2, build_mask(build_schedule(2, {1, 2}), AttentionRegime::ScaleCausal))),
            values(x));
}

TEST(BlockTest, EvalIgnoresDropPath) {
  Rng rng(8);
  const auto p = make_block_params<double>(8, rng);
  TD x = random_tensor(rng, {1, 4, 8});
  const auto mask = build_mask(build_schedule(2, {2}), AttentionRegime::Full);
  BlockOptions opt;
  opt.drop_path = 0.5;
  EXPECT_EQ(values(transformer_block(x, p, 2, mask, opt)), values(transformer_block(x, p, 2, mask)));
  EXPECT_EQ(values(transformer_block(x, p, 2, mask)), values(transformer_block(x, p, 2, mask)));
}

TEST(BlockTest, DropPathZeroesWholeRowsOfABranch) {
  Rng rng(9);
  auto p = make_block_params<double>(4, rng, 4, 0.3);
  std::fill(p.fc2.mutable_data().begin(), p.fc2.mutable_data().end(), 0.0);
  TD x = random_tensor(rng, {1, 16, 4});
  const auto mask = build_mask(build_schedule(4, {4}), AttentionRegime::Full);
  Rng drop(3);
  BlockOptions opt{1e-6, 0.5, true, &drop};
  const auto y = values(transformer_block(x, p, 2, mask, opt));
  const auto xv = values(x);
  std::size_t dropped = 0;
  for (std::size_t r = 0; r < 16; ++r) {
    bool same = true;
    for (std::size_t c = 0; c < 4; ++c) same = same && y[r * 4 + c] == xv[r * 4 + c];
    dropped += same;
  }
  EXPECT_GT(dropped, 0u);
  EXPECT_LT(dropped, 16u);
}

TEST(BlockTest, GradCheckThroughOneBlock) {
  Rng rng(10);
  const auto s = build_schedule(2, {1, 2});
  auto p = make_block_params<double>(4, rng, 4, 0.4);
  p.ln1_gain = random_tensor(rng, {4}, 1.0, true);
  p.ln2_bias = random_tensor(rng, {4}, 1.0, true);
  TD x = random_tensor(rng, {2, 5, 4}, 1.0, true);
  TD w = random_tensor(rng, {2, 5, 4});
  const auto mask = build_mask(s, AttentionRegime::ScaleCausal);
  const double err = grad_check_params([&] { return sum(mul(transformer_block(x, p, 2, mask), w)); },
                                       {x, p.ln1_gain, p.ln1_bias, p.attn.wq, p.attn.wk, p.attn.wv, p.attn.wo,
                                        p.ln2_gain, p.ln2_bias, p.fc1, p.fc2});
  EXPECT_LT(err, 1e-4);
}

}  // namespace
}  // namespace hieratok
