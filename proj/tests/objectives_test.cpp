#include <gtest/gtest.h>

#include <cmath>

#include "hieratok/numerics/grad_check.hpp"
#include "hieratok/objectives.hpp"
#include "test_util.hpp"

namespace hieratok {
namespace {

using testing::random_tensor;
using testing::values;
using TD = Tensor<double>;

TD uniform_image(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform() * 2.0 - 1.0;
  return TD(std::move(shape), v);
}

TEST(RecLossTest, IdenticalInputsGiveZero) {
  Rng rng(1);
  const TD x = uniform_image(rng, {2, 3, 4, 4});
  EXPECT_EQ(rec_loss(x, x, LossWeights{}).item(), 0.0);
}

TEST(RecLossTest, ConstantOffsetClosedForm) {
  Rng rng(2);
  const TD x = uniform_image(rng, {2, 3, 8, 8});
  auto shifted = values(x);
  for (auto& v : shifted) v += 0.1;
  EXPECT_NEAR(rec_loss(TD(x.shape(), shifted), x, LossWeights{}).item(), 0.104, 1e-6);
}

TEST(RecLossTest, ZeroWeightsGiveZero) {
  Rng rng(3);
  LossWeights w;
  w.l1 = 0;
  w.mse = 0;
  EXPECT_EQ(rec_loss(uniform_image(rng, {1, 3, 4, 4}), uniform_image(rng, {1, 3, 4, 4}), w).item(), 0.0);
  EXPECT_THROW(rec_loss(TD::zeros({1, 3, 4, 4}), TD::zeros({1, 3, 2, 2}), w), ShapeError);
}

TEST(RecLossTest, PermutationInvariantOverBatch) {
  Rng rng(4);
  const TD a = uniform_image(rng, {3, 3, 4, 4});
  const TD b = uniform_image(rng, {3, 3, 4, 4});
  const std::vector<std::size_t> order{2, 0, 1};
  auto swap = [&](const TD& t) {
    const std::size_t item = t.numel() / 3;
    std::vector<double> v(t.numel());
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < item; ++j) v[i * item + j] = t[order[i] * item + j];
    return TD(t.shape(), v);
  };
  EXPECT_NEAR(rec_loss(a, b, LossWeights{}).item(), rec_loss(swap(a), swap(b), LossWeights{}).item(), 1e-14);
}

TEST(KlLossTest, ClosedFormCases) {
  EXPECT_EQ(kl_loss(TD::zeros({4, 3}), TD::zeros({4, 3})).item(), 0.0);
  EXPECT_NEAR(kl_loss(TD::full({4, 3}, 1.0), TD::zeros({4, 3})).item(), 0.5, 1e-6);
  EXPECT_NEAR(kl_loss(TD::zeros({4, 3}), TD::full({4, 3}, std::log(2.0))).item(), 0.5 * (1.0 - std::log(2.0)),
              1e-6);
  EXPECT_NEAR(kl_loss(TD::zeros({1}), TD::full({1}, std::log(2.0))).item(), 0.1534, 1e-4);
}

TEST(KlLossTest, NonnegativeOnRandomInputs) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const TD mu = random_tensor(rng, {3, 5}, 2.0);
    const TD lv = random_tensor(rng, {3, 5}, 3.0);
    EXPECT_GT(kl_loss(mu, lv).item(), 0.0);
  }
}

TEST(KlLossTest, NonFiniteLogvarThrows) {
  EXPECT_THROW(kl_loss(TD::zeros({2}), TD({2}, {0.0, std::nan("")})), NumericError);
}

TEST(KlLossTest, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  TD mu = random_tensor(rng, {2, 3}, 1.0, true);
  TD lv = random_tensor(rng, {2, 3}, 0.5, true);
  EXPECT_LT(grad_check_params([&] { return kl_loss(mu, lv); }, {mu, lv}), 1e-7);
}

LatentCode<double> zero_code() { return {TD::zeros({1, 2, 2, 2}), TD::zeros({1, 2, 2, 2}), {}}; }

TEST(MultiscaleLossTest, SingleLevelEqualsCompositeLoss) {
  Rng rng(7);
  const TD out = uniform_image(rng, {2, 3, 8, 8});
  const TD tgt = uniform_image(rng, {2, 3, 8, 8});
  LatentCode<double> code{random_tensor(rng, {2, 2, 2, 4}), random_tensor(rng, {2, 2, 2, 4}), {}};
  LossWeights w;
  w.kl = 0.3;
  const auto l = multiscale_loss<double>({out}, {tgt}, code, w);
  EXPECT_EQ(l.total.item(), add(rec_loss(out, tgt, w), scale(kl_loss(code), 0.3)).item());
  ASSERT_EQ(l.per_scale.size(), 1u);
}

TEST(MultiscaleLossTest, PerfectLevelsLeaveOnlyKl) {
  Rng rng(8);
  const TD a = uniform_image(rng, {1, 3, 4, 4});
  const TD b = uniform_image(rng, {1, 3, 8, 8});
  LatentCode<double> code{TD::full({1, 2, 2, 2}, 1.0), TD::zeros({1, 2, 2, 2}), {}};
  LossWeights w;
  const auto l = multiscale_loss<double>({a, b}, {a, b}, code, w);
  EXPECT_NEAR(l.total.item(), w.kl * 0.5, 1e-18);
  EXPECT_NEAR(l.kl, 0.5, 1e-12);
}

TEST(MultiscaleLossTest, TwoLevelsAverage) {
  Rng rng(9);
  const TD o1 = uniform_image(rng, {1, 3, 4, 4}), t1 = uniform_image(rng, {1, 3, 4, 4});
  const TD o2 = uniform_image(rng, {1, 3, 8, 8}), t2 = uniform_image(rng, {1, 3, 8, 8});
  LossWeights w;
  const double a = rec_loss(o1, t1, w).item(), b = rec_loss(o2, t2, w).item();
  const auto l = multiscale_loss<double>({o1, o2}, {t1, t2}, zero_code(), w);
  EXPECT_NEAR(l.total.item(), (a + b) / 2, 1e-14);
  EXPECT_EQ(l.per_scale, (std::vector<double>{a, b}));
  w.scale_weights = {1.0, 3.0};
  EXPECT_NEAR(multiscale_loss<double>({o1, o2}, {t1, t2}, zero_code(), w).total.item(), (a + 3 * b) / 4, 1e-14);
}

TEST(MultiscaleLossTest, Errors) {
  const TD x = TD::zeros({1, 3, 4, 4});
  LossWeights w;
  EXPECT_THROW(multiscale_loss<double>({x, x}, {x}, zero_code(), w), DimensionError);
  w.perceptual = 0.1;
  EXPECT_THROW(multiscale_loss<double>({x}, {x}, zero_code(), w), ConfigError);
  w.perceptual = 0;
  w.adversarial = 0.1;
  EXPECT_THROW(w.validate(), ConfigError);
  w.adversarial = 0;
  w.scale_weights = {1.0, 2.0};
  EXPECT_THROW(multiscale_loss<double>({x}, {x}, zero_code(), w), ConfigError);
}

std::vector<NamedParam<double>> scalar_param(double value, double grad, bool decay) {
  TD p({1}, {value}, true);
  p.mutable_grad()[0] = grad;
  return {{"w", p, decay}};
}

TEST(AdamWTest, ZeroGradientNoDecayLeavesParams) {
  auto params = scalar_param(0.7, 0.0, true);
  AdamWOptions opt;
  opt.weight_decay = 0;
  AdamW<double> adam(params, opt);
  for (int i = 0; i < 5; ++i) adam.step(0.1);
  EXPECT_EQ(params[0].tensor[0], 0.7);
  EXPECT_EQ(adam.step_count(), 5u);
}

TEST(AdamWTest, FirstStepMovesByLearningRate) {
  auto params = scalar_param(1.0, 1.0, true);
  AdamWOptions opt;
  opt.weight_decay = 0;
  AdamW<double> adam(params, opt);
  adam.step(0.1);
  EXPECT_NEAR(params[0].tensor[0], 0.9, 1e-6);
}

TEST(AdamWTest, DecoupledDecayShrinksMultiplicatively) {
  auto params = scalar_param(2.0, 0.0, true);
  AdamW<double> adam(params);
  adam.step(0.1);
  EXPECT_NEAR(params[0].tensor[0], 2.0 * (1.0 - 0.1 * 0.05), 1e-12);
  auto exempt = scalar_param(2.0, 0.0, false);
  AdamW<double> adam2(exempt);
  adam2.step(0.1);
  EXPECT_EQ(exempt[0].tensor[0], 2.0);
}

// Scalar reference of the update rule, stepped by hand.
TEST(AdamWTest, MatchesHandUnrolledSteps) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.95, wd = 0.05, eps = 1e-8;
  const std::vector<double> grads{0.5, -1.5, 2.0};
  auto params = scalar_param(1.0, 0.0, true);
  AdamW<double> adam(params);
  double w = 1.0, m = 0, v = 0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, static_cast<double>(t)));
    const double vh = v / (1 - std::pow(b2, static_cast<double>(t)));
    w = w - lr * wd * w - lr * mh / (std::sqrt(vh) + eps);
    TD handle = params[0].tensor;
    handle.mutable_grad()[0] = g;
    adam.step(lr);
    EXPECT_NEAR(params[0].tensor[0], w, 1e-14);
  }
}

TEST(AdamWTest, NanGradientNamesParameter) {
  auto params = scalar_param(1.0, std::nan(""), true);
  params[0].name = "decoder.3.mlp.fc1";
  AdamW<double> adam(params);
  try {
    adam.step(0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.3.mlp.fc1"), std::string::npos);
  }
  EXPECT_EQ(params[0].tensor[0], 1.0);
}

TEST(AdamWTest, DecreasesConvexQuadratic) {
  Rng rng(10);
  TD x = random_tensor(rng, {8}, 1.0, true);
  std::vector<NamedParam<double>> params{{"x", x, false}};
  AdamW<double> adam(params);
  const double before = sum(square(x)).item();
  x.zero_grad();
  sum(square(x)).backward();
  adam.step(1e-3);
  EXPECT_LT(sum(square(x)).item(), before);
}

TEST(ClipGradNormTest, ScalesToMaxNorm) {
  TD a({2}, {0, 0}, true), b({1}, {0}, true);
  a.mutable_grad()[0] = 3;
  a.mutable_grad()[1] = 0;
  b.mutable_grad()[0] = 4;
  std::vector<NamedParam<double>> params{{"a", a, true}, {"b", b, true}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm(params, 1.0), 1.0, 1e-15);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
}

TEST(CosineLrTest, Boundaries) {
  const std::size_t total = 1000;
  const double start = 1e-4, end = 1e-5, ratio = 0.03;
  EXPECT_EQ(cosine_lr(0, total, ratio, start, end), 0.0);
  EXPECT_NEAR(cosine_lr(30, total, ratio, start, end), start, 1e-12);
  EXPECT_NEAR(cosine_lr(15, total, ratio, start, end), start / 2, 1e-12);
  EXPECT_EQ(cosine_lr(total, total, ratio, start, end), end);
  EXPECT_NEAR(cosine_lr(515, total, ratio, start, end), (start + end) / 2, 1e-12);
  EXPECT_THROW(cosine_lr(total + 1, total, ratio, start, end), ConfigError);
}

TEST(CosineLrTest, MonotoneAfterWarmup) {
  double prev = cosine_lr(30, 1000, 0.03, 1e-3, 1e-5);
  for (std::size_t s = 31; s <= 1000; ++s) {
    const double lr = cosine_lr(s, 1000, 0.03, 1e-3, 1e-5);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_EQ(cosine_lr(10, 10, 0.0, 2.0, 1.0), 1.0);
  EXPECT_EQ(cosine_lr(0, 10, 0.0, 2.0, 1.0), 2.0);
}

}  // namespace
}  // namespace hieratok
