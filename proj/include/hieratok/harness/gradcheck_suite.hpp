#pragma once

// A fixed library of composed-op gradient checks plus one end-to-end pass
// through a tiny tokenizer, all in double precision.

#include <functional>
#include <string>
#include <vector>

#include "hieratok/attention.hpp"
#include "hieratok/numerics/grad_check.hpp"
#include "hieratok/numerics/ops.hpp"
#include "hieratok/objectives.hpp"
#include "hieratok/pyramid.hpp"
#include "hieratok/tokenizer.hpp"

namespace hieratok {

struct GradCheckResult {
  std::string name;
  double error = 0;
  bool end_to_end = false;
};

namespace detail {

inline Tensor<double> gc_random(Rng& rng, Shape shape, bool requires_grad = true, double std = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal() * std;
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

// Contracting with fixed random weights gives every output a distinct gradient.
inline Tensor<double> gc_probe(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed, 99);
  return sum(mul(y, gc_random(rng, y.shape(), false)));
}

}  // namespace detail

inline TokenizerConfig gradcheck_tiny_config() {
  TokenizerConfig c;
  c.image_size = 8;
  c.patch = 4;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.enc_width = 8;
  c.dec_width = 8;
  c.heads = 2;
  c.latent_dim = 4;
  c.mlp_ratio = 2;
  c.scales = {1, 2};
  c.seed = 11;
  return c;
}

/// Full training-mode loss (sampled latent, drop path, multi-scale targets)
/// of a tiny model, checked against every parameter.
inline double end_to_end_grad_error(const TokenizerConfig& cfg, std::uint64_t seed = 0) {
  const auto m = make_model<double>(cfg);
  // Move norms and biases off their initial values so every path carries signal.
  Rng jitter(seed, 1);
  for (const auto& p : m.parameters()) {
    Tensor<double> t = p.tensor;
    for (auto& v : t.mutable_data()) v += 0.05 * jitter.normal();
  }
  Rng data(seed, 2);
  const std::size_t side = cfg.image_size;
  const Tensor<double> x = detail::gc_random(data, {2, 3, side, side}, false, 0.5);
  LossWeights w;
  w.kl = 1e-2;
  auto f = [&] {
    Rng rng(seed, 3);
    const auto r = reconstruct(m, x, false, &rng, true);
    return multiscale_loss(r.images, image_pyramid(x, m.schedule, cfg.patch), r.code, w).total;
  };
  std::vector<Tensor<double>> params;
  for (const auto& p : m.parameters()) params.push_back(p.tensor);
  return grad_check_params(f, params);
}

/// Runs every case; `include_model` adds the end-to-end tokenizer checks.
inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 0, bool include_model = true) {
  using TD = Tensor<double>;
  std::vector<GradCheckResult> out;
  Rng rng(seed, 7);
  auto add_case = [&](const std::string& name, const std::function<TD()>& f, std::vector<TD> params) {
    out.push_back({name, grad_check_params(f, std::move(params)), false});
  };

  {
    TD a = detail::gc_random(rng, {2, 3, 4}), w = detail::gc_random(rng, {4, 5}), b = detail::gc_random(rng, {5});
    add_case("linear", [=] { return detail::gc_probe(linear(a, w, b), 1); }, {a, w, b});
    TD c = detail::gc_random(rng, {2, 4, 3});
    add_case("batched_matmul", [=] { return detail::gc_probe(matmul(a, c), 2); }, {a, c});
  }
  {
    TD a = detail::gc_random(rng, {3, 4}), r = detail::gc_random(rng, {4});
    add_case("broadcast_add_sub_mul",
             [=] { return detail::gc_probe(mul(sub(add(a, r), scale(r, 0.5)), add(a, a)), 3); }, {a, r});
    add_case("gelu_exp_square", [=] { return detail::gc_probe(add(gelu(a), scale(exp(square(a)), 0.1)), 4); }, {a});
  }
  {
    TD a = detail::gc_random(rng, {2, 5, 5});
    const TD mask = build_mask(build_schedule(2, {1, 2}), AttentionRegime::ScaleCausal).additive<double>();
    add_case("masked_softmax", [=] { return detail::gc_probe(softmax(a, 2, mask), 5); }, {a});
  }
  {
    TD a = detail::gc_random(rng, {3, 6}), g = detail::gc_random(rng, {6}), b = detail::gc_random(rng, {6});
    add_case("layer_norm", [=] { return detail::gc_probe(layer_norm(a, g, b, 1e-6), 6); }, {a, g, b});
  }
  {
    TD x = detail::gc_random(rng, {1, 2, 4, 4}), k = detail::gc_random(rng, {3, 2, 2, 2});
    add_case("conv2d_area_pool", [=] { return detail::gc_probe(area_pool(conv2d(x, k, 2), 1, 1), 7); }, {x, k});
  }
  {
    TD a = detail::gc_random(rng, {2, 3, 4});
    add_case("permute_concat_slice",
             [=] {
               TD p = permute(a, {2, 0, 1});
               return add(detail::gc_probe(concat<double>({slice(p, 0, 1, 3), p}, 0), 8),
                          detail::gc_probe(transpose_last(p), 13));
             },
             {a});
  }
  {
    const auto sched = build_schedule(2, {1, 2});
    const AttentionMask mask = build_mask(sched, AttentionRegime::ScaleCausal);
    Rng init(seed, 11);
    BlockParams<double> p = make_block_params<double>(4, init, 2, 0.3);
    TD x = detail::gc_random(rng, {2, 5, 4});
    add_case("transformer_block",
             [=] { return detail::gc_probe(transformer_block(x, p, 2, mask), 9); },
             {x, p.ln1_gain, p.attn.wq, p.attn.wk, p.attn.wv, p.attn.wo, p.ln2_bias, p.fc1, p.fc2});
  }
  {
    const auto sched = build_schedule(4, {1, 2, 4});
    Rng init(seed, 12);
    ConvDownsampler<double> ds = make_conv_downsampler<double>(sched, 3, init, 0.5);
    TD z = detail::gc_random(rng, {1, 4, 4, 3});
    std::vector<TD> params{z};
    for (const auto& chain : ds.chains) params.insert(params.end(), chain.begin(), chain.end());
    add_case("conv_pyramid", [=] { return detail::gc_probe(downsample_conv(ds, z, sched).concatenated, 10); },
             params);
  }
  {
    TD mu = detail::gc_random(rng, {2, 3}), lv = detail::gc_random(rng, {2, 3}, true, 0.5);
    TD pred = detail::gc_random(rng, {2, 3}), target = detail::gc_random(rng, {2, 3}, false);
    LossWeights w;
    w.l1 = 0.0;  // |d| has a kink at 0; the L1 term is covered end to end
    add_case("kl_mse_losses", [=] { return add(kl_loss(mu, lv), rec_loss(pred, target, w)); }, {mu, lv, pred});
  }

  if (include_model) {
    auto c = gradcheck_tiny_config();
    out.push_back({"tokenizer_conv_scalecausal", end_to_end_grad_error(c, seed), true});
    c.downsample_mode = DownsampleMode::Interp;
    c.regime = AttentionRegime::ScaleIndependent;
    out.push_back({"tokenizer_interp_scaleindependent", end_to_end_grad_error(c, seed), true});
  }
  return out;
}

}  // namespace hieratok
