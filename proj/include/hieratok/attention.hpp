#pragma once

// Attention regimes over a concatenated token pyramid and the masked
// multi-head attention / pre-norm transformer block built on them.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hieratok/errors.hpp"
#include "hieratok/numerics/ops.hpp"
#include "hieratok/numerics/rng.hpp"
#include "hieratok/pyramid.hpp"

namespace hieratok {

enum class AttentionRegime { Full, ScaleIndependent, ScaleCausal };

inline std::string to_string(AttentionRegime r) {
  switch (r) {
    case AttentionRegime::Full:
      return "full";
    case AttentionRegime::ScaleIndependent:
      return "scaleindependent";
    case AttentionRegime::ScaleCausal:
      return "scalecausal";
  }
  return "full";
}

inline AttentionRegime parse_regime(const std::string& s) {
  if (s == "full") return AttentionRegime::Full;
  if (s == "scaleindependent") return AttentionRegime::ScaleIndependent;
  if (s == "scalecausal") return AttentionRegime::ScaleCausal;
  throw ConfigError("unknown attention regime '" + s + "' (expected full, scaleindependent or scalecausal)");
}

/// Boolean visibility matrix over the concatenated pyramid: allow(q, k) says
/// whether query row q may attend to key row k.
struct AttentionMask {
  std::size_t size = 0;
  std::vector<std::uint8_t> allow;
  ScaleSchedule schedule;
  AttentionRegime regime = AttentionRegime::Full;

  bool allowed(std::size_t q, std::size_t k) const { return allow[q * size + k] != 0; }

  /// [T, T] with 0 where allowed and kMaskValue elsewhere.
  template <typename T>
  Tensor<T> additive() const {
    std::vector<T> v(allow.size());
    for (std::size_t i = 0; i < allow.size(); ++i) v[i] = allow[i] ? T(0) : static_cast<T>(kMaskValue);
    return Tensor<T>({size, size}, std::move(v));
  }
};

/// Full: everything visible. ScaleIndependent: block diagonal over scales.
/// ScaleCausal: block lower triangular, a query at scale s sees every key at
/// scales <= s, including its own scale in both directions.
inline AttentionMask build_mask(const ScaleSchedule& schedule, AttentionRegime regime) {
  AttentionMask m;
  m.size = schedule.total;
  m.schedule = schedule;
  m.regime = regime;
  m.allow.assign(m.size * m.size, regime == AttentionRegime::Full ? 1 : 0);
  if (regime == AttentionRegime::Full) return m;
  for (std::size_t qs = 0; qs < schedule.levels(); ++qs) {
    const std::size_t q0 = schedule.offset(qs), q1 = q0 + schedule.counts[qs];
    const std::size_t k0 = regime == AttentionRegime::ScaleCausal ? 0 : q0;
    for (std::size_t q = q0; q < q1; ++q)
      std::fill(m.allow.begin() + static_cast<std::ptrdiff_t>(q * m.size + k0),
                m.allow.begin() + static_cast<std::ptrdiff_t>(q * m.size + q1), 1);
  }
  return m;
}

/// Bias-free projections, each [d, d].
template <typename T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;
};

template <typename T>
Tensor<T> init_weight(Rng& rng, Shape shape, double std) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(std));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
AttentionParams<T> make_attention_params(std::size_t width, Rng& rng, double init_std = 0.02) {
  return {init_weight<T>(rng, {width, width}, init_std), init_weight<T>(rng, {width, width}, init_std),
          init_weight<T>(rng, {width, width}, init_std), init_weight<T>(rng, {width, width}, init_std)};
}

namespace detail {

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t b = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
  return permute(reshape(x, {b, t, heads, d / heads}), {0, 2, 1, 3});
}

template <typename T>
Tensor<T> attention_probs(const Tensor<T>& x, const AttentionParams<T>& p, std::size_t heads,
                          const Tensor<T>& additive_mask, Tensor<T>* values_out) {
  const std::size_t d = x.shape()[2];
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d / heads));
  Tensor<T> q = split_heads(scale(matmul(x, p.wq), inv_sqrt), heads);
  Tensor<T> k = split_heads(matmul(x, p.wk), heads);
  if (values_out) *values_out = split_heads(matmul(x, p.wv), heads);
  return softmax(matmul(q, transpose_last(k)), 3, additive_mask);
}

template <typename T>
void check_mha(const Tensor<T>& x, std::size_t heads, const AttentionMask& mask) {
  if (x.rank() != 3) throw DimensionError("masked_mha: expected [B,T,d], got " + to_string(x.shape()));
  if (heads == 0 || x.shape()[2] % heads != 0) {
    throw ConfigError("masked_mha: width " + std::to_string(x.shape()[2]) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (mask.size != x.shape()[1]) {
    throw DimensionError("masked_mha: mask covers " + std::to_string(mask.size) + " tokens, input has " +
                         std::to_string(x.shape()[1]));
  }
}

}  // namespace detail

/// Per-head attention weights [B, H, T, T].
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& x, const AttentionParams<T>& p, std::size_t heads,
                            const AttentionMask& mask) {
  detail::check_mha(x, heads, mask);
  return detail::attention_probs<T>(x, p, heads, mask.template additive<T>(), nullptr);
}

/// Scaled dot-product attention with additive masking inside the softmax,
/// followed by the output projection. x: [B, T, d].
template <typename T>
Tensor<T> masked_mha(const Tensor<T>& x, const AttentionParams<T>& p, std::size_t heads, const AttentionMask& mask,
                     const Tensor<T>& additive_mask = {}) {
  detail::check_mha(x, heads, mask);
  const std::size_t b = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
  Tensor<T> v;
  Tensor<T> probs =
      detail::attention_probs<T>(x, p, heads, additive_mask.defined() ? additive_mask : mask.template additive<T>(), &v);
  Tensor<T> merged = reshape(permute(matmul(probs, v), {0, 2, 1, 3}), {b, t, d});
  return matmul(merged, p.wo);
}

template <typename T>
struct BlockParams {
  Tensor<T> ln1_gain, ln1_bias;
  AttentionParams<T> attn;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> fc1;  // [d, ratio*d], no bias
  Tensor<T> fc2;  // [ratio*d, d], no bias
};

template <typename T>
BlockParams<T> make_block_params(std::size_t width, Rng& rng, std::size_t mlp_ratio = 4, double init_std = 0.02) {
  BlockParams<T> p;
  p.ln1_gain = Tensor<T>::full({width}, T(1), true);
  p.ln1_bias = Tensor<T>::zeros({width}, true);
  p.attn = make_attention_params<T>(width, rng, init_std);
  p.ln2_gain = Tensor<T>::full({width}, T(1), true);
  p.ln2_bias = Tensor<T>::zeros({width}, true);
  p.fc1 = init_weight<T>(rng, {width, mlp_ratio * width}, init_std);
  p.fc2 = init_weight<T>(rng, {mlp_ratio * width, width}, init_std);
  return p;
}

struct BlockOptions {
  double ln_eps = 1e-6;
  double drop_path = 0.0;
  bool training = false;
  Rng* rng = nullptr;  // needed when training with drop_path > 0
};

namespace detail {

// Drops the residual branch independently per token row, rescaling survivors.
template <typename T>
Tensor<T> drop_path_rows(const Tensor<T>& branch, const BlockOptions& opt) {
  if (!opt.training || opt.drop_path <= 0.0) return branch;
  if (!opt.rng) throw ConfigError("drop_path: training with drop_path > 0 requires an rng");
  const std::size_t d = branch.shape().back(), rows = branch.numel() / d;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - opt.drop_path));
  std::vector<T> m(branch.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T v = opt.rng->uniform() < opt.drop_path ? T(0) : keep_scale;
    std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(r * d), d, v);
  }
  return mul(branch, Tensor<T>(branch.shape(), std::move(m)));
}

}  // namespace detail

/// Pre-norm block: x + MHA(LN(x)), then h + MLP(LN(h)) with a GELU MLP.
template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const BlockParams<T>& p, std::size_t heads,
                            const AttentionMask& mask, const BlockOptions& opt = {},
                            const Tensor<T>& additive_mask = {}) {
  const T eps = static_cast<T>(opt.ln_eps);
  Tensor<T> attn = masked_mha(layer_norm(x, p.ln1_gain, p.ln1_bias, eps), p.attn, heads, mask, additive_mask);
  Tensor<T> h = add(x, detail::drop_path_rows(attn, opt));
  Tensor<T> mlp = matmul(gelu(matmul(layer_norm(h, p.ln2_gain, p.ln2_bias, eps), p.fc1)), p.fc2);
  return add(h, detail::drop_path_rows(mlp, opt));
}

}  // namespace hieratok
