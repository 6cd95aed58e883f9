#pragma once

// End-to-end multi-scale ViT tokenizer:
//   patch embed -> encoder (full attention on the base grid) -> Gaussian latent
//   head -> project to decoder width -> token pyramid + positional encodings ->
//   decoder under the configured attention regime -> shared pixel head ->
//   one RGB image per scale.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hieratok/attention.hpp"
#include "hieratok/errors.hpp"
#include "hieratok/numerics/ops.hpp"
#include "hieratok/numerics/rng.hpp"
#include "hieratok/pyramid.hpp"

namespace hieratok {

enum class DownsampleMode { Interp, Conv };

inline std::string to_string(DownsampleMode m) { return m == DownsampleMode::Conv ? "conv" : "interp"; }

inline DownsampleMode parse_downsample_mode(const std::string& s) {
  if (s == "interp") return DownsampleMode::Interp;
  if (s == "conv") return DownsampleMode::Conv;
  throw ConfigError("unknown downsample_mode '" + s + "' (expected interp or conv)");
}

struct TokenizerConfig {
  std::size_t image_size = 32;
  std::size_t patch = 4;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 4;
  std::size_t enc_width = 64;
  std::size_t dec_width = 64;
  std::size_t heads = 4;
  std::size_t latent_dim = 16;
  std::size_t mlp_ratio = 4;
  std::vector<std::size_t> scales{1, 2, 4, 8};
  DownsampleMode downsample_mode = DownsampleMode::Conv;
  AttentionRegime regime = AttentionRegime::ScaleCausal;
  double kl_weight = 1e-6;
  double drop_path = 0.1;  // decoder only
  double ln_eps = 1e-6;
  double init_std = 0.02;
  bool per_scale_heads = false;
  std::uint64_t seed = 0;

  std::size_t base_grid() const { return image_size / patch; }

  ScaleSchedule schedule() const { return build_schedule(base_grid(), scales); }

  void validate() const {
    if (patch == 0 || image_size == 0 || image_size % patch != 0)
      throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch " +
                        std::to_string(patch));
    const ScaleSchedule s = schedule();
    if (heads == 0 || enc_width % heads != 0 || dec_width % heads != 0)
      throw ConfigError("enc_width and dec_width must be divisible by heads");
    if (latent_dim == 0 || mlp_ratio == 0) throw ConfigError("latent_dim and mlp_ratio must be positive");
    if (drop_path < 0.0 || drop_path >= 1.0) throw ConfigError("drop_path must lie in [0, 1)");
    if (kl_weight < 0.0) throw ConfigError("kl_weight must be nonnegative");
    if (downsample_mode == DownsampleMode::Conv) require_dyadic(s);
  }
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay;  // receives weight decay
};

template <typename T>
struct TokenizerModel {
  TokenizerConfig config;
  ScaleSchedule schedule;
  AttentionMask enc_mask;
  AttentionMask dec_mask;

  Tensor<T> patch_kernel;  // [E, 3, p, p]
  Tensor<T> patch_bias;    // [E]
  Tensor<T> enc_pos;       // [g, g, E]
  std::vector<BlockParams<T>> encoder;
  Tensor<T> enc_norm_gain, enc_norm_bias;
  Tensor<T> latent_w, latent_b;  // E -> 2 d_z (mu, logvar)
  Tensor<T> proj_w, proj_b;      // d_z -> D
  ConvDownsampler<T> downsampler;
  PEParams<T> dec_pe;
  std::vector<BlockParams<T>> decoder;
  Tensor<T> dec_norm_gain, dec_norm_bias;
  std::vector<Tensor<T>> pixel_w;  // one [D, 3 p^2] shared, or one per scale
  std::vector<Tensor<T>> pixel_b;

  /// Every trainable tensor in a fixed order with stable names.
  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    auto put = [&](std::string name, const Tensor<T>& t, bool decay) { out.push_back({std::move(name), t, decay}); };
    auto put_block = [&](const std::string& prefix, const BlockParams<T>& b) {
      put(prefix + ".ln1.gain", b.ln1_gain, false);
      put(prefix + ".ln1.bias", b.ln1_bias, false);
      put(prefix + ".attn.wq", b.attn.wq, true);
      put(prefix + ".attn.wk", b.attn.wk, true);
      put(prefix + ".attn.wv", b.attn.wv, true);
      put(prefix + ".attn.wo", b.attn.wo, true);
      put(prefix + ".ln2.gain", b.ln2_gain, false);
      put(prefix + ".ln2.bias", b.ln2_bias, false);
      put(prefix + ".mlp.fc1", b.fc1, true);
      put(prefix + ".mlp.fc2", b.fc2, true);
    };
    put("patch_embed.weight", patch_kernel, true);
    put("patch_embed.bias", patch_bias, false);
    put("encoder.pos", enc_pos, false);
    for (std::size_t i = 0; i < encoder.size(); ++i) put_block("encoder." + std::to_string(i), encoder[i]);
    put("encoder.norm.gain", enc_norm_gain, false);
    put("encoder.norm.bias", enc_norm_bias, false);
    put("latent.weight", latent_w, true);
    put("latent.bias", latent_b, false);
    put("proj.weight", proj_w, true);
    put("proj.bias", proj_b, false);
    for (std::size_t s = 0; s < downsampler.chains.size(); ++s)
      for (std::size_t k = 0; k < downsampler.chains[s].size(); ++k)
        put("downsample." + std::to_string(s) + "." + std::to_string(k), downsampler.chains[s][k], true);
    put("decoder.pe.spatial", dec_pe.spatial, false);
    put("decoder.pe.scale", dec_pe.per_scale, false);
    for (std::size_t i = 0; i < decoder.size(); ++i) put_block("decoder." + std::to_string(i), decoder[i]);
    put("decoder.norm.gain", dec_norm_gain, false);
    put("decoder.norm.bias", dec_norm_bias, false);
    for (std::size_t s = 0; s < pixel_w.size(); ++s) {
      const std::string suffix = pixel_w.size() == 1 ? "" : "." + std::to_string(s);
      put("pixel_head.weight" + suffix, pixel_w[s], true);
      put("pixel_head.bias" + suffix, pixel_b[s], false);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grad() const {
    for (auto& p : parameters()) {
      Tensor<T> t = p.tensor;
      t.zero_grad();
    }
  }
};

inline constexpr std::uint64_t kInitStream = 1;

/// Fresh model; weights are truncated-normal(init_std), norms start at identity.
template <typename T>
TokenizerModel<T> make_model(const TokenizerConfig& cfg) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).fork(kInitStream);
  TokenizerModel<T> m;
  m.config = cfg;
  m.schedule = cfg.schedule();
  const std::size_t g = cfg.base_grid(), e = cfg.enc_width, d = cfg.dec_width, p = cfg.patch;
  m.enc_mask = build_mask(build_schedule(g, {g}), AttentionRegime::Full);
  m.dec_mask = build_mask(m.schedule, cfg.regime);

  m.patch_kernel = init_weight<T>(rng, {e, 3, p, p}, cfg.init_std);
  m.patch_bias = Tensor<T>::zeros({e}, true);
  m.enc_pos = init_weight<T>(rng, {g, g, e}, cfg.init_std);
  for (std::size_t i = 0; i < cfg.enc_layers; ++i)
    m.encoder.push_back(make_block_params<T>(e, rng, cfg.mlp_ratio, cfg.init_std));
  m.enc_norm_gain = Tensor<T>::full({e}, T(1), true);
  m.enc_norm_bias = Tensor<T>::zeros({e}, true);
  m.latent_w = init_weight<T>(rng, {e, 2 * cfg.latent_dim}, cfg.init_std);
  m.latent_b = Tensor<T>::zeros({2 * cfg.latent_dim}, true);
  m.proj_w = init_weight<T>(rng, {cfg.latent_dim, d}, cfg.init_std);
  m.proj_b = Tensor<T>::zeros({d}, true);
  if (cfg.downsample_mode == DownsampleMode::Conv)
    m.downsampler = make_conv_downsampler<T>(m.schedule, d, rng, cfg.init_std);
  m.dec_pe = make_pe_params<T>(m.schedule, d, rng, cfg.init_std);
  for (std::size_t i = 0; i < cfg.dec_layers; ++i)
    m.decoder.push_back(make_block_params<T>(d, rng, cfg.mlp_ratio, cfg.init_std));
  m.dec_norm_gain = Tensor<T>::full({d}, T(1), true);
  m.dec_norm_bias = Tensor<T>::zeros({d}, true);
  const std::size_t heads_n = cfg.per_scale_heads ? m.schedule.levels() : 1;
  for (std::size_t s = 0; s < heads_n; ++s) {
    m.pixel_w.push_back(init_weight<T>(rng, {d, 3 * p * p}, cfg.init_std));
    m.pixel_b.push_back(Tensor<T>::zeros({3 * p * p}, true));
  }
  return m;
}

/// Same architecture in another precision, or the same precision with
/// independent storage.
template <typename To, typename From>
TokenizerModel<To> convert_model(const TokenizerModel<From>& src) {
  TokenizerModel<To> dst = make_model<To>(src.config);
  const auto from = src.parameters();
  auto to = dst.parameters();
  for (std::size_t i = 0; i < from.size(); ++i) {
    auto out = to[i].tensor.mutable_data();
    const auto in = from[i].tensor.data();
    for (std::size_t j = 0; j < in.size(); ++j) out[j] = static_cast<To>(in[j]);
  }
  return dst;
}

template <typename T>
struct LatentCode {
  Tensor<T> mu;      // [B, g, g, d_z]
  Tensor<T> logvar;  // [B, g, g, d_z], clamped to [kLogvarMin, kLogvarMax]
  Tensor<T> sample;
};

inline constexpr double kLogvarMin = -30.0;
inline constexpr double kLogvarMax = 20.0;

/// Images [B, 3, H, W] with values in [-1, 1] to (mu, logvar) on the base grid.
/// `sample` is left equal to mu; see sample_latent.
template <typename T>
LatentCode<T> encode(const TokenizerModel<T>& m, const Tensor<T>& x) {
  const auto& cfg = m.config;
  const std::size_t side = cfg.image_size;
  if (x.rank() != 4 || x.shape()[1] != 3 || x.shape()[2] != side || x.shape()[3] != side) {
    throw DimensionError("encode: expected [B,3," + std::to_string(side) + "," + std::to_string(side) + "], got " +
                         to_string(x.shape()));
  }
  const std::size_t b = x.shape()[0], g = cfg.base_grid(), e = cfg.enc_width, dz = cfg.latent_dim;
  Tensor<T> h = permute(conv2d(x, m.patch_kernel, cfg.patch), {0, 2, 3, 1});
  h = add(add(h, m.patch_bias), m.enc_pos);
  h = reshape(h, {b, g * g, e});
  const Tensor<T> additive = m.enc_mask.template additive<T>();
  BlockOptions opt;
  opt.ln_eps = cfg.ln_eps;
  for (const auto& blk : m.encoder) h = transformer_block(h, blk, cfg.heads, m.enc_mask, opt, additive);
  h = layer_norm(h, m.enc_norm_gain, m.enc_norm_bias, static_cast<T>(cfg.ln_eps));
  Tensor<T> stats = linear(h, m.latent_w, m.latent_b);
  LatentCode<T> code;
  code.mu = reshape(slice(stats, 2, 0, dz), {b, g, g, dz});
  code.logvar = reshape(clamp(slice(stats, 2, dz, 2 * dz), static_cast<T>(kLogvarMin), static_cast<T>(kLogvarMax)),
                        {b, g, g, dz});
  code.sample = code.mu;
  return code;
}

/// deterministic: mu. Otherwise mu + exp(logvar / 2) * eps with eps ~ N(0, 1) from rng.
template <typename T>
Tensor<T> sample_latent(const LatentCode<T>& code, Rng* rng, bool deterministic) {
  if (deterministic) return code.mu;
  if (!rng) throw ConfigError("sample_latent: stochastic sampling requires an rng");
  std::vector<T> eps(code.mu.numel());
  for (auto& v : eps) v = static_cast<T>(rng->normal());
  Tensor<T> noise(code.mu.shape(), std::move(eps));
  return add(code.mu, mul(exp(scale(code.logvar, T(0.5))), noise));
}

struct DecodeOptions {
  bool training = false;
  Rng* rng = nullptr;  // drop-path randomness when training
};

/// Latent [B, g, g, d_z] -> decoder-width token pyramid with positional encodings added.
template <typename T>
TokenPyramid<T> decoder_tokens(const TokenizerModel<T>& m, const Tensor<T>& z) {
  const auto& cfg = m.config;
  const std::size_t g = cfg.base_grid();
  if (z.rank() != 4 || z.shape()[1] != g || z.shape()[2] != g || z.shape()[3] != cfg.latent_dim) {
    throw DimensionError("decode: expected latent [B," + std::to_string(g) + "," + std::to_string(g) + "," +
                         std::to_string(cfg.latent_dim) + "], got " + to_string(z.shape()));
  }
  Tensor<T> base = linear(z, m.proj_w, m.proj_b);
  TokenPyramid<T> raw = cfg.downsample_mode == DownsampleMode::Conv ? downsample_conv(m.downsampler, base, m.schedule)
                                                                    : downsample_interp(base, m.schedule);
  const auto pe = positional_encoding(m.dec_pe, m.schedule);
  std::vector<Tensor<T>> maps;
  for (std::size_t s = 0; s < raw.maps.size(); ++s) maps.push_back(add(raw.maps[s], pe[s]));
  return assemble_pyramid(std::move(maps), m.schedule);
}

/// Runs the decoder over the concatenated sequence [B, total, D] and unfolds
/// every level's tokens into an image [B, 3, g_s * p, g_s * p].
template <typename T>
std::vector<Tensor<T>> decode_tokens(const TokenizerModel<T>& m, const Tensor<T>& sequence,
                                     const DecodeOptions& opts = {}) {
  const auto& cfg = m.config;
  if (sequence.rank() != 3 || sequence.shape()[1] != m.schedule.total || sequence.shape()[2] != cfg.dec_width) {
    throw DimensionError("decode_tokens: expected [B," + std::to_string(m.schedule.total) + "," +
                         std::to_string(cfg.dec_width) + "], got " + to_string(sequence.shape()));
  }
  const std::size_t b = sequence.shape()[0], p = cfg.patch;
  const Tensor<T> additive = m.dec_mask.template additive<T>();
  BlockOptions opt;
  opt.ln_eps = cfg.ln_eps;
  opt.drop_path = cfg.drop_path;
  opt.training = opts.training;
  opt.rng = opts.rng;
  Tensor<T> h = sequence;
  for (const auto& blk : m.decoder) h = transformer_block(h, blk, cfg.heads, m.dec_mask, opt, additive);
  h = layer_norm(h, m.dec_norm_gain, m.dec_norm_bias, static_cast<T>(cfg.ln_eps));
  std::vector<Tensor<T>> levels = split_levels(h, m.schedule);
  std::vector<Tensor<T>> images;
  for (std::size_t s = 0; s < levels.size(); ++s) {
    const std::size_t g = m.schedule.grids[s];
    const std::size_t head = m.pixel_w.size() == 1 ? 0 : s;
    Tensor<T> pix = linear(levels[s], m.pixel_w[head], m.pixel_b[head]);  // [B, g, g, 3 p p]
    pix = permute(reshape(pix, {b, g, g, 3, p, p}), {0, 3, 1, 4, 2, 5});
    images.push_back(reshape(pix, {b, 3, g * p, g * p}));
  }
  return images;
}

template <typename T>
std::vector<Tensor<T>> decode_pyramid(const TokenizerModel<T>& m, const Tensor<T>& z, const DecodeOptions& opts = {}) {
  return decode_tokens(m, decoder_tokens(m, z).concatenated, opts);
}

template <typename T>
struct Reconstruction {
  std::vector<Tensor<T>> images;  // ascending scales; back() is full resolution
  LatentCode<T> code;
};

/// encode -> sample_latent -> decode_pyramid. Training mode samples the
/// latent and enables decoder drop path; both draw from rng.
template <typename T>
Reconstruction<T> reconstruct(const TokenizerModel<T>& m, const Tensor<T>& x, bool deterministic, Rng* rng = nullptr,
                              bool training = false) {
  Reconstruction<T> r;
  r.code = encode(m, x);
  r.code.sample = sample_latent(r.code, rng, deterministic);
  r.images = decode_pyramid(m, r.code.sample, DecodeOptions{training, rng});
  return r;
}

/// The latent handed to a downstream generator: mu on the base grid, taken
/// before any pyramid construction.
template <typename T>
Tensor<T> latent_for_generation(const TokenizerModel<T>& m, const Tensor<T>& x) {
  return encode(m, x).mu;
}

}  // namespace hieratok
