#pragma once

// Reconstruction / KL losses, multi-scale aggregation, AdamW with decoupled
// weight decay, global-norm clipping, and the warmup + cosine LR schedule.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "hieratok/errors.hpp"
#include "hieratok/numerics/ops.hpp"
#include "hieratok/tokenizer.hpp"

namespace hieratok {

struct LossWeights {
  double l1 = 1.0;
  double mse = 0.4;
  double perceptual = 0.0;   // slot kept for config compatibility; must stay 0
  double adversarial = 0.0;  // same
  double kl = 1e-6;
  std::vector<double> scale_weights;  // empty: unweighted mean over scales

  void validate() const {
    if (l1 < 0 || mse < 0 || kl < 0) throw ConfigError("loss weights must be nonnegative");
    if (perceptual != 0.0) throw ConfigError("perceptual loss is not supported; perceptual weight must be 0");
    if (adversarial != 0.0) throw ConfigError("adversarial loss is not supported; adversarial weight must be 0");
    double total = 0;
    for (double w : scale_weights) {
      if (!(w >= 0)) throw ConfigError("scale weights must be nonnegative");
      total += w;
    }
    if (!scale_weights.empty() && total <= 0) throw ConfigError("scale weights must not all be zero");
  }
};

/// l1 * mean|pred - target| + mse * mean((pred - target)^2).
template <typename T>
Tensor<T> rec_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossWeights& w) {
  if (pred.shape() != target.shape())
    throw ShapeError("rec_loss: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  const Tensor<T> d = sub(pred, target);
  return add(scale(mean(abs(d)), static_cast<T>(w.l1)), scale(mean(square(d)), static_cast<T>(w.mse)));
}

/// Mean over all elements of -1/2 (1 + logvar - mu^2 - exp(logvar)).
template <typename T>
Tensor<T> kl_loss(const Tensor<T>& mu, const Tensor<T>& logvar) {
  if (mu.shape() != logvar.shape()) throw ShapeError("kl_loss: mu and logvar shapes differ");
  if (!all_finite(logvar)) throw NumericError("kl_loss: non-finite logvar");
  const Tensor<T> inner = mean(sub(logvar, add(square(mu), exp(logvar))));
  return add(scale(inner, T(-0.5)), Tensor<T>::scalar(T(-0.5)));
}

template <typename T>
Tensor<T> kl_loss(const LatentCode<T>& code) {
  return kl_loss(code.mu, code.logvar);
}

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  std::vector<double> per_scale;  // unweighted rec_loss at each level, ascending
  double kl = 0.0;                // unweighted kl_loss
};

/// Scale-weighted mean of per-level reconstruction losses plus kl * KL.
template <typename T>
LossBreakdown<T> multiscale_loss(const std::vector<Tensor<T>>& outputs, const std::vector<Tensor<T>>& targets,
                                 const LatentCode<T>& code, const LossWeights& w) {
  w.validate();
  if (outputs.empty() || outputs.size() != targets.size()) {
    throw DimensionError("multiscale_loss: " + std::to_string(outputs.size()) + " outputs vs " +
                         std::to_string(targets.size()) + " targets");
  }
  if (!w.scale_weights.empty() && w.scale_weights.size() != outputs.size())
    throw ConfigError("multiscale_loss: scale_weights has " + std::to_string(w.scale_weights.size()) + " entries");
  LossBreakdown<T> out;
  Tensor<T> acc;
  double norm = 0;
  for (std::size_t s = 0; s < outputs.size(); ++s) {
    Tensor<T> l = rec_loss(outputs[s], targets[s], w);
    out.per_scale.push_back(static_cast<double>(l.item()));
    const double ws = w.scale_weights.empty() ? 1.0 : w.scale_weights[s];
    norm += ws;
    if (ws != 1.0) l = scale(l, static_cast<T>(ws));
    acc = acc.defined() ? add(acc, l) : l;
  }
  if (norm != 1.0) acc = scale(acc, static_cast<T>(1.0 / norm));
  const Tensor<T> kl = kl_loss(code);
  out.kl = static_cast<double>(kl.item());
  out.total = add(acc, scale(kl, static_cast<T>(w.kl)));
  return out;
}

/// Linear warmup from 0 to lr_start over warmup_ratio * total_steps, then a
/// half cosine down to lr_end at step == total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double warmup_ratio, double lr_start,
                        double lr_end) {
  if (step > total_steps) throw ConfigError("cosine_lr: step past total_steps");
  if (warmup_ratio < 0 || warmup_ratio > 1) throw ConfigError("cosine_lr: warmup_ratio must lie in [0, 1]");
  const double warm = warmup_ratio * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warm) return lr_start * s / warm;
  const double span = static_cast<double>(total_steps) - warm;
  if (span <= 0) return lr_start;
  const double progress = (s - warm) / span;
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Scales every gradient so the global L2 norm is at most max_norm. Returns
/// the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<NamedParam<T>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm && norm > 0) {
    const T f = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      Tensor<T> t = p.tensor;
      for (T& g : t.mutable_grad()) g *= f;
    }
  }
  return norm;
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// AdamW with bias-corrected moments and decoupled weight decay, applied
/// only to parameters flagged `decay`.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedParam<T>> params, AdamWOptions opt = {}) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void step(double lr) {
    for (const auto& p : params_)
      for (T g : p.tensor.grad())
        if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter " + p.name);
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T> t = params_[i].tensor;
      const auto grad = t.grad();
      auto w = t.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      const double decay = params_[i].decay ? 1.0 - lr * opt_.weight_decay : 1.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = static_cast<double>(grad[j]);
        m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g;
        v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g * g;
        const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + opt_.eps);
        w[j] = static_cast<T>(static_cast<double>(w[j]) * decay - lr * update);
      }
    }
  }

  std::size_t step_count() const { return t_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<NamedParam<T>> params_;
  AdamWOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace hieratok
