#pragma once

// Training loop and evaluation pass. Everything is single-threaded and driven
// by counter-based RNG streams, so a (config, data) pair always produces the
// same checkpoint bytes.

#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hieratok/harness/checkpoint.hpp"
#include "hieratok/harness/config.hpp"
#include "hieratok/harness/dataset.hpp"
#include "hieratok/harness/metrics.hpp"
#include "hieratok/latentlab.hpp"
#include "hieratok/objectives.hpp"
#include "hieratok/tokenizer.hpp"

namespace hieratok {

using Json = nlohmann::ordered_json;

inline constexpr std::uint64_t kTrainStream = 2;
inline constexpr std::size_t kTrainProbeImages = 64;

struct EvalReport {
  std::size_t images = 0;
  double rec_loss = 0;  // full resolution
  double l1 = 0;        // full resolution
  double psnr = 0;
  double ssim = 0;
  std::vector<double> per_scale;    // rec_loss per level, ascending
  std::vector<double> commutation;  // residual per level; the top level is 0
  std::optional<LatentStats> latent;  // absent with fewer than 3 latent points
  std::vector<std::string> warnings;
  double train_l1 = std::numeric_limits<double>::quiet_NaN();
};

/// Per-token mu vectors of every image, row-major (points x latent_dim).
struct LatentPoints {
  std::size_t dim = 0;
  std::vector<double> values;
};

/// Eval-mode metrics over `ds`, one image per forward pass. The latent is mu.
inline EvalReport evaluate(const TokenizerModel<float>& m, const Dataset& ds, const LossWeights& w,
                           const AnalysisOptions& analysis, LatentPoints* latents_out = nullptr) {
  NoGradGuard guard;
  const std::size_t levels = m.schedule.levels();
  const std::size_t patch = m.config.patch;
  EvalReport r;
  r.images = ds.size();
  r.per_scale.assign(levels, 0.0);
  std::vector<double> comm_num(levels, 0.0), comm_den(levels, 0.0);
  LatentPoints pts;
  pts.dim = m.config.latent_dim;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor<float> x = make_batch<float>(ds, {i});
    const auto rec = reconstruct(m, x, /*deterministic=*/true);
    const auto targets = image_pyramid(x, m.schedule, patch);
    const Tensor<float>& top = rec.images.back();
    for (std::size_t s = 0; s < levels; ++s)
      r.per_scale[s] += static_cast<double>(rec_loss(rec.images[s], targets[s], w).item());
    r.rec_loss += static_cast<double>(rec_loss(top, x, w).item());
    double l1 = 0;
    for (std::size_t k = 0; k < x.numel(); ++k) l1 += std::abs(static_cast<double>(top[k]) - static_cast<double>(x[k]));
    r.l1 += l1 / static_cast<double>(x.numel());
    r.psnr += psnr_per_image(top, x)[0];
    r.ssim += ssim_per_image(top, x)[0];
    for (std::size_t s = 0; s < levels; ++s) {
      const auto& coarse = rec.images[s];
      const Tensor<float> pooled = area_pool(top, coarse.shape()[2], coarse.shape()[3]);
      for (std::size_t k = 0; k < pooled.numel(); ++k) {
        const double a = coarse[k], b = pooled[k];
        comm_num[s] += (a - b) * (a - b);
        comm_den[s] += b * b;
      }
    }
    for (float v : rec.code.mu.data()) pts.values.push_back(v);
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, ds.size()));
  r.rec_loss /= n;
  r.l1 /= n;
  r.psnr /= n;
  r.ssim /= n;
  for (auto& v : r.per_scale) v /= n;
  for (std::size_t s = 0; s < levels; ++s) r.commutation.push_back(std::sqrt(comm_num[s]) / (std::sqrt(comm_den[s]) + 1e-12));
  if (pts.values.size() / pts.dim >= 3) {
    const LatentReport lr = analyze_latents(pts.values, pts.dim, analysis);
    r.latent = lr.stats;
    r.warnings = lr.projection.warnings;
  } else {
    r.warnings.push_back("too few latent points for uniformity statistics");
  }
  if (latents_out) *latents_out = std::move(pts);
  return r;
}

/// Mean full-resolution L1 over the first min(N, limit) images, eval mode.
inline double mean_l1(const TokenizerModel<float>& m, const Dataset& ds, std::size_t limit = kTrainProbeImages) {
  NoGradGuard guard;
  const std::size_t n = std::min(limit, ds.size());
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<float> x = make_batch<float>(ds, {i});
    const Tensor<float> top = reconstruct(m, x, true).images.back();
    double l1 = 0;
    for (std::size_t k = 0; k < x.numel(); ++k) l1 += std::abs(static_cast<double>(top[k]) - static_cast<double>(x[k]));
    total += l1 / static_cast<double>(x.numel());
  }
  return total / static_cast<double>(n);
}

inline Json eval_json(const EvalReport& r, const std::string& phase, std::size_t step) {
  Json j;
  j["event"] = "eval";
  j["phase"] = phase;
  j["step"] = step;
  j["images"] = r.images;
  j["rec_loss"] = r.rec_loss;
  j["l1"] = r.l1;
  j["psnr"] = r.psnr;
  j["ssim"] = r.ssim;
  j["per_scale"] = r.per_scale;
  j["commutation"] = r.commutation;
  j["cv"] = r.latent ? Json(r.latent->density_cv) : Json(nullptr);
  j["gini"] = r.latent ? Json(r.latent->gini) : Json(nullptr);
  j["entropy"] = r.latent ? Json(r.latent->norm_entropy) : Json(nullptr);
  j["train_l1"] = std::isfinite(r.train_l1) ? Json(r.train_l1) : Json(nullptr);
  return j;
}

struct TrainOptions {
  std::ostream* log = nullptr;    // JSON lines; null to stay quiet
  bool write_checkpoints = true;  // to cfg.checkpoint
  bool evaluate = true;           // initial and final eval passes
};

struct TrainResult {
  TokenizerModel<float> model;
  std::size_t total_steps = 0;
  std::size_t steps_done = 0;
  bool aborted = false;
  std::string abort_reason;
  std::optional<EvalReport> initial, final;
  std::vector<double> step_loss;  // total loss of every update
};

inline std::size_t planned_steps(const RunConfig& cfg, std::size_t train_images) {
  if (cfg.epochs == 0) return cfg.steps;
  return cfg.epochs * std::max<std::size_t>(1, train_images / std::max<std::size_t>(1, cfg.batch_size));
}

/// Builds the dataset a config describes: the image folder if data_dir is set,
/// else the synthetic generator.
inline Dataset load_dataset(const RunConfig& cfg) {
  return cfg.data_dir.empty() ? synthetic_dataset(cfg.synthetic_count, cfg.model.image_size, cfg.data_seed)
                              : load_image_folder(cfg.data_dir, cfg.model.image_size);
}

inline TrainResult train(const RunConfig& cfg, const DataSplit& data, const TrainOptions& opt = {}) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("train: the training split is empty");
  if (data.train.image_size != cfg.model.image_size)
    throw ConfigError("train: dataset images are " + std::to_string(data.train.image_size) + " px, config expects " +
                      std::to_string(cfg.model.image_size));
  auto emit = [&](const Json& j) {
    if (opt.log) *opt.log << j.dump() << '\n' << std::flush;
  };
  auto checkpoint = [&](const TokenizerModel<float>& m, std::size_t step) {
    if (!opt.write_checkpoints) return;
    save_checkpoint(cfg.checkpoint, cfg, m);
    emit(Json{{"event", "checkpoint"}, {"step", step}, {"path", cfg.checkpoint}});
  };
  const Dataset& eval_set = data.eval.empty() ? data.train : data.eval;
  auto run_eval = [&](const TokenizerModel<float>& m, const std::string& phase, std::size_t step) {
    EvalReport r = evaluate(m, eval_set, cfg.loss, cfg.analysis);
    r.train_l1 = mean_l1(m, data.train);
    emit(eval_json(r, phase, step));
    return r;
  };

  TrainResult res;
  res.model = make_model<float>(cfg.model);
  res.total_steps = planned_steps(cfg, data.train.size());
  TokenizerModel<float>& model = res.model;
  const auto params = model.parameters();
  AdamW<float> adamw(params, AdamWOptions{cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});
  BatchStream stream(data.train.size(), cfg.batch_size, cfg.model.seed);
  Rng rng = Rng(cfg.model.seed).fork(kTrainStream);

  if (opt.evaluate) res.initial = run_eval(model, "initial", 0);
  checkpoint(model, 0);

  for (std::size_t step = 1; step <= res.total_steps; ++step) {
    const double lr = cosine_lr(step, res.total_steps, cfg.warmup_ratio, cfg.lr_start, cfg.lr_end);
    model.zero_grad();
    const Tensor<float> x = make_batch<float>(data.train, stream.next());
    std::optional<LossBreakdown<float>> loss;
    double total = 0;
    try {
      const auto rec = reconstruct(model, x, /*deterministic=*/false, &rng, /*training=*/true);
      loss = multiscale_loss(rec.images, image_pyramid(x, model.schedule, cfg.model.patch), rec.code, cfg.loss);
      total = static_cast<double>(loss->total.item());
      if (!std::isfinite(total)) throw NumericError("non-finite loss " + std::to_string(total));
      loss->total.backward();
      clip_grad_norm(params, cfg.grad_clip);
      adamw.step(lr);
    } catch (const NumericError& e) {
      res.aborted = true;
      res.abort_reason = e.what();
      emit(Json{{"event", "abort"}, {"step", step}, {"reason", res.abort_reason}});
      return res;
    }
    res.step_loss.push_back(total);
    res.steps_done = step;
    if ((cfg.log_interval > 0 && step % cfg.log_interval == 0) || step == res.total_steps) {
      emit(Json{{"event", "step"}, {"step", step}, {"lr", lr}, {"total", total}, {"per_scale", loss->per_scale},
                {"kl", loss->kl}});
    }
    if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && step != res.total_steps)
      checkpoint(model, step);
  }
  if (res.total_steps > 0) checkpoint(model, res.total_steps);
  if (opt.evaluate) res.final = run_eval(model, "final", res.total_steps);
  return res;
}

}  // namespace hieratok
