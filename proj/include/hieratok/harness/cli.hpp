#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage or configuration
// error, 2 data or format error, 3 numeric error.

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hieratok/attention.hpp"
#include "hieratok/harness/checkpoint.hpp"
#include "hieratok/harness/config.hpp"
#include "hieratok/harness/dataset.hpp"
#include "hieratok/harness/gradcheck_suite.hpp"
#include "hieratok/harness/latent_io.hpp"
#include "hieratok/harness/metrics.hpp"
#include "hieratok/harness/ppm.hpp"
#include "hieratok/harness/train.hpp"

namespace hieratok {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

inline constexpr double kOpGradTolerance = 1e-4;
inline constexpr double kModelGradTolerance = 1e-3;

namespace detail {

struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key=value config file");
    cmd->add_option("--set", sets, "override one config key (key=value), repeatable")->take_all();
  }

  RunConfig resolve(RunConfig base = {}) const {
    RunConfig cfg = file.empty() ? std::move(base) : load_config_file(file, std::move(base));
    for (const auto& s : sets) apply_assignment(cfg, s);
    return cfg;
  }
};

// Per-token mu of every image, in dataset order.
inline LatentDump collect_latents(const TokenizerModel<float>& m, const Dataset& ds, bool per_image) {
  NoGradGuard guard;
  LatentDump d;
  const std::size_t g = m.config.base_grid(), dz = m.config.latent_dim;
  d.dim = per_image ? g * g * dz : dz;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor<float> mu = latent_for_generation(m, make_batch<float>(ds, {i}));
    d.values.insert(d.values.end(), mu.data().begin(), mu.data().end());
  }
  d.count = d.values.size() / d.dim;
  return d;
}

// Images from --input, else the eval split of the dataset the checkpoint was trained on.
inline Dataset latent_source(const Checkpoint& ck, const std::string& input) {
  if (!input.empty()) return load_image_folder(input, ck.config.model.image_size);
  DataSplit split = split_dataset(load_dataset(ck.config), ck.config.eval_fraction);
  return split.eval.empty() ? std::move(split.train) : std::move(split.eval);
}

inline int cmd_train(const RunConfig& cfg, const std::string& log_path, std::ostream& out) {
  cfg.validate();
  const DataSplit split = split_dataset(load_dataset(cfg), cfg.eval_fraction);
  std::ofstream file;
  std::ostream* log = &out;
  if (!log_path.empty()) {
    file.open(log_path, std::ios::trunc);
    if (!file) throw FormatError("cannot write log " + log_path, 0);
    log = &file;
  }
  const TrainResult r = train(cfg, split, TrainOptions{log, true, true});
  return r.aborted ? kExitNumeric : kExitOk;
}

inline int cmd_reconstruct(const std::string& ckpt_path, const std::string& input, const std::string& output,
                           std::ostream& out) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const Dataset ds = load_image_folder(input, ck.config.model.image_size);
  std::filesystem::create_directories(output);
  const auto& sched = ck.model.schedule;
  const std::size_t patch = ck.config.model.patch;
  NoGradGuard guard;
  double psnr_sum = 0, ssim_sum = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor<float> x = make_batch<float>(ds, {i});
    const auto rec = reconstruct(ck.model, x, /*deterministic=*/true);
    const std::string stem = std::filesystem::path(ds.images[i].path).stem().string();
    Json outputs = Json::array();
    for (std::size_t s = 0; s < sched.levels(); ++s) {
      const std::size_t px = sched.grids[s] * patch;
      const std::string path = (std::filesystem::path(output) / (stem + "_s" + std::to_string(s) + "_" +
                                                                 std::to_string(px) + "px.ppm"))
                                   .string();
      save_ppm(planar_to_ppm(rec.images[s].data().data(), px, px), path);
      outputs.push_back(path);
    }
    const double p = psnr_per_image(rec.images.back(), x)[0];
    const double q = ssim_per_image(rec.images.back(), x)[0];
    psnr_sum += p;
    ssim_sum += q;
    out << Json{{"event", "reconstruct"}, {"input", ds.images[i].path}, {"psnr", p}, {"ssim", q}, {"outputs", outputs}}
               .dump()
        << '\n';
  }
  const double n = static_cast<double>(ds.size());
  out << Json{{"event", "summary"}, {"images", ds.size()}, {"psnr", psnr_sum / n}, {"ssim", ssim_sum / n}}.dump() << '\n';
  return kExitOk;
}

inline int cmd_analyze(const std::string& ckpt_path, const std::string& input, const std::string& latents_path,
                       const ConfigArgs& overrides, std::ostream& out) {
  LatentDump d;
  RunConfig cfg;
  if (!latents_path.empty()) {
    if (!ckpt_path.empty() || !input.empty())
      throw UsageError("analyze-latent: --latents cannot be combined with --checkpoint or --input");
    d = load_latents(latents_path);
    cfg = overrides.resolve();
  } else {
    if (ckpt_path.empty()) throw UsageError("analyze-latent: need --checkpoint or --latents");
    const Checkpoint ck = load_checkpoint(ckpt_path);
    cfg = overrides.resolve(ck.config);
    d = collect_latents(ck.model, latent_source(ck, input), false);
  }
  std::vector<double> flat(d.values.begin(), d.values.end());
  const LatentReport r = analyze_latents(flat, d.dim, cfg.analysis);
  out << Json{{"event", "analyze"},
              {"points", r.stats.n_points},
              {"dim", d.dim},
              {"grid", r.stats.grid_size},
              {"bandwidth", r.stats.bandwidth},
              {"cv", r.stats.density_cv},
              {"gini", r.stats.gini},
              {"entropy", r.stats.norm_entropy},
              {"variance", r.projection.variance},
              {"residual_variance", r.projection.residual_variance},
              {"warnings", r.projection.warnings}}
             .dump()
      << '\n';
  return kExitOk;
}

inline int cmd_export(const std::string& ckpt_path, const std::string& input, const std::string& output,
                      bool per_image, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const LatentDump d = collect_latents(ck.model, latent_source(ck, input), per_image);
  save_latents(output, d);
  out << Json{{"event", "export"}, {"path", output}, {"count", d.count}, {"dim", d.dim}}.dump() << '\n';
  return kExitOk;
}

// Only the schedule and regime matter, so the top grid need not match image_size / patch.
inline int cmd_dump_mask(const RunConfig& cfg, std::ostream& out) {
  const auto& grids = cfg.model.scales;
  const AttentionMask mask = build_mask(build_schedule(grids.back(), grids), cfg.model.regime);
  for (std::size_t q = 0; q < mask.size; ++q) {
    for (std::size_t k = 0; k < mask.size; ++k) out << (k ? " " : "") << (mask.allowed(q, k) ? '1' : '0');
    out << '\n';
  }
  return kExitOk;
}

inline int cmd_gradcheck(std::uint64_t seed, bool model, std::ostream& out) {
  const auto results = run_gradcheck_suite(seed, model);
  double op_max = 0, model_max = 0;
  for (const auto& r : results) {
    (r.end_to_end ? model_max : op_max) = std::max(r.end_to_end ? model_max : op_max, r.error);
    out << Json{{"event", "case"}, {"name", r.name}, {"error", r.error}, {"end_to_end", r.end_to_end}}.dump() << '\n';
  }
  const bool ok = op_max < kOpGradTolerance && (!model || model_max < kModelGradTolerance);
  Json summary{{"event", "summary"}, {"max_relative_error", op_max}, {"tolerance", kOpGradTolerance}};
  if (model) {
    summary["model_max_relative_error"] = model_max;
    summary["model_tolerance"] = kModelGradTolerance;
  }
  summary["passed"] = ok;
  out << summary.dump() << '\n';
  return ok ? kExitOk : kExitNumeric;
}

inline int cmd_synth(const RunConfig& cfg, const std::string& output, std::ostream& out) {
  std::filesystem::create_directories(output);
  const auto imgs = synthetic_images(cfg.synthetic_count, cfg.model.image_size, cfg.data_seed);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    std::ostringstream name;
    name << "img_" << std::setw(5) << std::setfill('0') << i << ".ppm";
    save_ppm(imgs[i], (std::filesystem::path(output) / name.str()).string());
  }
  out << Json{{"event", "synth"}, {"path", output}, {"images", imgs.size()}, {"size", cfg.model.image_size}}.dump()
      << '\n';
  return kExitOk;
}

}  // namespace detail

/// Runs one invocation; `args` excludes the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Multi-scale ViT image tokenizer: training, reconstruction and latent analysis", "hieratok");
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "print help for every subcommand");

  detail::ConfigArgs train_cfg, mask_cfg, analyze_cfg, synth_cfg;
  std::string log_path, ckpt, input, output, latents;
  bool per_image = false, with_model = false;
  std::uint64_t seed = 0;

  auto* train_cmd = app.add_subcommand("train", "train a tokenizer and write JSON-lines metrics");
  train_cfg.attach(train_cmd);
  train_cmd->add_option("--log", log_path, "write the metric log here instead of stdout");

  auto* recon_cmd = app.add_subcommand("reconstruct", "write reconstructions at every scale for a folder of PPMs");
  recon_cmd->add_option("--checkpoint", ckpt, "HTOK checkpoint")->required();
  recon_cmd->add_option("--input", input, "folder of P6 images")->required();
  recon_cmd->add_option("--output", output, "output folder")->required();

  auto* analyze_cmd = app.add_subcommand("analyze-latent", "latent-space uniformity statistics");
  analyze_cmd->add_option("--checkpoint", ckpt, "HTOK checkpoint; latents of its eval split or of --input");
  analyze_cmd->add_option("--input", input, "folder of P6 images");
  analyze_cmd->add_option("--latents", latents, "HLAT latent dump");
  analyze_cfg.attach(analyze_cmd);

  auto* mask_cmd = app.add_subcommand("dump-mask", "print the decoder attention mask as 0/1 rows");
  mask_cfg.attach(mask_cmd);

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the differentiable ops");
  grad_cmd->add_option("--seed", seed, "seed for the random test tensors");
  grad_cmd->add_flag("--model", with_model, "also check a tiny tokenizer end to end");

  auto* export_cmd = app.add_subcommand("export-latents", "write encoder means as an HLAT file");
  export_cmd->add_option("--checkpoint", ckpt, "HTOK checkpoint")->required();
  export_cmd->add_option("--input", input, "folder of P6 images (default: eval split)");
  export_cmd->add_option("--output", output, "HLAT output path")->required();
  export_cmd->add_flag("--per-image", per_image, "one row per image instead of one per token");

  auto* synth_cmd = app.add_subcommand("synth", "write the synthetic dataset as PPM files");
  synth_cfg.attach(synth_cmd);
  synth_cmd->add_option("--output", output, "output folder")->required();

  auto help_for = [&]() -> std::string {
    for (auto* sub : app.get_subcommands()) return sub->help();
    return app.help();
  };

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << help_for();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << help_for();
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return detail::cmd_train(train_cfg.resolve(), log_path, out);
    if (recon_cmd->parsed()) return detail::cmd_reconstruct(ckpt, input, output, out);
    if (analyze_cmd->parsed()) return detail::cmd_analyze(ckpt, input, latents, analyze_cfg, out);
    if (mask_cmd->parsed()) return detail::cmd_dump_mask(mask_cfg.resolve(), out);
    if (grad_cmd->parsed()) return detail::cmd_gradcheck(seed, with_model, out);
    if (export_cmd->parsed()) return detail::cmd_export(ckpt, input, output, per_image, out);
    if (synth_cmd->parsed()) return detail::cmd_synth(synth_cfg.resolve(), output, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << help_for();
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace hieratok
