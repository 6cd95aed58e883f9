#pragma once

// Run configuration: every model field plus data, schedule and logging
// settings, read from `key=value` lines with `#` comments.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hieratok/errors.hpp"
#include "hieratok/latentlab.hpp"
#include "hieratok/objectives.hpp"
#include "hieratok/tokenizer.hpp"

namespace hieratok {

struct RunConfig {
  TokenizerConfig model;
  LossWeights loss;  // loss.kl mirrors model.kl_weight
  std::string data_dir;  // empty: synthetic data
  std::size_t synthetic_count = 512;
  std::uint64_t data_seed = 0;
  std::size_t steps = 2000;
  std::size_t epochs = 0;  // > 0 overrides steps with epochs * batches per epoch
  std::size_t batch_size = 64;
  double lr_start = 1e-4;
  double lr_end = 1e-5;
  double warmup_ratio = 0.03;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double grad_clip = 1.0;
  std::size_t log_interval = 50;
  std::string checkpoint = "hieratok.ckpt";
  std::size_t checkpoint_interval = 0;  // 0: only at the end
  double eval_fraction = 0.1;
  AnalysisOptions analysis;

  void validate() const {
    model.validate();
    loss.validate();
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(eval_fraction >= 0 && eval_fraction < 1)) throw ConfigError("eval_fraction must lie in [0, 1)");
    if (!(warmup_ratio >= 0 && warmup_ratio <= 1)) throw ConfigError("warmup_ratio must lie in [0, 1]");
    if (lr_start < 0 || lr_end < 0) throw ConfigError("learning rates must be nonnegative");
    if (grad_clip <= 0) throw ConfigError("grad_clip must be positive");
    if (analysis.grid == 0) throw ConfigError("analysis_grid must be positive");
  }
};

namespace detail {

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty())
    throw ConfigError("invalid value '" + text + "'" + (key.empty() ? "" : " for " + key));
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("invalid value '" + text + "' for " + key + " (expected true or false)");
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename N>
Field number_field(N RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.*member = parse_number<N>("", v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) return format_double(c.*member);
            else return std::to_string(c.*member);
          }};
}

template <typename N>
Field model_field(N TokenizerConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.model.*member = parse_number<N>("", v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) return format_double(c.model.*member);
            else return std::to_string(c.model.*member);
          }};
}

inline Field loss_field(double LossWeights::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.loss.*member = parse_number<double>("", v); },
          [member](const RunConfig& c) { return format_double(c.loss.*member); }};
}

inline std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<double>("scale_weights", trim(item)));
  return out;
}

// Ordered so that to_config_text is stable.
inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("image_size", model_field(&TokenizerConfig::image_size));
    t.emplace_back("patch", model_field(&TokenizerConfig::patch));
    t.emplace_back("enc_layers", model_field(&TokenizerConfig::enc_layers));
    t.emplace_back("dec_layers", model_field(&TokenizerConfig::dec_layers));
    t.emplace_back("enc_width", model_field(&TokenizerConfig::enc_width));
    t.emplace_back("dec_width", model_field(&TokenizerConfig::dec_width));
    t.emplace_back("heads", model_field(&TokenizerConfig::heads));
    t.emplace_back("latent_dim", model_field(&TokenizerConfig::latent_dim));
    t.emplace_back("mlp_ratio", model_field(&TokenizerConfig::mlp_ratio));
    t.emplace_back("scales", Field{[](RunConfig& c, const std::string& v) {
                                     auto grids = parse_grid_list(v);
                                     build_schedule(grids.back(), grids);  // rejects unordered lists early
                                     c.model.scales = std::move(grids);
                                   },
                                   [](const RunConfig& c) { return format_grid_list(c.model.scales); }});
    t.emplace_back("downsample_mode",
                   Field{[](RunConfig& c, const std::string& v) { c.model.downsample_mode = parse_downsample_mode(v); },
                         [](const RunConfig& c) { return to_string(c.model.downsample_mode); }});
    t.emplace_back("regime", Field{[](RunConfig& c, const std::string& v) { c.model.regime = parse_regime(v); },
                                   [](const RunConfig& c) { return to_string(c.model.regime); }});
    t.emplace_back("kl_weight", Field{[](RunConfig& c, const std::string& v) {
                                        c.model.kl_weight = parse_number<double>("kl_weight", v);
                                        c.loss.kl = c.model.kl_weight;
                                      },
                                      [](const RunConfig& c) { return format_double(c.model.kl_weight); }});
    t.emplace_back("drop_path", model_field(&TokenizerConfig::drop_path));
    t.emplace_back("ln_eps", model_field(&TokenizerConfig::ln_eps));
    t.emplace_back("init_std", model_field(&TokenizerConfig::init_std));
    t.emplace_back("per_scale_heads",
                   Field{[](RunConfig& c, const std::string& v) { c.model.per_scale_heads = parse_bool("per_scale_heads", v); },
                         [](const RunConfig& c) { return std::string(c.model.per_scale_heads ? "true" : "false"); }});
    t.emplace_back("seed", model_field(&TokenizerConfig::seed));
    t.emplace_back("l1_weight", loss_field(&LossWeights::l1));
    t.emplace_back("mse_weight", loss_field(&LossWeights::mse));
    t.emplace_back("perceptual_weight", loss_field(&LossWeights::perceptual));
    t.emplace_back("adversarial_weight", loss_field(&LossWeights::adversarial));
    t.emplace_back("scale_weights",
                   Field{[](RunConfig& c, const std::string& v) { c.loss.scale_weights = parse_double_list(v); },
                         [](const RunConfig& c) {
                           std::string s;
                           for (std::size_t i = 0; i < c.loss.scale_weights.size(); ++i)
                             s += (i ? "," : "") + format_double(c.loss.scale_weights[i]);
                           return s;
                         }});
    t.emplace_back("data_dir", Field{[](RunConfig& c, const std::string& v) { c.data_dir = v; },
                                     [](const RunConfig& c) { return c.data_dir; }});
    t.emplace_back("synthetic_count", number_field(&RunConfig::synthetic_count));
    t.emplace_back("data_seed", number_field(&RunConfig::data_seed));
    t.emplace_back("steps", number_field(&RunConfig::steps));
    t.emplace_back("epochs", number_field(&RunConfig::epochs));
    t.emplace_back("batch_size", number_field(&RunConfig::batch_size));
    t.emplace_back("lr_start", number_field(&RunConfig::lr_start));
    t.emplace_back("lr_end", number_field(&RunConfig::lr_end));
    t.emplace_back("warmup_ratio", number_field(&RunConfig::warmup_ratio));
    t.emplace_back("weight_decay", number_field(&RunConfig::weight_decay));
    t.emplace_back("beta1", number_field(&RunConfig::beta1));
    t.emplace_back("beta2", number_field(&RunConfig::beta2));
    t.emplace_back("grad_clip", number_field(&RunConfig::grad_clip));
    t.emplace_back("log_interval", number_field(&RunConfig::log_interval));
    t.emplace_back("checkpoint", Field{[](RunConfig& c, const std::string& v) { c.checkpoint = v; },
                                       [](const RunConfig& c) { return c.checkpoint; }});
    t.emplace_back("checkpoint_interval", number_field(&RunConfig::checkpoint_interval));
    t.emplace_back("eval_fraction", number_field(&RunConfig::eval_fraction));
    t.emplace_back("analysis_grid", Field{[](RunConfig& c, const std::string& v) {
                                            c.analysis.grid = parse_number<std::size_t>("analysis_grid", v);
                                          },
                                          [](const RunConfig& c) { return std::to_string(c.analysis.grid); }});
    t.emplace_back("analysis_padding", Field{[](RunConfig& c, const std::string& v) {
                                               c.analysis.padding = parse_number<double>("analysis_padding", v);
                                             },
                                             [](const RunConfig& c) { return format_double(c.analysis.padding); }});
    t.emplace_back("analysis_bandwidth", Field{[](RunConfig& c, const std::string& v) {
                                                 c.analysis.bandwidth = parse_number<double>("analysis_bandwidth", v);
                                               },
                                               [](const RunConfig& c) { return format_double(c.analysis.bandwidth); }});
    return t;
  }();
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : detail::fields()) keys.push_back(k);
  return keys;
}

/// Sets one key. Unknown keys are a UsageError; malformed values a ConfigError.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [k, f] : detail::fields()) {
    if (k != key) continue;
    try {
      f.set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
    return;
  }
  throw UsageError("unknown config key '" + key + "'");
}

/// "key=value" with surrounding whitespace allowed.
inline void apply_assignment(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw UsageError("expected key=value, got '" + assignment + "'");
  apply_setting(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Applies every non-blank, non-comment line of `text` on top of `base`.
inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_assignment(base, line);
    } catch (const UsageError& e) {
      throw UsageError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config file " + path, 0);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

/// Every key in canonical order; parse_config_text(to_config_text(c)) == c.
inline std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, f] : detail::fields()) out += k + "=" + f.get(cfg) + "\n";
  return out;
}

}  // namespace hieratok
