#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pan/data.hpp"
#include "pan/engine.hpp"
#include "pan/gau_pan.hpp"

namespace pan {

/// Everything a command needs, merged from the config file and flag overrides.
///
/// File format: `key = value` lines grouped under `[section]` headers; `#` starts a comment.
/// Keys before the first header belong to the global section. Every key is checked against
/// a closed schema, so a misspelled key is an error rather than a silently ignored line.
struct RunConfig {
  // global
  std::uint64_t seed = 7;
  std::string data_dir = "data";
  std::string out_dir = "runs";
  std::string checkpoint;  // empty: <out_dir>/checkpoint.bin

  // [data]
  std::int64_t num_classes = 4;
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t min_shapes = 1;
  std::int64_t max_shapes = 3;
  double noise = 0.05;
  std::int64_t n_train = 8;
  std::int64_t n_val = 8;

  // [model]
  std::int64_t stem_channels = 16;
  std::vector<std::int64_t> stage_channels{16, 32, 64, 128};
  std::vector<std::int64_t> blocks_per_stage{1, 1, 1, 1};
  std::int64_t dilation = 2;
  std::string center = "fpa";  // fpa | se | none
  std::string fpa_kernels = "357";  // 357 | 333
  std::string fpa_pool = "avg";     // avg | max
  bool fpa_global_pool = true;
  std::int64_t decoder_width = 32;
  std::int64_t gau_blocks = 3;
  bool gau_global_context = true;
  std::int64_t gau_reduce_kernel = 3;

  // [train]
  TrainConfig train;
  bool resume = false;

  // [eval]
  std::vector<double> scales{1.0};
  bool flip = false;
  std::string split = "val";  // val | train

  // [predict]
  std::string image;
  std::string mask_out;   // empty: <out_dir>/<image stem>_mask.pgm
  std::string color_out;  // empty: <out_dir>/<image stem>_color.ppm

  // [ablate]
  std::string grid = "all";  // fpa | gau | all
  std::vector<std::string> variants;  // empty: every variant of the grid
  std::int64_t repeat = 1;
  std::int64_t ablate_max_iter = 60;
  std::int64_t ablate_batch_size = 4;
  double ablate_base_lr = 0.02;

  // [gradcheck]
  std::int64_t gc_samples = 100;
  double gc_h = 1e-5;
  double gc_tol = 1e-4;
  bool inject_fault = false;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  /// Throws ConfigError naming the offending "section.key".
  void validate() const;

  DatasetSpec dataset_spec(bool validation_split) const;
  PanConfig pan_config() const;
  TrainConfig train_config() const;
  EvalConfig eval_config() const;
  std::string checkpoint_path() const;
};

/// Parse config text; `origin` prefixes error messages (e.g. the file name).
RunConfig parse_run_config(const std::string& text, const std::string& origin = "config");
RunConfig load_run_config(const std::string& path);
/// Canonical text form; parse_run_config(serialize_run_config(c)) == c.
std::string serialize_run_config(const RunConfig& config);

/// Apply one "section.key=value" (or "key=value" for global keys) override.
void apply_override(RunConfig& config, const std::string& assignment);
/// Set one key by its qualified name ("train.max_iter", "seed").
void set_config_value(RunConfig& config, const std::string& qualified_key, const std::string& value);
/// Every qualified key in schema order.
std::vector<std::string> config_keys();

}  // namespace pan
