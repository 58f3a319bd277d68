#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pan/commands.hpp"
#include "pan/error.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> data_dir;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, CommonFlags& flags) {
  sub->add_option("--config", flags.config_path, "config file (key = value with [sections])");
  sub->add_option("--seed", flags.seed, "seed for data, init and training");
  sub->add_option("--out-dir", flags.out_dir, "directory for checkpoints, logs and reports");
  sub->add_option("--data-dir", flags.data_dir, "dataset directory written by gen-data");
  sub->add_option("--set", flags.overrides, "override a config key, e.g. --set train.base_lr=0.01");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pan: pyramid attention network segmentation on synthetic data"};
  app.require_subcommand(1);

  CommonFlags common;
  auto* gen = app.add_subcommand("gen-data", "write the synthetic train/val splits as PPM/PGM plus manifests");
  auto* train = app.add_subcommand("train", "train a model; writes checkpoint.bin and train_log.jsonl");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; writes metrics.json");
  auto* predict = app.add_subcommand("predict", "segment one PPM image into a PGM mask and a colorized PPM");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the center-block and decoder ablation grids");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable block");
  for (auto* sub : {gen, train, eval, predict, ablate, gradcheck}) add_common(sub, common);

  std::optional<std::int64_t> max_iter;
  bool resume = false;
  train->add_option("--max-iter", max_iter, "number of training iterations");
  train->add_flag("--resume", resume, "continue from the checkpoint in --out-dir");

  std::optional<std::string> scales, split, checkpoint;
  bool flip = false;
  eval->add_option("--scales", scales, "comma-separated test scales, e.g. 0.5,0.75,1.0,1.25,1.5,1.75");
  eval->add_flag("--flip", flip, "also average left-right mirrored predictions");
  eval->add_option("--split", split, "val or train");
  for (auto* sub : {eval, predict}) sub->add_option("--checkpoint", checkpoint, "checkpoint to load");

  std::optional<std::string> image, mask_out, color_out;
  predict->add_option("--image", image, "input PPM image")->required();
  predict->add_option("--mask-out", mask_out, "output PGM mask path");
  predict->add_option("--color-out", color_out, "output colorized PPM path");

  std::optional<std::string> grid, variants;
  std::optional<std::int64_t> repeat;
  ablate->add_option("--grid", grid, "fpa, gau or all")->check(CLI::IsMember({"fpa", "gau", "all"}));
  ablate->add_option("--repeat", repeat, "seeds per variant");
  ablate->add_option("--variants", variants, "comma-separated subset of variant names");

  bool inject_fault = false;
  std::optional<std::int64_t> samples;
  gradcheck->add_flag("--inject-fault", inject_fault, "append a case with a deliberately wrong backward");
  gradcheck->add_option("--samples", samples, "coordinates checked per block");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  pan::RunConfig config;
  try {
    if (!common.config_path.empty()) config = pan::load_run_config(common.config_path);
    for (const auto& o : common.overrides) pan::apply_override(config, o);
    if (common.seed) config.seed = *common.seed;
    if (common.out_dir) config.out_dir = *common.out_dir;
    if (common.data_dir) config.data_dir = *common.data_dir;
    if (max_iter) config.train.max_iter = *max_iter;
    if (resume) config.resume = true;
    if (scales) pan::set_config_value(config, "eval.scales", *scales);
    if (flip) config.flip = true;
    if (split) config.split = *split;
    if (checkpoint) config.checkpoint = *checkpoint;
    if (image) config.image = *image;
    if (mask_out) config.mask_out = *mask_out;
    if (color_out) config.color_out = *color_out;
    if (grid) config.grid = *grid;
    if (repeat) config.repeat = *repeat;
    if (variants) pan::set_config_value(config, "ablate.variants", *variants);
    if (inject_fault) config.inject_fault = true;
    if (samples) config.gc_samples = *samples;
    config.validate();
  } catch (const pan::Error& e) {
    std::cerr << "pan: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*gen) return pan::cmd_gen_data(config, std::cout);
    if (*train) return pan::cmd_train(config, std::cout);
    if (*eval) return pan::cmd_eval(config, std::cout);
    if (*predict) return pan::cmd_predict(config, std::cout);
    if (*ablate) return pan::cmd_ablate(config, std::cout);
    if (*gradcheck) return pan::cmd_gradcheck(config, std::cout);
  } catch (const pan::ConfigError& e) {
    std::cerr << "pan: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "pan: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
