#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pan/config.hpp"

namespace pan {

// -- prediction helpers ----------------------------------------------------------

using Color = std::array<std::uint8_t, 3>;

/// 256-entry palette from the VOC bit-interleaving rule (class 0 black, 1 dark red, ...).
const std::array<Color, 256>& voc_palette();
/// [3,H,W] image in [0,1] whose pixels are palette[mask] / 255.
Tensor colorize(const IntTensor& mask);
/// Eval-mode argmax mask [H,W] for a [3,H,W] image of any extent: the image is zero-padded
/// bottom/right to a multiple of 16 and the logits are cropped back.
IntTensor predict_mask(const PanModel& model, const Tensor& image);

// -- ablation grid -----------------------------------------------------------------

struct AblationVariant {
  std::string id;     // unique key, e.g. "C357+AVE+GP" or "GAU+GP+3x3"
  std::string label;  // row label of the corresponding results table
  std::vector<std::string> tables;  // "table1" and/or "table3"
  bool gp = false, reduce_1x1 = false, reduce_3x3 = false;  // table3 columns
  PanConfig config;
};

/// Variants of the requested grid ("fpa", "gau" or "all"), baseline first.
std::vector<AblationVariant> ablation_variants(const RunConfig& config);

struct AblationRow {
  AblationVariant variant;
  std::vector<double> mean_iou;   // one per repeat
  std::vector<double> pixel_acc;
  std::vector<double> untrained_mean_iou;
};

double mean_of(const std::vector<double>& v);
/// Sample standard deviation (0 for fewer than two values).
double stddev_of(const std::vector<double>& v);

// -- commands ----------------------------------------------------------------------
// Each returns the process exit code; runtime failures throw.

int cmd_gen_data(const RunConfig& config, std::ostream& out);
int cmd_train(const RunConfig& config, std::ostream& out);
int cmd_eval(const RunConfig& config, std::ostream& out);
int cmd_predict(const RunConfig& config, std::ostream& out);
int cmd_ablate(const RunConfig& config, std::ostream& out);
int cmd_gradcheck(const RunConfig& config, std::ostream& out);

/// Dataset splits as written by gen-data.
std::filesystem::path manifest_path(const RunConfig& config, const std::string& split);

}  // namespace pan
