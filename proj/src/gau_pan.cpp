#include "pan/gau_pan.hpp"

#include "pan/error.hpp"

namespace pan {

void GauConfig::validate() const {
  if (low_channels < 1) throw ConfigError("low_channels", "gau: low_channels must be positive");
  if (high_channels < 1) throw ConfigError("high_channels", "gau: high_channels must be positive");
  if (out_channels < 1) throw ConfigError("out_channels", "gau: out_channels must be positive");
  if (reduce_kernel != 1 && reduce_kernel != 3) {
    throw ConfigError("reduce_kernel", "gau: reduce_kernel must be 1 or 3, got " + std::to_string(reduce_kernel));
  }
}

std::string GauConfig::label() const {
  const std::string k = reduce_kernel == 1 ? "1x1" : "3x3";
  return use_global_context ? "GAU+GP+" + k : "GAU+" + k;
}

GauBlock::GauBlock(ParamRegistry& reg, const std::string& prefix, const GauConfig& config, Rng& rng)
    : config_(config) {
  config_.validate();
  reduce_ = ConvBn(reg, prefix + ".reduce",
                   ConvSpec::square(config_.low_channels, config_.out_channels, config_.reduce_kernel), rng);
  if (config_.use_global_context) {
    ctx_ = ConvBn(reg, prefix + ".ctx", ConvSpec{config_.high_channels, config_.out_channels, 1, 1, 1, 0, 1, false},
                  rng);
  }
  project_ = config_.high_channels != config_.out_channels;
  if (project_) {
    proj_ = ConvBn(reg, prefix + ".proj", ConvSpec{config_.high_channels, config_.out_channels, 1, 1, 1, 0, 1, false},
                   rng);
  }
}

GauBlock::Parts GauBlock::forward_parts(Var low, Var high, Mode mode, const GauHooks& hooks) const {
  if (low.value().ndim() != 4 || high.value().ndim() != 4) throw ShapeError("rank", "gau: expected NCHW inputs");
  const std::int64_t hl = low.dim(2), wl = low.dim(3), hh = high.dim(2), wh = high.dim(3);
  if (hl < hh || wl < wh || hl % hh != 0 || wl % wh != 0) {
    throw ShapeError(hl % hh != 0 || hl < hh ? "height" : "width",
                     "gau: low-level extent " + std::to_string(hl) + "x" + std::to_string(wl) +
                         " is not a multiple of high-level extent " + std::to_string(hh) + "x" + std::to_string(wh));
  }
  if (low.dim(0) != high.dim(0)) throw ShapeError("batch", "gau: batch sizes differ");

  Parts parts;
  parts.reduced_low = reduce_(low, mode);
  Var h = project_ ? proj_(high, mode) : high;
  parts.upsampled_high = bilinear_upsample(h, hl, wl);
  if (!config_.use_global_context) {
    parts.out = add(parts.upsampled_high, parts.reduced_low);
    return parts;
  }
  Tape& tape = low.tape();
  if (hooks.ctx_value) {
    parts.ctx = tape.constant(Tensor::full({low.dim(0), config_.out_channels, 1, 1}, *hooks.ctx_value));
  } else {
    parts.ctx = relu(ctx_(global_avg_pool(high), mode));
  }
  if (hooks.ctx_scale != 1.0) parts.ctx = scale(parts.ctx, hooks.ctx_scale);
  parts.out = add(parts.upsampled_high, mul(parts.reduced_low, parts.ctx));
  return parts;
}

Var GauBlock::operator()(Var low, Var high, Mode mode, const GauHooks& hooks) const {
  return forward_parts(low, high, mode, hooks).out;
}

PanConfig PanConfig::desk(std::int64_t num_classes, std::int64_t width) {
  PanConfig c;
  c.num_classes = num_classes;
  c.fpa = FpaConfig::c357(c.backbone.stage_channels[3], width, PoolMode::avg, true);
  c.gau_chain.assign(3, GauConfig{});
  c.rechain(width);
  return c;
}

void PanConfig::rechain(std::int64_t width) {
  const auto& sc = backbone.stage_channels;
  if (fpa) {
    fpa->in_channels = sc[3];
    if (fpa->variant == FpaVariant::se) {
      fpa->out_channels = sc[3];
    } else {
      fpa->out_channels = width;
    }
  }
  std::int64_t high = center_channels();
  for (std::size_t i = 0; i < gau_chain.size(); ++i) {
    gau_chain[i].low_channels = sc[2 - i];
    gau_chain[i].high_channels = high;
    gau_chain[i].out_channels = width;
    high = width;
  }
  final_upsample_factor = gau_chain.size() <= 1 ? 16 : (gau_chain.size() == 2 ? 8 : 4);
}

std::int64_t PanConfig::center_channels() const {
  return fpa ? fpa->output_channels() : backbone.stage_channels[3];
}

std::int64_t PanConfig::head_channels() const {
  return gau_chain.empty() ? center_channels() : gau_chain.back().out_channels;
}

void PanConfig::validate() const {
  backbone.validate();
  if (num_classes < 2) throw ConfigError("num_classes", "pan: num_classes must be at least 2");
  if (fpa) {
    fpa->validate();
    if (fpa->in_channels != backbone.stage_channels[3]) {
      throw ConfigError("fpa.in_channels", "pan: fpa.in_channels must equal backbone stage 4 channels (" +
                                               std::to_string(backbone.stage_channels[3]) + ")");
    }
  }
  if (gau_chain.size() > 3) throw ConfigError("gau_chain", "pan: at most three GAU blocks (f3, f2, f1)");
  std::int64_t high = center_channels();
  for (std::size_t i = 0; i < gau_chain.size(); ++i) {
    const GauConfig& g = gau_chain[i];
    const std::string at = "gau_chain[" + std::to_string(i) + "]";
    g.validate();
    if (g.high_channels != high) {
      throw ConfigError(at + ".high_channels", "pan: " + at + ".high_channels is " +
                                                   std::to_string(g.high_channels) + " but the previous stage emits " +
                                                   std::to_string(high));
    }
    const std::int64_t low = backbone.stage_channels[2 - i];
    if (g.low_channels != low) {
      throw ConfigError(at + ".low_channels", "pan: " + at + ".low_channels is " + std::to_string(g.low_channels) +
                                                  " but the skip feature has " + std::to_string(low));
    }
    high = g.out_channels;
  }
  const std::int64_t stride = gau_chain.size() <= 1 ? 16 : (gau_chain.size() == 2 ? 8 : 4);
  if (final_upsample_factor != stride) {
    throw ConfigError("final_upsample_factor", "pan: final_upsample_factor must be " + std::to_string(stride) +
                                                   " for a decoder of " + std::to_string(gau_chain.size()) +
                                                   " GAU blocks");
  }
}

PanModel::PanModel(const PanConfig& config, std::uint64_t seed)
    : config_(config), registry_(std::make_unique<ParamRegistry>()) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x50414e));
  backbone_.emplace(*registry_, "backbone", config_.backbone, rng);
  if (config_.fpa) fpa_.emplace(*registry_, "fpa", *config_.fpa, rng);
  for (std::size_t i = 0; i < config_.gau_chain.size(); ++i) {
    gau_.emplace_back(*registry_, "gau" + std::to_string(i + 1), config_.gau_chain[i], rng);
  }
  classifier_ = Conv2d(*registry_, "classifier",
                       ConvSpec{config_.head_channels(), config_.num_classes, 1, 1, 1, 0, 1, true}, rng, Init::small);
}

Var PanModel::operator()(Var image, Mode mode, const PanHooks& hooks) const {
  const StageFeatures f = (*backbone_)(image, mode);
  Var x = fpa_ ? (*fpa_)(f.f4, mode, hooks.fpa) : f.f4;
  const Var skips[3] = {f.f3, f.f2, f.f1};
  for (std::size_t i = 0; i < gau_.size(); ++i) x = gau_[i](skips[i], x, mode, hooks.gau);
  Var logits = classifier_(x);
  return bilinear_upsample(logits, image.dim(2), image.dim(3));
}

Tensor PanModel::predict_logits(const Tensor& image) const {
  Tape tape(false);
  return (*this)(tape.constant(image), Mode::eval).value();
}

}  // namespace pan
