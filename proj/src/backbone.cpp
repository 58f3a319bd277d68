#include "pan/backbone.hpp"

#include <string>

#include "pan/error.hpp"

namespace pan {

void BackboneConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels", "backbone: in_channels must be positive");
  if (stem_channels < 1) throw ConfigError("stem_channels", "backbone: stem_channels must be positive");
  for (std::size_t i = 0; i < 4; ++i) {
    if (stage_channels[i] < 1) {
      throw ConfigError("stage_channels", "backbone: stage_channels[" + std::to_string(i) + "] must be positive");
    }
    if (blocks_per_stage[i] < 1) {
      throw ConfigError("blocks_per_stage",
                        "backbone: blocks_per_stage[" + std::to_string(i) + "] must be at least 1");
    }
  }
  if (final_stage_dilation < 1) {
    throw ConfigError("final_stage_dilation", "backbone: final_stage_dilation must be positive");
  }
  if (output_stride != 16) throw ConfigError("output_stride", "backbone: only output_stride 16 is supported");
}

BasicBlock::BasicBlock(ParamRegistry& reg, const std::string& prefix, std::int64_t in, std::int64_t out,
                       std::int64_t stride, std::int64_t dilation, Rng& rng)
    : conv1_(reg, prefix + ".conv1", ConvSpec::square(in, out, 3, stride, dilation), rng),
      conv2_(reg, prefix + ".conv2", ConvSpec::square(out, out, 3, 1, dilation), rng),
      project_(stride != 1 || in != out) {
  if (project_) shortcut_ = ConvBn(reg, prefix + ".shortcut", ConvSpec{in, out, 1, 1, stride, 0, 1, false}, rng);
}

Var BasicBlock::operator()(Var x, Mode mode) const {
  Var y = relu(conv1_(x, mode));
  y = conv2_(y, mode);
  Var skip = project_ ? shortcut_(x, mode) : x;
  return relu(add(y, skip));
}

Backbone::Backbone(ParamRegistry& reg, const std::string& prefix, const BackboneConfig& config, Rng& rng)
    : config_(config) {
  config_.validate();
  const std::int64_t s = config_.stem_channels;
  stem_[0] = ConvBn(reg, prefix + ".stem.0", ConvSpec::square(config_.in_channels, s, 3, 2), rng);
  stem_[1] = ConvBn(reg, prefix + ".stem.1", ConvSpec::square(s, s, 3), rng);
  stem_[2] = ConvBn(reg, prefix + ".stem.2", ConvSpec::square(s, s, 3), rng);

  const std::array<std::int64_t, 4> strides{1, 2, 2, 1};
  const std::array<std::int64_t, 4> dilations{1, 1, 1, config_.final_stage_dilation};
  std::int64_t in = s;
  for (std::size_t st = 0; st < 4; ++st) {
    for (std::int64_t b = 0; b < config_.blocks_per_stage[st]; ++b) {
      const std::string name = prefix + ".layer" + std::to_string(st + 1) + "." + std::to_string(b);
      stages_[st].emplace_back(reg, name, in, config_.stage_channels[st], b == 0 ? strides[st] : 1, dilations[st],
                               rng);
      in = config_.stage_channels[st];
    }
  }
}

Var Backbone::stem(Var image, Mode mode) const {
  Var x = image;
  for (const ConvBn& layer : stem_) x = relu(layer(x, mode));
  return pool2d(x, PoolMode::max, PoolSpec{3, 2, 1, false});
}

Var Backbone::stage(std::size_t index, Var x, Mode mode) const {
  for (const BasicBlock& block : stages_.at(index)) x = block(x, mode);
  return x;
}

StageFeatures Backbone::operator()(Var image, Mode mode) const {
  if (image.value().ndim() != 4) throw ShapeError("rank", "backbone: expected [N,C,H,W] image");
  const std::int64_t h = image.dim(2), w = image.dim(3);
  if (h % 16 != 0 || w % 16 != 0) {
    throw ShapeError(h % 16 != 0 ? "height" : "width",
                     "backbone: input " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by 16; pad or crop the image to a multiple of 16");
  }
  if (image.dim(1) != config_.in_channels) {
    throw ShapeError("channels", "backbone: expected " + std::to_string(config_.in_channels) + " input channels");
  }
  StageFeatures f;
  Var x = stem(image, mode);
  f.f1 = stage(0, x, mode);
  f.f2 = stage(1, f.f1, mode);
  f.f3 = stage(2, f.f2, mode);
  f.f4 = stage(3, f.f3, mode);
  return f;
}

}  // namespace pan
