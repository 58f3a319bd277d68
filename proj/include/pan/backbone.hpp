#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pan/layers.hpp"

namespace pan {

struct BackboneConfig {
  std::int64_t in_channels = 3;
  std::int64_t stem_channels = 16;
  std::array<std::int64_t, 4> stage_channels{16, 32, 64, 128};
  std::array<std::int64_t, 4> blocks_per_stage{1, 1, 1, 1};
  std::int64_t final_stage_dilation = 2;
  std::int64_t output_stride = 16;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
};

/// Outputs of the four residual stages (strides 4, 8, 16, 16).
struct StageFeatures {
  Var f1, f2, f3, f4;
};

/// Residual basic block: two 3x3 conv+BN with identity or 1x1 projection shortcut.
class BasicBlock {
 public:
  BasicBlock(ParamRegistry& reg, const std::string& prefix, std::int64_t in, std::int64_t out,
             std::int64_t stride, std::int64_t dilation, Rng& rng);
  Var operator()(Var x, Mode mode) const;

 private:
  ConvBn conv1_, conv2_;
  bool project_ = false;
  ConvBn shortcut_;
};

/// Three-3x3-conv stem, 3x3/2 max pool, four residual stages; the last stage keeps
/// stride 1 and dilates instead, giving an overall output stride of 16.
class Backbone {
 public:
  Backbone(ParamRegistry& reg, const std::string& prefix, const BackboneConfig& config, Rng& rng);

  /// Requires H and W divisible by 16.
  StageFeatures operator()(Var image, Mode mode) const;

  Var stem(Var image, Mode mode) const;
  Var stage(std::size_t index, Var x, Mode mode) const;
  const BackboneConfig& config() const noexcept { return config_; }

 private:
  BackboneConfig config_;
  std::array<ConvBn, 3> stem_;
  std::array<std::vector<BasicBlock>, 4> stages_;
};

}  // namespace pan
