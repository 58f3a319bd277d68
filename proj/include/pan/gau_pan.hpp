#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pan/backbone.hpp"
#include "pan/fpa.hpp"
#include "pan/layers.hpp"

namespace pan {

struct GauConfig {
  std::int64_t low_channels = 64;
  std::int64_t high_channels = 32;
  std::int64_t out_channels = 32;
  bool use_global_context = true;
  std::int64_t reduce_kernel = 3;  // 1 or 3

  void validate() const;
  /// Decoder ablation label: "GAU+3x3", "GAU+GP+1x1" or "GAU+GP+3x3".
  std::string label() const;
};

struct GauHooks {
  /// Replace the context vector by this constant.
  std::optional<double> ctx_value;
  /// Multiply the context vector by this factor before gating.
  double ctx_scale = 1.0;
};

/// Global Attention Upsample decoder block.
///
/// low' = BN(conv_k(low)); ctx = relu(BN(conv1x1(GAP(high)))); out = up(proj(high)) + low' * ctx,
/// where proj is a 1x1 conv+BN when channel counts differ and up is bilinear to low's extent.
/// Without global context the block reduces to out = up(proj(high)) + low'.
class GauBlock {
 public:
  GauBlock(ParamRegistry& reg, const std::string& prefix, const GauConfig& config, Rng& rng);

  Var operator()(Var low, Var high, Mode mode, const GauHooks& hooks = {}) const;

  /// Intermediate terms of the decomposition, recomputed for inspection.
  struct Parts {
    Var reduced_low, upsampled_high, ctx, out;
  };
  Parts forward_parts(Var low, Var high, Mode mode, const GauHooks& hooks = {}) const;

  const GauConfig& config() const noexcept { return config_; }

 private:
  GauConfig config_;
  ConvBn reduce_;
  ConvBn ctx_;
  bool project_ = false;
  ConvBn proj_;
};

struct PanConfig {
  BackboneConfig backbone;
  /// Center block on the deepest features; empty means direct upsampling (baseline).
  std::optional<FpaConfig> fpa;
  /// One GAU per skip stage, deep to shallow (f3, f2, f1); empty means no decoder.
  std::vector<GauConfig> gau_chain;
  std::int64_t num_classes = 4;
  std::int64_t final_upsample_factor = 4;

  /// Full desk-scale PAN: FPA C357+AVE+GP center and a three-block GAU decoder of `width` channels.
  static PanConfig desk(std::int64_t num_classes = 4, std::int64_t width = 32);
  /// Rebuild the center/decoder channel chain after changing widths or variants.
  void rechain(std::int64_t width);

  /// Checks every junction of the channel chain; ConfigError names the junction.
  void validate() const;
  std::int64_t center_channels() const;
  std::int64_t head_channels() const;
};

struct PanHooks {
  FpaHooks fpa;
  GauHooks gau;
};

/// Backbone -> optional FPA center -> GAU chain over stage skips -> 1x1 classifier ->
/// bilinear upsample to input resolution. Owns every parameter it uses.
class PanModel {
 public:
  PanModel(const PanConfig& config, std::uint64_t seed);
  PanModel(PanModel&&) = default;
  PanModel& operator=(PanModel&&) = default;

  /// Logits [N, num_classes, H, W]; H and W must be divisible by 16.
  Var operator()(Var image, Mode mode, const PanHooks& hooks = {}) const;
  /// Eval-mode forward without recording gradients.
  Tensor predict_logits(const Tensor& image) const;

  const PanConfig& config() const noexcept { return config_; }
  ParamRegistry& params() noexcept { return *registry_; }
  const ParamRegistry& params() const noexcept { return *registry_; }
  const Backbone& backbone() const { return *backbone_; }
  const FpaBlock* fpa() const { return fpa_ ? &*fpa_ : nullptr; }
  const std::vector<GauBlock>& gau_chain() const noexcept { return gau_; }

 private:
  PanConfig config_;
  std::unique_ptr<ParamRegistry> registry_;
  std::optional<Backbone> backbone_;
  std::optional<FpaBlock> fpa_;
  std::vector<GauBlock> gau_;
  Conv2d classifier_;
};

}  // namespace pan
