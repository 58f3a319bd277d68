#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "pan/layers.hpp"

namespace pan {

enum class FpaVariant { pyramid, se };

struct FpaConfig {
  std::int64_t in_channels = 128;
  std::int64_t out_channels = 32;
  /// Kernel per pyramid level, shallowest (largest map) first. C357 is {7,5,3}.
  std::array<std::int64_t, 3> kernel_sizes{7, 5, 3};
  PoolMode pool_mode = PoolMode::avg;
  bool use_global_pool_branch = true;
  FpaVariant variant = FpaVariant::pyramid;

  static FpaConfig c357(std::int64_t in, std::int64_t out, PoolMode pool, bool gp);
  static FpaConfig c333(std::int64_t in, std::int64_t out, PoolMode pool, bool gp);
  static FpaConfig se(std::int64_t channels);

  void validate() const;
  /// Ablation label, e.g. "C357+AVE+GP" or "SE".
  std::string label() const;
  /// Channels produced by the block (the SE variant preserves its input width).
  std::int64_t output_channels() const { return variant == FpaVariant::se ? in_channels : out_channels; }
};

/// Test hooks replacing the attention map (pyramid) or channel gate (SE) by a constant.
struct FpaHooks {
  std::optional<double> attention_value;
  std::optional<double> gate_value;
};

/// Intermediate maps of the last pyramid forward, for inspection.
struct FpaTrace {
  Var main, p1, p2, p3, attention, gate;
};

/// Feature Pyramid Attention center block.
///
/// main = BN(conv1x1(x)); p1..p3 = BN(conv_k(pool(.))) down a three-level pyramid;
/// the up path merges deep to shallow with additions and bilinear x2 upsampling into a
/// full-resolution attention map multiplied onto `main`. An optional global-pooling branch
/// adds BN(conv1x1(GAP(x))) broadcast over space. The SE variant replaces all of this by a
/// channel gate sigmoid(conv(relu(conv(GAP(x))))) applied to x.
class FpaBlock {
 public:
  static constexpr std::int64_t kSeReduction = 4;

  FpaBlock(ParamRegistry& reg, const std::string& prefix, const FpaConfig& config, Rng& rng);

  /// Dispatches on the configured variant.
  Var operator()(Var x, Mode mode, const FpaHooks& hooks = {}, FpaTrace* trace = nullptr) const;
  Var pyramid_forward(Var x, Mode mode, const FpaHooks& hooks = {}, FpaTrace* trace = nullptr) const;
  Var se_forward(Var x, Mode mode, const FpaHooks& hooks = {}, FpaTrace* trace = nullptr) const;

  const FpaConfig& config() const noexcept { return config_; }
  /// Global-pooling branch conv (pyramid variant with GP only).
  const ConvBn* gp_branch() const { return config_.use_global_pool_branch ? &gp_ : nullptr; }
  const std::array<ConvBn, 3>& down_convs() const noexcept { return down_; }
  const std::array<ConvBn, 3>& up_convs() const noexcept { return up_; }

 private:
  FpaConfig config_;
  ConvBn main_;
  std::array<ConvBn, 3> down_;
  std::array<ConvBn, 3> up_;
  ConvBn gp_;
  Conv2d se_reduce_, se_expand_;
};

}  // namespace pan
