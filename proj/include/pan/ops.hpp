#pragma once

#include <cstdint>
#include <optional>

#include "pan/tape.hpp"
#include "pan/tensor.hpp"

namespace pan {

enum class Mode { train, eval };
enum class PoolMode { max, avg };

/// Label value excluded from loss and metrics.
inline constexpr std::int32_t kIgnoreIndex = 255;

struct ConvSpec {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::int64_t kernel_h = 1;
  std::int64_t kernel_w = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t dilation = 1;
  bool has_bias = false;

  /// kxk convolution with "same" padding for stride 1.
  static ConvSpec square(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1,
                         std::int64_t dilation = 1, bool bias = false) {
    return ConvSpec{in, out, k, k, stride, dilation * (k / 2), dilation, bias};
  }
};

/// floor((in + 2*pad - dil*(k-1) - 1)/stride) + 1; throws ShapeError when < 1.
std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride, std::int64_t padding,
                             std::int64_t dilation, const char* axis);

struct PoolSpec {
  std::int64_t kernel = 2;
  std::int64_t stride = 2;
  std::int64_t padding = 0;
  /// Round the output extent up; trailing windows are clipped to the input.
  bool ceil_mode = false;
};

std::int64_t pool_out_extent(std::int64_t in, const PoolSpec& spec, const char* axis);

// Differentiable operators. Each records one node on the tape of its first input.

/// Direct cross-correlation (no kernel flip). bias may be omitted.
Var conv2d(Var input, Var weight, std::optional<Var> bias, const ConvSpec& spec);
/// Windowed max or mean. MAX routes gradient to the first maximal element in raster order;
/// AVE divides by the number of in-bounds elements of each window.
Var pool2d(Var input, PoolMode mode, const PoolSpec& spec);
Var pool2d(Var input, PoolMode mode, std::int64_t kernel, std::int64_t stride);
Var global_avg_pool(Var input);
/// Half-pixel-center bilinear interpolation with edge clamping; out extents must not shrink.
Var bilinear_upsample(Var input, std::int64_t out_h, std::int64_t out_w);
/// Batch normalization over (N,H,W). Train mode updates the running stats in place
/// (EMA with `momentum`, biased batch variance).
Var batch_norm2d(Var input, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, Mode mode,
                 double momentum, double eps);
/// a + b; b may be [N,C,1,1] broadcast over a's spatial dims.
Var add(Var a, Var b);
/// a * b elementwise, same broadcast rule as add.
Var mul(Var a, Var b);
Var relu(Var a);
Var sigmoid(Var a);
Var scale(Var a, double s);
/// Sum of all elements as a shape-[1] tensor.
Var sum(Var a);
/// Mean pixel-wise cross-entropy over non-ignored labels.
Var cross_entropy(Var logits, const IntTensor& labels, std::int32_t ignore_index = kIgnoreIndex);

// Plain tensor helpers (no tape).

/// Softmax over the channel axis of an NCHW tensor, max-subtracted.
Tensor softmax_channels(const Tensor& logits);
/// Half-pixel bilinear resize in either direction (used for test-time scaling).
Tensor resize_bilinear(const Tensor& input, std::int64_t out_h, std::int64_t out_w);
/// Mirror the last axis of an NCHW tensor.
Tensor flip_horizontal(const Tensor& input);
/// Per-pixel argmax over channels, first maximum wins. Returns [N,H,W].
IntTensor argmax_channels(const Tensor& scores);

}  // namespace pan
