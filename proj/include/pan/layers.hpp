#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "pan/ops.hpp"
#include "pan/tape.hpp"

namespace pan {

using Rng = std::mt19937_64;

/// Mix two 64-bit values into a well-spread seed (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Kaiming-normal fan-in: N(0, 2/fan_in).
Tensor kaiming_normal(const Shape& shape, std::int64_t fan_in, Rng& rng);
Tensor normal(const Shape& shape, double stddev, Rng& rng);

enum class Init { kaiming, small };

/// Convolution owning its weight (and bias when spec.has_bias).
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamRegistry& reg, const std::string& prefix, const ConvSpec& spec, Rng& rng,
         Init init = Init::kaiming);

  Var operator()(Var x) const;
  const ConvSpec& spec() const noexcept { return spec_; }
  Parameter& weight() const { return *weight_; }
  Parameter* bias() const { return bias_; }

 private:
  ConvSpec spec_;
  Parameter* weight_ = nullptr;
  Parameter* bias_ = nullptr;
};

class BatchNorm2d {
 public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

  BatchNorm2d() = default;
  BatchNorm2d(ParamRegistry& reg, const std::string& prefix, std::int64_t channels);

  Var operator()(Var x, Mode mode) const;
  Parameter& gamma() const { return *gamma_; }
  Parameter& beta() const { return *beta_; }
  Buffer& running_mean() const { return *mean_; }
  Buffer& running_var() const { return *var_; }

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
  Buffer* mean_ = nullptr;
  Buffer* var_ = nullptr;
};

/// Bias-free convolution followed by batch normalization.
class ConvBn {
 public:
  ConvBn() = default;
  ConvBn(ParamRegistry& reg, const std::string& prefix, const ConvSpec& spec, Rng& rng);

  Var operator()(Var x, Mode mode) const { return bn_(conv_(x), mode); }
  const Conv2d& conv() const noexcept { return conv_; }
  const BatchNorm2d& bn() const noexcept { return bn_; }

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
};

}  // namespace pan
