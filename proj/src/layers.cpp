#include "pan/layers.hpp"

#include <cmath>

namespace pan {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor normal(const Shape& shape, double stddev, Rng& rng) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor kaiming_normal(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  return normal(shape, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& prefix, const ConvSpec& spec, Rng& rng, Init init)
    : spec_(spec) {
  const Shape wshape{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w};
  const std::int64_t fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
  Tensor w = init == Init::kaiming ? kaiming_normal(wshape, fan_in, rng) : normal(wshape, 0.01, rng);
  weight_ = &reg.add_parameter(prefix + ".weight", std::move(w), true);
  if (spec.has_bias) bias_ = &reg.add_parameter(prefix + ".bias", Tensor::zeros({spec.out_channels}), false);
}

Var Conv2d::operator()(Var x) const {
  Tape& tape = x.tape();
  std::optional<Var> b;
  if (bias_ != nullptr) b = tape.param(*bias_);
  return conv2d(x, tape.param(*weight_), b, spec_);
}

BatchNorm2d::BatchNorm2d(ParamRegistry& reg, const std::string& prefix, std::int64_t channels) {
  gamma_ = &reg.add_parameter(prefix + ".weight", Tensor::full({channels}, 1.0), false);
  beta_ = &reg.add_parameter(prefix + ".bias", Tensor::zeros({channels}), false);
  mean_ = &reg.add_buffer(prefix + ".running_mean", Tensor::zeros({channels}));
  var_ = &reg.add_buffer(prefix + ".running_var", Tensor::full({channels}, 1.0));
}

Var BatchNorm2d::operator()(Var x, Mode mode) const {
  Tape& tape = x.tape();
  return batch_norm2d(x, tape.param(*gamma_), tape.param(*beta_), mean_->value, var_->value, mode, kMomentum,
                      kEps);
}

ConvBn::ConvBn(ParamRegistry& reg, const std::string& prefix, const ConvSpec& spec, Rng& rng)
    : conv_(reg, prefix + ".conv", ConvSpec{spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w,
                                            spec.stride, spec.padding, spec.dilation, false},
            rng),
      bn_(reg, prefix + ".bn", spec.out_channels) {}

}  // namespace pan
