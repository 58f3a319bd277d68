#include "pan/fpa.hpp"

#include <algorithm>

#include "pan/error.hpp"

namespace pan {

FpaConfig FpaConfig::c357(std::int64_t in, std::int64_t out, PoolMode pool, bool gp) {
  return FpaConfig{in, out, {7, 5, 3}, pool, gp, FpaVariant::pyramid};
}

FpaConfig FpaConfig::c333(std::int64_t in, std::int64_t out, PoolMode pool, bool gp) {
  return FpaConfig{in, out, {3, 3, 3}, pool, gp, FpaVariant::pyramid};
}

FpaConfig FpaConfig::se(std::int64_t channels) {
  FpaConfig c;
  c.in_channels = channels;
  c.out_channels = channels;
  c.variant = FpaVariant::se;
  c.use_global_pool_branch = false;
  return c;
}

void FpaConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels", "fpa: in_channels must be positive");
  if (out_channels < 1) throw ConfigError("out_channels", "fpa: out_channels must be positive");
  if (variant == FpaVariant::se) return;
  for (auto k : kernel_sizes) {
    if (k < 1 || k % 2 == 0) {
      throw ConfigError("kernel_sizes", "fpa: kernel sizes must be positive and odd, got " + std::to_string(k));
    }
  }
}

std::string FpaConfig::label() const {
  if (variant == FpaVariant::se) return "SE";
  std::string s = "C";
  // labels list kernels smallest first, matching the C333/C357 naming
  auto ks = kernel_sizes;
  std::sort(ks.begin(), ks.end());
  for (auto k : ks) s += std::to_string(k);
  s += pool_mode == PoolMode::avg ? "+AVE" : "+MAX";
  if (use_global_pool_branch) s += "+GP";
  return s;
}

FpaBlock::FpaBlock(ParamRegistry& reg, const std::string& prefix, const FpaConfig& config, Rng& rng)
    : config_(config) {
  config_.validate();
  const std::int64_t in = config_.in_channels;
  if (config_.variant == FpaVariant::se) {
    const std::int64_t hidden = std::max<std::int64_t>(1, in / kSeReduction);
    se_reduce_ = Conv2d(reg, prefix + ".se.reduce", ConvSpec{in, hidden, 1, 1, 1, 0, 1, true}, rng);
    se_expand_ = Conv2d(reg, prefix + ".se.expand", ConvSpec{hidden, in, 1, 1, 1, 0, 1, true}, rng);
    return;
  }
  const std::int64_t out = config_.out_channels;
  main_ = ConvBn(reg, prefix + ".main", ConvSpec{in, out, 1, 1, 1, 0, 1, false}, rng);
  for (std::size_t l = 0; l < 3; ++l) {
    const std::int64_t k = config_.kernel_sizes[l];
    down_[l] = ConvBn(reg, prefix + ".down" + std::to_string(l + 1), ConvSpec::square(l == 0 ? in : out, out, k), rng);
  }
  for (std::size_t l = 0; l < 3; ++l) {
    up_[l] = ConvBn(reg, prefix + ".up" + std::to_string(l + 1), ConvSpec::square(out, out, config_.kernel_sizes[l]),
                    rng);
  }
  if (config_.use_global_pool_branch) {
    gp_ = ConvBn(reg, prefix + ".gp", ConvSpec{in, out, 1, 1, 1, 0, 1, false}, rng);
  }
}

Var FpaBlock::operator()(Var x, Mode mode, const FpaHooks& hooks, FpaTrace* trace) const {
  return config_.variant == FpaVariant::se ? se_forward(x, mode, hooks, trace)
                                           : pyramid_forward(x, mode, hooks, trace);
}

Var FpaBlock::pyramid_forward(Var x, Mode mode, const FpaHooks& hooks, FpaTrace* trace) const {
  if (config_.variant != FpaVariant::pyramid) throw Error("fpa: pyramid_forward called on the SE variant");
  if (x.value().ndim() != 4) throw ShapeError("rank", "fpa: expected [N,C,H,W] input");
  Tape& tape = x.tape();
  const std::int64_t h = x.dim(2), w = x.dim(3);

  Var main = main_(x, mode);
  Var attention;
  if (hooks.attention_value) {
    attention = tape.constant(Tensor::full(main.shape(), *hooks.attention_value));
  } else {
    // kernel-2 stride-2 pooling; ceil mode lets maps smaller than 8x8 saturate at 1x1
    const PoolSpec half{2, 2, 0, true};
    Var p1 = down_[0](pool2d(x, config_.pool_mode, half), mode);
    Var p2 = down_[1](pool2d(p1, config_.pool_mode, half), mode);
    Var p3 = down_[2](pool2d(p2, config_.pool_mode, half), mode);

    Var u3 = bilinear_upsample(up_[2](p3, mode), p2.dim(2), p2.dim(3));
    Var u2 = bilinear_upsample(up_[1](add(p2, u3), mode), p1.dim(2), p1.dim(3));
    attention = bilinear_upsample(up_[0](add(p1, u2), mode), h, w);
    if (trace) {
      trace->p1 = p1;
      trace->p2 = p2;
      trace->p3 = p3;
    }
  }
  Var out = mul(main, attention);
  if (config_.use_global_pool_branch) out = add(out, gp_(global_avg_pool(x), mode));
  if (trace) {
    trace->main = main;
    trace->attention = attention;
  }
  return out;
}

Var FpaBlock::se_forward(Var x, Mode /*mode*/, const FpaHooks& hooks, FpaTrace* trace) const {
  if (config_.variant != FpaVariant::se) throw Error("fpa: se_forward called on the pyramid variant");
  if (x.value().ndim() != 4) throw ShapeError("rank", "fpa: expected [N,C,H,W] input");
  Var gate;
  if (hooks.gate_value) {
    gate = x.tape().constant(Tensor::full({x.dim(0), x.dim(1), 1, 1}, *hooks.gate_value));
  } else {
    gate = sigmoid(se_expand_(relu(se_reduce_(global_avg_pool(x)))));
  }
  if (trace) trace->gate = gate;
  return mul(x, gate);
}

}  // namespace pan
