#include "pan/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Core>

#include "pan/error.hpp"

namespace pan {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void expect_nchw(const Tensor& t, const char* op) {
  if (t.ndim() != 4) {
    throw ShapeError("rank", std::string(op) + ": expected NCHW input, got " + shape_str(t.shape()));
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// ---------------------------------------------------------------------------
// convolution

struct ConvGeometry {
  std::int64_t cin, h, w, kh, kw, stride, pad, dil, ho, wo;
  std::int64_t rows() const { return cin * kh * kw; }
  std::int64_t cols() const { return ho * wo; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::int64_t p = g.cols();
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * p;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + i * g.dil;
          double* out = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* src = img + (c * g.h + ih) * g.w;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + j * g.dil;
            out[ow] = (iw >= 0 && iw < g.w) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
  const std::int64_t p = g.cols();
  for (std::int64_t c = 0; c < g.cin; ++c) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * p;
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + i * g.dil;
          if (ih < 0 || ih >= g.h) continue;
          double* dst = img + (c * g.h + ih) * g.w;
          const double* in = row + oh * g.wo;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + j * g.dil;
            if (iw >= 0 && iw < g.w) dst[iw] += in[ow];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// bilinear tables

struct Lerp {
  std::int64_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Lerp> lerp_table(std::int64_t in, std::int64_t out) {
  std::vector<Lerp> t(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::int64_t>(std::floor(src));
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    t[static_cast<std::size_t>(d)] = Lerp{i0, i1, src - static_cast<double>(i0)};
  }
  return t;
}

Tensor bilinear_apply(const Tensor& x, const std::vector<Lerp>& ty, const std::vector<Lerp>& tx) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oh = static_cast<std::int64_t>(ty.size());
  const auto ow = static_cast<std::int64_t>(tx.size());
  Tensor out({n, c, oh, ow});
  const double* src = x.data().data();
  double* dst = out.data().data();
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const double* s = src + plane * h * w;
    double* d = dst + plane * oh * ow;
    for (std::int64_t y = 0; y < oh; ++y) {
      const Lerp& ly = ty[static_cast<std::size_t>(y)];
      const double* r0 = s + ly.i0 * w;
      const double* r1 = s + ly.i1 * w;
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        const Lerp& lx = tx[static_cast<std::size_t>(xx)];
        const double top = r0[lx.i0] * (1.0 - lx.w1) + r0[lx.i1] * lx.w1;
        const double bot = r1[lx.i0] * (1.0 - lx.w1) + r1[lx.i1] * lx.w1;
        d[y * ow + xx] = top * (1.0 - ly.w1) + bot * ly.w1;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// broadcasting

enum class Broadcast { none, channel };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (a.ndim() == 4 && b.ndim() == 4 && b.dim(0) == a.dim(0) && b.dim(1) == a.dim(1) && b.dim(2) == 1 &&
      b.dim(3) == 1) {
    return Broadcast::channel;
  }
  throw ShapeError("broadcast", std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                                    shape_str(a.shape()));
}

}  // namespace

std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride, std::int64_t padding,
                             std::int64_t dilation, const char* axis) {
  const std::int64_t span = in + 2 * padding - dilation * (kernel - 1) - 1;
  if (span < 0) {
    throw ShapeError(axis, std::string("conv2d: non-positive output extent along ") + axis + " (input " +
                               std::to_string(in) + ", kernel " + std::to_string(kernel) + ", dilation " +
                               std::to_string(dilation) + ", padding " + std::to_string(padding) + ")");
  }
  return span / stride + 1;
}

std::int64_t pool_out_extent(std::int64_t in, const PoolSpec& spec, const char* axis) {
  if (spec.kernel < 1 || spec.stride < 1 || spec.padding < 0) {
    throw ShapeError(axis, "pool2d: kernel and stride must be positive");
  }
  const std::int64_t span = in + 2 * spec.padding - spec.kernel;
  if (!spec.ceil_mode) {
    if (span < 0) {
      throw ShapeError(axis, std::string("pool2d: kernel ") + std::to_string(spec.kernel) +
                                 " larger than extent " + std::to_string(in) + " along " + axis);
    }
    return span / spec.stride + 1;
  }
  // ceil division that also handles negative spans (window wider than input)
  std::int64_t out = (span >= 0 ? (span + spec.stride - 1) / spec.stride : -((-span) / spec.stride)) + 1;
  if ((out - 1) * spec.stride >= in + spec.padding) --out;
  if (out < 1) throw ShapeError(axis, "pool2d: empty output");
  return out;
}

Var conv2d(Var input, Var weight, std::optional<Var> bias, const ConvSpec& spec) {
  const Tensor& x = input.value();
  const Tensor& wt = weight.value();
  expect_nchw(x, "conv2d");
  if (wt.ndim() != 4) throw ShapeError("weight", "conv2d: weight must be [Cout,Cin,kh,kw]");
  if (x.dim(1) != spec.in_channels) {
    throw ShapeError("in_channels", "conv2d: input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
                                        std::to_string(spec.in_channels));
  }
  const Shape expect_w{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w};
  if (wt.shape() != expect_w) {
    throw ShapeError("weight", "conv2d: weight shape " + shape_str(wt.shape()) + " != " + shape_str(expect_w));
  }
  if (spec.has_bias != bias.has_value()) throw ShapeError("bias", "conv2d: bias presence disagrees with spec");
  if (bias && bias->value().shape() != Shape{spec.out_channels}) {
    throw ShapeError("bias", "conv2d: bias must be [Cout]");
  }
  if (spec.stride < 1 || spec.dilation < 1 || spec.padding < 0) {
    throw ShapeError("stride", "conv2d: stride/dilation must be positive and padding non-negative");
  }

  ConvGeometry g{};
  g.cin = spec.in_channels;
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.kh = spec.kernel_h;
  g.kw = spec.kernel_w;
  g.stride = spec.stride;
  g.pad = spec.padding;
  g.dil = spec.dilation;
  g.ho = conv_out_extent(g.h, g.kh, g.stride, g.pad, g.dil, "height");
  g.wo = conv_out_extent(g.w, g.kw, g.stride, g.pad, g.dil, "width");
  const std::int64_t n = x.dim(0), cout = spec.out_channels;

  Tensor out({n, cout, g.ho, g.wo});
  std::vector<double> cols(static_cast<std::size_t>(g.rows() * g.cols()));
  ConstMapMat w_mat(wt.data().data(), cout, g.rows());
  for (std::int64_t b = 0; b < n; ++b) {
    im2col(x.data().data() + b * g.cin * g.h * g.w, g, cols.data());
    MapMat y(out.data().data() + b * cout * g.cols(), cout, g.cols());
    y.noalias() = w_mat * ConstMapMat(cols.data(), g.rows(), g.cols());
    if (bias) {
      const auto bv = bias->value().data();
      for (std::int64_t o = 0; o < cout; ++o) y.row(o).array() += bv[static_cast<std::size_t>(o)];
    }
  }

  std::vector<Var> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  Tape& tape = input.tape();
  return tape.record("conv2d", std::move(out), std::move(inputs),
                     [&tape, xid = input.id(), wid = weight.id(), g, n, cout, has_bias = bias.has_value()](
                         const Tensor& gout, GradSink& sink) {
                       const Tensor& xv = tape.value(xid);
                       const Tensor& wv = tape.value(wid);
                       Tensor* gx = sink[0];
                       Tensor* gw = sink[1];
                       Tensor* gb = has_bias ? sink[2] : nullptr;
                       std::vector<double> cols(static_cast<std::size_t>(g.rows() * g.cols()));
                       ConstMapMat w_mat(wv.data().data(), cout, g.rows());
                       for (std::int64_t b = 0; b < n; ++b) {
                         ConstMapMat gy(gout.data().data() + b * cout * g.cols(), cout, g.cols());
                         if (gw) {
                           im2col(xv.data().data() + b * g.cin * g.h * g.w, g, cols.data());
                           MapMat(gw->data().data(), cout, g.rows()).noalias() +=
                               gy * ConstMapMat(cols.data(), g.rows(), g.cols()).transpose();
                         }
                         if (gx) {
                           MapMat dcols(cols.data(), g.rows(), g.cols());
                           dcols.noalias() = w_mat.transpose() * gy;
                           col2im_add(cols.data(), g, gx->data().data() + b * g.cin * g.h * g.w);
                         }
                         if (gb) {
                           for (std::int64_t o = 0; o < cout; ++o) (*gb)[o] += gy.row(o).sum();
                         }
                       }
                     });
}

Var pool2d(Var input, PoolMode mode, std::int64_t kernel, std::int64_t stride) {
  return pool2d(input, mode, PoolSpec{kernel, stride, 0, false});
}

Var pool2d(Var input, PoolMode mode, const PoolSpec& spec) {
  const Tensor& x = input.value();
  expect_nchw(x, "pool2d");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = pool_out_extent(h, spec, "height");
  const std::int64_t wo = pool_out_extent(w, spec, "width");
  Tensor out({n, c, ho, wo});
  // MAX: flat source index per output; AVE: unused
  std::vector<std::int64_t> argmax;
  if (mode == PoolMode::max) argmax.resize(static_cast<std::size_t>(out.numel()));

  auto window = [spec](std::int64_t o, std::int64_t extent) {
    const std::int64_t start = o * spec.stride - spec.padding;
    return std::pair{std::max<std::int64_t>(start, 0), std::min(start + spec.kernel, extent)};
  };

  const double* src = x.data().data();
  double* dst = out.data().data();
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      const auto [y0, y1] = window(oy, h);
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const auto [x0, x1] = window(ox, w);
        const std::int64_t o = (plane * ho + oy) * wo + ox;
        if (mode == PoolMode::max) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t best_i = -1;
          for (std::int64_t yy = y0; yy < y1; ++yy) {
            for (std::int64_t xx = x0; xx < x1; ++xx) {
              const std::int64_t i = (plane * h + yy) * w + xx;
              if (best_i < 0 || src[i] > best) {
                best = src[i];
                best_i = i;
              }
            }
          }
          dst[o] = best;
          argmax[static_cast<std::size_t>(o)] = best_i;
        } else {
          double acc = 0.0;
          for (std::int64_t yy = y0; yy < y1; ++yy) {
            for (std::int64_t xx = x0; xx < x1; ++xx) acc += src[(plane * h + yy) * w + xx];
          }
          dst[o] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
        }
      }
    }
  }

  return input.tape().record(
      "pool2d", std::move(out), {input},
      [mode, spec, n, c, h, w, ho, wo, window, argmax = std::move(argmax)](const Tensor& gout, GradSink& sink) {
        Tensor* gx = sink[0];
        if (!gx) return;
        double* d = gx->data().data();
        const double* g = gout.data().data();
        if (mode == PoolMode::max) {
          for (std::size_t o = 0; o < argmax.size(); ++o) d[argmax[o]] += g[o];
          return;
        }
        for (std::int64_t plane = 0; plane < n * c; ++plane) {
          for (std::int64_t oy = 0; oy < ho; ++oy) {
            const auto [y0, y1] = window(oy, h);
            for (std::int64_t ox = 0; ox < wo; ++ox) {
              const auto [x0, x1] = window(ox, w);
              const double share = g[(plane * ho + oy) * wo + ox] / static_cast<double>((y1 - y0) * (x1 - x0));
              for (std::int64_t yy = y0; yy < y1; ++yy) {
                for (std::int64_t xx = x0; xx < x1; ++xx) d[(plane * h + yy) * w + xx] += share;
              }
            }
          }
        }
      });
}

Var global_avg_pool(Var input) {
  const Tensor& x = input.value();
  expect_nchw(x, "global_avg_pool");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c, 1, 1});
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) acc += x[plane * hw + i];
    out[plane] = acc / static_cast<double>(hw);
  }
  return input.tape().record("global_avg_pool", std::move(out), {input},
                             [n, c, hw](const Tensor& gout, GradSink& sink) {
                               Tensor* gx = sink[0];
                               if (!gx) return;
                               for (std::int64_t plane = 0; plane < n * c; ++plane) {
                                 const double share = gout[plane] / static_cast<double>(hw);
                                 for (std::int64_t i = 0; i < hw; ++i) (*gx)[plane * hw + i] += share;
                               }
                             });
}

Var bilinear_upsample(Var input, std::int64_t out_h, std::int64_t out_w) {
  const Tensor& x = input.value();
  expect_nchw(x, "bilinear_upsample");
  const std::int64_t h = x.dim(2), w = x.dim(3);
  if (out_h < h || out_w < w) {
    throw ShapeError(out_h < h ? "height" : "width",
                     "bilinear_upsample: cannot shrink " + shape_str(x.shape()) + " to " + std::to_string(out_h) +
                         "x" + std::to_string(out_w) + "; use pool2d to downsample");
  }
  auto ty = lerp_table(h, out_h);
  auto tx = lerp_table(w, out_w);
  Tensor out = bilinear_apply(x, ty, tx);
  const std::int64_t planes = x.dim(0) * x.dim(1);
  return input.tape().record(
      "bilinear_upsample", std::move(out), {input},
      [ty = std::move(ty), tx = std::move(tx), planes, h, w, out_h, out_w](const Tensor& gout, GradSink& sink) {
        Tensor* gx = sink[0];
        if (!gx) return;
        for (std::int64_t plane = 0; plane < planes; ++plane) {
          double* d = gx->data().data() + plane * h * w;
          const double* g = gout.data().data() + plane * out_h * out_w;
          for (std::int64_t y = 0; y < out_h; ++y) {
            const Lerp& ly = ty[static_cast<std::size_t>(y)];
            for (std::int64_t xx = 0; xx < out_w; ++xx) {
              const Lerp& lx = tx[static_cast<std::size_t>(xx)];
              const double v = g[y * out_w + xx];
              const double top = v * (1.0 - ly.w1);
              const double bot = v * ly.w1;
              d[ly.i0 * w + lx.i0] += top * (1.0 - lx.w1);
              d[ly.i0 * w + lx.i1] += top * lx.w1;
              d[ly.i1 * w + lx.i0] += bot * (1.0 - lx.w1);
              d[ly.i1 * w + lx.i1] += bot * lx.w1;
            }
          }
        }
      });
}

Var batch_norm2d(Var input, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, Mode mode,
                 double momentum, double eps) {
  const Tensor& x = input.value();
  expect_nchw(x, "batch_norm2d");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Shape cshape{c};
  if (gamma.value().shape() != cshape || beta.value().shape() != cshape || running_mean.shape() != cshape ||
      running_var.shape() != cshape) {
    throw ShapeError("channels", "batch_norm2d: per-channel tensors must have shape " + shape_str(cshape));
  }
  if (!(eps > 0.0)) throw ShapeError("eps", "batch_norm2d: eps must be positive");
  const std::int64_t m = n * hw;
  if (mode == Mode::train && m == 1) {
    throw ShapeError("batch", "batch_norm2d: train mode needs more than one value per channel (N*H*W == 1)");
  }

  const double* src = x.data().data();
  std::vector<double> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == Mode::train) {
      double acc = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const double* p = src + (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      }
      mu = acc / static_cast<double>(m);
      double sq = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const double* p = src + (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / static_cast<double>(m);
      running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (1.0 - momentum) * running_var[ch] +
                        momentum * var;
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    mean[static_cast<std::size_t>(ch)] = mu;
    inv_std[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var + eps);
  }

  Tensor xhat(x.shape());
  Tensor out(x.shape());
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t base = (b * c + ch) * hw;
      const double mu = mean[static_cast<std::size_t>(ch)], is = inv_std[static_cast<std::size_t>(ch)];
      for (std::int64_t i = 0; i < hw; ++i) {
        const double xh = (src[base + i] - mu) * is;
        xhat[base + i] = xh;
        out[base + i] = gv[static_cast<std::size_t>(ch)] * xh + bv[static_cast<std::size_t>(ch)];
      }
    }
  }

  Tape& tape = input.tape();
  return tape.record(
      "batch_norm2d", std::move(out), {input, gamma, beta},
      [&tape, gid = gamma.id(), mode, n, c, hw, m, inv_std = std::move(inv_std), xhat = std::move(xhat)](
          const Tensor& gout, GradSink& sink) {
        Tensor* gx = sink[0];
        Tensor* gg = sink[1];
        Tensor* gb = sink[2];
        const auto gamma_v = tape.value(gid).data();
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t base = (b * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              sum_g += gout[base + i];
              sum_gx += gout[base + i] * xhat[base + i];
            }
          }
          if (gg) (*gg)[ch] += sum_gx;
          if (gb) (*gb)[ch] += sum_g;
          if (!gx) continue;
          const double k = gamma_v[static_cast<std::size_t>(ch)] * inv_std[static_cast<std::size_t>(ch)];
          const double mean_g = sum_g / static_cast<double>(m);
          const double mean_gx = sum_gx / static_cast<double>(m);
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t base = (b * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              if (mode == Mode::train) {
                (*gx)[base + i] += k * (gout[base + i] - mean_g - xhat[base + i] * mean_gx);
              } else {
                (*gx)[base + i] += k * gout[base + i];
              }
            }
          }
        }
      });
}

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast kind = broadcast_kind(av, bv, "add");
  Tensor out = av;
  const std::int64_t hw = kind == Broadcast::channel ? av.dim(2) * av.dim(3) : 1;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i / hw];
  return a.tape().record("add", std::move(out), {a, b}, [hw](const Tensor& gout, GradSink& sink) {
    if (Tensor* ga = sink[0]) add_into(*ga, gout);
    if (Tensor* gb = sink[1]) {
      for (std::int64_t i = 0; i < gout.numel(); ++i) (*gb)[i / hw] += gout[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast kind = broadcast_kind(av, bv, "mul");
  Tensor out = av;
  const std::int64_t hw = kind == Broadcast::channel ? av.dim(2) * av.dim(3) : 1;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i / hw];
  Tape& tape = a.tape();
  return tape.record("mul", std::move(out), {a, b},
                     [&tape, aid = a.id(), bid = b.id(), hw](const Tensor& gout, GradSink& sink) {
                       const Tensor& av = tape.value(aid);
                       const Tensor& bv = tape.value(bid);
                       if (Tensor* ga = sink[0]) {
                         for (std::int64_t i = 0; i < gout.numel(); ++i) (*ga)[i] += gout[i] * bv[i / hw];
                       }
                       if (Tensor* gb = sink[1]) {
                         for (std::int64_t i = 0; i < gout.numel(); ++i) (*gb)[i / hw] += gout[i] * av[i];
                       }
                     });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  Tape& tape = a.tape();
  return tape.record("relu", std::move(out), {a}, [&tape, aid = a.id()](const Tensor& gout, GradSink& sink) {
    Tensor* ga = sink[0];
    if (!ga) return;
    const Tensor& av = tape.value(aid);
    for (std::int64_t i = 0; i < gout.numel(); ++i) {
      if (av[i] > 0.0) (*ga)[i] += gout[i];
    }
  });
}

Var sigmoid(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  Tensor y = out;
  return a.tape().record("sigmoid", std::move(out), {a}, [y = std::move(y)](const Tensor& gout, GradSink& sink) {
    Tensor* ga = sink[0];
    if (!ga) return;
    for (std::int64_t i = 0; i < gout.numel(); ++i) (*ga)[i] += gout[i] * y[i] * (1.0 - y[i]);
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape().record("scale", std::move(out), {a}, [s](const Tensor& gout, GradSink& sink) {
    if (Tensor* ga = sink[0]) {
      for (std::int64_t i = 0; i < gout.numel(); ++i) (*ga)[i] += s * gout[i];
    }
  });
}

Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  return a.tape().record("sum", Tensor({1}, acc), {a}, [](const Tensor& gout, GradSink& sink) {
    if (Tensor* ga = sink[0]) {
      for (double& v : ga->data()) v += gout[0];
    }
  });
}

Var cross_entropy(Var logits, const IntTensor& labels, std::int32_t ignore_index) {
  const Tensor& x = logits.value();
  expect_nchw(x, "cross_entropy");
  const std::int64_t n = x.dim(0), k = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (labels.shape != Shape{n, x.dim(2), x.dim(3)}) {
    throw ShapeError("labels", "cross_entropy: labels " + shape_str(labels.shape) + " do not match logits " +
                                   shape_str(x.shape()));
  }
  Tensor prob = softmax_channels(x);
  std::int64_t count = 0;
  double loss = 0.0;
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t i = 0; i < hw; ++i) {
      const std::int32_t y = labels.data[static_cast<std::size_t>(b * hw + i)];
      if (y == ignore_index) continue;
      if (y < 0 || y >= k) {
        throw ShapeError("labels", "cross_entropy: label " + std::to_string(y) + " outside [0," +
                                       std::to_string(k) + ")");
      }
      // log-softmax computed directly from max-shifted logits
      double mx = x[(b * k) * hw + i];
      for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, x[(b * k + c) * hw + i]);
      double z = 0.0;
      for (std::int64_t c = 0; c < k; ++c) z += std::exp(x[(b * k + c) * hw + i] - mx);
      loss -= x[(b * k + y) * hw + i] - mx - std::log(z);
      ++count;
    }
  }
  if (count == 0) throw ShapeError("labels", "cross_entropy: every pixel is ignored");
  loss /= static_cast<double>(count);

  return logits.tape().record(
      "cross_entropy", Tensor({1}, loss), {logits},
      [prob = std::move(prob), labels, ignore_index, n, k, hw, count](const Tensor& gout, GradSink& sink) {
        Tensor* gx = sink[0];
        if (!gx) return;
        const double s = gout[0] / static_cast<double>(count);
        for (std::int64_t b = 0; b < n; ++b) {
          for (std::int64_t i = 0; i < hw; ++i) {
            const std::int32_t y = labels.data[static_cast<std::size_t>(b * hw + i)];
            if (y == ignore_index) continue;
            for (std::int64_t c = 0; c < k; ++c) {
              const std::int64_t at = (b * k + c) * hw + i;
              (*gx)[at] += s * (prob[at] - (c == y ? 1.0 : 0.0));
            }
          }
        }
      });
}

Tensor softmax_channels(const Tensor& logits) {
  expect_nchw(logits, "softmax_channels");
  const std::int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  Tensor out(logits.shape());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t i = 0; i < hw; ++i) {
      double mx = logits[(b * k) * hw + i];
      for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, logits[(b * k + c) * hw + i]);
      double z = 0.0;
      for (std::int64_t c = 0; c < k; ++c) {
        const double e = std::exp(logits[(b * k + c) * hw + i] - mx);
        out[(b * k + c) * hw + i] = e;
        z += e;
      }
      for (std::int64_t c = 0; c < k; ++c) out[(b * k + c) * hw + i] /= z;
    }
  }
  return out;
}

Tensor resize_bilinear(const Tensor& input, std::int64_t out_h, std::int64_t out_w) {
  expect_nchw(input, "resize_bilinear");
  if (out_h < 1 || out_w < 1) throw ShapeError("size", "resize_bilinear: target extent must be positive");
  return bilinear_apply(input, lerp_table(input.dim(2), out_h), lerp_table(input.dim(3), out_w));
}

Tensor flip_horizontal(const Tensor& input) {
  expect_nchw(input, "flip_horizontal");
  Tensor out(input.shape());
  const std::int64_t w = input.dim(3);
  const std::int64_t rows = input.numel() / w;
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t x = 0; x < w; ++x) out[r * w + x] = input[r * w + (w - 1 - x)];
  }
  return out;
}

IntTensor argmax_channels(const Tensor& scores) {
  expect_nchw(scores, "argmax_channels");
  const std::int64_t n = scores.dim(0), k = scores.dim(1), hw = scores.dim(2) * scores.dim(3);
  IntTensor out({n, scores.dim(2), scores.dim(3)});
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t i = 0; i < hw; ++i) {
      std::int32_t best = 0;
      for (std::int64_t c = 1; c < k; ++c) {
        if (scores[(b * k + c) * hw + i] > scores[(b * k + best) * hw + i]) best = static_cast<std::int32_t>(c);
      }
      out.data[static_cast<std::size_t>(b * hw + i)] = best;
    }
  }
  return out;
}

}  // namespace pan
