#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "pan/engine.hpp"
#include "pan/error.hpp"
#include "pan/ops.hpp"

using namespace pan;
using testing::from_nd;
using testing::max_abs_diff;
using testing::pick;
using testing::random_tensor;
using testing::to_nd;

namespace {

Tensor t4(std::int64_t h, std::int64_t w, std::vector<double> v) { return Tensor({1, 1, h, w}, std::move(v)); }

}  // namespace

TEST_CASE("tensor validates shape against data") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  Tensor t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("conv2d: all-ones 3x3 with padding 1") {
  Tape tape;
  Var x = tape.constant(Tensor({1, 1, 3, 3}, 1.0));
  Var w = tape.constant(Tensor({1, 1, 3, 3}, 1.0));
  Var y = conv2d(x, w, std::nullopt, ConvSpec::square(1, 1, 3));
  CHECK(y.value() == t4(3, 3, {4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST_CASE("conv2d: identity 1x1 kernel and zero input with bias") {
  std::mt19937_64 rng(1);
  Tape tape;
  Tensor xv = random_tensor({2, 1, 4, 5}, rng, false);
  Var y = conv2d(tape.constant(xv), tape.constant(Tensor({1, 1, 1, 1}, 1.0)), std::nullopt, ConvSpec{1, 1, 1, 1});
  CHECK(y.value() == xv);

  Var z = conv2d(tape.constant(Tensor({1, 1, 5, 5})), tape.constant(random_tensor({1, 1, 3, 3}, rng, false)),
                 tape.constant(Tensor({1}, 0.75)), ConvSpec{1, 1, 3, 3, 1, 1, 1, true});
  for (double v : z.value().data()) CHECK(v == 0.75);
}

TEST_CASE("conv2d: identity kernel leaves gradients unchanged") {
  std::mt19937_64 rng(2);
  Parameter x{"x", random_tensor({1, 2, 3, 3}, rng, false), {}, false};
  Tensor weights = random_tensor({1, 2, 3, 3}, rng, false);
  auto grad_of = [&](bool with_identity) {
    x.zero_grad();
    Tape tape;
    Var v = tape.param(x);
    if (with_identity) {
      Tensor eye({2, 2, 1, 1});
      eye.at(0, 0, 0, 0) = eye.at(1, 1, 0, 0) = 1.0;
      v = conv2d(v, tape.constant(eye), std::nullopt, ConvSpec{2, 2, 1, 1});
    }
    tape.backward(sum(mul(v, tape.constant(weights.reshaped({1, 2, 3, 3})))));
    return x.grad;
  };
  CHECK(grad_of(true) == grad_of(false));
}

TEST_CASE("conv2d: shape errors name the dimension") {
  Tape tape;
  Var x = tape.constant(Tensor({1, 2, 4, 4}));
  try {
    conv2d(x, tape.constant(Tensor({1, 3, 3, 3})), std::nullopt, ConvSpec::square(3, 1, 3));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.dimension() == "in_channels");
  }
  CHECK_THROWS_AS(conv2d(x, tape.constant(Tensor({1, 2, 7, 7})), std::nullopt, ConvSpec{2, 1, 7, 7}), ShapeError);
}

TEST_CASE("conv2d matches the direct-loop oracle on 200 random cases") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const bool integer = trial % 2 == 0;
    const std::int64_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2), dil = pick(rng, 1, 2), pad = pick(rng, 0, 2);
    const std::int64_t h = pick(rng, dil * (k - 1) + 1, 8), w = pick(rng, dil * (k - 1) + 1, 8);
    const std::int64_t ci = pick(rng, 1, 3), co = pick(rng, 1, 3), n = pick(rng, 1, 2);
    Tensor x = random_tensor({n, ci, h, w}, rng, integer);
    Tensor wt = random_tensor({co, ci, k, k}, rng, integer);
    Tensor b = random_tensor({co}, rng, integer);
    std::vector<double> bias(b.data().begin(), b.data().end());
    Tape tape;
    Var y = conv2d(tape.constant(x), tape.constant(wt), tape.constant(b), ConvSpec{ci, co, k, k, stride, pad, dil, true});
    const oracle::Nd ref = oracle::conv2d(to_nd(x), to_nd(wt), &bias, stride, pad, dil);
    REQUIRE(y.shape() == ref.dims);
    if (integer) {
      CHECK(y.value() == from_nd(ref));
    } else {
      CHECK(max_abs_diff(y.value(), ref) <= 1e-10);
    }
  }
}

TEST_CASE("pool2d examples") {
  Tape tape;
  Var x = tape.constant(t4(2, 2, {1, 2, 3, 4}));
  CHECK(pool2d(x, PoolMode::avg, 2, 2).value() == t4(1, 1, {2.5}));
  CHECK(pool2d(x, PoolMode::max, 2, 2).value() == t4(1, 1, {4}));
  for (PoolMode mode : {PoolMode::max, PoolMode::avg}) {
    Var c = pool2d(tape.constant(Tensor({1, 2, 6, 6}, -1.25)), mode, 2, 2);
    for (double v : c.value().data()) CHECK(v == -1.25);
  }
  CHECK_THROWS_AS(pool2d(x, PoolMode::max, 3, 1), ShapeError);
}

TEST_CASE("pool2d max gradient goes to the first maximum in raster order") {
  Parameter x{"x", t4(2, 2, {5, 5, 1, 5}), {}, false};
  x.zero_grad();
  Tape tape;
  tape.backward(sum(pool2d(tape.param(x), PoolMode::max, 2, 2)));
  CHECK(x.grad == t4(2, 2, {1, 0, 0, 0}));
}

TEST_CASE("pool2d matches the windowed oracle on 200 random cases") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const bool integer = trial % 2 == 0;
    const bool max_mode = trial % 4 < 2;
    const bool ceil_mode = trial % 3 == 0;
    const std::int64_t k = pick(rng, 1, 3), s = pick(rng, 1, 3), p = pick(rng, 0, k / 2);
    const std::int64_t h = pick(rng, k, 8), w = pick(rng, k, 8);
    Tensor x = random_tensor({pick(rng, 1, 2), pick(rng, 1, 3), h, w}, rng, integer);
    Tape tape;
    Var y = pool2d(tape.constant(x), max_mode ? PoolMode::max : PoolMode::avg, PoolSpec{k, s, p, ceil_mode});
    const oracle::Nd ref = oracle::pool2d(to_nd(x), max_mode, k, s, p, ceil_mode);
    REQUIRE(y.shape() == ref.dims);
    if (max_mode) {
      CHECK(y.value() == from_nd(ref));
    } else {
      CHECK(max_abs_diff(y.value(), ref) <= 1e-12);
    }
  }
}

TEST_CASE("average pooling times window area equals the window sum") {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({1, 2, 6, 8}, rng, true);
  Tape tape;
  Var y = scale(pool2d(tape.constant(x), PoolMode::avg, 2, 2), 4.0);
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t i = 0; i < 3; ++i)
      for (std::int64_t j = 0; j < 4; ++j) {
        const double s = x.at(0, c, 2 * i, 2 * j) + x.at(0, c, 2 * i, 2 * j + 1) + x.at(0, c, 2 * i + 1, 2 * j) +
                         x.at(0, c, 2 * i + 1, 2 * j + 1);
        CHECK(y.value().at(0, c, i, j) == s);
      }
}

TEST_CASE("global average pooling examples") {
  Tape tape;
  CHECK(global_avg_pool(tape.constant(t4(2, 2, {1, 2, 3, 4}))).value().item() == 2.5);
  CHECK(global_avg_pool(tape.constant(Tensor({1, 1, 3, 5}, 0.3))).value().item() == doctest::Approx(0.3).epsilon(1e-15));
  std::vector<double> ramp(16);
  for (int i = 0; i < 16; ++i) ramp[static_cast<std::size_t>(i)] = i;
  CHECK(global_avg_pool(tape.constant(t4(4, 4, ramp))).value().item() == 7.5);
}

TEST_CASE("bilinear upsample examples and oracle") {
  Tape tape;
  Var c = bilinear_upsample(tape.constant(Tensor({1, 1, 3, 2}, 2.5)), 7, 9);
  for (double v : c.value().data()) CHECK(v == doctest::Approx(2.5).epsilon(1e-15));
  Var one = bilinear_upsample(tape.constant(t4(1, 1, {-3.0})), 5, 4);
  for (double v : one.value().data()) CHECK(v == -3.0);

  const Tensor small = t4(2, 2, {1, 2, 3, 4});
  Var up = bilinear_upsample(tape.constant(small), 4, 4);
  // half-pixel centers: rows sample y = -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1)
  CHECK(up.value() == t4(4, 4, {1, 1.25, 1.75, 2, 1.5, 1.75, 2.25, 2.5, 2.5, 2.75, 3.25, 3.5, 3, 3.25, 3.75, 4}));
  CHECK(max_abs_diff(up.value(), oracle::bilinear(to_nd(small), 4, 4)) == 0.0);

  CHECK_THROWS_AS(bilinear_upsample(tape.constant(Tensor({1, 1, 4, 4})), 2, 8), ShapeError);
}

TEST_CASE("bilinear upsample matches the scalar oracle on 200 random cases") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t h = pick(rng, 1, 6), w = pick(rng, 1, 6);
    const std::int64_t oh = pick(rng, h, 8), ow = pick(rng, w, 8);
    Tensor x = random_tensor({pick(rng, 1, 2), pick(rng, 1, 2), h, w}, rng, false);
    Tape tape;
    Var y = bilinear_upsample(tape.constant(x), oh, ow);
    CHECK(max_abs_diff(y.value(), oracle::bilinear(to_nd(x), oh, ow)) <= 1e-12);
    // the non-differentiable helper must agree in either direction
    CHECK(max_abs_diff(resize_bilinear(x, oh, ow), oracle::bilinear(to_nd(x), oh, ow)) <= 1e-12);
    CHECK(max_abs_diff(resize_bilinear(y.value(), h, w), oracle::bilinear(to_nd(y.value()), h, w)) <= 1e-12);
  }
}

TEST_CASE("batch norm examples") {
  std::mt19937_64 rng(15);
  Tensor x = random_tensor({3, 2, 4, 4}, rng, false);
  Tape tape;
  Tensor rm({2}, 0.0), rv({2}, 1.0);
  Var y = batch_norm2d(tape.constant(x), tape.constant(Tensor({2}, 1.0)), tape.constant(Tensor({2}, 0.0)), rm, rv,
                       Mode::train, 0.1, 1e-5);
  for (std::int64_t c = 0; c < 2; ++c) {
    double mean = 0, sq = 0;
    for (std::int64_t n = 0; n < 3; ++n)
      for (std::int64_t i = 0; i < 16; ++i) mean += y.value().at(n, c, i / 4, i % 4);
    mean /= 48;
    for (std::int64_t n = 0; n < 3; ++n)
      for (std::int64_t i = 0; i < 16; ++i) sq += std::pow(y.value().at(n, c, i / 4, i % 4) - mean, 2);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(sq / 48 == doctest::Approx(1.0).epsilon(1e-4));
  }

  Tensor rm0({2}, 0.0), rv1({2}, 1.0);
  Var id = batch_norm2d(tape.constant(x), tape.constant(Tensor({2}, 1.0)), tape.constant(Tensor({2}, 0.0)), rm0, rv1,
                        Mode::eval, 0.1, 1e-12);
  CHECK(max_abs_diff(id.value(), to_nd(x)) < 1e-11);

  Tensor rm2({2}, 0.0), rv2({2}, 1.0), rm3({2}, 0.0), rv3({2}, 1.0);
  Var xhat = batch_norm2d(tape.constant(x), tape.constant(Tensor({2}, 1.0)), tape.constant(Tensor({2}, 0.0)), rm2,
                          rv2, Mode::train, 0.1, 1e-5);
  Var aff = batch_norm2d(tape.constant(x), tape.constant(Tensor({2}, 2.0)), tape.constant(Tensor({2}, 3.0)), rm3,
                         rv3, Mode::train, 0.1, 1e-5);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(aff.value()[i] == 2.0 * xhat.value()[i] + 3.0);

  Tensor a({1}), b({1});
  CHECK_THROWS_AS(batch_norm2d(tape.constant(Tensor({1, 1, 1, 1}, 2.0)), tape.constant(Tensor({1}, 1.0)),
                               tape.constant(Tensor({1}, 0.0)), a, b, Mode::train, 0.1, 1e-5),
                  ShapeError);
}

TEST_CASE("batch norm matches the oracle on 200 random cases") {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 200; ++trial) {
    const bool train = trial % 2 == 0;
    const std::int64_t n = pick(rng, 1, 3), c = pick(rng, 1, 3), h = pick(rng, 1, 8), w = pick(rng, 2, 8);
    Tensor x = random_tensor({n, c, h, w}, rng, false);
    Tensor g = random_tensor({c}, rng, false), b = random_tensor({c}, rng, false);
    Tensor rm = random_tensor({c}, rng, false), rv({c});
    for (double& v : rv.data()) v = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    const std::vector<double> gv(g.data().begin(), g.data().end()), bv(b.data().begin(), b.data().end());
    const std::vector<double> rmv(rm.data().begin(), rm.data().end()), rvv(rv.data().begin(), rv.data().end());
    const oracle::BnResult ref = oracle::batch_norm(to_nd(x), gv, bv, rmv, rvv, train, 0.1, 1e-5);
    Tape tape;
    Var y = batch_norm2d(tape.constant(x), tape.constant(g), tape.constant(b), rm, rv,
                         train ? Mode::train : Mode::eval, 0.1, 1e-5);
    CHECK(max_abs_diff(y.value(), ref.out) <= 1e-10);
    for (std::int64_t i = 0; i < c; ++i) {
      CHECK(std::abs(rm[i] - ref.running_mean[static_cast<std::size_t>(i)]) <= 1e-12);
      CHECK(std::abs(rv[i] - ref.running_var[static_cast<std::size_t>(i)]) <= 1e-12);
    }
  }
}

TEST_CASE("elementwise ops and broadcasting") {
  std::mt19937_64 rng(17);
  Tensor xv = random_tensor({2, 3, 2, 2}, rng, false);
  Tape tape;
  Var x = tape.constant(xv);
  CHECK(mul(x, tape.constant(Tensor({2, 3, 2, 2}, 1.0))).value() == xv);
  CHECK(add(x, tape.constant(Tensor({2, 3, 1, 1}))).value() == xv);
  CHECK_THROWS_AS(add(x, tape.constant(Tensor({1, 3, 1, 1}))), ShapeError);
  CHECK_THROWS_AS(mul(x, tape.constant(Tensor({2, 3, 2, 1}))), ShapeError);
  CHECK(relu(tape.constant(Tensor({3}, std::vector<double>{-1, 0, 2}))).value() ==
        Tensor({3}, std::vector<double>{0, 0, 2}));

  Parameter p{"p", Tensor({3}, std::vector<double>{-1, 0, 2}), {}, false};
  p.zero_grad();
  Tape t2;
  t2.backward(sum(relu(t2.param(p))));
  CHECK(p.grad == Tensor({3}, std::vector<double>{0, 0, 1}));
}

TEST_CASE("cross entropy examples") {
  Tape tape;
  IntTensor one({1, 1, 1});
  CHECK(cross_entropy(tape.constant(Tensor({1, 2, 1, 1}, 0.0)), one).value().item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const double big = cross_entropy(tape.constant(Tensor({1, 2, 1, 1}, std::vector<double>{1000, 0})), one)
                         .value()
                         .item();
  CHECK(std::isfinite(big));
  CHECK(big < 1e-12);

  Tensor two({1, 3, 1, 2}, std::vector<double>{0.3, -1, 2, 0.5, 0.1, 4});
  IntTensor mixed({1, 1, 2});
  mixed.data = {2, kIgnoreIndex};
  IntTensor single({1, 1, 1});
  single.data = {2};
  Tensor first({1, 3, 1, 1}, std::vector<double>{0.3, 2, 0.1});
  CHECK(cross_entropy(tape.constant(two), mixed).value().item() ==
        cross_entropy(tape.constant(first), single).value().item());

  IntTensor ignored({1, 1, 2}, kIgnoreIndex);
  CHECK_THROWS_AS(cross_entropy(tape.constant(two), ignored), ShapeError);
  IntTensor bad({1, 1, 2}, 3);
  CHECK_THROWS_AS(cross_entropy(tape.constant(two), bad), ShapeError);
}

TEST_CASE("cross entropy matches the oracle on 200 random cases") {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t n = pick(rng, 1, 2), k = pick(rng, 2, 5), h = pick(rng, 1, 8), w = pick(rng, 1, 8);
    Tensor logits = random_tensor({n, k, h, w}, rng, false);
    for (double& v : logits.data()) v *= 5.0;
    IntTensor labels({n, h, w});
    for (auto& l : labels.data) l = static_cast<std::int32_t>(pick(rng, 0, k));
    labels.data[0] = 0;
    for (auto& l : labels.data) {
      if (l == k) l = kIgnoreIndex;
    }
    std::vector<int> lab(labels.data.begin(), labels.data.end());
    Tape tape;
    const double got = cross_entropy(tape.constant(logits), labels).value().item();
    CHECK(std::abs(got - oracle::cross_entropy(to_nd(logits), lab, kIgnoreIndex)) <= 1e-10);
  }
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(19);
  Tensor logits = random_tensor({2, 5, 3, 4}, rng, false);
  for (double& v : logits.data()) v *= 30.0;
  const Tensor p = softmax_channels(logits);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < 12; ++i) {
      double s = 0.0;
      for (std::int64_t c = 0; c < 5; ++c) s += p.at(n, c, i / 4, i % 4);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("backward: sum and square") {
  std::mt19937_64 rng(20);
  Parameter x{"x", random_tensor({2, 3}, rng, false), {}, false};
  x.zero_grad();
  {
    Tape tape;
    tape.backward(sum(tape.param(x)));
    CHECK(x.grad == Tensor({2, 3}, 1.0));
  }
  x.zero_grad();
  {
    Tape tape;
    Var v = tape.param(x);
    tape.backward(sum(mul(v, v)));
    for (std::int64_t i = 0; i < 6; ++i) CHECK(x.grad[i] == 2.0 * x.value[i]);
  }
}

TEST_CASE("backward requires a scalar root and runs once") {
  Tape tape;
  Var v = tape.leaf(Tensor({2}, 1.0), true);
  CHECK_THROWS_AS(tape.backward(v), ShapeError);
  Var s = sum(v);
  tape.backward(s);
  CHECK(tape.grad(v.id()) == Tensor({2}, 1.0));
  CHECK_THROWS_AS(tape.backward(s), Error);
}

TEST_CASE("tape nodes only reference earlier nodes") {
  Tape tape;
  Var a = tape.leaf(Tensor({1, 1, 2, 2}, 1.0), true);
  Var b = relu(add(a, a));
  sum(mul(b, a));
  for (std::size_t id = 0; id < tape.size(); ++id) {
    for (std::size_t in : tape.inputs(id)) CHECK(in < id);
  }
}

TEST_CASE("non-finite values are rejected") {
  Tape tape;
  Var a = tape.constant(Tensor({1, 1, 1, 2}, std::vector<double>{1e308, 1e308}));
  CHECK_THROWS_AS(scale(a, 10.0), NumericError);
  CHECK_THROWS_AS(tape.constant(Tensor({1}, std::nan(""))), NumericError);
}

TEST_CASE("backward is bit-identical across runs") {
  std::mt19937_64 rng(21);
  Parameter x{"x", random_tensor({2, 3, 6, 6}, rng, false), {}, false};
  Tensor w = random_tensor({4, 3, 3, 3}, rng, false);
  auto run = [&] {
    x.zero_grad();
    Tape tape;
    Var y = relu(conv2d(tape.param(x), tape.constant(w), std::nullopt, ConvSpec::square(3, 4, 3)));
    Var z = bilinear_upsample(pool2d(y, PoolMode::avg, 2, 2), 6, 6);
    tape.backward(sum(mul(z, z)));
    return x.grad;
  };
  const Tensor first = run();
  CHECK(run() == first);
}

TEST_CASE("finite-difference checks on single ops") {
  GradcheckCase conv;
  GradcheckCase corrupted = corrupted_backward_case();
  for (auto& c : gradcheck_suite()) {
    if (c.name == "conv2d") conv = c;
  }
  REQUIRE(conv.run);
  CHECK(conv.run(100, 1e-5, 1e-4).passed);
  const GradcheckReport bad = corrupted.run(100, 1e-5, 1e-4);
  CHECK_FALSE(bad.passed);
  CHECK(bad.max_rel_error > 0.1);
}
