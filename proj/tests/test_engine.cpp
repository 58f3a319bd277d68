#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "pan/engine.hpp"
#include "pan/error.hpp"

using namespace pan;
namespace fs = std::filesystem;

namespace {

IntTensor labels(std::vector<std::int32_t> v) {
  IntTensor t({1, static_cast<std::int64_t>(v.size())});
  t.data = std::move(v);
  return t;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("pan_test_engine_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<Sample> tiny_dataset(std::int64_t n = 4) {
  DatasetSpec spec;
  spec.seed = 7;
  return generate_dataset(spec, n);
}

TrainConfig quick_train(std::int64_t iters) {
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.max_iter = iters;
  cfg.seed = 7;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("poly learning rate samples") {
  TrainConfig cfg;
  cfg.max_iter = 300;
  CHECK(poly_lr(0, cfg) == 4e-3);
  CHECK(poly_lr(300, cfg) == 0.0);
  // 4e-3 * 2^-0.9, with 2^-0.9 = 0.535886731268146... evaluated independently
  CHECK(std::abs(poly_lr(150, cfg) - 4e-3 * 0.5358867312681466) <= 1e-12);
  CHECK(std::abs(poly_lr(150, cfg) - 2.14355e-3) < 1e-8);
  double prev = poly_lr(0, cfg);
  for (std::int64_t i = 1; i <= 300; ++i) {
    const double lr = poly_lr(i, cfg);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(poly_lr(301, cfg), ConfigError);
  CHECK_THROWS_AS(poly_lr(-1, cfg), ConfigError);
}

TEST_CASE("training config validation names the field") {
  auto field_of = [](TrainConfig cfg) {
    try {
      cfg.validate();
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("none");
  };
  TrainConfig c;
  CHECK(field_of(c) == "none");
  c.base_lr = 0.0;
  CHECK(field_of(c) == "base_lr");
  c = {};
  c.max_iter = 0;
  CHECK(field_of(c) == "max_iter");
  c = {};
  c.power = -1;
  CHECK(field_of(c) == "power");
  c = {};
  c.batch_size = 1;
  CHECK(field_of(c) == "batch_size");
}

TEST_CASE("SGD update rule examples") {
  Parameter p{"w", Tensor({1}, 0.0), Tensor({1}, 1.0), false};
  Tensor v({1});
  sgd_step(p, v, 1.0, 0.9, 0.0);
  sgd_step(p, v, 1.0, 0.9, 0.0);
  CHECK(p.value[0] == doctest::Approx(-2.9).epsilon(1e-15));

  Parameter q{"q", Tensor({3}, std::vector<double>{1, 2, 3}), Tensor({3}, std::vector<double>{0.5, -1, 2}), true};
  Tensor vq;
  sgd_step(q, vq, 0.1, 0.0, 0.0);
  CHECK(q.value == Tensor({3}, std::vector<double>{1 - 0.05, 2 + 0.1, 3 - 0.2}));

  Parameter z{"z", Tensor({2}, std::vector<double>{1.5, -2}), Tensor({2}), true};
  Tensor vz({2});
  sgd_step(z, vz, 0.5, 0.9, 0.0);
  CHECK(z.value == Tensor({2}, std::vector<double>{1.5, -2}));
}

TEST_CASE("weight decay applies only to flagged parameters") {
  Parameter w{"conv.weight", Tensor({1}, 2.0), Tensor({1}, 0.0), true};
  Parameter b{"bn.bias", Tensor({1}, 2.0), Tensor({1}, 0.0), false};
  Tensor vw, vb;
  sgd_step(w, vw, 0.1, 0.9, 0.5);
  sgd_step(b, vb, 0.1, 0.9, 0.5);
  CHECK(w.value[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
  CHECK(b.value[0] == 2.0);
}

TEST_CASE("a NaN gradient aborts the step and names the parameter") {
  ParamRegistry reg;
  Parameter& a = reg.add_parameter("layer.a", Tensor({2}, 1.0), true);
  Parameter& b = reg.add_parameter("layer.b", Tensor({2}, 1.0), true);
  reg.zero_grad();
  a.grad[0] = 1.0;
  b.grad[1] = std::nan("");
  Sgd opt(0.9, 1e-4);
  try {
    opt.step(reg, 0.1);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer.b") != std::string::npos);
  }
  CHECK(a.value == Tensor({2}, 1.0));
}

TEST_CASE("hand-computed 4-pixel confusion example") {
  ConfusionMatrix cm(2);
  cm.add(labels({0, 0, 1, 1}), labels({0, 1, 1, 1}));
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(0, 1) == 1);
  CHECK(cm.at(1, 1) == 2);
  CHECK(cm.total() == 4);
  const Metrics m = compute_metrics(cm);
  CHECK(m.per_class_iou[0].value() == 0.5);
  CHECK(m.per_class_iou[1].value() == 2.0 / 3.0);
  CHECK(m.mean_iou == (0.5 + 2.0 / 3.0) / 2.0);
  CHECK(std::abs(m.mean_iou - 7.0 / 12.0) <= 1e-15);
  CHECK(m.pixel_acc == 0.75);
}

TEST_CASE("perfect predictions, ignore pixels and absent classes") {
  ConfusionMatrix cm(4);
  cm.add(labels({0, 2, 2, kIgnoreIndex, 0}), labels({0, 2, 2, 3, 0}));
  CHECK(cm.total() == 4);
  const Metrics m = compute_metrics(cm);
  CHECK(m.mean_iou == 1.0);
  CHECK(m.pixel_acc == 1.0);
  CHECK_FALSE(m.per_class_iou[1].has_value());
  CHECK_FALSE(m.per_class_iou[3].has_value());
  CHECK_THROWS_AS(cm.add(labels({5}), labels({0})), ShapeError);
}

TEST_CASE("metrics match a set-enumeration oracle on 200 random cases") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = static_cast<int>(testing::pick(rng, 2, 5));
    const std::int64_t n = testing::pick(rng, 1, 64);
    std::vector<std::int32_t> g(static_cast<std::size_t>(n)), p(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = testing::pick(rng, 0, 9) == 0 ? kIgnoreIndex : static_cast<std::int32_t>(testing::pick(rng, 0, k - 1));
      // bias predictions towards the truth so IoUs span the range
      p[i] = (g[i] != kIgnoreIndex && testing::pick(rng, 0, 1)) ? g[i]
                                                                 : static_cast<std::int32_t>(testing::pick(rng, 0, k - 1));
    }
    ConfusionMatrix cm(k);
    cm.add(labels(g), labels(p));
    const Metrics m = compute_metrics(cm);
    const oracle::SegScores ref = oracle::seg_scores(std::vector<int>(g.begin(), g.end()),
                                                     std::vector<int>(p.begin(), p.end()), k, kIgnoreIndex);
    CHECK(std::abs(m.mean_iou - ref.mean_iou) <= 1e-12);
    CHECK(std::abs(m.pixel_acc - ref.pixel_acc) <= 1e-12);
    CHECK(m.mean_iou >= 0.0);
    CHECK(m.mean_iou <= 1.0);
    std::int64_t valid = 0;
    for (auto v : g) valid += v != kIgnoreIndex;
    CHECK(cm.total() == valid);
    bool diagonal = true;
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b) diagonal = diagonal && (a == b || cm.at(a, b) == 0);
    if (valid > 0) CHECK((m.mean_iou == 1.0) == diagonal);
  }
}

TEST_CASE("confusion matrices merge by addition") {
  ConfusionMatrix a(3), b(3), both(3);
  a.add(labels({0, 1, 2}), labels({0, 2, 2}));
  b.add(labels({1, 1}), labels({1, 0}));
  both.add(labels({0, 1, 2, 1, 1}), labels({0, 2, 2, 1, 0}));
  a.merge(b);
  CHECK(a.counts() == both.counts());
  CHECK_THROWS_AS(a.merge(ConfusionMatrix(2)), ShapeError);
}

TEST_CASE("scaled extents round to multiples of 16") {
  CHECK(scaled_extent(64, 1.0) == 64);
  CHECK(scaled_extent(64, 0.5) == 32);
  CHECK(scaled_extent(64, 0.75) == 48);
  CHECK(scaled_extent(64, 1.25) == 80);
  CHECK(scaled_extent(64, 1.75) == 112);
  CHECK(scaled_extent(64, 0.1) == 16);
  CHECK(scaled_extent(48, 1.25) == 64);
}

TEST_CASE("single-scale evaluation equals the plain forward pass") {
  PanModel model(PanConfig::desk(4), 3);
  const auto data = tiny_dataset(3);
  EvalConfig cfg;
  std::int64_t forwards = 0;
  for (const Sample& s : data) {
    const Tensor fused = fused_probabilities(model, s.image, cfg, &forwards);
    const Tensor logits = model.predict_logits(s.image.reshaped({1, 3, 64, 64}));
    CHECK(argmax_channels(fused) == argmax_channels(logits));
    CHECK(fused == softmax_channels(logits));
  }
  CHECK(forwards == 3);
}

TEST_CASE("flip path averages the mirrored prediction") {
  PanModel model(PanConfig::desk(4), 4);
  const Tensor x = tiny_dataset(1)[0].image.reshaped({1, 3, 64, 64});
  EvalConfig cfg;
  cfg.flip = true;
  const Tensor fused = fused_probabilities(model, x, cfg);
  const Tensor a = softmax_channels(model.predict_logits(x));
  const Tensor b = flip_horizontal(softmax_channels(model.predict_logits(flip_horizontal(x))));
  Tensor want(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) want[i] = 0.5 * (a[i] + b[i]);
  CHECK(fused == want);
  CHECK_FALSE(a == b);
}

TEST_CASE("six-scale grid with flip runs 12 forwards per sample") {
  PanModel model(PanConfig::desk(4), 5);
  const auto data = tiny_dataset(2);
  EvalConfig cfg;
  cfg.scales = kMultiScaleGrid;
  cfg.flip = true;
  const EvalResult r = evaluate(model, data, cfg);
  CHECK(r.forward_passes == 24);
  CHECK(r.confusion.total() == 2 * 64 * 64);
  CHECK(r.metrics.pixel_acc >= 0.0);
  CHECK(r.metrics.pixel_acc <= 1.0);
  const EvalResult again = evaluate(model, data, cfg);
  CHECK(again.confusion.counts() == r.confusion.counts());
  CHECK_THROWS_AS(evaluate(model, {}, cfg), ConfigError);
  EvalConfig bad;
  bad.scales = {};
  CHECK_THROWS_AS(evaluate(model, data, bad), ConfigError);
}

TEST_CASE("checkpoint encoding round trip and structured errors") {
  std::vector<NamedTensor> tensors{{"a", Tensor({2, 3}, std::vector<double>{1, -2, 3.5, 1e-300, -0.0, 7})},
                                   {"b.c", Tensor({1}, 0.1)}};
  const std::string bytes = encode_checkpoint(tensors);
  CHECK(bytes.substr(0, 8) == "PANCKPT1");
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "a");
  CHECK(back[0].value == tensors[0].value);
  CHECK(std::signbit(back[0].value[4]));
  CHECK(back[1].value == tensors[1].value);
  CHECK(bytes.size() == 8 + 4 + 4 + (4 + 1 + 1 + 16 + 48) + (4 + 3 + 1 + 8 + 8));

  auto message = [](const std::string& b) {
    try {
      decode_checkpoint(b);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("ok");
  };
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK(message(bad).find("bad magic") != std::string::npos);
  std::string version = bytes;
  version[8] = 2;
  CHECK(message(version).find("version") != std::string::npos);
  CHECK(message(bytes.substr(0, bytes.size() - 3)).find("truncat") != std::string::npos);
  CHECK(message(bytes.substr(0, 10)).find("truncat") != std::string::npos);
  CHECK_THROWS_AS(encode_checkpoint({tensors[0], tensors[0]}), Error);
  std::string dup = encode_checkpoint({tensors[0], {"z", tensors[0].value}});
  dup[16 + 70 + 4] = 'a';  // second name, after the header and the first record
  CHECK(message(dup).find("duplicate") != std::string::npos);
  CHECK(message(bytes + "x").find("trailing") != std::string::npos);
}

TEST_CASE("save and load restore parameters, BN statistics and velocity bit-identically") {
  const fs::path dir = scratch("ckpt");
  PanModel model(PanConfig::desk(4), 1);
  const auto data = tiny_dataset(4);
  TrainOptions opt;
  opt.out_dir = dir / "run";
  train(model, data, quick_train(2), opt);
  REQUIRE(fs::exists(dir / "run" / "checkpoint.bin"));

  PanModel restored(PanConfig::desk(4), 99);
  Sgd sgd(0.9, 1e-4);
  CHECK(load_checkpoint(dir / "run" / "checkpoint.bin", restored, &sgd) == 2);
  for (std::size_t i = 0; i < model.params().parameters().size(); ++i) {
    CHECK(restored.params().parameters()[i]->value == model.params().parameters()[i]->value);
  }
  for (std::size_t i = 0; i < model.params().buffers().size(); ++i) {
    CHECK(restored.params().buffers()[i]->value == model.params().buffers()[i]->value);
  }
  CHECK(sgd.velocity().size() == model.params().parameters().size());

  save_checkpoint(dir / "again.bin", restored, &sgd, 2);
  CHECK(slurp(dir / "again.bin") == slurp(dir / "run" / "checkpoint.bin"));

  EvalConfig cfg;
  CHECK(evaluate(model, data, cfg).confusion.counts() == evaluate(restored, data, cfg).confusion.counts());

  PanConfig other = PanConfig::desk(4);
  other.num_classes = 5;
  PanModel wrong(other, 1);
  CHECK_THROWS_AS(load_checkpoint(dir / "run" / "checkpoint.bin", wrong), ShapeError);
  CHECK_THROWS(load_checkpoint(dir / "missing.bin", restored));
  fs::remove_all(dir);
}

TEST_CASE("training is deterministic and resume replays the uninterrupted run") {
  const fs::path dir = scratch("resume");
  const auto data = tiny_dataset(4);

  PanModel a(PanConfig::desk(4), 2), b(PanModel(PanConfig::desk(4), 2));
  TrainOptions full;
  full.out_dir = dir / "full";
  const auto ra = train(a, data, quick_train(4), full);
  const auto rb = train(b, data, quick_train(4));
  CHECK(ra == rb);
  REQUIRE(ra.size() == 4);
  CHECK(ra[0].lr == 4e-3);
  CHECK(std::abs(ra[0].loss - std::log(4.0)) <= 0.2 * std::log(4.0));

  TrainConfig cfg = quick_train(4);
  cfg.checkpoint_interval = 2;
  PanModel c(PanConfig::desk(4), 2);
  TrainOptions first;
  first.out_dir = dir / "split";
  first.on_record = [](const TrainRecord& r) {
    if (r.iter == 2) throw std::runtime_error("interrupted");
  };
  CHECK_THROWS_AS(train(c, data, cfg, first), std::runtime_error);

  PanModel d(PanConfig::desk(4), 77);
  TrainOptions resume;
  resume.out_dir = dir / "split";
  resume.resume_from = dir / "split" / "checkpoint.bin";
  const auto rd = train(d, data, cfg, resume);
  REQUIRE(rd.size() == 2);
  CHECK(rd[0] == ra[2]);
  CHECK(rd[1] == ra[3]);
  for (std::size_t i = 0; i < a.params().parameters().size(); ++i) {
    CHECK(d.params().parameters()[i]->value == a.params().parameters()[i]->value);
  }
  CHECK(slurp(dir / "split" / "checkpoint.bin") == slurp(dir / "full" / "checkpoint.bin"));

  // the interrupted log holds iterations 0..2; the resumed run appends 2..3
  std::ifstream log(dir / "split" / "train_log.jsonl");
  std::vector<std::string> lines;
  for (std::string line; std::getline(log, line);) lines.push_back(line);
  CHECK(lines.size() == 5);
  fs::remove_all(dir);
}

TEST_CASE("training rejects an empty dataset and bad configs") {
  PanModel m(PanConfig::desk(4), 1);
  CHECK_THROWS_AS(train(m, {}, quick_train(1)), ConfigError);
  TrainConfig bad = quick_train(1);
  bad.batch_size = 1;
  CHECK_THROWS_AS(train(m, tiny_dataset(2), bad), ConfigError);
}
