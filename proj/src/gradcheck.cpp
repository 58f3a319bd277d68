#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <sstream>

#include "pan/engine.hpp"
#include "pan/error.hpp"

namespace pan {

GradcheckReport gradcheck(const std::string& name, const std::function<Var(Tape&)>& loss_fn,
                          const std::vector<Parameter*>& params, std::int64_t samples, double h, double tol,
                          std::uint64_t seed) {
  if (!(h > 0.0)) throw ConfigError("h", "gradcheck: step h must be positive");
  if (samples < 1) throw ConfigError("samples", "gradcheck: samples must be positive");

  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape(true);
    tape.backward(loss_fn(tape));
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (Parameter* p : params) total += static_cast<std::size_t>(p->value.numel());
  if (total <= static_cast<std::size_t>(samples)) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < static_cast<std::size_t>(params[i]->value.numel()); ++j) coords.emplace_back(i, j);
    }
  } else {
    Rng rng(mix_seed(seed, 0x6c6b));
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    std::set<std::size_t> chosen;
    while (chosen.size() < static_cast<std::size_t>(samples)) chosen.insert(pick(rng));
    for (std::size_t flat : chosen) {
      std::size_t i = 0;
      while (flat >= static_cast<std::size_t>(params[i]->value.numel())) {
        flat -= static_cast<std::size_t>(params[i]->value.numel());
        ++i;
      }
      coords.emplace_back(i, flat);
    }
  }

  auto eval = [&]() {
    Tape tape(false);
    return loss_fn(tape).value().item();
  };

  GradcheckReport report;
  report.name = name;
  for (const auto& [i, j] : coords) {
    Parameter& p = *params[i];
    double& slot = p.value.data()[j];
    const double saved = slot;
    slot = saved + h;
    const double up = eval();
    slot = saved - h;
    const double down = eval();
    slot = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = p.grad.data()[j];
    const double err = std::abs(analytic - numeric) /
                       std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    ++report.checked;
    if (err > report.max_rel_error || report.worst.empty()) {
      report.max_rel_error = std::max(report.max_rel_error, err);
      std::ostringstream ss;
      ss << p.name << "[" << j << "] analytic=" << analytic << " numeric=" << numeric;
      report.worst = ss.str();
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

namespace {

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

// Owns the parameters of one case; kept alive by the case's closure.
struct Fixture {
  explicit Fixture(std::uint64_t seed) : rng(seed) {}

  Parameter& input(const std::string& name, const Shape& shape, double stddev = 1.0) {
    Parameter& p = reg.add_parameter(name, normal(shape, stddev, rng), false);
    checked.push_back(&p);
    return p;
  }

  std::vector<Parameter*> all() const {
    std::vector<Parameter*> out;
    for (const auto& p : reg.parameters()) out.push_back(p.get());
    return out;
  }

  ParamRegistry reg;
  Rng rng;
  std::vector<Parameter*> checked;
  std::uint64_t projection_seed = 0;
};

// mean(out * R) with a fixed random R so no gradient collapses to a constant. The mean keeps
// |loss| small, which keeps finite-difference roundoff under the 1e-8 error floor.
Var project(Var out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor r = normal(out.shape(), 1.0 / static_cast<double>(out.value().numel()), rng);
  return sum(mul(out, out.tape().constant(std::move(r))));
}

GradcheckCase make_case(const std::string& name, std::shared_ptr<Fixture> fx,
                        std::function<Var(Tape&, Fixture&)> forward, bool all_params, std::uint64_t seed) {
  fx->projection_seed = mix_seed(seed ^ 0x70726f6aull, name_hash(name));
  return GradcheckCase{name, [name, fx, forward, all_params, seed](std::int64_t samples, double h, double tol) {
                         auto loss = [&](Tape& tape) { return project(forward(tape, *fx), fx->projection_seed); };
                         return gradcheck(name, loss, all_params ? fx->all() : fx->checked, samples, h, tol, seed);
                       }};
}

GradcheckCase op_case(const std::string& name, std::uint64_t seed,
                      const std::function<void(Fixture&)>& setup,
                      std::function<Var(Tape&, Fixture&)> forward) {
  auto fx = std::make_shared<Fixture>(mix_seed(seed, name_hash(name)));
  setup(*fx);
  return make_case(name, fx, std::move(forward), false, seed);
}

Var p(Tape& tape, Fixture& fx, std::size_t i) { return tape.param(*fx.checked.at(i)); }

std::vector<GradcheckCase> op_cases(std::uint64_t seed) {
  std::vector<GradcheckCase> cases;

  const ConvSpec conv_spec{3, 4, 3, 3, 1, 1, 1, true};
  cases.push_back(op_case(
      "conv2d", seed,
      [&](Fixture& fx) {
        fx.input("x", {2, 3, 6, 5});
        fx.input("w", {4, 3, 3, 3});
        fx.input("b", {4});
      },
      [conv_spec](Tape& t, Fixture& fx) { return conv2d(p(t, fx, 0), p(t, fx, 1), p(t, fx, 2), conv_spec); }));

  const ConvSpec strided{2, 3, 3, 3, 2, 2, 2, false};
  cases.push_back(op_case(
      "conv2d_stride2_dilation2", seed,
      [&](Fixture& fx) {
        fx.input("x", {1, 2, 9, 8});
        fx.input("w", {3, 2, 3, 3});
      },
      [strided](Tape& t, Fixture& fx) { return conv2d(p(t, fx, 0), p(t, fx, 1), std::nullopt, strided); }));

  cases.push_back(op_case(
      "pool2d_max", seed, [](Fixture& fx) { fx.input("x", {2, 2, 7, 6}); },
      [](Tape& t, Fixture& fx) { return pool2d(p(t, fx, 0), PoolMode::max, PoolSpec{3, 2, 1, false}); }));
  cases.push_back(op_case(
      "pool2d_avg_ceil", seed, [](Fixture& fx) { fx.input("x", {2, 2, 5, 7}); },
      [](Tape& t, Fixture& fx) { return pool2d(p(t, fx, 0), PoolMode::avg, PoolSpec{2, 2, 0, true}); }));
  cases.push_back(op_case(
      "global_avg_pool", seed, [](Fixture& fx) { fx.input("x", {2, 3, 4, 5}); },
      [](Tape& t, Fixture& fx) { return global_avg_pool(p(t, fx, 0)); }));
  cases.push_back(op_case(
      "bilinear_upsample", seed, [](Fixture& fx) { fx.input("x", {1, 2, 3, 4}); },
      [](Tape& t, Fixture& fx) { return bilinear_upsample(p(t, fx, 0), 7, 9); }));

  for (Mode mode : {Mode::train, Mode::eval}) {
    const std::string name = mode == Mode::train ? "batch_norm2d_train" : "batch_norm2d_eval";
    cases.push_back(op_case(
        name, seed,
        [](Fixture& fx) {
          fx.input("x", {3, 2, 3, 3});
          fx.input("gamma", {2});
          fx.input("beta", {2});
        },
        [mode](Tape& t, Fixture& fx) {
          // local running stats: every evaluation starts from the same state
          Tensor rm({2}, std::vector<double>{0.1, -0.2});
          Tensor rv({2}, std::vector<double>{0.8, 1.3});
          return batch_norm2d(p(t, fx, 0), p(t, fx, 1), p(t, fx, 2), rm, rv, mode, 0.1, 1e-5);
        }));
  }

  cases.push_back(op_case(
      "add", seed,
      [](Fixture& fx) {
        fx.input("a", {2, 3, 2, 2});
        fx.input("b", {2, 3, 2, 2});
      },
      [](Tape& t, Fixture& fx) { return add(p(t, fx, 0), p(t, fx, 1)); }));
  cases.push_back(op_case(
      "add_broadcast", seed,
      [](Fixture& fx) {
        fx.input("a", {2, 3, 2, 3});
        fx.input("b", {2, 3, 1, 1});
      },
      [](Tape& t, Fixture& fx) { return add(p(t, fx, 0), p(t, fx, 1)); }));
  cases.push_back(op_case(
      "mul", seed,
      [](Fixture& fx) {
        fx.input("a", {2, 3, 2, 2});
        fx.input("b", {2, 3, 2, 2});
      },
      [](Tape& t, Fixture& fx) { return mul(p(t, fx, 0), p(t, fx, 1)); }));
  cases.push_back(op_case(
      "mul_broadcast", seed,
      [](Fixture& fx) {
        fx.input("a", {2, 3, 3, 2});
        fx.input("b", {2, 3, 1, 1});
      },
      [](Tape& t, Fixture& fx) { return mul(p(t, fx, 0), p(t, fx, 1)); }));
  cases.push_back(op_case(
      "relu", seed, [](Fixture& fx) { fx.input("x", {2, 2, 3, 3}); },
      [](Tape& t, Fixture& fx) { return relu(p(t, fx, 0)); }));
  cases.push_back(op_case(
      "sigmoid", seed, [](Fixture& fx) { fx.input("x", {2, 2, 3, 3}, 2.0); },
      [](Tape& t, Fixture& fx) { return sigmoid(p(t, fx, 0)); }));
  cases.push_back(op_case(
      "scale", seed, [](Fixture& fx) { fx.input("x", {1, 2, 2, 3}); },
      [](Tape& t, Fixture& fx) { return scale(p(t, fx, 0), -1.75); }));
  cases.push_back(op_case(
      "sum", seed, [](Fixture& fx) { fx.input("x", {1, 2, 2, 3}); },
      [](Tape& t, Fixture& fx) { return sum(mul(p(t, fx, 0), p(t, fx, 0))); }));
  cases.push_back(op_case(
      "cross_entropy", seed, [](Fixture& fx) { fx.input("logits", {2, 4, 3, 3}, 2.0); },
      [](Tape& t, Fixture& fx) {
        IntTensor labels({2, 3, 3});
        labels.data = {0, 1, 2, 3, 255, 1, 2, 0, 3, 3, 3, 255, 0, 1, 1, 2, 2, 0};
        return cross_entropy(p(t, fx, 0), labels);
      }));
  return cases;
}

// Train-mode cases use batches and extents large enough that no BN layer normalizes
// fewer than 4 values: over 2 values the normalized output is +-1 and true gradients
// shrink below what central differences resolve.
struct BlockShape {
  Mode mode;
  std::int64_t batch, extent;
  const char* tag;
};
constexpr BlockShape kBlockShapes[] = {{Mode::eval, 2, 8, "eval"}, {Mode::train, 4, 16, "train"}};

std::vector<GradcheckCase> block_cases(std::uint64_t seed) {
  std::vector<GradcheckCase> cases;

  for (const BlockShape& bs : kBlockShapes) {
    const Mode mode = bs.mode;
    for (bool c357 : {false, true}) {
      for (PoolMode pool : {PoolMode::max, PoolMode::avg}) {
        for (bool gp : {false, true}) {
          FpaConfig cfg = c357 ? FpaConfig::c357(4, 3, pool, gp) : FpaConfig::c333(4, 3, pool, gp);
          const std::string name = "fpa_" + cfg.label() + "/" + bs.tag;
          auto fx = std::make_shared<Fixture>(mix_seed(seed, name_hash(name)));
          auto block = std::make_shared<FpaBlock>(fx->reg, "fpa", cfg, fx->rng);
          Rng data_rng(mix_seed(seed, 0xf9a));
          auto x = std::make_shared<Tensor>(normal({bs.batch, 4, bs.extent, bs.extent}, 1.0, data_rng));
          cases.push_back(make_case(
              name, fx, [block, x, mode](Tape& t, Fixture&) { return (*block)(t.constant(*x), mode); }, true,
              seed));
        }
      }
    }

    {
      const std::string name = std::string("fpa_SE/") + bs.tag;
      auto fx = std::make_shared<Fixture>(mix_seed(seed, name_hash(name)));
      auto block = std::make_shared<FpaBlock>(fx->reg, "se", FpaConfig::se(8), fx->rng);
      Rng data_rng(mix_seed(seed, 0x5e5e));
      auto x = std::make_shared<Tensor>(normal({bs.batch, 8, bs.extent / 2, bs.extent / 2}, 1.0, data_rng));
      cases.push_back(make_case(
          name, fx, [block, x, mode](Tape& t, Fixture&) { return (*block)(t.constant(*x), mode); }, true, seed));
    }

    const std::vector<GauConfig> gaus{GauConfig{4, 6, 3, false, 3}, GauConfig{4, 6, 3, true, 1},
                                      GauConfig{4, 3, 3, true, 3}};
    for (const GauConfig& cfg : gaus) {
      const std::string name = "gau_" + cfg.label() + "/" + bs.tag;
      auto fx = std::make_shared<Fixture>(mix_seed(seed, name_hash(name)));
      auto block = std::make_shared<GauBlock>(fx->reg, "gau", cfg, fx->rng);
      Rng data_rng(mix_seed(seed, 0x6a0));
      const std::int64_t e = bs.extent;
      auto low = std::make_shared<Tensor>(normal({bs.batch, cfg.low_channels, e, e}, 1.0, data_rng));
      auto high = std::make_shared<Tensor>(normal({bs.batch, cfg.high_channels, e / 2, e / 2}, 1.0, data_rng));
      cases.push_back(make_case(
          name, fx,
          [block, low, high, mode](Tape& t, Fixture&) {
            return (*block)(t.constant(*low), t.constant(*high), mode);
          },
          true, seed));
    }

    {
      PanConfig cfg;
      cfg.backbone.stem_channels = 4;
      cfg.backbone.stage_channels = {4, 6, 6, 8};
      cfg.num_classes = 3;
      cfg.fpa = FpaConfig::c357(8, 4, PoolMode::avg, true);
      cfg.gau_chain.assign(3, GauConfig{});
      cfg.rechain(4);
      const std::string name = std::string("pan_tiny/") + bs.tag;
      auto model = std::make_shared<PanModel>(cfg, seed);
      Rng data_rng(mix_seed(seed, 0x9a1));
      // 32x32 gives a 2x2 deepest map; the train batch keeps every BN above 4 values
      const std::int64_t batch = mode == Mode::eval ? 1 : bs.batch;
      auto x = std::make_shared<Tensor>(normal({batch, 3, 32, 32}, 1.0, data_rng));
      auto params = std::make_shared<std::vector<Parameter*>>();
      for (const auto& prm : model->params().parameters()) params->push_back(prm.get());
      const std::uint64_t proj = mix_seed(seed, 0x7a7);
      cases.push_back(GradcheckCase{
          name, [name, model, x, params, proj, seed, mode](std::int64_t samples, double h, double tol) {
            auto loss = [&](Tape& t) { return project((*model)(t.constant(*x), mode), proj); };
            return gradcheck(name, loss, *params, samples, h, tol, seed);
          }});
    }
  }
  return cases;
}

}  // namespace

std::vector<GradcheckCase> gradcheck_suite(std::uint64_t seed) {
  std::vector<GradcheckCase> cases = op_cases(seed);
  for (auto& c : block_cases(seed)) cases.push_back(std::move(c));
  return cases;
}

GradcheckCase corrupted_backward_case(std::uint64_t seed) {
  auto fx = std::make_shared<Fixture>(mix_seed(seed, 0xbad));
  fx->input("x", {1, 2, 3, 3});
  // y = x^3 with a backward that forgets the factor 3
  auto cube = [](Var x) {
    Tensor y = x.value();
    for (double& v : y.data()) v = v * v * v;
    Tensor xv = x.value();
    return x.tape().record("cube_wrong", std::move(y), {x}, [xv](const Tensor& g, GradSink& sink) {
      if (Tensor* gx = sink[0]) {
        for (std::size_t i = 0; i < xv.data().size(); ++i) gx->data()[i] += g.data()[i] * xv.data()[i] * xv.data()[i];
      }
    });
  };
  return make_case("corrupted_backward", fx, [cube](Tape& t, Fixture& f) { return cube(p(t, f, 0)); }, false, seed);
}

}  // namespace pan
