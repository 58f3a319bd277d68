#include "pan/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "pan/error.hpp"
#include "pan/ops.hpp"

namespace pan {

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("base_lr", "train: base_lr must be positive");
  if (!(power >= 0.0)) throw ConfigError("power", "train: power must be non-negative");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum", "train: momentum must be in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay", "train: weight_decay must be non-negative");
  // BN over 1x1 context maps needs at least two values per channel
  if (batch_size < 2) throw ConfigError("batch_size", "train: batch_size must be at least 2");
  if (max_iter < 1) throw ConfigError("max_iter", "train: max_iter must be at least 1");
  if (crop < 16 || crop % 16 != 0) throw ConfigError("crop", "train: crop must be a positive multiple of 16");
  if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval", "train: checkpoint_interval must be >= 0");
  if (!(min_scale > 0.0) || max_scale < min_scale) {
    throw ConfigError("min_scale", "train: need 0 < min_scale <= max_scale");
  }
}

double poly_lr(std::int64_t iter, const TrainConfig& cfg) {
  if (iter < 0 || iter > cfg.max_iter) {
    throw ConfigError("iter", "poly_lr: iteration " + std::to_string(iter) + " outside [0, " +
                                  std::to_string(cfg.max_iter) + "]");
  }
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iter);
  return cfg.base_lr * std::pow(frac, cfg.power);
}

void sgd_step(Parameter& param, Tensor& velocity, double lr, double momentum, double weight_decay) {
  if (velocity.shape() != param.value.shape()) velocity = Tensor::zeros_like(param.value);
  if (param.grad.shape() != param.value.shape()) throw ShapeError(param.name, "sgd: grad shape mismatch for " + param.name);
  const double wd = param.decay ? weight_decay : 0.0;
  auto p = param.value.data();
  auto g = param.grad.data();
  auto v = velocity.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = momentum * v[i] + (g[i] + wd * p[i]);
    p[i] -= lr * v[i];
  }
}

void Sgd::step(ParamRegistry& params, double lr) {
  for (const auto& p : params.parameters()) {
    if (!p->grad.all_finite()) throw NumericError("sgd: non-finite gradient in parameter " + p->name);
  }
  for (const auto& p : params.parameters()) sgd_step(*p, velocity_[p->name], lr, momentum_, weight_decay_);
}

std::vector<std::size_t> batch_indices(std::int64_t iter, std::int64_t batch_size, std::size_t dataset_size,
                                       std::uint64_t seed) {
  if (dataset_size == 0) throw ConfigError("dataset", "train: dataset is empty");
  std::vector<std::size_t> out;
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm(dataset_size);
  for (std::int64_t j = 0; j < batch_size; ++j) {
    const std::int64_t pos = iter * batch_size + j;
    const std::int64_t epoch = pos / static_cast<std::int64_t>(dataset_size);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng(mix_seed(seed, 0x5348554646ULL + static_cast<std::uint64_t>(epoch)));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(pos % static_cast<std::int64_t>(dataset_size))]);
  }
  return out;
}

std::vector<TrainRecord> train(PanModel& model, const std::vector<Sample>& dataset, const TrainConfig& cfg,
                               const TrainOptions& options) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("dataset", "train: dataset is empty");

  Sgd optimizer(cfg.momentum, cfg.weight_decay);
  std::int64_t start = 0;
  if (options.resume_from) start = load_checkpoint(*options.resume_from, model, &optimizer);
  if (start > cfg.max_iter) {
    throw ConfigError("max_iter", "train: checkpoint is at iteration " + std::to_string(start) +
                                      ", beyond max_iter " + std::to_string(cfg.max_iter));
  }

  const bool persist = !options.out_dir.empty();
  std::ofstream log;
  std::filesystem::path ckpt;
  if (persist) {
    std::filesystem::create_directories(options.out_dir);
    ckpt = options.out_dir / "checkpoint.bin";
    log.open(options.out_dir / "train_log.jsonl", start > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw Error("train: cannot open log in " + options.out_dir.string());
  }

  AugmentOptions aug;
  aug.random_flip = cfg.flip;
  aug.min_scale = cfg.min_scale;
  aug.max_scale = cfg.max_scale;
  if (cfg.min_scale == cfg.max_scale) aug.scale = cfg.min_scale;

  std::vector<TrainRecord> records;
  for (std::int64_t iter = start; iter < cfg.max_iter; ++iter) {
    const double lr = poly_lr(iter, cfg);
    Rng rng(mix_seed(cfg.seed ^ 0xA06D5EEDULL, static_cast<std::uint64_t>(iter)));
    std::vector<Sample> batch;
    for (std::size_t idx : batch_indices(iter, cfg.batch_size, dataset.size(), cfg.seed)) {
      batch.push_back(augment(dataset[idx], cfg.crop, rng, aug));
    }
    std::vector<const Sample*> ptrs;
    for (const Sample& s : batch) ptrs.push_back(&s);

    model.params().zero_grad();
    double loss_value = 0.0;
    try {
      Tape tape;
      Var logits = model(tape.constant(stack_images(ptrs)), Mode::train);
      Var loss = cross_entropy(logits, stack_labels(ptrs));
      loss_value = loss.value().item();
      tape.backward(loss);
      optimizer.step(model.params(), lr);
    } catch (const NumericError& e) {
      throw NumericError("train: non-finite values at iteration " + std::to_string(iter) + " (" + e.what() +
                         "); last good checkpoint retained");
    }

    TrainRecord rec{iter, lr, loss_value};
    records.push_back(rec);
    if (persist) {
      log << nlohmann::json{{"iter", rec.iter}, {"lr", rec.lr}, {"loss", rec.loss}}.dump() << '\n';
      log.flush();
    }
    if (options.on_record) options.on_record(rec);
    const bool last = iter + 1 == cfg.max_iter;
    if (persist && (last || (cfg.checkpoint_interval > 0 && (iter + 1) % cfg.checkpoint_interval == 0))) {
      save_checkpoint(ckpt, model, &optimizer, iter + 1);
    }
  }
  if (persist && records.empty()) save_checkpoint(ckpt, model, &optimizer, start);
  return records;
}

// ---------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::int64_t num_classes)
    : k_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw ConfigError("num_classes", "confusion matrix needs at least one class");
}

void ConfusionMatrix::add(const IntTensor& gt, const IntTensor& pred, std::int32_t ignore_index) {
  if (gt.shape != pred.shape) {
    throw ShapeError("prediction", "confusion: ground truth " + shape_str(gt.shape) + " vs prediction " +
                                       shape_str(pred.shape));
  }
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const std::int32_t g = gt.data[i];
    if (g == ignore_index) continue;
    const std::int32_t p = pred.data[i];
    if (g < 0 || g >= k_ || p < 0 || p >= k_) {
      throw ShapeError("labels", "confusion: label pair (" + std::to_string(g) + "," + std::to_string(p) +
                                     ") outside [0," + std::to_string(k_) + ")");
    }
    ++counts_[static_cast<std::size_t>(g * k_ + p)];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw ShapeError("num_classes", "confusion: merging matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

Metrics compute_metrics(const ConfusionMatrix& cm) {
  const std::int64_t k = cm.num_classes();
  Metrics m;
  m.per_class_iou.resize(static_cast<std::size_t>(k));
  std::int64_t trace = 0;
  double iou_sum = 0.0;
  std::int64_t present = 0;
  for (std::int64_t c = 0; c < k; ++c) {
    std::int64_t row = 0, col = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::int64_t tp = cm.at(c, c);
    trace += tp;
    const std::int64_t uni = row + col - tp;
    if (uni == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    m.per_class_iou[static_cast<std::size_t>(c)] = iou;
    iou_sum += iou;
    ++present;
  }
  const std::int64_t total = cm.total();
  m.mean_iou = present > 0 ? iou_sum / static_cast<double>(present) : 0.0;
  m.pixel_acc = total > 0 ? static_cast<double>(trace) / static_cast<double>(total) : 0.0;
  return m;
}

void EvalConfig::validate() const {
  if (scales.empty()) throw ConfigError("scales", "eval: scales must not be empty");
  for (double s : scales) {
    if (!(s > 0.0)) throw ConfigError("scales", "eval: every scale must be positive");
  }
}

std::int64_t scaled_extent(std::int64_t extent, double s) {
  const auto blocks = std::llround(static_cast<double>(extent) * s / 16.0);
  return std::max<std::int64_t>(16, 16 * blocks);
}

Tensor fused_probabilities(const PanModel& model, const Tensor& image, const EvalConfig& cfg, std::int64_t* forwards) {
  cfg.validate();
  const Tensor img = image.ndim() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (img.ndim() != 4 || img.dim(0) != 1) throw ShapeError("image", "evaluate: expected a single [3,H,W] image");
  const std::int64_t h = img.dim(2), w = img.dim(3);

  auto probs_at = [&](const Tensor& input) {
    Tensor logits = model.predict_logits(input);
    if (forwards) ++*forwards;
    if (logits.dim(2) != h || logits.dim(3) != w) logits = resize_bilinear(logits, h, w);
    return softmax_channels(logits);
  };

  Tensor acc;
  for (double s : cfg.scales) {
    const std::int64_t sh = scaled_extent(h, s), sw = scaled_extent(w, s);
    const Tensor scaled = (sh == h && sw == w) ? img : resize_bilinear(img, sh, sw);
    Tensor p = probs_at(scaled);
    if (cfg.flip) {
      const Tensor pf = flip_horizontal(probs_at(flip_horizontal(scaled)));
      for (std::int64_t i = 0; i < p.numel(); ++i) p[i] = 0.5 * (p[i] + pf[i]);
    }
    if (acc.empty()) {
      acc = std::move(p);
    } else {
      for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += p[i];
    }
  }
  const double n = static_cast<double>(cfg.scales.size());
  for (double& v : acc.data()) v /= n;
  return acc;
}

EvalResult evaluate(const PanModel& model, const std::vector<Sample>& dataset, const EvalConfig& cfg) {
  if (dataset.empty()) throw ConfigError("dataset", "evaluate: dataset is empty");
  cfg.validate();
  EvalResult result;
  result.confusion = ConfusionMatrix(model.config().num_classes);
  std::int64_t expected_pixels = 0;
  for (const Sample& s : dataset) {
    const Tensor probs = fused_probabilities(model, s.image, cfg, &result.forward_passes);
    IntTensor pred = argmax_channels(probs);
    pred.shape = s.label.shape;
    result.confusion.add(s.label, pred);
    expected_pixels += std::count_if(s.label.data.begin(), s.label.data.end(),
                                     [](std::int32_t v) { return v != kIgnoreIndex; });
  }
  if (result.confusion.total() != expected_pixels) throw Error("evaluate: confusion total disagrees with pixel count");
  result.metrics = compute_metrics(result.confusion);
  return result;
}

}  // namespace pan
