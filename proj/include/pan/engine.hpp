#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pan/data.hpp"
#include "pan/gau_pan.hpp"

namespace pan {

struct TrainConfig {
  double base_lr = 4e-3;
  double power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::int64_t batch_size = 8;
  std::int64_t max_iter = 300;
  std::int64_t crop = 64;
  std::uint64_t seed = 0;
  /// Save a checkpoint every this many iterations (0: only at completion).
  std::int64_t checkpoint_interval = 0;
  // augmentation
  bool flip = true;
  double min_scale = 0.5;
  double max_scale = 2.0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// base_lr * (1 - iter/max_iter)^power for 0 <= iter <= max_iter.
double poly_lr(std::int64_t iter, const TrainConfig& cfg);

/// SGD with momentum and decoupled-from-BN weight decay:
/// v <- momentum*v + (g + wd*p); p <- p - lr*v. Decay applies only to parameters flagged `decay`.
void sgd_step(Parameter& param, Tensor& velocity, double lr, double momentum, double weight_decay);

class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  /// Updates every parameter from its accumulated grad. Throws NumericError naming the
  /// first parameter whose gradient is not finite (before touching any parameter).
  void step(ParamRegistry& params, double lr);

  std::map<std::string, Tensor>& velocity() noexcept { return velocity_; }
  const std::map<std::string, Tensor>& velocity() const noexcept { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, Tensor> velocity_;
};

struct TrainRecord {
  std::int64_t iter = 0;
  double lr = 0.0;
  double loss = 0.0;
  friend bool operator==(const TrainRecord&, const TrainRecord&) = default;
};

struct TrainOptions {
  /// Directory receiving checkpoint.bin and train_log.jsonl; empty disables persistence.
  std::filesystem::path out_dir;
  /// Resume model, optimizer and iteration counter from this checkpoint.
  std::optional<std::filesystem::path> resume_from;
  /// Called after every iteration.
  std::function<void(const TrainRecord&)> on_record;
};

/// Runs iterations [start, max_iter) of sample -> augment -> batch -> forward -> cross-entropy
/// -> backward -> SGD with the poly schedule. Batch composition and augmentation of iteration i
/// depend only on (seed, i), so a resumed run replays an uninterrupted one exactly.
/// A non-finite loss aborts with NumericError; the last checkpoint on disk is left untouched.
std::vector<TrainRecord> train(PanModel& model, const std::vector<Sample>& dataset, const TrainConfig& cfg,
                               const TrainOptions& options = {});

/// Sample indices used by iteration `iter`.
std::vector<std::size_t> batch_indices(std::int64_t iter, std::int64_t batch_size, std::size_t dataset_size,
                                       std::uint64_t seed);

// -- evaluation ------------------------------------------------------------

/// counts[g*K + p] = pixels with ground truth g predicted p (ignore pixels excluded).
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::int64_t num_classes);

  void add(const IntTensor& ground_truth, const IntTensor& prediction, std::int32_t ignore_index = kIgnoreIndex);
  void merge(const ConfusionMatrix& other);

  std::int64_t num_classes() const noexcept { return k_; }
  std::int64_t at(std::int64_t gt, std::int64_t pred) const { return counts_[static_cast<std::size_t>(gt * k_ + pred)]; }
  std::int64_t total() const;
  const std::vector<std::int64_t>& counts() const noexcept { return counts_; }

 private:
  std::int64_t k_;
  std::vector<std::int64_t> counts_;
};

struct Metrics {
  double mean_iou = 0.0;
  double pixel_acc = 0.0;
  /// Empty for classes absent from both ground truth and prediction.
  std::vector<std::optional<double>> per_class_iou;
};

/// mIoU averages IoU over classes with a non-empty union; pixel_acc = trace / total.
Metrics compute_metrics(const ConfusionMatrix& cm);

struct EvalConfig {
  std::vector<double> scales{1.0};
  bool flip = false;

  void validate() const;
};

/// Standard multi-scale test grid.
inline const std::vector<double> kMultiScaleGrid{0.5, 0.75, 1.0, 1.25, 1.5, 1.75};

/// Extent used for test-time scale `s`: round(extent*s) to the nearest multiple of 16 (>= 16).
std::int64_t scaled_extent(std::int64_t extent, double s);

/// Class probabilities [1,K,H,W] averaged over every scale (and its mirror when flip is set).
/// `forwards`, if given, is incremented once per network forward.
Tensor fused_probabilities(const PanModel& model, const Tensor& image, const EvalConfig& cfg,
                           std::int64_t* forwards = nullptr);

struct EvalResult {
  Metrics metrics;
  ConfusionMatrix confusion{2};
  std::int64_t forward_passes = 0;
};

/// Multi-scale/flip evaluation of `dataset` (images [3,H,W] with H,W divisible by 16).
EvalResult evaluate(const PanModel& model, const std::vector<Sample>& dataset, const EvalConfig& cfg);

// -- checkpoints -------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Little-endian "PANCKPT1" | u32 version | u32 count | {u32 len, name, u8 ndim, u64 dims[], f64 data[]}.
std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::string& bytes);

/// Writes parameters, BN buffers, optimizer velocity and the next iteration index.
void save_checkpoint(const std::filesystem::path& path, const PanModel& model, const Sgd* optimizer = nullptr,
                     std::int64_t next_iter = 0);
/// Restores into `model` (and `optimizer`); returns the stored next iteration index.
std::int64_t load_checkpoint(const std::filesystem::path& path, PanModel& model, Sgd* optimizer = nullptr);

// -- gradient checking ---------------------------------------------------------

struct GradcheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  bool passed = false;
  std::string worst;  // parameter[index] with the largest error
};

/// Compares analytic gradients of `loss_fn` against central differences on `samples`
/// randomly chosen coordinates of `params` (all coordinates when there are fewer).
/// Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
GradcheckReport gradcheck(const std::string& name, const std::function<Var(Tape&)>& loss_fn,
                          const std::vector<Parameter*>& params, std::int64_t samples, double h, double tol,
                          std::uint64_t seed);

struct GradcheckCase {
  std::string name;
  std::function<GradcheckReport(std::int64_t samples, double h, double tol)> run;
};

/// Every differentiable op, FPA (C333/C357 x MAX/AVE x +-GP), SE, the three GAU designs
/// and a tiny end-to-end PAN.
std::vector<GradcheckCase> gradcheck_suite(std::uint64_t seed = 7);
/// Negative control: an op whose backward is deliberately wrong.
GradcheckCase corrupted_backward_case(std::uint64_t seed = 7);

}  // namespace pan
