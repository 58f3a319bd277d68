#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pan/tensor.hpp"

namespace pan {

/// Trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay = true;  // weight decay applies (false for BN affine and biases)

  void zero_grad() { grad = Tensor::zeros_like(value); }
};

/// Non-trainable persistent state (BN running statistics).
struct Buffer {
  std::string name;
  Tensor value;
};

/// Owns every parameter and buffer of a model. Addresses are stable for the registry's lifetime.
class ParamRegistry {
 public:
  Parameter& add_parameter(const std::string& name, Tensor value, bool decay);
  Buffer& add_buffer(const std::string& name, Tensor value);

  Parameter* find_parameter(const std::string& name);
  Buffer* find_buffer(const std::string& name);

  const std::vector<std::unique_ptr<Parameter>>& parameters() const noexcept { return params_; }
  const std::vector<std::unique_ptr<Buffer>>& buffers() const noexcept { return buffers_; }

  std::int64_t parameter_count() const;
  void zero_grad();

 private:
  void claim(const std::string& name);

  std::vector<std::unique_ptr<Parameter>> params_;
  std::vector<std::unique_ptr<Buffer>> buffers_;
  std::map<std::string, int> names_;
};

class Tape;

/// Handle to a tensor recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(std::size_t axis) const { return value().dim(axis); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Passed to backward rules; hands out gradient buffers for inputs that need them.
class GradSink {
 public:
  /// Accumulation buffer for input `slot`, zero-initialized on first use; nullptr if
  /// that input does not require a gradient.
  Tensor* operator[](std::size_t slot);

 private:
  friend class Tape;
  GradSink(Tape& tape, const std::vector<std::size_t>& inputs) : tape_(tape), inputs_(inputs) {}
  Tape& tape_;
  const std::vector<std::size_t>& inputs_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

/// Reverse-mode autodiff record. Nodes are appended in execution order, so node order is
/// a topological order and backward walks it in reverse.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  /// Leaf bound to `p`; backward accumulates into p.grad.
  Var param(Parameter& p);

  /// Append an op node. The backward rule is kept only if some input requires grad.
  /// Throws NumericError if `value` contains NaN/Inf.
  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Populate gradients of every requires-grad leaf from the scalar `loss`.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  /// Gradient of node `id` after backward(); empty Tensor if none flowed there.
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  friend class GradSink;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Tensor& grad_buffer(std::size_t id);

  bool grad_enabled_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

}  // namespace pan
