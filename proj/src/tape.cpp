#include "pan/tape.hpp"

#include "pan/error.hpp"

namespace pan {

void ParamRegistry::claim(const std::string& name) {
  if (!names_.emplace(name, 0).second) throw ConfigError(name, "duplicate parameter or buffer name: " + name);
}

Parameter& ParamRegistry::add_parameter(const std::string& name, Tensor value, bool decay) {
  claim(name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->grad = Tensor::zeros_like(value);
  p->value = std::move(value);
  p->decay = decay;
  params_.push_back(std::move(p));
  return *params_.back();
}

Buffer& ParamRegistry::add_buffer(const std::string& name, Tensor value) {
  claim(name);
  buffers_.push_back(std::make_unique<Buffer>(Buffer{name, std::move(value)}));
  return *buffers_.back();
}

Parameter* ParamRegistry::find_parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Buffer* ParamRegistry::find_buffer(const std::string& name) {
  for (auto& b : buffers_) {
    if (b->name == name) return b.get();
  }
  return nullptr;
}

std::int64_t ParamRegistry::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

void ParamRegistry::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor* GradSink::operator[](std::size_t slot) {
  const std::size_t id = inputs_.at(slot);
  if (!tape_.requires_grad(id)) return nullptr;
  return &tape_.grad_buffer(id);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf tensor contains non-finite values");
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  Var v = leaf(p.value, true);
  nodes_.back().op = "param";
  nodes_.back().param = &p;
  return v;
}

Var Tape::record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": produced non-finite values");
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw Error(std::string(op) + ": input recorded on a different tape");
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || requires_grad(v.id());
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw Error("backward: loss belongs to a different tape");
  if (loss.value().numel() != 1) {
    throw ShapeError("loss", "backward needs a scalar root, got shape " + shape_str(loss.shape()));
  }
  if (backward_done_) throw Error("backward: tape already consumed");
  backward_done_ = true;
  if (!requires_grad(loss.id())) return;

  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) {
      GradSink sink(*this, n.inputs);
      n.backward(n.grad, sink);
    } else if (n.param != nullptr) {
      if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

}  // namespace pan
