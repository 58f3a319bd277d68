#include "pan/tensor.hpp"

#include <cmath>
#include <sstream>

#include "pan/error.hpp"

namespace pan {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] <= 0) {
      throw ShapeError("dim" + std::to_string(i),
                       "tensor extent must be positive, got " + shape_str(shape));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("data", "shape " + shape_str(shape_) + " does not match " +
                                 std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("numel", "item() needs a single-element tensor, got " + shape_str(shape_));
  return data_[0];
}

void expect_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.ndim() != rank) {
    throw ShapeError(what, std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                               shape_str(t.shape()));
  }
}

}  // namespace pan
