#include "minidistill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "minidistill/errors.hpp"

namespace minidistill {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  auto storage = std::make_shared<TensorStorage<T>>();
  storage->values.assign(shape_numel(shape), value);
  storage->shape = std::move(shape);
  Tensor t(std::move(storage));
  t.set_requires_grad(requires_grad);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_to_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor construction");
  }
  auto storage = std::make_shared<TensorStorage<T>>();
  storage->shape = std::move(shape);
  storage->values = std::move(values);
  Tensor t(std::move(storage));
  t.set_requires_grad(requires_grad);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                            bool requires_grad) {
  return from({rows, cols}, std::move(values), requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return rank() == 1 ? 1 : storage_->shape.front();
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  return storage_->shape.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return storage_->values[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  storage_->requires_grad = on;
  if (on) {
    storage_->grad.assign(storage_->values.size(), T(0));
  } else {
    storage_->grad.clear();
  }
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(storage_->grad.begin(), storage_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto storage = std::make_shared<TensorStorage<T>>();
  storage->shape = storage_->shape;
  storage->values = storage_->values;
  return Tensor(std::move(storage));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto storage = std::make_shared<TensorStorage<T>>(*storage_);
  return Tensor(std::move(storage));
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(storage_->values.begin(), storage_->values.end(),
                     [](T v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
thread_local Tape<T>* active_tape = nullptr;

template <typename T>
thread_local bool recording_paused = false;

}  // namespace

template <typename T>
Tape<T>::Tape() : previous_(active_tape<T>) {
  active_tape<T> = this;
}

template <typename T>
Tape<T>::~Tape() {
  active_tape<T> = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape<T>;
}

template <typename T>
bool Tape<T>::recording() {
  return active_tape<T> != nullptr && !recording_paused<T>;
}

template <typename T>
void Tape<T>::record(std::string_view op, std::function<void()> backward) {
  if (consumed_) throw AutodiffError("tape already replayed; call reset() before recording");
  entries_.push_back({std::string(op), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(Tensor<T>& loss) {
  if (!loss.is_scalar()) {
    throw AutodiffError("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  if (consumed_) throw AutodiffError("backward called twice without resetting the tape");
  if (!loss.requires_grad()) throw AutodiffError("loss does not depend on any traced tensor");
  if (!loss.all_finite()) throw NumericError("loss is not finite");
  consumed_ = true;
  loss.mutable_grad()[0] = T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

template <typename T>
void Tape<T>::reset() {
  entries_.clear();
  consumed_ = false;
}

template <typename T>
std::vector<std::string> Tape<T>::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.push_back(e.op);
  return names;
}

template <typename T>
Tape<T>::Pause::Pause() : previous_(recording_paused<T>) {
  recording_paused<T> = true;
}

template <typename T>
Tape<T>::Pause::~Pause() {
  recording_paused<T> = previous_;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace minidistill
