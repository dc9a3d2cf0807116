#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace minidistill {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty unless requires_grad
  bool requires_grad = false;
};

// Dense row-major array with an optional gradient buffer. Copies are shallow:
// two Tensor handles may refer to the same storage, which is how the tape
// keeps track of operation inputs and outputs.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  // Throws ShapeError when the value count does not match the shape and
  // NumericError on non-finite input.
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                       bool requires_grad = false);

  bool defined() const { return static_cast<bool>(storage_); }
  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t size() const { return storage_->values.size(); }
  std::size_t rows() const;  // first dim of a 2-D tensor, 1 for 1-D
  std::size_t cols() const;  // last dim
  bool is_scalar() const { return size() == 1; }

  std::span<const T> values() const { return storage_->values; }
  std::span<T> mutable_values() { return storage_->values; }
  std::span<const T> grad() const { return storage_->grad; }
  std::span<T> mutable_grad() { return storage_->grad; }

  T item() const;
  T at(std::size_t i, std::size_t j) const { return storage_->values[i * cols() + j]; }
  T operator[](std::size_t i) const { return storage_->values[i]; }

  bool requires_grad() const { return storage_ && storage_->requires_grad; }
  // Turns gradient tracking on (allocating a zeroed grad buffer) or off.
  void set_requires_grad(bool on);
  void zero_grad();

  // Copy of the values with no gradient and no tape history.
  Tensor detach() const;
  // Deep copy preserving requires_grad.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }
  bool all_finite() const;

 private:
  explicit Tensor(std::shared_ptr<TensorStorage<T>> storage) : storage_(std::move(storage)) {}

  std::shared_ptr<TensorStorage<T>> storage_;
};

// Ordered record of differentiable operations executed while the tape is
// active. Constructing a Tape makes it the active tape of the calling thread
// (tapes nest); destroying it restores the previous one. Operations executed
// with no active tape, or while recording is paused, are not recorded and
// their outputs never require gradients.
template <typename T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  static bool recording();

  // Registers a finished operation. `backward` must read the output gradient
  // and accumulate into the gradients of inputs that require them.
  void record(std::string_view op, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Throws
  // AutodiffError for a non-scalar loss or a second call before reset().
  void backward(Tensor<T>& loss);

  // Drops the recorded history so the tape can be reused.
  void reset();

  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> op_names() const;

  // Suspends recording on the current thread for its lifetime.
  class Pause {
   public:
    Pause();
    ~Pause();
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    bool previous_;
  };

 private:
  struct Entry {
    std::string op;
    std::function<void()> backward;
  };

  std::vector<Entry> entries_;
  Tape* previous_ = nullptr;
  bool consumed_ = false;
};

}  // namespace minidistill
