#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sfl/errors.hpp"

namespace sfl {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::size_t dtype_size(DType dtype);
const char* dtype_name(DType dtype);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// 64-byte aligned storage: vectorized kernels then take the same path for
// every buffer, whichever thread allocated it.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using Storage = std::vector<T, AlignedAllocator<T>>;

using Buffer = std::variant<Storage<float>, Storage<double>>;

struct TensorImpl;

// One recorded operation on the tape. `backward` reads the output's gradient
// and accumulates into the gradients of `inputs` that require grad.
struct Node {
  const char* op = "";
  // Recording order; backward visits nodes from newest to oldest.
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  Buffer data;
  std::optional<Buffer> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

}  // namespace detail

// Reference-counted n-d array. Copies share storage; use detach() for an
// independent copy that is off the tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_vector(Shape shape, std::vector<float> values);
  static Tensor from_vector(Shape shape, std::vector<double> values);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t size(std::size_t axis) const;
  std::int64_t numel() const;
  DType dtype() const;
  std::size_t byte_size() const { return static_cast<std::size_t>(numel()) * dtype_size(dtype()); }

  template <class T>
  std::span<T> data();
  template <class T>
  std::span<const T> data() const;

  double item() const;
  double at(std::int64_t flat_index) const;
  std::vector<double> to_doubles() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  // Detached copy of the accumulated gradient.
  Tensor grad() const;
  template <class T>
  std::span<T> grad_data();
  void zero_grad();

  Tensor detach() const;
  Tensor to(DType dtype) const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  detail::TensorImpl& checked() const;
  std::shared_ptr<detail::TensorImpl> impl_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct GradSeed {
  Tensor tensor;
  Tensor grad;
};

// Reverse pass from a scalar loss (seed 1).
void backward(const Tensor& loss);

// Reverse pass from several tensors at once, each seeded with an explicit
// gradient of its own shape. Used to resume a tape at a cut.
void backward(std::span<const GradSeed> seeds);

bool bit_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

template <class F>
decltype(auto) dispatch(DType dtype, F&& fn) {
  if (dtype == DType::f32) return fn(float{});
  return fn(double{});
}

}  // namespace sfl
