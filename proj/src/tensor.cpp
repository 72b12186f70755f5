#include "sfl/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "sfl/autograd.hpp"

namespace sfl {

std::size_t dtype_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ContractError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, DType dtype) {
  auto impl = std::make_shared<detail::TensorImpl>();
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  if (dtype == DType::f32)
    impl->data = detail::Storage<float>(n, 0.0f);
  else
    impl->data = detail::Storage<double>(n, 0.0);
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(make_impl(std::move(shape), dtype)); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  dispatch(dtype, [&]<class T>(T) {
    auto d = t.data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ContractError("from_vector: " + std::to_string(values.size()) + " values for shape " +
                        shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = DType::f32;
  impl->data = detail::Storage<std::decay_t<decltype(values[0])>>(values.begin(), values.end());
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ContractError("from_vector: " + std::to_string(values.size()) + " values for shape " +
                        shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = DType::f64;
  impl->data = detail::Storage<std::decay_t<decltype(values[0])>>(values.begin(), values.end());
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

detail::TensorImpl& Tensor::checked() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::int64_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw ContractError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  return s[axis];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const { return checked().dtype; }

template <class T>
std::span<T> Tensor::data() {
  auto* v = std::get_if<detail::Storage<T>>(&checked().data);
  if (!v) throw ContractError(std::string("tensor holds ") + dtype_name(dtype()));
  return *v;
}

template <class T>
std::span<const T> Tensor::data() const {
  const auto* v = std::get_if<detail::Storage<T>>(&checked().data);
  if (!v) throw ContractError(std::string("tensor holds ") + dtype_name(dtype()));
  return *v;
}

template std::span<float> Tensor::data<float>();
template std::span<double> Tensor::data<double>();
template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;

double Tensor::at(std::int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= numel())
    throw ContractError("flat index " + std::to_string(flat_index) + " out of range for " +
                        shape_str(shape()));
  return dispatch(dtype(), [&]<class T>(T) { return static_cast<double>(data<T>()[flat_index]); });
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_doubles() const {
  return dispatch(dtype(), [&]<class T>(T) {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  checked().requires_grad = value;
  return *this;
}

bool Tensor::is_leaf() const { return checked().grad_fn == nullptr; }

bool Tensor::has_grad() const { return checked().grad.has_value(); }

Tensor Tensor::grad() const {
  auto& impl = checked();
  if (!impl.grad) throw ContractError("tensor has no gradient");
  auto out = std::make_shared<detail::TensorImpl>();
  out->shape = impl.shape;
  out->dtype = impl.dtype;
  out->data = *impl.grad;
  return Tensor(std::move(out));
}

template <class T>
std::span<T> Tensor::grad_data() {
  return detail::grad_of<T>(checked());
}

template std::span<float> Tensor::grad_data<float>();
template std::span<double> Tensor::grad_data<double>();

void Tensor::zero_grad() { checked().grad.reset(); }

Tensor Tensor::detach() const {
  auto& impl = checked();
  auto out = std::make_shared<detail::TensorImpl>();
  out->shape = impl.shape;
  out->dtype = impl.dtype;
  out->data = impl.data;
  return Tensor(std::move(out));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return detach();
  Tensor out = zeros(shape(), target);
  dispatch(dtype(), [&]<class S>(S) {
    dispatch(target, [&]<class D>(D) {
      auto src = data<S>();
      auto dst = out.data<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  out.set_requires_grad(requires_grad());
  return out;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

void record(Tensor& out, const char* op, std::vector<Tensor> inputs,
            std::function<void(TensorImpl&)> fn) {
  if (!g_grad_enabled) return;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return;
  static std::atomic<std::uint64_t> counter{0};
  auto node = std::make_shared<Node>();
  node->op = op;
  node->seq = counter.fetch_add(1, std::memory_order_relaxed) + 1;
  for (auto& t : inputs)
    if (t.defined()) node->inputs.push_back(t.impl());
  node->backward = std::move(fn);
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
}

void require_same_dtype(const char* op, std::initializer_list<const Tensor*> tensors) {
  const Tensor* first = nullptr;
  for (const Tensor* t : tensors) {
    if (!t || !t->defined()) continue;
    if (!first) {
      first = t;
    } else if (t->dtype() != first->dtype()) {
      throw ContractError(std::string(op) + ": mixed dtypes " + dtype_name(first->dtype()) + " and " +
                          dtype_name(t->dtype()));
    }
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    throw ContractError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                        shape_str(t.shape()));
}

}  // namespace detail

namespace {

// Tape reachable from `roots`, in reverse recording order.
std::vector<detail::TensorImpl*> tape_order(const std::vector<detail::TensorImpl*>& roots) {
  std::vector<detail::TensorImpl*> post;
  std::unordered_set<detail::TensorImpl*> seen;
  struct Frame {
    detail::TensorImpl* impl;
    std::size_t next;
  };
  std::vector<Frame> stack;
  for (auto* root : roots) {
    if (!seen.insert(root).second) continue;
    stack.push_back({root, 0});
    while (!stack.empty()) {
      auto& top = stack.back();
      const auto& fn = top.impl->grad_fn;
      if (fn && top.next < fn->inputs.size()) {
        auto* child = fn->inputs[top.next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
      } else {
        post.push_back(top.impl);
        stack.pop_back();
      }
    }
  }
  // Newest first: a node is always recorded after its inputs, and the
  // accumulation order into shared tensors does not depend on the roots.
  std::stable_sort(post.begin(), post.end(), [](const detail::TensorImpl* a, const detail::TensorImpl* b) {
    const auto sa = a->grad_fn ? a->grad_fn->seq : 0, sb = b->grad_fn ? b->grad_fn->seq : 0;
    return sa > sb;
  });
  return post;
}

}  // namespace

void backward(std::span<const GradSeed> seeds) {
  std::vector<detail::TensorImpl*> roots;
  for (const auto& s : seeds) {
    if (!s.tensor.defined() || !s.grad.defined()) throw ContractError("backward: undefined seed");
    if (s.tensor.shape() != s.grad.shape())
      throw ContractError("backward: seed gradient shape " + shape_str(s.grad.shape()) +
                          " does not match tensor shape " + shape_str(s.tensor.shape()));
    if (s.tensor.dtype() != s.grad.dtype()) throw ContractError("backward: seed dtype mismatch");
    if (!s.tensor.requires_grad()) throw ContractError("backward: seed tensor is not on a tape");
    roots.push_back(s.tensor.impl().get());
  }
  auto order = tape_order(roots);
  for (auto* impl : order)
    if (impl->grad_fn) impl->grad.reset();
  for (const auto& s : seeds) {
    dispatch(s.tensor.dtype(), [&]<class T>(T) {
      auto g = detail::grad_of<T>(*s.tensor.impl());
      auto src = s.grad.data<T>();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
    });
  }
  NoGradGuard no_grad;
  for (auto* impl : order) {
    if (impl->grad_fn && impl->grad) impl->grad_fn->backward(*impl);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")) +
                        "; pass an explicit seed gradient for non-scalar tensors");
  GradSeed seed{loss, Tensor::full(loss.shape(), 1.0, loss.dtype())};
  backward(std::span<const GradSeed>(&seed, 1));
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  return dispatch(a.dtype(), [&]<class T>(T) {
    auto x = a.data<T>();
    auto y = b.data<T>();
    return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ContractError("max_abs_diff: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto x = a.to_doubles();
  auto y = b.to_doubles();
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

}  // namespace sfl
