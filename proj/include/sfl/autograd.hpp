#pragma once

// Helpers for writing differentiable operations. Not needed by users of the
// finished ops.

#include <initializer_list>
#include <span>
#include <vector>

#include "sfl/tensor.hpp"

namespace sfl::detail {

template <class T>
Storage<T>& values(TensorImpl& impl) {
  return std::get<Storage<T>>(impl.data);
}

template <class T>
const Storage<T>& values(const TensorImpl& impl) {
  return std::get<Storage<T>>(impl.data);
}

// Gradient buffer of `impl`, zero-allocated on first use.
template <class T>
std::span<T> grad_of(TensorImpl& impl) {
  if (!impl.grad) impl.grad = Storage<T>(std::get<Storage<T>>(impl.data).size(), T(0));
  return std::get<Storage<T>>(*impl.grad);
}

template <class T>
std::span<const T> out_grad(TensorImpl& out) {
  return std::get<Storage<T>>(*out.grad);
}

inline bool wants_grad(const std::shared_ptr<TensorImpl>& impl) { return impl && impl->requires_grad; }

// Attach a tape node to `out` when grad mode is on and some input requires
// grad. `fn` captures whatever the reverse pass needs.
void record(Tensor& out, const char* op, std::vector<Tensor> inputs,
            std::function<void(TensorImpl&)> fn);

void require_same_dtype(const char* op, std::initializer_list<const Tensor*> tensors);
void require_rank(const char* op, const Tensor& t, std::size_t rank);

}  // namespace sfl::detail
