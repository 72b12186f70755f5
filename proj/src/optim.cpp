#include "sfl/optim.hpp"

#include <cmath>

namespace sfl {

void AdamState::step(const TensorList& params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
      v_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
    }
  }
  if (m_.size() != params.size())
    throw ContractError("adam: parameter list changed size (" + std::to_string(params.size()) + " vs " +
                        std::to_string(m_.size()) + ")");
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    if (p.shape() != m_[i].shape())
      throw ContractError("adam: shape of '" + params[i].name + "' changed since the first step");
    if (!p.has_grad()) continue;
    dispatch(p.dtype(), [&]<class T>(T) {
      auto w = p.data<T>();
      auto g = p.grad_data<T>();
      auto m = m_[i].data<T>();
      auto v = v_[i].data<T>();
      const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
      const T lr = static_cast<T>(options_.lr), eps = static_cast<T>(options_.eps);
      const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = b1 * m[k] + (T(1) - b1) * g[k];
        v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
        const T mhat = m[k] * ic1;
        const T vhat = v[k] * ic2;
        w[k] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    });
  }
  zero_grads(params);
}

void zero_grads(const TensorList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace sfl
