#pragma once

#include <cstdint>
#include <vector>

#include "sfl/module.hpp"

namespace sfl {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moments for one parameter list. Moments are bound to the
// list position on the first step and must keep their shapes afterwards.
class AdamState {
 public:
  explicit AdamState(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const { return options_; }
  std::int64_t step_count() const { return t_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  // Bias-corrected Adam update of every parameter holding a gradient, then
  // clears all gradients.
  void step(const TensorList& params);

 private:
  AdamOptions options_;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

inline void adam_step(const TensorList& params, AdamState& state) { state.step(params); }

void zero_grads(const TensorList& params);

}  // namespace sfl
