#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sfl/tensor.hpp"

namespace sfl::testing {

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  int worst_input = -1;
};

// Central differences of <f(inputs), R> for a random projection R, against
// the reverse pass. Error per input is max|a - n| / max(max|n|, max|a|, floor).
GradCheckResult grad_check(const TensorFn& f, std::vector<Tensor> inputs, std::uint64_t seed,
                           double step = 1e-6);

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                     DType dtype = DType::f64);
// Values with |x| >= margin, for ops with a kink at zero.
Tensor random_away_from_zero(const Shape& shape, std::mt19937_64& rng, double margin = 0.05);
// Shuffled, evenly spaced values: no ties inside pooling windows.
Tensor random_distinct(const Shape& shape, std::mt19937_64& rng);

struct PrimitiveCheck {
  std::string name;
  // Builds a random instance from `seed` and returns its relative error.
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

const std::vector<PrimitiveCheck>& primitive_checks();

}  // namespace sfl::testing
