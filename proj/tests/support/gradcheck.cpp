#include "support/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sfl/metrics.hpp"
#include "sfl/ops.hpp"

namespace sfl::testing {

namespace {

double projected(const Tensor& out, const std::vector<double>& r) {
  const auto v = out.to_doubles();
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * r[i];
  return s;
}

}  // namespace

GradCheckResult grad_check(const TensorFn& f, std::vector<Tensor> inputs, std::uint64_t seed, double step) {
  for (auto& t : inputs) t.set_requires_grad(true);
  const Tensor out = f(inputs);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> r(static_cast<std::size_t>(out.numel()));
  for (auto& x : r) x = u(rng);
  const Tensor seed_grad = Tensor::from_vector(out.shape(), r).to(out.dtype());
  const GradSeed seeds[] = {{out, seed_grad}};
  backward(seeds);

  GradCheckResult res;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k];
    const std::vector<double> analytic =
        x.has_grad() ? x.grad().to_doubles() : std::vector<double>(static_cast<std::size_t>(x.numel()), 0.0);
    auto data = x.data<double>();
    double diff = 0.0, scale = 1e-8;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double saved = data[j];
      data[j] = saved + step;
      const double plus = projected(f(inputs), r);
      data[j] = saved - step;
      const double minus = projected(f(inputs), r);
      data[j] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      diff = std::max(diff, std::abs(numeric - analytic[j]));
      scale = std::max({scale, std::abs(numeric), std::abs(analytic[j])});
    }
    const double rel = diff / scale;
    if (rel > res.max_rel_error || res.worst_input < 0) {
      res.max_rel_error = std::max(res.max_rel_error, rel);
      res.worst_input = static_cast<int>(k);
    }
  }
  return res;
}

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi, DType dtype) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = u(rng);
  return Tensor::from_vector(shape, std::move(v)).to(dtype);
}

Tensor random_away_from_zero(const Shape& shape, std::mt19937_64& rng, double margin) {
  std::uniform_real_distribution<double> u(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor::from_vector(shape, std::move(v));
}

Tensor random_distinct(const Shape& shape, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n);
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor::from_vector(shape, std::move(v));
}

namespace {

int pick(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

GradCheckResult check_conv(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = pick(rng, 1, 2), c = pick(rng, 1, 3), o = pick(rng, 1, 3);
  const int k = pick(rng, 0, 1) ? 3 : 1;
  Conv2dOptions opt{pick(rng, 1, 2), pick(rng, 0, k / 2 + 1), pick(rng, 1, 2)};
  const int hw = pick(rng, 5, 7);
  const bool bias = pick(rng, 0, 1) == 1;
  std::vector<Tensor> in{random_tensor({n, c, hw, hw}, rng), random_tensor({o, c, k, k}, rng)};
  if (bias) in.push_back(random_tensor({o}, rng));
  return grad_check(
      [opt, bias](const std::vector<Tensor>& x) { return conv2d(x[0], x[1], bias ? x[2] : Tensor{}, opt); }, in,
      seed);
}

GradCheckResult check_conv_transpose(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = pick(rng, 1, 2), c = pick(rng, 1, 3), o = pick(rng, 1, 3);
  const int k = pick(rng, 2, 3), s = pick(rng, 1, 2), p = pick(rng, 0, k - 1);
  const int hw = pick(rng, 3, 5);
  std::vector<Tensor> in{random_tensor({n, c, hw, hw}, rng), random_tensor({c, o, k, k}, rng),
                         random_tensor({o}, rng)};
  return grad_check([k, s, p](const std::vector<Tensor>& x) { return conv_transpose2d(x[0], x[1], x[2], s, p); }, in,
                    seed + static_cast<std::uint64_t>(k));
}

GradCheckResult check_maxpool(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = pick(rng, 1, 2), c = pick(rng, 1, 3), hw = 2 * pick(rng, 2, 4);
  return grad_check([](const std::vector<Tensor>& x) { return maxpool2d(x[0]).values; },
                    {random_distinct({n, c, hw, hw}, rng)}, seed);
}

GradCheckResult check_unpool(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = pick(rng, 1, 2), c = pick(rng, 1, 3), hw = 2 * pick(rng, 2, 4);
  const auto pooled = maxpool2d(random_distinct({n, c, hw, hw}, rng));
  const auto idx = pooled.indices;
  const Shape full{n, c, hw, hw};
  return grad_check([idx, full](const std::vector<Tensor>& x) { return max_unpool2d(x[0], *idx, full); },
                    {random_tensor(pooled.values.shape(), rng)}, seed);
}

GradCheckResult check_batchnorm(std::uint64_t seed, NormMode mode) {
  std::mt19937_64 rng(seed);
  const int n = pick(rng, 1, 3), c = pick(rng, 1, 3), hw = pick(rng, 2, 4);
  const Tensor rm = random_tensor({c}, rng, -0.5, 0.5);
  const Tensor rv = random_tensor({c}, rng, 0.5, 1.5);
  return grad_check(
      [rm, rv, mode](const std::vector<Tensor>& x) {
        Tensor m = Tensor::from_vector(rm.shape(), rm.to_doubles());
        Tensor v = Tensor::from_vector(rv.shape(), rv.to_doubles());
        return batchnorm2d(x[0], x[1], x[2], m, v, mode);
      },
      {random_tensor({n, c, hw, hw}, rng), random_tensor({c}, rng, 0.5, 1.5), random_tensor({c}, rng)}, seed);
}

GradCheckResult check_unary(std::uint64_t seed, Tensor (*op)(const Tensor&), bool kink) {
  std::mt19937_64 rng(seed);
  const Shape s{pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 2, 4), pick(rng, 2, 4)};
  const Tensor x = kink ? random_away_from_zero(s, rng) : random_tensor(s, rng, -3.0, 3.0);
  return grad_check([op](const std::vector<Tensor>& in) { return op(in[0]); }, {x}, seed);
}

GradCheckResult check_prelu(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int c = pick(rng, 1, 4);
  const bool shared = pick(rng, 0, 1) == 1;
  return grad_check([](const std::vector<Tensor>& x) { return prelu(x[0], x[1]); },
                    {random_away_from_zero({2, c, 3, 3}, rng), random_tensor({shared ? 1 : c}, rng, 0.0, 0.5)}, seed);
}

GradCheckResult check_concat(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int parts = pick(rng, 1, 3), hw = pick(rng, 2, 4);
  std::vector<Tensor> in;
  for (int i = 0; i < parts; ++i) in.push_back(random_tensor({2, pick(rng, 1, 3), hw, hw}, rng));
  return grad_check([](const std::vector<Tensor>& x) { return concat_channels(x); }, in, seed);
}

GradCheckResult check_upsample(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int scale = pick(rng, 0, 1) ? 4 : 2;
  return grad_check([scale](const std::vector<Tensor>& x) { return upsample_bilinear(x[0], scale); },
                    {random_tensor({pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 4), pick(rng, 2, 4)}, rng)}, seed);
}

GradCheckResult check_linear(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = pick(rng, 1, 3), f = pick(rng, 1, 5), g = pick(rng, 1, 5);
  return grad_check([](const std::vector<Tensor>& x) { return linear(x[0], x[1], x[2]); },
                    {random_tensor({n, f}, rng), random_tensor({f, g}, rng), random_tensor({g}, rng)}, seed);
}

GradCheckResult check_binary(std::uint64_t seed, Tensor (*op)(const Tensor&, const Tensor&)) {
  std::mt19937_64 rng(seed);
  const Shape s{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
  return grad_check([op](const std::vector<Tensor>& x) { return op(x[0], x[1]); },
                    {random_tensor(s, rng), random_tensor(s, rng)}, seed);
}

GradCheckResult check_sum(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return grad_check([](const std::vector<Tensor>& x) { return sum(x[0]); },
                    {random_tensor({pick(rng, 1, 3), pick(rng, 1, 3), 3, 2}, rng)}, seed);
}

GradCheckResult check_mean_spatial(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return grad_check([](const std::vector<Tensor>& x) { return mean_spatial(x[0]); },
                    {random_tensor({pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng)}, seed);
}

GradCheckResult check_scale_channels(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = pick(rng, 1, 2), c = pick(rng, 1, 4);
  return grad_check([](const std::vector<Tensor>& x) { return scale_channels(x[0], x[1]); },
                    {random_tensor({n, c, 3, 3}, rng), random_tensor({n, c}, rng)}, seed);
}

GradCheckResult check_gate_spatial(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = pick(rng, 1, 2), c = pick(rng, 1, 4), hw = pick(rng, 2, 4);
  return grad_check([](const std::vector<Tensor>& x) { return gate_spatial(x[0], x[1]); },
                    {random_tensor({n, c, hw, hw}, rng), random_tensor({n, 1, hw, hw}, rng)}, seed);
}

GradCheckResult check_dice(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = pick(rng, 1, 2), c = pick(rng, 2, 4), hw = pick(rng, 2, 4);
  std::vector<ClassId> gt(static_cast<std::size_t>(n * hw * hw));
  for (auto& g : gt) g = static_cast<ClassId>(pick(rng, 0, c - 1));
  return grad_check([gt](const std::vector<Tensor>& x) { return soft_dice_loss(x[0], gt); },
                    {random_tensor({n, c, hw, hw}, rng, 0.05, 1.0)}, seed);
}

}  // namespace

const std::vector<PrimitiveCheck>& primitive_checks() {
  static const std::vector<PrimitiveCheck> checks = {
      {"conv2d", check_conv},
      {"conv_transpose2d", check_conv_transpose},
      {"maxpool2d", check_maxpool},
      {"max_unpool2d", check_unpool},
      {"batchnorm2d_train", [](std::uint64_t s) { return check_batchnorm(s, NormMode::train); }},
      {"batchnorm2d_eval", [](std::uint64_t s) { return check_batchnorm(s, NormMode::eval); }},
      {"relu", [](std::uint64_t s) { return check_unary(s, relu, true); }},
      {"prelu", check_prelu},
      {"sigmoid", [](std::uint64_t s) { return check_unary(s, sigmoid, false); }},
      {"softmax_channel", [](std::uint64_t s) { return check_unary(s, softmax_channel, false); }},
      {"concat_channels", check_concat},
      {"upsample_bilinear", check_upsample},
      {"linear", check_linear},
      {"add", [](std::uint64_t s) { return check_binary(s, add); }},
      {"mul", [](std::uint64_t s) { return check_binary(s, mul); }},
      {"sum", check_sum},
      {"mean_spatial", check_mean_spatial},
      {"scale_channels", check_scale_channels},
      {"gate_spatial", check_gate_spatial},
      {"soft_dice_loss", check_dice},
  };
  return checks;
}

}  // namespace sfl::testing
