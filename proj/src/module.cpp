#include "sfl/module.hpp"

#include <cmath>
#include <random>
#include <unordered_map>

namespace sfl {

std::uint64_t name_seed(std::uint64_t seed, std::string_view name) {
  // FNV-1a over the name, then a splitmix64 finalizer with the global seed.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = h ^ (seed + 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void kaiming_uniform(Tensor& t, std::int64_t fan_in, std::uint64_t seed, std::string_view name) {
  if (fan_in <= 0) throw ContractError("kaiming_uniform: fan_in must be positive");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::mt19937_64 rng(name_seed(seed, name));
  dispatch(t.dtype(), [&]<class T>(T) {
    for (auto& v : t.data<T>()) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      v = static_cast<T>((2.0 * u - 1.0) * bound);
    }
  });
}

Tensor Module::register_param(std::string name, Tensor t) {
  t.set_requires_grad(true);
  params_.push_back({std::move(name), t});
  return t;
}

Tensor Module::register_buffer(std::string name, Tensor t) {
  buffers_.push_back({std::move(name), t});
  return t;
}

void load_state(const TensorList& target, const TensorList& source) {
  std::unordered_map<std::string_view, const Tensor*> by_name;
  for (const auto& s : source) by_name.emplace(s.name, &s.tensor);
  for (const auto& t : target) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) throw ContractError("load_state: missing entry '" + t.name + "'");
    const Tensor& src = *it->second;
    Tensor dst = t.tensor;
    if (src.shape() != dst.shape())
      throw ContractError("load_state: '" + t.name + "' has shape " + shape_str(src.shape()) + ", expected " +
                          shape_str(dst.shape()));
    dispatch(dst.dtype(), [&]<class T>(T) {
      auto d = dst.data<T>();
      if (src.dtype() == dst.dtype()) {
        auto s = src.data<T>();
        std::copy(s.begin(), s.end(), d.begin());
      } else {
        auto s = src.to_doubles();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(s[i]);
      }
    });
  }
}

TensorList detach_all(const TensorList& list) {
  TensorList out;
  out.reserve(list.size());
  for (const auto& e : list) out.push_back({e.name, e.tensor.detach()});
  return out;
}

std::int64_t total_numel(const TensorList& list) {
  std::int64_t n = 0;
  for (const auto& e : list) n += e.tensor.numel();
  return n;
}

Conv2d::Conv2d(Module& owner, const std::string& name, int in_c_, int out_c_, int kernel_, Conv2dOptions opt_,
               const InitContext& ctx, bool with_bias)
    : in_c(in_c_), out_c(out_c_), kernel(kernel_), opt(opt_) {
  Tensor w = Tensor::zeros({out_c, in_c, kernel, kernel}, ctx.dtype);
  kaiming_uniform(w, static_cast<std::int64_t>(in_c) * kernel * kernel, ctx.seed, name + ".weight");
  weight = owner.register_param(name + ".weight", w);
  if (with_bias) bias = owner.register_param(name + ".bias", Tensor::zeros({out_c}, ctx.dtype));
}

Tensor Conv2d::operator()(const Tensor& x) const { return conv2d(x, weight, bias, opt); }

std::int64_t Conv2d::macs(std::int64_t out_h, std::int64_t out_w) const {
  return static_cast<std::int64_t>(out_c) * in_c * kernel * kernel * out_h * out_w;
}

ConvTranspose2d::ConvTranspose2d(Module& owner, const std::string& name, int in_c_, int out_c_, int kernel_,
                                 int stride_, const InitContext& ctx)
    : in_c(in_c_), out_c(out_c_), kernel(kernel_), stride(stride_) {
  Tensor w = Tensor::zeros({in_c, out_c, kernel, kernel}, ctx.dtype);
  kaiming_uniform(w, static_cast<std::int64_t>(out_c) * kernel * kernel, ctx.seed, name + ".weight");
  weight = owner.register_param(name + ".weight", w);
  bias = owner.register_param(name + ".bias", Tensor::zeros({out_c}, ctx.dtype));
}

Tensor ConvTranspose2d::operator()(const Tensor& x) const { return conv_transpose2d(x, weight, bias, stride, 0); }

std::int64_t ConvTranspose2d::macs(std::int64_t in_h, std::int64_t in_w) const {
  return static_cast<std::int64_t>(in_c) * out_c * kernel * kernel * in_h * in_w;
}

BatchNorm2d::BatchNorm2d(Module& owner, const std::string& name, int channels, const InitContext& ctx) {
  gamma = owner.register_param(name + ".gamma", Tensor::full({channels}, 1.0, ctx.dtype));
  beta = owner.register_param(name + ".beta", Tensor::zeros({channels}, ctx.dtype));
  running_mean = owner.register_buffer(name + ".running_mean", Tensor::zeros({channels}, ctx.dtype));
  running_var = owner.register_buffer(name + ".running_var", Tensor::full({channels}, 1.0, ctx.dtype));
}

Tensor BatchNorm2d::operator()(const Tensor& x, NormMode mode) {
  return batchnorm2d(x, gamma, beta, running_mean, running_var, mode, momentum, eps);
}

Linear::Linear(Module& owner, const std::string& name, int in_f_, int out_f_, const InitContext& ctx)
    : in_f(in_f_), out_f(out_f_) {
  Tensor w = Tensor::zeros({in_f, out_f}, ctx.dtype);
  kaiming_uniform(w, in_f, ctx.seed, name + ".weight");
  weight = owner.register_param(name + ".weight", w);
  bias = owner.register_param(name + ".bias", Tensor::zeros({out_f}, ctx.dtype));
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

PRelu::PRelu(Module& owner, const std::string& name, int channels, const InitContext& ctx) {
  slope = owner.register_param(name + ".slope", Tensor::full({channels}, 0.25, ctx.dtype));
}

Tensor PRelu::operator()(const Tensor& x) const { return prelu(x, slope); }

}  // namespace sfl
