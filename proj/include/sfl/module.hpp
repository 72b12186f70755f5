#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "sfl/ops.hpp"
#include "sfl/tensor.hpp"

namespace sfl {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using TensorList = std::vector<NamedTensor>;

// 64-bit seed derived from the global seed and a parameter name, so every
// replica of a parameter starts from the same values in any process.
std::uint64_t name_seed(std::uint64_t seed, std::string_view name);

// Uniform(-b, b) with b = sqrt(6 / fan_in).
void kaiming_uniform(Tensor& t, std::int64_t fan_in, std::uint64_t seed, std::string_view name);

struct InitContext {
  std::uint64_t seed = 0;
  DType dtype = DType::f32;
};

// Owner of named parameters (trainable) and buffers (running statistics).
// Registration order is the canonical state order.
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  const TensorList& parameters() const { return params_; }
  const TensorList& buffers() const { return buffers_; }

  Tensor register_param(std::string name, Tensor t);
  Tensor register_buffer(std::string name, Tensor t);

 private:
  TensorList params_;
  TensorList buffers_;
};

// Copies values from `source` into `target` by name, in place. Every target
// name must be present with a matching shape.
void load_state(const TensorList& target, const TensorList& source);
TensorList detach_all(const TensorList& list);
std::int64_t total_numel(const TensorList& list);

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(Module& owner, const std::string& name, int in_c, int out_c, int kernel, Conv2dOptions opt,
         const InitContext& ctx, bool bias = true);
  Tensor operator()(const Tensor& x) const;
  std::int64_t macs(std::int64_t out_h, std::int64_t out_w) const;

  Tensor weight;
  Tensor bias;
  int in_c = 0, out_c = 0, kernel = 1;
  Conv2dOptions opt;
};

// Weight layout (in_c, out_c, k, k).
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(Module& owner, const std::string& name, int in_c, int out_c, int kernel, int stride,
                  const InitContext& ctx);
  Tensor operator()(const Tensor& x) const;
  std::int64_t macs(std::int64_t in_h, std::int64_t in_w) const;

  Tensor weight;
  Tensor bias;
  int in_c = 0, out_c = 0, kernel = 2, stride = 2;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(Module& owner, const std::string& name, int channels, const InitContext& ctx);
  Tensor operator()(const Tensor& x, NormMode mode);

  Tensor gamma, beta, running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

class Linear {
 public:
  Linear() = default;
  Linear(Module& owner, const std::string& name, int in_f, int out_f, const InitContext& ctx);
  Tensor operator()(const Tensor& x) const;

  Tensor weight, bias;
  int in_f = 0, out_f = 0;
};

class PRelu {
 public:
  PRelu() = default;
  PRelu(Module& owner, const std::string& name, int channels, const InitContext& ctx);
  Tensor operator()(const Tensor& x) const;

  Tensor slope;
};

}  // namespace sfl
