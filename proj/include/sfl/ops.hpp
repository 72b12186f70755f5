#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "sfl/tensor.hpp"

namespace sfl {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

// floor((in + 2p - d(k-1) - 1) / s) + 1
std::int64_t conv_out_extent(std::int64_t in, int kernel, const Conv2dOptions& opt);
// (in - 1) s - 2p + k
std::int64_t conv_transpose_out_extent(std::int64_t in, int kernel, int stride, int padding);

// x: (N,C,H,W), w: (O,C,k,k), b: (O) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dOptions& opt = {});

// x: (N,Cin,H,W), w: (Cin,Cout,k,k), b: (Cout) or undefined. Numeric adjoint
// of conv2d with the same weight and geometry.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);

// Argmax switches of a max pooling: for every output element, the flat
// offset of the winning input inside its (H*W) plane.
struct PoolIndices {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::int32_t> offsets;
};

struct PoolResult {
  Tensor values;
  std::shared_ptr<const PoolIndices> indices;
};

// Ties resolve to the lowest flat offset in the window.
PoolResult maxpool2d(const Tensor& x, int kernel = 2, int stride = 2);

Tensor max_unpool2d(const Tensor& y, const PoolIndices& indices, const Shape& output_shape);

enum class NormMode { train, eval };

// Train mode normalizes with (biased) batch statistics and folds them into
// the running buffers: r <- (1 - momentum) r + momentum * batch.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                   Tensor& running_var, NormMode mode, double momentum = 0.1, double eps = 1e-5);

enum class ActivationKind { relu, prelu, sigmoid, softmax_channel };

Tensor relu(const Tensor& x);
// slope: (C) per-channel or (1) shared.
Tensor prelu(const Tensor& x, const Tensor& slope);
Tensor sigmoid(const Tensor& x);
Tensor softmax_channel(const Tensor& x);
Tensor activation(const Tensor& x, ActivationKind kind, const Tensor& prelu_slope = {});

Tensor concat_channels(std::span<const Tensor> xs);

// Integer upscale with half-pixel centers (align_corners = false).
Tensor upsample_bilinear(const Tensor& x, int scale);

// x: (N,F), w: (F,G), b: (G) or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
// (N,C,H,W) -> (N,C)
Tensor mean_spatial(const Tensor& x);
// x: (N,C,H,W) times s: (N,C) broadcast over space.
Tensor scale_channels(const Tensor& x, const Tensor& s);
// x: (N,C,H,W) times alpha: (N,1,H,W) broadcast over channels.
Tensor gate_spatial(const Tensor& x, const Tensor& alpha);

}  // namespace sfl
