#include "sfl/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "sfl/autograd.hpp"

namespace sfl {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

using detail::grad_of;
using detail::out_grad;
using detail::record;
using detail::require_rank;
using detail::require_same_dtype;
using detail::TensorImpl;
using detail::wants_grad;

struct Geometry {
  int channels, height, width;
  int kernel, stride, padding, dilation;
  int out_h, out_w;
};

// Output columns [lo, hi) whose input column ow * stride + shift is inside
// [0, width).
inline std::pair<int, int> valid_cols(const Geometry& g, int shift) {
  auto ceil_div = [](int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); };
  const int lo = std::max(0, ceil_div(-shift, g.stride));
  const int hi = std::min(g.out_w, ceil_div(g.width - shift, g.stride));
  return {lo, std::max(lo, hi)};
}

// (C,H,W) -> (C*k*k, out_h*out_w)
template <class T>
void im2col(const T* x, const Geometry& g, T* col) {
  const int plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    const T* xc = x + static_cast<std::ptrdiff_t>(c) * g.height * g.width;
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        T* dst = col + static_cast<std::ptrdiff_t>((c * g.kernel + ki) * g.kernel + kj) * plane;
        const int shift = kj * g.dilation - g.padding;
        const auto [lo, hi] = valid_cols(g, shift);
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + ki * g.dilation;
          T* row = dst + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(row, row + g.out_w, T(0));
            continue;
          }
          const T* src = xc + ih * g.width;
          std::fill(row, row + lo, T(0));
          if (g.stride == 1) {
            if (hi > lo) std::copy(src + lo + shift, src + hi + shift, row + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow) row[ow] = src[ow * g.stride + shift];
          }
          std::fill(row + hi, row + g.out_w, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into (C,H,W).
template <class T>
void col2im(const T* col, const Geometry& g, T* x) {
  const int plane = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    T* xc = x + static_cast<std::ptrdiff_t>(c) * g.height * g.width;
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const T* src = col + static_cast<std::ptrdiff_t>((c * g.kernel + ki) * g.kernel + kj) * plane;
        const int shift = kj * g.dilation - g.padding;
        const auto [lo, hi] = valid_cols(g, shift);
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + ki * g.dilation;
          if (ih < 0 || ih >= g.height) continue;
          T* dst = xc + ih * g.width;
          const T* row = src + oh * g.out_w;
          if (g.stride == 1) {
            for (int ow = lo; ow < hi; ++ow) dst[ow + shift] += row[ow];
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow * g.stride + shift] += row[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const Geometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.padding == 0 && g.out_h == g.height && g.out_w == g.width;
}

void require_nchw(const char* op, const Tensor& x) { require_rank(op, x, 4); }

std::string dims(const Tensor& t) { return shape_str(t.shape()); }

}  // namespace

std::int64_t conv_out_extent(std::int64_t in, int kernel, const Conv2dOptions& opt) {
  const std::int64_t span = static_cast<std::int64_t>(opt.dilation) * (kernel - 1) + 1;
  const std::int64_t padded = in + 2 * opt.padding;
  if (padded < span) return 0;
  return (padded - span) / opt.stride + 1;
}

std::int64_t conv_transpose_out_extent(std::int64_t in, int kernel, int stride, int padding) {
  return (in - 1) * stride - 2 * padding + kernel;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dOptions& opt) {
  require_nchw("conv2d", x);
  require_rank("conv2d weight", w, 4);
  require_same_dtype("conv2d", {&x, &w, &b});
  if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0)
    throw ContractError("conv2d: stride and dilation must be >= 1 and padding >= 0");
  if (w.size(2) != w.size(3)) throw ContractError("conv2d: only square kernels, weight " + dims(w));
  if (x.size(1) != w.size(1))
    throw ContractError("conv2d: input channels " + std::to_string(x.size(1)) + " of x " + dims(x) +
                        " != weight input channels " + std::to_string(w.size(1)) + " of w " + dims(w));
  if (b.defined() && (b.rank() != 1 || b.size(0) != w.size(0)))
    throw ContractError("conv2d: bias " + dims(b) + " does not match output channels " +
                        std::to_string(w.size(0)));

  const auto N = x.size(0);
  const int k = static_cast<int>(w.size(2));
  Geometry g{static_cast<int>(x.size(1)), static_cast<int>(x.size(2)), static_cast<int>(x.size(3)),
             k, opt.stride, opt.padding, opt.dilation, 0, 0};
  g.out_h = static_cast<int>(conv_out_extent(g.height, k, opt));
  g.out_w = static_cast<int>(conv_out_extent(g.width, k, opt));
  if (g.out_h <= 0 || g.out_w <= 0)
    throw ContractError("conv2d: input " + dims(x) + " too small for kernel " + std::to_string(k));
  const auto O = w.size(0);
  const std::int64_t K = static_cast<std::int64_t>(g.channels) * k * k;
  const std::int64_t P = static_cast<std::int64_t>(g.out_h) * g.out_w;
  const std::int64_t in_plane = static_cast<std::int64_t>(g.channels) * g.height * g.width;

  Tensor y = Tensor::zeros({N, O, g.out_h, g.out_w}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = x.data<T>().data();
    ConstMatMap<T> W(w.data<T>().data(), O, K);
    T* yp = y.data<T>().data();
    detail::Storage<T> col(is_pointwise(g) ? 0 : static_cast<std::size_t>(K * P));
    for (std::int64_t n = 0; n < N; ++n) {
      const T* src = xp + n * in_plane;
      if (!is_pointwise(g)) {
        im2col(src, g, col.data());
        src = col.data();
      }
      MatMap<T> Y(yp + n * O * P, O, P);
      Y.noalias() = W * ConstMatMap<T>(src, K, P);
      if (b.defined()) {
        auto bias = b.data<T>();
        for (std::int64_t o = 0; o < O; ++o) Y.row(o).array() += bias[o];
      }
    }
  });

  record(y, "conv2d", {x, w, b}, [x, w, b, g, N, O, K, P, in_plane](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      const T* xp = x.data<T>().data();
      ConstMatMap<T> W(w.data<T>().data(), O, K);
      detail::Storage<T> col(is_pointwise(g) ? 0 : static_cast<std::size_t>(K * P));
      detail::Storage<T> dcol(static_cast<std::size_t>(K * P));
      for (std::int64_t n = 0; n < N; ++n) {
        ConstMatMap<T> dY(dy.data() + n * O * P, O, P);
        if (wants_grad(w.impl())) {
          const T* src = xp + n * in_plane;
          if (!is_pointwise(g)) {
            im2col(src, g, col.data());
            src = col.data();
          }
          MatMap<T> dW(grad_of<T>(*w.impl()).data(), O, K);
          dW.noalias() += dY * ConstMatMap<T>(src, K, P).transpose();
        }
        if (b.defined() && wants_grad(b.impl())) {
          auto db = grad_of<T>(*b.impl());
          for (std::int64_t o = 0; o < O; ++o) db[o] += dY.row(o).sum();
        }
        if (wants_grad(x.impl())) {
          T* dx = grad_of<T>(*x.impl()).data() + n * in_plane;
          if (is_pointwise(g)) {
            MatMap<T>(dx, K, P).noalias() += W.transpose() * dY;
          } else {
            MatMap<T>(dcol.data(), K, P).noalias() = W.transpose() * dY;
            col2im(dcol.data(), g, dx);
          }
        }
      }
    });
  });
  return y;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
  require_nchw("conv_transpose2d", x);
  require_rank("conv_transpose2d weight", w, 4);
  require_same_dtype("conv_transpose2d", {&x, &w, &b});
  if (stride < 1 || padding < 0) throw ContractError("conv_transpose2d: stride >= 1, padding >= 0");
  if (w.size(2) != w.size(3)) throw ContractError("conv_transpose2d: only square kernels, weight " + dims(w));
  if (x.size(1) != w.size(0))
    throw ContractError("conv_transpose2d: input channels " + std::to_string(x.size(1)) + " of x " +
                        dims(x) + " != weight axis 0 (" + std::to_string(w.size(0)) + ") of w " + dims(w));
  const auto Cout = w.size(1);
  if (b.defined() && (b.rank() != 1 || b.size(0) != Cout))
    throw ContractError("conv_transpose2d: bias " + dims(b) + " does not match output channels " +
                        std::to_string(Cout));
  const int k = static_cast<int>(w.size(2));
  const auto N = x.size(0);
  const auto Cin = x.size(1);
  const auto H = x.size(2), Wd = x.size(3);
  const auto Ho = conv_transpose_out_extent(H, k, stride, padding);
  const auto Wo = conv_transpose_out_extent(Wd, k, stride, padding);
  if (Ho <= 0 || Wo <= 0) throw ContractError("conv_transpose2d: empty output for input " + dims(x));
  // The forward conv that maps the output grid back onto the input grid.
  Geometry g{static_cast<int>(Cout), static_cast<int>(Ho), static_cast<int>(Wo), k, stride, padding, 1,
             static_cast<int>(H), static_cast<int>(Wd)};
  if (conv_out_extent(Ho, k, {stride, padding, 1}) != H || conv_out_extent(Wo, k, {stride, padding, 1}) != Wd)
    throw ContractError("conv_transpose2d: geometry not invertible for input " + dims(x));
  const std::int64_t K = Cout * k * k;
  const std::int64_t P = H * Wd;
  const std::int64_t out_plane = Cout * Ho * Wo;

  Tensor y = Tensor::zeros({N, Cout, Ho, Wo}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    ConstMatMap<T> Wm(w.data<T>().data(), Cin, K);
    const T* xp = x.data<T>().data();
    T* yp = y.data<T>().data();
    detail::Storage<T> col(static_cast<std::size_t>(K * P));
    for (std::int64_t n = 0; n < N; ++n) {
      MatMap<T>(col.data(), K, P).noalias() = Wm.transpose() * ConstMatMap<T>(xp + n * Cin * P, Cin, P);
      T* yn = yp + n * out_plane;
      col2im(col.data(), g, yn);
      if (b.defined()) {
        auto bias = b.data<T>();
        for (std::int64_t c = 0; c < Cout; ++c) {
          T* plane = yn + c * Ho * Wo;
          for (std::int64_t i = 0; i < Ho * Wo; ++i) plane[i] += bias[c];
        }
      }
    }
  });

  record(y, "conv_transpose2d", {x, w, b}, [x, w, b, g, N, Cin, Cout, K, P, out_plane](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      ConstMatMap<T> Wm(w.data<T>().data(), Cin, K);
      const T* xp = x.data<T>().data();
      detail::Storage<T> dcol(static_cast<std::size_t>(K * P));
      const std::int64_t hw = static_cast<std::int64_t>(g.height) * g.width;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* dyn = dy.data() + n * out_plane;
        im2col(dyn, g, dcol.data());
        ConstMatMap<T> dC(dcol.data(), K, P);
        if (wants_grad(x.impl())) {
          MatMap<T> dX(grad_of<T>(*x.impl()).data() + n * Cin * P, Cin, P);
          dX.noalias() += Wm * dC;
        }
        if (wants_grad(w.impl())) {
          MatMap<T> dW(grad_of<T>(*w.impl()).data(), Cin, K);
          dW.noalias() += ConstMatMap<T>(xp + n * Cin * P, Cin, P) * dC.transpose();
        }
        if (b.defined() && wants_grad(b.impl())) {
          auto db = grad_of<T>(*b.impl());
          for (std::int64_t c = 0; c < Cout; ++c) {
            T acc = 0;
            for (std::int64_t i = 0; i < hw; ++i) acc += dyn[c * hw + i];
            db[c] += acc;
          }
        }
      }
    });
  });
  return y;
}

PoolResult maxpool2d(const Tensor& x, int kernel, int stride) {
  require_nchw("maxpool2d", x);
  if (kernel < 1 || stride < 1) throw ContractError("maxpool2d: kernel and stride must be >= 1");
  const auto N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (kernel == stride && (H % stride != 0 || W % stride != 0))
    throw ContractError("maxpool2d: spatial extent " + dims(x) + " not divisible by stride " +
                        std::to_string(stride));
  if (H < kernel || W < kernel) throw ContractError("maxpool2d: input " + dims(x) + " smaller than window");
  const auto Ho = (H - kernel) / stride + 1;
  const auto Wo = (W - kernel) / stride + 1;
  auto indices = std::make_shared<PoolIndices>();
  indices->input_shape = x.shape();
  indices->output_shape = {N, C, Ho, Wo};
  indices->offsets.resize(static_cast<std::size_t>(N * C * Ho * Wo));
  Tensor y = Tensor::zeros({N, C, Ho, Wo}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = x.data<T>().data();
    T* yp = y.data<T>().data();
    for (std::int64_t p = 0; p < N * C; ++p) {
      const T* plane = xp + p * H * W;
      for (std::int64_t oh = 0; oh < Ho; ++oh) {
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          std::int64_t best = (oh * stride) * W + ow * stride;
          T best_v = plane[best];
          for (int ki = 0; ki < kernel; ++ki) {
            for (int kj = 0; kj < kernel; ++kj) {
              const std::int64_t off = (oh * stride + ki) * W + ow * stride + kj;
              if (plane[off] > best_v) {
                best_v = plane[off];
                best = off;
              }
            }
          }
          const std::int64_t o = (p * Ho + oh) * Wo + ow;
          yp[o] = best_v;
          indices->offsets[static_cast<std::size_t>(o)] = static_cast<std::int32_t>(best);
        }
      }
    }
  });
  record(y, "maxpool2d", {x}, [x, indices, H, W, Ho, Wo](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto dx = grad_of<T>(*x.impl());
      for (std::size_t o = 0; o < dy.size(); ++o) {
        const auto plane = static_cast<std::int64_t>(o) / (Ho * Wo);
        dx[static_cast<std::size_t>(plane * H * W + indices->offsets[o])] += dy[o];
      }
    });
  });
  return {y, indices};
}

Tensor max_unpool2d(const Tensor& y, const PoolIndices& indices, const Shape& output_shape) {
  require_nchw("max_unpool2d", y);
  if (y.shape() != indices.output_shape)
    throw ContractError("max_unpool2d: values " + dims(y) + " do not match indices recorded for " +
                        shape_str(indices.output_shape));
  if (output_shape.size() != 4 || output_shape[0] != y.size(0) || output_shape[1] != y.size(1))
    throw ContractError("max_unpool2d: output shape " + shape_str(output_shape) + " incompatible with " +
                        dims(y));
  const auto plane_out = output_shape[2] * output_shape[3];
  const auto plane_in = y.size(2) * y.size(3);
  for (auto off : indices.offsets)
    if (off < 0 || off >= plane_out)
      throw ContractError("max_unpool2d: index " + std::to_string(off) + " out of range for output " +
                          shape_str(output_shape));
  Tensor out = Tensor::zeros(output_shape, y.dtype());
  dispatch(y.dtype(), [&]<class T>(T) {
    auto src = y.data<T>();
    auto dst = out.data<T>();
    for (std::size_t i = 0; i < src.size(); ++i) {
      const auto plane = static_cast<std::int64_t>(i) / plane_in;
      dst[static_cast<std::size_t>(plane * plane_out + indices.offsets[i])] = src[i];
    }
  });
  auto offsets = std::make_shared<std::vector<std::int32_t>>(indices.offsets);
  record(out, "max_unpool2d", {y}, [y, offsets, plane_in, plane_out](TensorImpl& o) {
    dispatch(y.dtype(), [&]<class T>(T) {
      auto dout = out_grad<T>(o);
      auto dy = grad_of<T>(*y.impl());
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const auto plane = static_cast<std::int64_t>(i) / plane_in;
        dy[i] += dout[static_cast<std::size_t>(plane * plane_out + (*offsets)[i])];
      }
    });
  });
  return out;
}

namespace {

// Fixed-order sums over 8 interleaved lanes: vectorizable and deterministic.
template <class T, class F>
double lane_sum(std::int64_t n, F&& f) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += f(i + l);
  for (int l = 0; i < n; ++i, ++l) acc[l] += f(i);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

}  // namespace

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                   Tensor& running_var, NormMode mode, double momentum, double eps) {
  require_nchw("batchnorm2d", x);
  require_same_dtype("batchnorm2d", {&x, &gamma, &beta, &running_mean, &running_var});
  const auto N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var})
    if (t->rank() != 1 || t->size(0) != C)
      throw ContractError("batchnorm2d: per-channel tensor " + dims(*t) + " does not match C=" +
                          std::to_string(C));
  const double count = static_cast<double>(N * HW);
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  // Normalized input and per-channel inverse std, kept for the reverse pass.
  Tensor xhat = Tensor::zeros(x.shape(), x.dtype());
  Tensor inv_std = Tensor::zeros({C}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    const T* xp = x.data<T>().data();
    T* yp = y.data<T>().data();
    T* hp = xhat.data<T>().data();
    auto g = gamma.data<T>();
    auto b = beta.data<T>();
    auto rm = running_mean.data<T>();
    auto rv = running_var.data<T>();
    auto is = inv_std.data<T>();
    for (std::int64_t c = 0; c < C; ++c) {
      double mean, var;
      if (mode == NormMode::train) {
        double s = 0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* p = xp + (n * C + c) * HW;
          s += lane_sum<T>(HW, [p](std::int64_t i) { return static_cast<double>(p[i]); });
        }
        mean = s / count;
        double ss = 0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* p = xp + (n * C + c) * HW;
          ss += lane_sum<T>(HW, [p, mean](std::int64_t i) {
            const double d = p[i] - mean;
            return d * d;
          });
        }
        var = ss / count;
        rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * mean);
        rv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * var);
      } else {
        mean = rm[c];
        var = rv[c];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + eps));
      const T m = static_cast<T>(mean);
      is[c] = inv;
      for (std::int64_t n = 0; n < N; ++n) {
        const std::int64_t base = (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
          const T h = (xp[base + i] - m) * inv;
          hp[base + i] = h;
          yp[base + i] = g[c] * h + b[c];
        }
      }
    }
  });
  record(y, "batchnorm2d", {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, mode, N, C, HW](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto h = xhat.data<T>();
      auto g = gamma.data<T>();
      auto is = inv_std.data<T>();
      const double M = static_cast<double>(N * HW);
      for (std::int64_t c = 0; c < C; ++c) {
        double sum_dy = 0, sum_dy_h = 0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* dp = dy.data() + (n * C + c) * HW;
          const T* hp = h.data() + (n * C + c) * HW;
          sum_dy += lane_sum<T>(HW, [dp](std::int64_t i) { return static_cast<double>(dp[i]); });
          sum_dy_h += lane_sum<T>(HW, [dp, hp](std::int64_t i) { return static_cast<double>(dp[i]) * hp[i]; });
        }
        if (wants_grad(gamma.impl())) grad_of<T>(*gamma.impl())[c] += static_cast<T>(sum_dy_h);
        if (wants_grad(beta.impl())) grad_of<T>(*beta.impl())[c] += static_cast<T>(sum_dy);
        if (!wants_grad(x.impl())) continue;
        auto dx = grad_of<T>(*x.impl());
        const T scale = g[c] * is[c];
        if (mode == NormMode::train) {
          const T mean_dy = static_cast<T>(sum_dy / M);
          const T mean_dy_h = static_cast<T>(sum_dy_h / M);
          for (std::int64_t n = 0; n < N; ++n) {
            const std::int64_t base = (n * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i)
              dx[base + i] += scale * (dy[base + i] - mean_dy - h[base + i] * mean_dy_h);
          }
        } else {
          for (std::int64_t n = 0; n < N; ++n) {
            const std::int64_t base = (n * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) dx[base + i] += scale * dy[base + i];
          }
        }
      }
    });
  });
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto s = x.data<T>();
    auto d = y.data<T>();
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = s[i] > T(0) ? s[i] : T(0);
  });
  record(y, "relu", {x}, [x](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto s = x.data<T>();
      auto dx = grad_of<T>(*x.impl());
      for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i] > T(0)) dx[i] += dy[i];
    });
  });
  return y;
}

Tensor prelu(const Tensor& x, const Tensor& slope) {
  require_nchw("prelu", x);
  require_same_dtype("prelu", {&x, &slope});
  const auto N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  if (slope.rank() != 1 || (slope.size(0) != C && slope.size(0) != 1))
    throw ContractError("prelu: slope " + dims(slope) + " must have 1 or C=" + std::to_string(C) + " entries");
  const bool shared = slope.size(0) == 1;
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto s = x.data<T>();
    auto a = slope.data<T>();
    auto d = y.data<T>();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const T ac = a[shared ? 0 : c];
        const std::int64_t base = (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
          const T v = s[base + i];
          d[base + i] = v > T(0) ? v : ac * v;
        }
      }
  });
  record(y, "prelu", {x, slope}, [x, slope, shared, N, C, HW](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto s = x.data<T>();
      auto a = slope.data<T>();
      const bool gx = wants_grad(x.impl());
      const bool ga = wants_grad(slope.impl());
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const std::int64_t ci = shared ? 0 : c;
          const std::int64_t base = (n * C + c) * HW;
          T acc = 0;
          for (std::int64_t i = 0; i < HW; ++i) {
            const T v = s[base + i];
            if (gx) grad_of<T>(*x.impl())[base + i] += v > T(0) ? dy[base + i] : a[ci] * dy[base + i];
            if (v <= T(0)) acc += v * dy[base + i];
          }
          if (ga) grad_of<T>(*slope.impl())[ci] += acc;
        }
    });
  });
  return y;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto s = x.data<T>();
    auto d = y.data<T>();
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = T(1) / (T(1) + std::exp(-s[i]));
  });
  record(y, "sigmoid", {x}, [x, y_data = y.detach()](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto v = y_data.data<T>();
      auto dx = grad_of<T>(*x.impl());
      for (std::size_t i = 0; i < v.size(); ++i) dx[i] += dy[i] * v[i] * (T(1) - v[i]);
    });
  });
  return y;
}

Tensor softmax_channel(const Tensor& x) {
  require_nchw("softmax_channel", x);
  const auto N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto s = x.data<T>();
    auto d = y.data<T>();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < HW; ++i) {
        const std::int64_t base = n * C * HW + i;
        T mx = s[base];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, s[base + c * HW]);
        T total = 0;
        for (std::int64_t c = 0; c < C; ++c) {
          const T e = std::exp(s[base + c * HW] - mx);
          d[base + c * HW] = e;
          total += e;
        }
        for (std::int64_t c = 0; c < C; ++c) d[base + c * HW] /= total;
      }
  });
  record(y, "softmax_channel", {x}, [x, y_data = y.detach(), N, C, HW](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto v = y_data.data<T>();
      auto dx = grad_of<T>(*x.impl());
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < HW; ++i) {
          const std::int64_t base = n * C * HW + i;
          T dot = 0;
          for (std::int64_t c = 0; c < C; ++c) dot += dy[base + c * HW] * v[base + c * HW];
          for (std::int64_t c = 0; c < C; ++c) dx[base + c * HW] += v[base + c * HW] * (dy[base + c * HW] - dot);
        }
    });
  });
  return y;
}

Tensor activation(const Tensor& x, ActivationKind kind, const Tensor& prelu_slope) {
  switch (kind) {
    case ActivationKind::relu:
      return relu(x);
    case ActivationKind::prelu:
      return prelu(x, prelu_slope);
    case ActivationKind::sigmoid:
      return sigmoid(x);
    case ActivationKind::softmax_channel:
      return softmax_channel(x);
  }
  throw ContractError("activation: unknown kind");
}

Tensor concat_channels(std::span<const Tensor> xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  for (const auto& t : xs) {
    require_nchw("concat_channels", t);
    if (t.dtype() != xs[0].dtype()) throw ContractError("concat_channels: mixed dtypes");
    if (t.size(0) != xs[0].size(0) || t.size(2) != xs[0].size(2) || t.size(3) != xs[0].size(3))
      throw ContractError("concat_channels: " + dims(t) + " does not share N,H,W with " + dims(xs[0]));
  }
  const auto N = xs[0].size(0), HW = xs[0].size(2) * xs[0].size(3);
  std::int64_t C = 0;
  for (const auto& t : xs) C += t.size(1);
  Tensor y = Tensor::zeros({N, C, xs[0].size(2), xs[0].size(3)}, xs[0].dtype());
  dispatch(y.dtype(), [&]<class T>(T) {
    auto d = y.data<T>();
    for (std::int64_t n = 0; n < N; ++n) {
      std::int64_t offset = 0;
      for (const auto& t : xs) {
        const auto block = t.size(1) * HW;
        auto s = t.data<T>();
        std::copy_n(s.begin() + n * block, block, d.begin() + (n * C * HW + offset));
        offset += block;
      }
    }
  });
  std::vector<Tensor> inputs(xs.begin(), xs.end());
  record(y, "concat_channels", inputs, [inputs, N, C, HW](TensorImpl& out) {
    dispatch(inputs[0].dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      for (std::int64_t n = 0; n < N; ++n) {
        std::int64_t offset = 0;
        for (const auto& t : inputs) {
          const auto block = t.size(1) * HW;
          if (wants_grad(t.impl())) {
            auto dx = grad_of<T>(*t.impl());
            for (std::int64_t i = 0; i < block; ++i) dx[n * block + i] += dy[n * C * HW + offset + i];
          }
          offset += block;
        }
      }
    });
  });
  return y;
}

namespace {

struct Tap {
  std::int64_t i0, i1;
  double w0, w1;
};

std::vector<Tap> bilinear_taps(std::int64_t in, int scale) {
  std::vector<Tap> taps(static_cast<std::size_t>(in * scale));
  for (std::int64_t o = 0; o < in * scale; ++o) {
    double src = (static_cast<double>(o) + 0.5) / scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    const double l = src - static_cast<double>(i0);
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - l, l};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, int scale) {
  require_nchw("upsample_bilinear", x);
  if (scale < 1) throw ContractError("upsample_bilinear: scale must be >= 1");
  if (scale == 1) {
    // Identity; still routed through the tape so gradients flow.
    Tensor y = x.detach();
    record(y, "upsample_identity", {x}, [x](TensorImpl& out) {
      dispatch(x.dtype(), [&]<class T>(T) {
        auto dy = out_grad<T>(out);
        auto dx = grad_of<T>(*x.impl());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
      });
    });
    return y;
  }
  const auto NC = x.size(0) * x.size(1), H = x.size(2), W = x.size(3);
  const auto Ho = H * scale, Wo = W * scale;
  auto ty = bilinear_taps(H, scale);
  auto tx = bilinear_taps(W, scale);
  Tensor y = Tensor::zeros({x.size(0), x.size(1), Ho, Wo}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto s = x.data<T>();
    auto d = y.data<T>();
    for (std::int64_t p = 0; p < NC; ++p) {
      const T* src = s.data() + p * H * W;
      T* dst = d.data() + p * Ho * Wo;
      for (std::int64_t oh = 0; oh < Ho; ++oh) {
        const auto& a = ty[static_cast<std::size_t>(oh)];
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          const auto& b = tx[static_cast<std::size_t>(ow)];
          dst[oh * Wo + ow] = static_cast<T>(a.w0 * (b.w0 * src[a.i0 * W + b.i0] + b.w1 * src[a.i0 * W + b.i1]) +
                                             a.w1 * (b.w0 * src[a.i1 * W + b.i0] + b.w1 * src[a.i1 * W + b.i1]));
        }
      }
    }
  });
  record(y, "upsample_bilinear", {x}, [x, ty, tx, NC, H, W, Ho, Wo](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto dx = grad_of<T>(*x.impl());
      for (std::int64_t p = 0; p < NC; ++p) {
        const T* g = dy.data() + p * Ho * Wo;
        T* dst = dx.data() + p * H * W;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const auto& a = ty[static_cast<std::size_t>(oh)];
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const auto& b = tx[static_cast<std::size_t>(ow)];
            const double v = g[oh * Wo + ow];
            dst[a.i0 * W + b.i0] += static_cast<T>(v * a.w0 * b.w0);
            dst[a.i0 * W + b.i1] += static_cast<T>(v * a.w0 * b.w1);
            dst[a.i1 * W + b.i0] += static_cast<T>(v * a.w1 * b.w0);
            dst[a.i1 * W + b.i1] += static_cast<T>(v * a.w1 * b.w1);
          }
        }
      }
    });
  });
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank("linear", x, 2);
  require_rank("linear weight", w, 2);
  require_same_dtype("linear", {&x, &w, &b});
  if (x.size(1) != w.size(0))
    throw ContractError("linear: x " + dims(x) + " features do not match weight " + dims(w));
  if (b.defined() && (b.rank() != 1 || b.size(0) != w.size(1)))
    throw ContractError("linear: bias " + dims(b) + " does not match weight " + dims(w));
  const auto N = x.size(0), F = x.size(1), G = w.size(1);
  Tensor y = Tensor::zeros({N, G}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    MatMap<T> Y(y.data<T>().data(), N, G);
    Y.noalias() = ConstMatMap<T>(x.data<T>().data(), N, F) * ConstMatMap<T>(w.data<T>().data(), F, G);
    if (b.defined()) {
      auto bias = b.data<T>();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t g = 0; g < G; ++g) Y(n, g) += bias[g];
    }
  });
  record(y, "linear", {x, w, b}, [x, w, b, N, F, G](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      ConstMatMap<T> dY(out_grad<T>(out).data(), N, G);
      if (wants_grad(x.impl()))
        MatMap<T>(grad_of<T>(*x.impl()).data(), N, F).noalias() +=
            dY * ConstMatMap<T>(w.data<T>().data(), F, G).transpose();
      if (wants_grad(w.impl()))
        MatMap<T>(grad_of<T>(*w.impl()).data(), F, G).noalias() +=
            ConstMatMap<T>(x.data<T>().data(), N, F).transpose() * dY;
      if (b.defined() && wants_grad(b.impl())) {
        auto db = grad_of<T>(*b.impl());
        for (std::int64_t g = 0; g < G; ++g) db[g] += dY.col(g).sum();
      }
    });
  });
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dtype("add", {&a, &b});
  if (a.shape() != b.shape()) throw ContractError("add: shapes " + dims(a) + " and " + dims(b));
  Tensor y = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>(T) {
    auto x1 = a.data<T>();
    auto x2 = b.data<T>();
    auto d = y.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = x1[i] + x2[i];
  });
  record(y, "add", {a, b}, [a, b](TensorImpl& out) {
    dispatch(a.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      for (const Tensor* t : {&a, &b}) {
        if (!wants_grad(t->impl())) continue;
        auto dx = grad_of<T>(*t->impl());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
      }
    });
  });
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dtype("mul", {&a, &b});
  if (a.shape() != b.shape()) throw ContractError("mul: shapes " + dims(a) + " and " + dims(b));
  Tensor y = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>(T) {
    auto x1 = a.data<T>();
    auto x2 = b.data<T>();
    auto d = y.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = x1[i] * x2[i];
  });
  record(y, "mul", {a, b}, [a, b](TensorImpl& out) {
    dispatch(a.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto x1 = a.data<T>();
      auto x2 = b.data<T>();
      if (wants_grad(a.impl())) {
        auto dx = grad_of<T>(*a.impl());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * x2[i];
      }
      if (wants_grad(b.impl())) {
        auto dx = grad_of<T>(*b.impl());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * x1[i];
      }
    });
  });
  return y;
}

Tensor sum(const Tensor& x) {
  Tensor y = Tensor::zeros({}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    double acc = 0;
    for (T v : x.data<T>()) acc += v;
    y.data<T>()[0] = static_cast<T>(acc);
  });
  record(y, "sum", {x}, [x](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      const T g = out_grad<T>(out)[0];
      auto dx = grad_of<T>(*x.impl());
      for (auto& v : dx) v += g;
    });
  });
  return y;
}

Tensor mean_spatial(const Tensor& x) {
  require_nchw("mean_spatial", x);
  const auto N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  Tensor y = Tensor::zeros({N, C}, x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto s = x.data<T>();
    auto d = y.data<T>();
    for (std::int64_t p = 0; p < N * C; ++p) {
      double acc = 0;
      for (std::int64_t i = 0; i < HW; ++i) acc += s[p * HW + i];
      d[p] = static_cast<T>(acc / static_cast<double>(HW));
    }
  });
  record(y, "mean_spatial", {x}, [x, N, C, HW](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto dx = grad_of<T>(*x.impl());
      for (std::int64_t p = 0; p < N * C; ++p) {
        const T g = dy[p] / static_cast<T>(HW);
        for (std::int64_t i = 0; i < HW; ++i) dx[p * HW + i] += g;
      }
    });
  });
  return y;
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
  require_nchw("scale_channels", x);
  require_same_dtype("scale_channels", {&x, &s});
  const auto N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  if (s.shape() != Shape{N, C})
    throw ContractError("scale_channels: scale " + dims(s) + " must be (N,C) for x " + dims(x));
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto xs = x.data<T>();
    auto ss = s.data<T>();
    auto d = y.data<T>();
    for (std::int64_t p = 0; p < N * C; ++p)
      for (std::int64_t i = 0; i < HW; ++i) d[p * HW + i] = xs[p * HW + i] * ss[p];
  });
  record(y, "scale_channels", {x, s}, [x, s, N, C, HW](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto xs = x.data<T>();
      auto ss = s.data<T>();
      for (std::int64_t p = 0; p < N * C; ++p) {
        if (wants_grad(x.impl())) {
          auto dx = grad_of<T>(*x.impl());
          for (std::int64_t i = 0; i < HW; ++i) dx[p * HW + i] += dy[p * HW + i] * ss[p];
        }
        if (wants_grad(s.impl())) {
          T acc = 0;
          for (std::int64_t i = 0; i < HW; ++i) acc += dy[p * HW + i] * xs[p * HW + i];
          grad_of<T>(*s.impl())[p] += acc;
        }
      }
    });
  });
  return y;
}

Tensor gate_spatial(const Tensor& x, const Tensor& alpha) {
  require_nchw("gate_spatial", x);
  require_same_dtype("gate_spatial", {&x, &alpha});
  const auto N = x.size(0), C = x.size(1), HW = x.size(2) * x.size(3);
  if (alpha.shape() != Shape{N, 1, x.size(2), x.size(3)})
    throw ContractError("gate_spatial: alpha " + dims(alpha) + " must be (N,1,H,W) for x " + dims(x));
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>(T) {
    auto xs = x.data<T>();
    auto as = alpha.data<T>();
    auto d = y.data<T>();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < HW; ++i) d[(n * C + c) * HW + i] = xs[(n * C + c) * HW + i] * as[n * HW + i];
  });
  record(y, "gate_spatial", {x, alpha}, [x, alpha, N, C, HW](TensorImpl& out) {
    dispatch(x.dtype(), [&]<class T>(T) {
      auto dy = out_grad<T>(out);
      auto xs = x.data<T>();
      auto as = alpha.data<T>();
      const bool gx = wants_grad(x.impl());
      const bool ga = wants_grad(alpha.impl());
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t i = 0; i < HW; ++i) {
            const auto k = (n * C + c) * HW + i;
            if (gx) grad_of<T>(*x.impl())[k] += dy[k] * as[n * HW + i];
            if (ga) grad_of<T>(*alpha.impl())[n * HW + i] += dy[k] * xs[k];
          }
    });
  });
  return y;
}

}  // namespace sfl
