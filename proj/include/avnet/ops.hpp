// Layer primitives over NCHW tensors: convolution (with dilation), pooling,
// upsampling, batch normalization, dropout, channel concatenation, the
// softmax head and the class-weighted cross-entropy loss.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "avnet/labels.hpp"
#include "avnet/tensor.hpp"

namespace avnet {

enum class Mode { Train, Eval };

namespace detail {

inline void require_rank4(const Shape& s, std::string_view op) {
  if (s.size() != 4) {
    throw ShapeError(std::string(op) + ": expected an NCHW tensor, got " +
                     shape_string(s));
  }
}

// C[m x n] += A[m x k] * B[k x n]. A is addressed through explicit row and
// column strides so transposed operands need no copy; B and C are row-major.
// Each C element accumulates its k products in ascending order.
template <typename T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, const T* a,
                     std::size_t a_rs, std::size_t a_cs, const T* b,
                     std::size_t ldb, T* c, std::size_t ldc) {
  constexpr std::size_t kTile = 256;
  for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
    const std::size_t jn = std::min(kTile, n - j0);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      T* __restrict c0 = c + (i + 0) * ldc + j0;
      T* __restrict c1 = c + (i + 1) * ldc + j0;
      T* __restrict c2 = c + (i + 2) * ldc + j0;
      T* __restrict c3 = c + (i + 3) * ldc + j0;
      for (std::size_t l = 0; l < k; ++l) {
        const T a0 = a[(i + 0) * a_rs + l * a_cs];
        const T a1 = a[(i + 1) * a_rs + l * a_cs];
        const T a2 = a[(i + 2) * a_rs + l * a_cs];
        const T a3 = a[(i + 3) * a_rs + l * a_cs];
        const T* __restrict bl = b + l * ldb + j0;
        for (std::size_t j = 0; j < jn; ++j) {
          const T bv = bl[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      T* __restrict ci = c + i * ldc + j0;
      for (std::size_t l = 0; l < k; ++l) {
        const T ai = a[i * a_rs + l * a_cs];
        const T* __restrict bl = b + l * ldb + j0;
        for (std::size_t j = 0; j < jn; ++j) ci[j] += ai * bl[j];
      }
    }
  }
}

}  // namespace detail

struct Conv2dSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  // Stride-1 padding that preserves spatial size for odd kernels.
  static Conv2dSpec same(std::size_t in, std::size_t out, std::size_t kh,
                         std::size_t kw, std::size_t dilation = 1) {
    if (kh % 2 == 0 || kw % 2 == 0) {
      throw std::invalid_argument("same padding needs odd kernel sizes");
    }
    return Conv2dSpec{in, out, kh, kw, 1, dilation, dilation * (kh - 1) / 2,
                      dilation * (kw - 1) / 2};
  }

  std::size_t extent_h() const { return dilation * (kernel_h - 1) + 1; }
  std::size_t extent_w() const { return dilation * (kernel_w - 1) + 1; }

  static std::size_t output_size(std::size_t in, std::size_t pad,
                                 std::size_t extent, std::size_t stride) {
    const auto span = static_cast<long long>(in + 2 * pad) -
                      static_cast<long long>(extent);
    if (span < 0 || stride == 0) {
      throw ShapeError("conv2d: kernel extent " + std::to_string(extent) +
                       " exceeds padded input extent " +
                       std::to_string(in + 2 * pad));
    }
    return static_cast<std::size_t>(span) / stride + 1;
  }

  std::size_t out_h(std::size_t in_h) const {
    return output_size(in_h, pad_h, extent_h(), stride);
  }
  std::size_t out_w(std::size_t in_w) const {
    return output_size(in_w, pad_w, extent_w(), stride);
  }

  std::size_t weight_count() const {
    return out_channels * in_channels * kernel_h * kernel_w;
  }
};

namespace detail {

// Unfolds one image [C,H,W] into columns [C*kh*kw, Ho*Wo]; taps that fall
// in the padding read as zero.
template <typename T>
void im2col(const T* img, std::size_t height, std::size_t width,
            const Conv2dSpec& s, std::size_t out_h, std::size_t out_w, T* cols) {
  const std::size_t plane = out_h * out_w;
  std::size_t row = 0;
  for (std::size_t c = 0; c < s.in_channels; ++c) {
    const T* src = img + c * height * width;
    for (std::size_t i = 0; i < s.kernel_h; ++i) {
      for (std::size_t j = 0; j < s.kernel_w; ++j, ++row) {
        T* dst = cols + row * plane;
        for (std::size_t y = 0; y < out_h; ++y) {
          const long long iy = static_cast<long long>(y * s.stride + i * s.dilation) -
                               static_cast<long long>(s.pad_h);
          T* out_row = dst + y * out_w;
          if (iy < 0 || iy >= static_cast<long long>(height)) {
            std::fill(out_row, out_row + out_w, T(0));
            continue;
          }
          const T* src_row = src + static_cast<std::size_t>(iy) * width;
          for (std::size_t x = 0; x < out_w; ++x) {
            const long long ix = static_cast<long long>(x * s.stride + j * s.dilation) -
                                 static_cast<long long>(s.pad_w);
            out_row[x] = (ix < 0 || ix >= static_cast<long long>(width))
                             ? T(0)
                             : src_row[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto the image.
template <typename T>
void col2im_add(const T* cols, std::size_t height, std::size_t width,
                const Conv2dSpec& s, std::size_t out_h, std::size_t out_w, T* img) {
  const std::size_t plane = out_h * out_w;
  std::size_t row = 0;
  for (std::size_t c = 0; c < s.in_channels; ++c) {
    T* dst = img + c * height * width;
    for (std::size_t i = 0; i < s.kernel_h; ++i) {
      for (std::size_t j = 0; j < s.kernel_w; ++j, ++row) {
        const T* src = cols + row * plane;
        for (std::size_t y = 0; y < out_h; ++y) {
          const long long iy = static_cast<long long>(y * s.stride + i * s.dilation) -
                               static_cast<long long>(s.pad_h);
          if (iy < 0 || iy >= static_cast<long long>(height)) continue;
          T* dst_row = dst + static_cast<std::size_t>(iy) * width;
          const T* src_row = src + y * out_w;
          for (std::size_t x = 0; x < out_w; ++x) {
            const long long ix = static_cast<long long>(x * s.stride + j * s.dilation) -
                                 static_cast<long long>(s.pad_w);
            if (ix < 0 || ix >= static_cast<long long>(width)) continue;
            dst_row[ix] += src_row[x];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const Conv2dSpec& s) {
  return s.kernel_h == 1 && s.kernel_w == 1 && s.stride == 1 && s.pad_h == 0 &&
         s.pad_w == 0;
}

}  // namespace detail

// out[n,o,y,x] = bias[o] + sum_{c,i,j} in[n,c,y*s+i*d-ph, x*s+j*d-pw] * w[o,c,i,j]
// `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, const Conv2dSpec& spec) {
  detail::require_rank4(input.shape(), "conv2d");
  const Shape expected_w{spec.out_channels, spec.in_channels, spec.kernel_h,
                         spec.kernel_w};
  if (weight.shape() != expected_w) {
    throw ShapeError("conv2d: weight shape " + shape_string(weight.shape()) +
                     " does not match spec " + shape_string(expected_w));
  }
  if (input.dim(1) != spec.in_channels) {
    throw ShapeError("conv2d: input " + shape_string(input.shape()) + " has " +
                     std::to_string(input.dim(1)) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (bias.defined() && bias.shape() != Shape{spec.out_channels}) {
    throw ShapeError("conv2d: bias shape " + shape_string(bias.shape()) +
                     " does not match " + std::to_string(spec.out_channels) +
                     " output channels");
  }
  if (spec.stride == 0 || spec.dilation == 0) {
    throw ShapeError("conv2d: stride and dilation must be positive");
  }
  const std::size_t batch = input.dim(0);
  const std::size_t height = input.dim(2);
  const std::size_t width = input.dim(3);
  const std::size_t out_h = spec.out_h(height);
  const std::size_t out_w = spec.out_w(width);
  const std::size_t plane = out_h * out_w;
  const std::size_t patch = spec.in_channels * spec.kernel_h * spec.kernel_w;
  const std::size_t in_stride = spec.in_channels * height * width;
  const std::size_t out_stride = spec.out_channels * plane;
  const bool pointwise = detail::is_pointwise(spec);

  std::vector<T> out(batch * out_stride, T(0));
  std::vector<T> cols(pointwise ? 0 : patch * plane);
  const T* x = input.values().data();
  const T* w = weight.values().data();
  for (std::size_t n = 0; n < batch; ++n) {
    const T* col_ptr = x + n * in_stride;
    if (!pointwise) {
      detail::im2col(x + n * in_stride, height, width, spec, out_h, out_w,
                     cols.data());
      col_ptr = cols.data();
    }
    T* y = out.data() + n * out_stride;
    detail::gemm_accumulate(spec.out_channels, plane, patch, w, patch,
                            std::size_t{1}, col_ptr, plane, y, plane);
    if (bias.defined()) {
      for (std::size_t o = 0; o < spec.out_channels; ++o) {
        const T b = bias[o];
        T* yo = y + o * plane;
        for (std::size_t p = 0; p < plane; ++p) yo[p] = b + yo[p];
      }
    }
  }

  auto xn = detail::node_of(input);
  auto wn = detail::node_of(weight);
  detail::NodePtr<T> bn = bias.defined() ? detail::node_of(bias) : nullptr;
  Shape out_shape{batch, spec.out_channels, out_h, out_w};
  std::vector<Tensor<T>> operands{input, weight};
  if (bias.defined()) operands.push_back(bias);
  return make_op_result<T>(
      "conv2d", std::move(out_shape), std::move(out), operands,
      [=](const std::vector<T>& g) {
        T* gx = detail::grad_sink(xn);
        T* gw = detail::grad_sink(wn);
        T* gb = detail::grad_sink(bn);
        std::vector<T> col_buf(pointwise ? 0 : patch * plane);
        std::vector<T> cols_t(gw ? plane * patch : 0);
        std::vector<T> dcols(gx && !pointwise ? patch * plane : 0);
        for (std::size_t n = 0; n < batch; ++n) {
          const T* gy = g.data() + n * out_stride;
          if (gb) {
            for (std::size_t o = 0; o < spec.out_channels; ++o) {
              T acc = T(0);
              for (std::size_t p = 0; p < plane; ++p) acc += gy[o * plane + p];
              gb[o] += acc;
            }
          }
          if (gw) {
            const T* col_ptr = xn->data.data() + n * in_stride;
            if (!pointwise) {
              detail::im2col(col_ptr, height, width, spec, out_h, out_w,
                             col_buf.data());
              col_ptr = col_buf.data();
            }
            for (std::size_t r = 0; r < patch; ++r) {
              for (std::size_t p = 0; p < plane; ++p) {
                cols_t[p * patch + r] = col_ptr[r * plane + p];
              }
            }
            detail::gemm_accumulate(spec.out_channels, patch, plane, gy, plane,
                                    std::size_t{1}, cols_t.data(), patch, gw, patch);
          }
          if (gx) {
            const T* wdata = wn->data.data();
            if (pointwise) {
              detail::gemm_accumulate(patch, plane, spec.out_channels, wdata,
                                      std::size_t{1}, patch, gy, plane,
                                      gx + n * in_stride, plane);
            } else {
              std::fill(dcols.begin(), dcols.end(), T(0));
              detail::gemm_accumulate(patch, plane, spec.out_channels, wdata,
                                      std::size_t{1}, patch, gy, plane,
                                      dcols.data(), plane);
              detail::col2im_add(dcols.data(), height, width, spec, out_h, out_w,
                                 gx + n * in_stride);
            }
          }
        }
      });
}

struct PoolSpec {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t pad = 0;
};

// Max pooling; padded taps never win. Ties go to the first element in
// row-major scan order, which also receives the gradient.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, PoolSpec spec = {}) {
  detail::require_rank4(input.shape(), "maxpool2d");
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t height = input.dim(2), width = input.dim(3);
  if (spec.kernel == 0 || spec.stride == 0 || spec.pad >= spec.kernel) {
    throw ShapeError("maxpool2d: invalid kernel/stride/pad");
  }
  if (height + 2 * spec.pad < spec.kernel || width + 2 * spec.pad < spec.kernel) {
    throw ShapeError("maxpool2d: input " + shape_string(input.shape()) +
                     " smaller than kernel " + std::to_string(spec.kernel));
  }
  const std::size_t out_h = (height + 2 * spec.pad - spec.kernel) / spec.stride + 1;
  const std::size_t out_w = (width + 2 * spec.pad - spec.kernel) / spec.stride + 1;
  std::vector<T> out(batch * channels * out_h * out_w);
  std::vector<std::size_t> argmax(out.size());
  const auto& x = input.values();
  std::size_t k = 0;
  for (std::size_t nc = 0; nc < batch * channels; ++nc) {
    const std::size_t base = nc * height * width;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox, ++k) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = std::numeric_limits<std::size_t>::max();
        for (std::size_t i = 0; i < spec.kernel; ++i) {
          const long long iy = static_cast<long long>(oy * spec.stride + i) -
                               static_cast<long long>(spec.pad);
          if (iy < 0 || iy >= static_cast<long long>(height)) continue;
          for (std::size_t j = 0; j < spec.kernel; ++j) {
            const long long ix = static_cast<long long>(ox * spec.stride + j) -
                                 static_cast<long long>(spec.pad);
            if (ix < 0 || ix >= static_cast<long long>(width)) continue;
            const std::size_t idx = base + static_cast<std::size_t>(iy) * width +
                                    static_cast<std::size_t>(ix);
            if (best_idx == std::numeric_limits<std::size_t>::max() || x[idx] > best) {
              best = x[idx];
              best_idx = idx;
            }
          }
        }
        out[k] = best;
        argmax[k] = best_idx;
      }
    }
  }
  auto xn = detail::node_of(input);
  return make_op_result<T>(
      "maxpool2d", Shape{batch, channels, out_h, out_w}, std::move(out), {&input},
      [xn, argmax = std::move(argmax)](const std::vector<T>& g) {
        T* gx = detail::grad_sink(xn);
        if (!gx) return;
        for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
      });
}

// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input) {
  detail::require_rank4(input.shape(), "upsample_nearest2x");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t height = input.dim(2), width = input.dim(3);
  const std::size_t out_w = 2 * width;
  std::vector<T> out(planes * 4 * height * width);
  const auto& x = input.values();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * height * width;
    T* dst = out.data() + p * 4 * height * width;
    for (std::size_t y = 0; y < 2 * height; ++y) {
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        dst[y * out_w + xx] = src[(y / 2) * width + xx / 2];
      }
    }
  }
  auto xn = detail::node_of(input);
  return make_op_result<T>(
      "upsample_nearest2x",
      Shape{input.dim(0), input.dim(1), 2 * height, 2 * width}, std::move(out),
      {&input}, [xn, planes, height, width](const std::vector<T>& g) {
        T* gx = detail::grad_sink(xn);
        if (!gx) return;
        const std::size_t ow = 2 * width;
        for (std::size_t p = 0; p < planes; ++p) {
          const T* src = g.data() + p * 4 * height * width;
          T* dst = gx + p * height * width;
          for (std::size_t y = 0; y < 2 * height; ++y) {
            for (std::size_t xx = 0; xx < ow; ++xx) {
              dst[(y / 2) * width + xx / 2] += src[y * ow + xx];
            }
          }
        }
      });
}

template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  Mode mode = Mode::Train;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : gamma(Tensor<T>::full({channels}, T(1), true)),
        beta(Tensor<T>::zeros({channels}, true)),
        running_mean(channels, T(0)),
        running_var(channels, T(1)) {}

  std::size_t channels() const { return running_mean.size(); }
};

// Per-channel normalization over (N, H, W). Train mode uses batch moments
// and folds them into the running estimates (unbiased variance); eval mode
// uses the running estimates only.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, BatchNormState<T>& state) {
  detail::require_rank4(input.shape(), "batchnorm2d");
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  if (channels != state.channels()) {
    throw ShapeError("batchnorm2d: input has " + std::to_string(channels) +
                     " channels, state has " + std::to_string(state.channels()));
  }
  const std::size_t count = batch * plane;
  const bool train = state.mode == Mode::Train;
  if (train && count < 2) {
    throw std::invalid_argument(
        "batchnorm2d: train mode needs at least two values per channel");
  }
  const auto& x = input.values();
  const auto& gamma = state.gamma.values();
  const auto& beta = state.beta.values();
  std::vector<T> mean(channels), inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (train) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = x.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = x.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          v += d * d;
        }
      }
      const double var = v / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + state.epsilon));
      const double unbiased = v / static_cast<double>(count - 1);
      state.running_mean[c] = static_cast<T>(
          (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu);
      state.running_var[c] = static_cast<T>(
          (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
    } else {
      mean[c] = state.running_mean[c];
      inv_std[c] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + state.epsilon));
    }
  }
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T h = (x[off + i] - mean[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = h * gamma[c] + beta[c];
      }
    }
  }
  auto xn = detail::node_of(input);
  auto gn = detail::node_of(state.gamma);
  auto bn = detail::node_of(state.beta);
  return make_op_result<T>(
      train ? "batchnorm2d_train" : "batchnorm2d_eval", input.shape(),
      std::move(out), {&input, &state.gamma, &state.beta},
      [=, xhat = std::move(xhat)](const std::vector<T>& g) {
        T* gx = detail::grad_sink(xn);
        T* ggamma = detail::grad_sink(gn);
        T* gbeta = detail::grad_sink(bn);
        const auto& gam = gn->data;
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_g = 0.0, sum_gh = 0.0;
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g += g[off + i];
              sum_gh += static_cast<double>(g[off + i]) * xhat[off + i];
            }
          }
          if (ggamma) ggamma[c] += static_cast<T>(sum_gh);
          if (gbeta) gbeta[c] += static_cast<T>(sum_g);
          if (!gx) continue;
          const double scale = static_cast<double>(gam[c]) * inv_std[c];
          const double m = static_cast<double>(count);
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              if (train) {
                gx[off + i] += static_cast<T>(
                    scale * (g[off + i] - sum_g / m - xhat[off + i] * sum_gh / m));
              } else {
                gx[off + i] += static_cast<T>(scale * g[off + i]);
              }
            }
          }
        }
      });
}

// Inverted dropout: survivors are scaled by 1/(1-rate) so eval mode is the
// identity. The mask is a pure function of `seed`.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double rate, Mode mode,
                  std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must be in [0, 1), got " +
                                std::to_string(rate));
  }
  if (mode == Mode::Eval || rate == 0.0) return input;
  std::mt19937_64 rng(seed);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(input.numel());
  for (auto& m : mask) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u < rate ? T(0) : scale;
  }
  std::vector<T> out(input.numel());
  const auto& x = input.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  auto xn = detail::node_of(input);
  return make_op_result<T>("dropout", input.shape(), std::move(out), {&input},
                           [xn, mask = std::move(mask)](const std::vector<T>& g) {
                             T* gx = detail::grad_sink(xn);
                             if (!gx) return;
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                           });
}

// Concatenates along the channel axis in argument order.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& t : inputs) detail::require_rank4(t.shape(), "concat_channels");
  const Shape& first = inputs.front().shape();
  std::size_t channels = 0;
  for (const auto& t : inputs) {
    const Shape& s = t.shape();
    if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
      throw ShapeError("concat_channels: " + shape_string(s) +
                       " does not match " + shape_string(first) +
                       " outside the channel axis");
    }
    channels += s[1];
  }
  if (inputs.size() == 1) return inputs.front();
  const std::size_t batch = first[0], plane = first[2] * first[3];
  std::vector<T> out(batch * channels * plane);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : inputs) {
    offsets.push_back(off);
    const std::size_t c = t.dim(1);
    const auto& x = t.values();
    for (std::size_t n = 0; n < batch; ++n) {
      std::copy_n(x.data() + n * c * plane, c * plane,
                  out.data() + (n * channels + off) * plane);
    }
    off += c;
  }
  std::vector<detail::NodePtr<T>> nodes;
  for (const auto& t : inputs) nodes.push_back(detail::node_of(t));
  return make_op_result<T>(
      "concat_channels", Shape{batch, channels, first[2], first[3]}, std::move(out),
      inputs, [=](const std::vector<T>& g) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          T* gx = detail::grad_sink(nodes[k]);
          if (!gx) continue;
          const std::size_t c = nodes[k]->shape[1];
          for (std::size_t n = 0; n < batch; ++n) {
            const T* src = g.data() + (n * channels + offsets[k]) * plane;
            T* dst = gx + n * c * plane;
            for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
          }
        }
      });
}

// Per-pixel softmax over the channel axis, with max subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& input) {
  detail::require_rank4(input.shape(), "softmax_channels");
  const std::size_t batch = input.dim(0), k = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  if (k < 2) throw ShapeError("softmax_channels: needs at least two channels");
  const auto& x = input.values();
  std::vector<T> out(x.size());
  for (std::size_t n = 0; n < batch; ++n) {
    const std::size_t base = n * k * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T mx = x[base + p];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, x[base + c * plane + p]);
      T total = T(0);
      for (std::size_t c = 0; c < k; ++c) {
        const T e = std::exp(x[base + c * plane + p] - mx);
        out[base + c * plane + p] = e;
        total += e;
      }
      for (std::size_t c = 0; c < k; ++c) out[base + c * plane + p] /= total;
    }
  }
  auto xn = detail::node_of(input);
  std::vector<T> probs = out;
  return make_op_result<T>(
      "softmax_channels", input.shape(), std::move(out), {&input},
      [xn, probs = std::move(probs), batch, k, plane](const std::vector<T>& g) {
        T* gx = detail::grad_sink(xn);
        if (!gx) return;
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t base = n * k * plane;
          for (std::size_t p = 0; p < plane; ++p) {
            T dot = T(0);
            for (std::size_t c = 0; c < k; ++c) {
              dot += g[base + c * plane + p] * probs[base + c * plane + p];
            }
            for (std::size_t c = 0; c < k; ++c) {
              const std::size_t i = base + c * plane + p;
              gx[i] += probs[i] * (g[i] - dot);
            }
          }
        }
      });
}

inline constexpr double kProbabilityFloor = 1e-12;

// sum_p w_p * -log(max(prob[target_p], floor)) / sum_p w_p over pixels whose
// target is not kIgnore. The weight map is treated as a constant.
template <typename T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& probs, const ClassMap& target,
                                 const Tensor<T>& weight_map) {
  detail::require_rank4(probs.shape(), "weighted_cross_entropy");
  const std::size_t batch = probs.dim(0), k = probs.dim(1);
  const std::size_t height = probs.dim(2), width = probs.dim(3);
  const std::size_t plane = height * width;
  if (target.batch != batch || target.height != height || target.width != width) {
    throw ShapeError("weighted_cross_entropy: target map " +
                     shape_string({target.batch, target.height, target.width}) +
                     " does not match probabilities " + shape_string(probs.shape()));
  }
  if (weight_map.shape() != Shape{batch, 1, height, width}) {
    throw ShapeError("weighted_cross_entropy: weight map " +
                     shape_string(weight_map.shape()) + " must be " +
                     shape_string({batch, 1, height, width}));
  }
  const auto& p = probs.values();
  const auto& w = weight_map.values();
  double weighted = 0.0, total_weight = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::uint8_t t = target.labels[n * plane + i];
      if (t == kIgnore) continue;
      if (t >= k) {
        throw std::invalid_argument("weighted_cross_entropy: label " +
                                    std::to_string(t) + " outside " +
                                    std::to_string(k) + " classes");
      }
      const double wi = w[n * plane + i];
      if (wi < 0.0) throw std::invalid_argument("weighted_cross_entropy: negative weight");
      if (wi == 0.0) continue;
      const double pt = std::max<double>(p[(n * k + t) * plane + i], kProbabilityFloor);
      weighted += wi * -std::log(pt);
      total_weight += wi;
    }
  }
  if (total_weight <= 0.0) {
    throw std::invalid_argument(
        "weighted_cross_entropy: no pixel carries positive weight");
  }
  auto pn = detail::node_of(probs);
  const double inv_total = 1.0 / total_weight;
  return make_op_result<T>(
      "weighted_cross_entropy", Shape{},
      std::vector<T>{static_cast<T>(weighted * inv_total)}, {&probs},
      [pn, target, w = weight_map.values(), batch, k, plane,
       inv_total](const std::vector<T>& g) {
        T* gp = detail::grad_sink(pn);
        if (!gp) return;
        const auto& pv = pn->data;
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t i = 0; i < plane; ++i) {
            const std::uint8_t t = target.labels[n * plane + i];
            if (t == kIgnore || w[n * plane + i] == T(0)) continue;
            const std::size_t idx = (n * k + t) * plane + i;
            if (pv[idx] < static_cast<T>(kProbabilityFloor)) continue;
            gp[idx] -= static_cast<T>(g[0] * w[n * plane + i] * inv_total / pv[idx]);
          }
        }
      });
}

}  // namespace avnet
