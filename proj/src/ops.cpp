/*
 * renalseg: cascaded 3D U-Net segmentation of 4D DCE volumes
 *
 * Copyright 2026 The renalseg Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "renalseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>

#include "renalseg/parallel.hpp"

namespace renalseg::ops {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

template <typename T>
void require_rank4(const BasicTensor<T>& t, const char* op, const char* name) {
  require(t.rank() == 4, std::string(op) + ": " + name + " must be [C,D,H,W], got " + shape_string(t.dims()));
}

// Zero-padded copy [C, D+2, H+2, W+2] so every 3x3x3 tap is a plain offset.
template <typename T>
std::vector<T> pad_volume(const T* in, std::size_t C, std::size_t D, std::size_t H, std::size_t W) {
  const std::size_t pd = D + 2, ph = H + 2, pw = W + 2;
  std::vector<T> p(C * pd * ph * pw, T{0});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        std::memcpy(p.data() + ((c * pd + z + 1) * ph + y + 1) * pw + 1, in + ((c * D + z) * H + y) * W,
                    W * sizeof(T));
  return p;
}

struct Geometry {
  std::size_t cin, cout, D, H, W;
  std::size_t ph() const { return H + 2; }
  std::size_t pw() const { return W + 2; }
  std::size_t pd() const { return D + 2; }
};

template <typename T>
struct Lanes {
  static constexpr int count = static_cast<int>(32 / sizeof(T));
  typedef T vec __attribute__((vector_size(32)));
  static vec load(const T* p) {
    vec v;
    std::memcpy(&v, p, sizeof(vec));
    return v;
  }
};

// Output rows y of plane z, channels [o0, o0+OB), columns [x0, x0+XB).
// Accumulators are small fixed-size arrays so the compiler keeps them in registers.
template <int OB, int XB, typename T>
void conv_tile(const Geometry& g, const T* padded, const T* kernel, const T* bias, std::size_t o0, std::size_t z,
               std::size_t y, std::size_t x0, T* out) {
  T acc[OB][XB];
  for (int o = 0; o < OB; ++o)
    for (int x = 0; x < XB; ++x) acc[o][x] = bias ? bias[o0 + o] : T{0};
  const std::size_t kstride = g.cin * 27;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        const T* r = padded + ((c * g.pd() + z + i) * g.ph() + y + j) * g.pw() + x0;
        const T* wp = kernel + o0 * kstride + c * 27 + i * 9 + j * 3;
#pragma GCC unroll 3
        for (int k = 0; k < 3; ++k) {
#pragma GCC unroll 8
          for (int o = 0; o < OB; ++o) {
            const T wv = wp[static_cast<std::size_t>(o) * kstride + static_cast<std::size_t>(k)];
#pragma GCC unroll 32
            for (int x = 0; x < XB; ++x) acc[o][x] += wv * r[x + k];
          }
        }
      }
  }
  const std::size_t plane = g.H * g.W, volume = g.D * plane;
  for (int o = 0; o < OB; ++o) {
    T* dst = out + (o0 + static_cast<std::size_t>(o)) * volume + z * plane + y * g.W + x0;
    for (int x = 0; x < XB; ++x) dst[x] = acc[o][x];
  }
}

template <int OB, int V, typename T>
void conv_tile_vec(const Geometry& g, const T* padded, const T* kernel, const T* bias, std::size_t o0, std::size_t z,
                   std::size_t y, std::size_t x0, T* out) {
  using L = Lanes<T>;
  using vec = typename L::vec;
  vec acc[OB][V];
  for (int o = 0; o < OB; ++o) {
    const T b = bias ? bias[o0 + static_cast<std::size_t>(o)] : T{0};
    for (int v = 0; v < V; ++v) acc[o][v] = vec{} + b;
  }
  const std::size_t kstride = g.cin * 27;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        const T* r = padded + ((c * g.pd() + z + i) * g.ph() + y + j) * g.pw() + x0;
        const T* wp = kernel + o0 * kstride + c * 27 + i * 9 + j * 3;
        for (int k = 0; k < 3; ++k) {
          vec rv[V];
          for (int v = 0; v < V; ++v) rv[v] = L::load(r + v * L::count + k);
          for (int o = 0; o < OB; ++o) {
            const T wv = wp[static_cast<std::size_t>(o) * kstride + static_cast<std::size_t>(k)];
            for (int v = 0; v < V; ++v) acc[o][v] += wv * rv[v];
          }
        }
      }
  const std::size_t plane = g.H * g.W, volume = g.D * plane;
  for (int o = 0; o < OB; ++o) {
    T* dst = out + (o0 + static_cast<std::size_t>(o)) * volume + z * plane + y * g.W + x0;
    for (int v = 0; v < V; ++v) std::memcpy(dst + v * L::count, &acc[o][v], sizeof(vec));
  }
}

template <int OB, int V, typename T>
void conv_row(const Geometry& g, const T* padded, const T* kernel, const T* bias, std::size_t o0, std::size_t z,
              std::size_t y, T* out) {
  constexpr auto lanes = static_cast<std::size_t>(Lanes<T>::count);
  std::size_t x = 0;
  for (; x + V * lanes <= g.W; x += V * lanes) conv_tile_vec<OB, V>(g, padded, kernel, bias, o0, z, y, x, out);
  for (; x + lanes <= g.W; x += lanes) conv_tile_vec<OB, 1>(g, padded, kernel, bias, o0, z, y, x, out);
  for (; x < g.W; ++x) conv_tile<OB, 1>(g, padded, kernel, bias, o0, z, y, x, out);
}

// Same-padded 3x3x3 correlation from a padded input; `bias` may be null.
template <typename T>
void conv3d_direct(const Geometry& g, const T* padded, const T* kernel, const T* bias, T* out) {
  parallel_for(g.D, [&](std::size_t z_begin, std::size_t z_end, std::size_t) {
    for (std::size_t z = z_begin; z < z_end; ++z)
      for (std::size_t y = 0; y < g.H; ++y) {
        std::size_t o = 0;
        for (; o + 8 <= g.cout; o += 8) conv_row<8, 2>(g, padded, kernel, bias, o, z, y, out);
        for (; o + 4 <= g.cout; o += 4) conv_row<4, 4>(g, padded, kernel, bias, o, z, y, out);
        for (; o + 2 <= g.cout; o += 2) conv_row<2, 4>(g, padded, kernel, bias, o, z, y, out);
        for (; o < g.cout; ++o) conv_row<1, 4>(g, padded, kernel, bias, o, z, y, out);
      }
  });
}

// Kernel gradient for channels [o0, o0+OB), input channel c, taps (i, j, *),
// summed over output planes [z0, z1): dK[o,c,i,j,k] += sum grad[o,z,y,x] * padded[c,z+i,y+j,x+k].
// XB columns starting at x0; XB is either 1 (scalar tail) or V vectors wide.
template <int OB, int V, typename T>
void kernel_grad_tile_vec(const Geometry& g, const T* padded, const T* grad, std::size_t o0, std::size_t c,
                          std::size_t i, std::size_t j, std::size_t z0, std::size_t z1, std::size_t x0, T* dk) {
  using L = Lanes<T>;
  typename L::vec acc[OB][3][V];
  for (int o = 0; o < OB; ++o)
    for (int k = 0; k < 3; ++k)
      for (int v = 0; v < V; ++v) acc[o][k][v] = typename L::vec{} ;
  const std::size_t plane = g.H * g.W, volume = g.D * plane;
  for (std::size_t z = z0; z < z1; ++z)
    for (std::size_t y = 0; y < g.H; ++y) {
      const T* r = padded + ((c * g.pd() + z + i) * g.ph() + y + j) * g.pw() + x0;
      const T* gr = grad + o0 * volume + z * plane + y * g.W + x0;
      for (int v = 0; v < V; ++v) {
        const typename L::vec r0 = L::load(r + v * L::count);
        const typename L::vec r1 = L::load(r + v * L::count + 1);
        const typename L::vec r2 = L::load(r + v * L::count + 2);
        for (int o = 0; o < OB; ++o) {
          const typename L::vec go = L::load(gr + static_cast<std::size_t>(o) * volume + v * L::count);
          acc[o][0][v] += go * r0;
          acc[o][1][v] += go * r1;
          acc[o][2][v] += go * r2;
        }
      }
    }
  const std::size_t kstride = g.cin * 27;
  for (int o = 0; o < OB; ++o)
    for (int k = 0; k < 3; ++k) {
      T s{0};
      for (int v = 0; v < V; ++v)
        for (int l = 0; l < L::count; ++l) s += acc[o][k][v][l];
      dk[(o0 + static_cast<std::size_t>(o)) * kstride + c * 27 + i * 9 + j * 3 + static_cast<std::size_t>(k)] += s;
    }
}

template <int OB, typename T>
void kernel_grad_tile_scalar(const Geometry& g, const T* padded, const T* grad, std::size_t o0, std::size_t c,
                             std::size_t i, std::size_t j, std::size_t z0, std::size_t z1, std::size_t x0,
                             std::size_t x1, T* dk) {
  T acc[OB][3] = {};
  const std::size_t plane = g.H * g.W, volume = g.D * plane;
  for (std::size_t z = z0; z < z1; ++z)
    for (std::size_t y = 0; y < g.H; ++y) {
      const T* r = padded + ((c * g.pd() + z + i) * g.ph() + y + j) * g.pw();
      const T* gr = grad + o0 * volume + z * plane + y * g.W;
      for (int o = 0; o < OB; ++o)
        for (std::size_t x = x0; x < x1; ++x) {
          const T go = gr[static_cast<std::size_t>(o) * volume + x];
          acc[o][0] += go * r[x];
          acc[o][1] += go * r[x + 1];
          acc[o][2] += go * r[x + 2];
        }
    }
  const std::size_t kstride = g.cin * 27;
  for (int o = 0; o < OB; ++o)
    for (int k = 0; k < 3; ++k)
      dk[(o0 + static_cast<std::size_t>(o)) * kstride + c * 27 + i * 9 + j * 3 + static_cast<std::size_t>(k)] +=
          acc[o][k];
}

template <int OB, typename T>
void kernel_grad_cols(const Geometry& g, const T* padded, const T* grad, std::size_t o0, std::size_t c, std::size_t i,
                      std::size_t j, std::size_t z0, std::size_t z1, T* dk) {
  constexpr auto lanes = static_cast<std::size_t>(Lanes<T>::count);
  std::size_t x = 0;
  for (; x + 4 * lanes <= g.W; x += 4 * lanes) kernel_grad_tile_vec<OB, 4>(g, padded, grad, o0, c, i, j, z0, z1, x, dk);
  for (; x + lanes <= g.W; x += lanes) kernel_grad_tile_vec<OB, 1>(g, padded, grad, o0, c, i, j, z0, z1, x, dk);
  if (x < g.W) kernel_grad_tile_scalar<OB>(g, padded, grad, o0, c, i, j, z0, z1, x, g.W, dk);
}


template <typename T>
void check_conv_args(const BasicTensor<T>& input, const BasicTensor<T>& kernel, std::size_t ksize, bool transposed,
                     const char* op) {
  require_rank4(input, op, "input");
  require(kernel.rank() == 5 && kernel.dim(2) == ksize && kernel.dim(3) == ksize && kernel.dim(4) == ksize,
          std::string(op) + ": kernel must be 5-D with " + std::to_string(ksize) + "^3 taps, got " +
              shape_string(kernel.dims()));
  const std::size_t kin = transposed ? kernel.dim(0) : kernel.dim(1);
  require(kin == input.dim(0), std::string(op) + ": kernel expects " + std::to_string(kin) +
                                   " input channels but input has " + std::to_string(input.dim(0)));
}

template <typename T>
void check_bias(const BasicTensor<T>& bias, std::size_t out_channels, const char* op) {
  require(bias.rank() == 1 && bias.dim(0) == out_channels,
          std::string(op) + ": bias must be [" + std::to_string(out_channels) + "], got " + shape_string(bias.dims()));
}

template <typename T>
void add_bias(BasicTensor<T>& out, const BasicTensor<T>& bias) {
  const std::size_t n = out.size() / std::max<std::size_t>(out.dim(0), 1);
  for (std::size_t o = 0; o < out.dim(0); ++o) {
    T* p = out.data() + o * n;
    const T b = bias[o];
    for (std::size_t i = 0; i < n; ++i) p[i] += b;
  }
}

template <typename T>
BasicTensor<T> channel_sums(const BasicTensor<T>& grad) {
  BasicTensor<T> sums({grad.dim(0)});
  const std::size_t n = grad.size() / std::max<std::size_t>(grad.dim(0), 1);
  for (std::size_t o = 0; o < grad.dim(0); ++o) {
    const T* p = grad.data() + o * n;
    T acc{0};
    for (std::size_t i = 0; i < n; ++i) acc += p[i];
    sums[o] = acc;
  }
  return sums;
}

}  // namespace

// ---------------------------------------------------------------- conv3d

template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias) {
  check_conv_args(input, kernel, 3, false, "conv3d");
  const Geometry g{input.dim(0), kernel.dim(0), input.dim(1), input.dim(2), input.dim(3)};
  check_bias(bias, g.cout, "conv3d");
  require(g.D >= 1 && g.H >= 1 && g.W >= 1, "conv3d: spatial dims must be >= 1");
  BasicTensor<T> out({g.cout, g.D, g.H, g.W});
  const std::vector<T> padded = pad_volume(input.data(), g.cin, g.D, g.H, g.W);
  conv3d_direct(g, padded.data(), kernel.data(), bias.data(), out.data());
  return out;
}

template <typename T>
ConvGrads<T> conv3d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_out, bool want_input_grad) {
  check_conv_args(input, kernel, 3, false, "conv3d_backward");
  const Geometry g{input.dim(0), kernel.dim(0), input.dim(1), input.dim(2), input.dim(3)};
  require(grad_out.dims() == Shape({g.cout, g.D, g.H, g.W}),
          "conv3d_backward: grad_out dims " + shape_string(grad_out.dims()) + " do not match output");
  ConvGrads<T> grads;

  if (want_input_grad) {
    // The input gradient is a same-padded correlation of grad_out with the
    // spatially flipped, channel-transposed kernel.
    std::vector<T> flipped(kernel.size());
    for (std::size_t o = 0; o < g.cout; ++o)
      for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t t = 0; t < 27; ++t) flipped[(c * g.cout + o) * 27 + (26 - t)] = kernel[(o * g.cin + c) * 27 + t];
    const Geometry gt{g.cout, g.cin, g.D, g.H, g.W};
    grads.input = BasicTensor<T>(input.dims());
    const std::vector<T> padded_grad = pad_volume(grad_out.data(), g.cout, g.D, g.H, g.W);
    conv3d_direct(gt, padded_grad.data(), flipped.data(), static_cast<const T*>(nullptr), grads.input.data());
  }

  const std::vector<T> padded = pad_volume(input.data(), g.cin, g.D, g.H, g.W);
  // Slabs of output planes keep the grad_out rows for one slab cache resident.
  const std::size_t slab = std::clamp<std::size_t>((std::size_t{256} << 10) / std::max<std::size_t>(g.cout * g.H * g.W * sizeof(T), 1),
                                                   1, g.D);
  const std::size_t slabs = (g.D + slab - 1) / slab;
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(num_threads()), slabs));
  std::vector<std::vector<T>> partial(workers, std::vector<T>(kernel.size(), T{0}));
  parallel_for(slabs, [&](std::size_t begin, std::size_t end, std::size_t worker) {
    T* dk = partial[worker].data();
    for (std::size_t s = begin; s < end; ++s) {
      const std::size_t z0 = s * slab, z1 = std::min(g.D, z0 + slab);
      for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < 3; ++j) {
            std::size_t o = 0;
            for (; o + 4 <= g.cout; o += 4) kernel_grad_cols<4>(g, padded.data(), grad_out.data(), o, c, i, j, z0, z1, dk);
            for (; o < g.cout; ++o) kernel_grad_cols<1>(g, padded.data(), grad_out.data(), o, c, i, j, z0, z1, dk);
          }
    }
  });
  grads.kernel = BasicTensor<T>(kernel.dims(), std::move(partial[0]));
  for (std::size_t w = 1; w < partial.size(); ++w)
    for (std::size_t i = 0; i < kernel.size(); ++i) grads.kernel[i] += partial[w][i];
  grads.bias = channel_sums(grad_out);
  return grads;
}

// ---------------------------------------------------------------- conv1x1

template <typename T>
BasicTensor<T> conv1x1(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias) {
  check_conv_args(input, kernel, 1, false, "conv1x1");
  const std::size_t cin = input.dim(0), cout = kernel.dim(0);
  check_bias(bias, cout, "conv1x1");
  const auto n = static_cast<Eigen::Index>(shape_size(spatial_dims(input)));
  BasicTensor<T> out({cout, input.dim(1), input.dim(2), input.dim(3)});
  const Eigen::Map<const Mat<T>> x(input.data(), n, static_cast<Eigen::Index>(cin));
  const Eigen::Map<const Mat<T>> w(kernel.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(cout));
  Eigen::Map<Mat<T>> y(out.data(), n, static_cast<Eigen::Index>(cout));
  y.noalias() = x * w;
  add_bias(out, bias);
  return out;
}

template <typename T>
ConvGrads<T> conv1x1_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                              const BasicTensor<T>& grad_out) {
  check_conv_args(input, kernel, 1, false, "conv1x1_backward");
  const std::size_t cin = input.dim(0), cout = kernel.dim(0);
  require(grad_out.dims() == Shape({cout, input.dim(1), input.dim(2), input.dim(3)}),
          "conv1x1_backward: grad_out dims " + shape_string(grad_out.dims()) + " do not match output");
  const auto n = static_cast<Eigen::Index>(shape_size(spatial_dims(input)));
  const Eigen::Map<const Mat<T>> x(input.data(), n, static_cast<Eigen::Index>(cin));
  const Eigen::Map<const Mat<T>> w(kernel.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(cout));
  const Eigen::Map<const Mat<T>> g(grad_out.data(), n, static_cast<Eigen::Index>(cout));
  ConvGrads<T> grads{BasicTensor<T>(input.dims()), BasicTensor<T>(kernel.dims()), channel_sums(grad_out)};
  Eigen::Map<Mat<T>>(grads.input.data(), n, static_cast<Eigen::Index>(cin)).noalias() = g * w.transpose();
  Eigen::Map<Mat<T>>(grads.kernel.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(cout))
      .noalias() = x.transpose() * g;
  return grads;
}

// ---------------------------------------------------------------- conv_transpose3d

namespace {

// Tap matrix (C_in x C_out) for tap t of a [C_in, C_out, 2, 2, 2] kernel.
template <typename T>
Mat<T> tap_matrix(const BasicTensor<T>& kernel, std::size_t tap) {
  const std::size_t cin = kernel.dim(0), cout = kernel.dim(1);
  Mat<T> m(static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(cout));
  for (std::size_t i = 0; i < cin; ++i)
    for (std::size_t o = 0; o < cout; ++o)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(o)) = kernel[(i * cout + o) * 8 + tap];
  return m;
}

}  // namespace

template <typename T>
BasicTensor<T> conv_transpose3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                const BasicTensor<T>& bias) {
  check_conv_args(input, kernel, 2, true, "conv_transpose3d");
  const std::size_t cin = input.dim(0), D = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t cout = kernel.dim(1);
  check_bias(bias, cout, "conv_transpose3d");
  const std::size_t n = D * H * W;
  const std::size_t OH = 2 * H, OW = 2 * W, ovol = 8 * n;
  BasicTensor<T> out({cout, 2 * D, OH, OW});
  const Eigen::Map<const Mat<T>> x(input.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cin));
  Mat<T> y;
  for (std::size_t tap = 0; tap < 8; ++tap) {
    const std::size_t a = tap >> 2, b = (tap >> 1) & 1, c = tap & 1;
    y.noalias() = x * tap_matrix(kernel, tap);
    for (std::size_t o = 0; o < cout; ++o) {
      const T* src = y.data() + o * n;
      T* dst = out.data() + o * ovol;
      for (std::size_t z = 0; z < D; ++z)
        for (std::size_t yy = 0; yy < H; ++yy) {
          const T* s = src + (z * H + yy) * W;
          T* d = dst + ((2 * z + a) * OH + 2 * yy + b) * OW + c;
          for (std::size_t xx = 0; xx < W; ++xx) d[2 * xx] = s[xx];
        }
    }
  }
  add_bias(out, bias);
  return out;
}

template <typename T>
ConvGrads<T> conv_transpose3d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                       const BasicTensor<T>& grad_out) {
  check_conv_args(input, kernel, 2, true, "conv_transpose3d_backward");
  const std::size_t cin = input.dim(0), D = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t cout = kernel.dim(1);
  require(grad_out.dims() == Shape({cout, 2 * D, 2 * H, 2 * W}),
          "conv_transpose3d_backward: grad_out dims " + shape_string(grad_out.dims()) + " do not match output");
  const std::size_t n = D * H * W;
  const std::size_t OH = 2 * H, OW = 2 * W, ovol = 8 * n;
  const auto ni = static_cast<Eigen::Index>(n);
  const Eigen::Map<const Mat<T>> x(input.data(), ni, static_cast<Eigen::Index>(cin));

  ConvGrads<T> grads{BasicTensor<T>(input.dims()), BasicTensor<T>(kernel.dims()), channel_sums(grad_out)};
  Eigen::Map<Mat<T>> dx(grads.input.data(), ni, static_cast<Eigen::Index>(cin));
  Mat<T> g(ni, static_cast<Eigen::Index>(cout));
  for (std::size_t tap = 0; tap < 8; ++tap) {
    const std::size_t a = tap >> 2, b = (tap >> 1) & 1, c = tap & 1;
    for (std::size_t o = 0; o < cout; ++o) {
      const T* src = grad_out.data() + o * ovol;
      T* dst = g.data() + o * n;
      for (std::size_t z = 0; z < D; ++z)
        for (std::size_t yy = 0; yy < H; ++yy) {
          const T* s = src + ((2 * z + a) * OH + 2 * yy + b) * OW + c;
          T* d = dst + (z * H + yy) * W;
          for (std::size_t xx = 0; xx < W; ++xx) d[xx] = s[2 * xx];
        }
    }
    const Mat<T> k = tap_matrix(kernel, tap);
    dx.noalias() += g * k.transpose();
    const Mat<T> dk = x.transpose() * g;
    for (std::size_t i = 0; i < cin; ++i)
      for (std::size_t o = 0; o < cout; ++o)
        grads.kernel[(i * cout + o) * 8 + tap] = dk(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(o));
  }
  return grads;
}

// ---------------------------------------------------------------- maxpool3d

template <typename T>
PoolResult<T> maxpool3d(const BasicTensor<T>& input) {
  require_rank4(input, "maxpool3d", "input");
  static constexpr const char* kAxis[] = {"C", "D", "H", "W"};
  for (std::size_t ax = 1; ax < 4; ++ax)
    if (input.dim(ax) % 2 != 0)
      throw std::invalid_argument(std::string("maxpool3d: spatial axis ") + kAxis[ax] + " has odd size " +
                                  std::to_string(input.dim(ax)));
  const std::size_t C = input.dim(0), D = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t od = D / 2, oh = H / 2, ow = W / 2;
  PoolResult<T> r{BasicTensor<T>({C, od, oh, ow}), std::vector<std::uint32_t>(C * od * oh * ow)};
  std::size_t idx = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x, ++idx) {
          std::size_t best = ((c * D + 2 * z) * H + 2 * y) * W + 2 * x;
          T best_v = input[best];
          // Scan in increasing linear order; strict '>' keeps the lowest index on ties.
          for (std::size_t dz = 0; dz < 2; ++dz)
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t li = ((c * D + 2 * z + dz) * H + 2 * y + dy) * W + 2 * x + dx;
                if (input[li] > best_v) {
                  best_v = input[li];
                  best = li;
                }
              }
          r.output[idx] = best_v;
          r.argmax[idx] = static_cast<std::uint32_t>(best);
        }
  return r;
}

template <typename T>
BasicTensor<T> maxpool3d_backward(const BasicTensor<T>& grad_out, const std::vector<std::uint32_t>& argmax,
                                  const Shape& input_dims) {
  require(grad_out.size() == argmax.size(), "maxpool3d_backward: argmax record does not match grad_out");
  BasicTensor<T> g(input_dims);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

// ---------------------------------------------------------------- relu / dropout

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.dims());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_out) {
  require(input.dims() == grad_out.dims(), "relu_backward: dims mismatch");
  BasicTensor<T> g(input.dims());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > T{0} ? grad_out[i] : T{0};
  return g;
}

template <typename T>
DropoutResult<T> dropout(const BasicTensor<T>& input, double rate, Mode mode, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::Eval || rate == 0.0) return {input, {}};
  DropoutResult<T> r{BasicTensor<T>(input.dims()), std::vector<T>(input.size())};
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < input.size(); ++i) {
    r.mask[i] = u(rng) < rate ? T{0} : keep_scale;
    r.output[i] = input[i] * r.mask[i];
  }
  return r;
}

template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_out, const std::vector<T>& mask) {
  if (mask.empty()) return grad_out;
  require(mask.size() == grad_out.size(), "dropout_backward: mask does not match grad_out");
  BasicTensor<T> g(grad_out.dims());
  for (std::size_t i = 0; i < mask.size(); ++i) g[i] = grad_out[i] * mask[i];
  return g;
}

// ---------------------------------------------------------------- batchnorm

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                         BatchNormRunning<T>& running, Mode mode, BatchNormCache<T>* cache) {
  require_rank4(input, "batchnorm", "input");
  const std::size_t C = input.dim(0);
  const std::size_t n = shape_size(spatial_dims(input));
  require(gamma.size() == C && beta.size() == C && running.mean.size() == C && running.var.size() == C,
          "batchnorm: parameter length does not match channel count " + std::to_string(C));
  BasicTensor<T> out(input.dims());
  BatchNormCache<T> local;
  BatchNormCache<T>& cc = cache ? *cache : local;
  cc.mode = mode;
  cc.normalized = BasicTensor<T>(input.dims());
  cc.inv_std.assign(C, T{0});
  for (std::size_t c = 0; c < C; ++c) {
    const T* x = input.data() + c * n;
    double mean, var;
    if (mode == Mode::Train) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += x[i];
      mean = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) ss += (x[i] - mean) * (x[i] - mean);
      var = ss / static_cast<double>(n);
      running.mean[c] = static_cast<T>(kBatchNormMomentum * running.mean[c] + (1.0 - kBatchNormMomentum) * mean);
      running.var[c] = static_cast<T>(kBatchNormMomentum * running.var[c] + (1.0 - kBatchNormMomentum) * var);
    } else {
      mean = running.mean[c];
      var = running.var[c];
    }
    const T inv_std = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEpsilon));
    const T m = static_cast<T>(mean);
    cc.inv_std[c] = inv_std;
    T* xh = cc.normalized.data() + c * n;
    T* y = out.data() + c * n;
    for (std::size_t i = 0; i < n; ++i) {
      xh[i] = (x[i] - m) * inv_std;
      y[i] = gamma[c] * xh[i] + beta[c];
    }
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& gamma,
                                     const BatchNormCache<T>& cache) {
  require(grad_out.dims() == cache.normalized.dims(), "batchnorm_backward: grad_out dims do not match cache");
  const std::size_t C = grad_out.dim(0);
  const std::size_t n = shape_size(spatial_dims(grad_out));
  BatchNormGrads<T> g{BasicTensor<T>(grad_out.dims()), BasicTensor<T>({C}), BasicTensor<T>({C})};
  for (std::size_t c = 0; c < C; ++c) {
    const T* dy = grad_out.data() + c * n;
    const T* xh = cache.normalized.data() + c * n;
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_dy += dy[i];
      sum_dy_xh += static_cast<double>(dy[i]) * xh[i];
    }
    g.beta[c] = static_cast<T>(sum_dy);
    g.gamma[c] = static_cast<T>(sum_dy_xh);
    T* dx = g.input.data() + c * n;
    const double scale = static_cast<double>(gamma[c]) * cache.inv_std[c];
    if (cache.mode == Mode::Train) {
      const double mdy = sum_dy / static_cast<double>(n), mdyx = sum_dy_xh / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) dx[i] = static_cast<T>(scale * (dy[i] - mdy - xh[i] * mdyx));
    } else {
      for (std::size_t i = 0; i < n; ++i) dx[i] = static_cast<T>(scale * dy[i]);
    }
  }
  return g;
}

// ---------------------------------------------------------------- concat / softmax

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank4(a, "concat_channels", "a");
  require_rank4(b, "concat_channels", "b");
  require(spatial_dims(a) == spatial_dims(b), "concat_channels: spatial dims differ, " + shape_string(a.dims()) +
                                                  " vs " + shape_string(b.dims()));
  BasicTensor<T> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
  std::copy(a.storage().begin(), a.storage().end(), out.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& grad, std::size_t channels_a) {
  require_rank4(grad, "split_channels", "grad");
  require(channels_a <= grad.dim(0), "split_channels: split point beyond channel count");
  const std::size_t n = shape_size(spatial_dims(grad));
  BasicTensor<T> a({channels_a, grad.dim(1), grad.dim(2), grad.dim(3)});
  BasicTensor<T> b({grad.dim(0) - channels_a, grad.dim(1), grad.dim(2), grad.dim(3)});
  const auto mid = grad.storage().begin() + static_cast<std::ptrdiff_t>(channels_a * n);
  std::copy(grad.storage().begin(), mid, a.storage().begin());
  std::copy(mid, grad.storage().end(), b.storage().begin());
  return {std::move(a), std::move(b)};
}

template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits) {
  require_rank4(logits, "softmax_channels", "logits");
  const std::size_t C = logits.dim(0);
  const std::size_t n = shape_size(spatial_dims(logits));
  BasicTensor<T> p(logits.dims());
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, logits[c * n + i]);
    T sum{0};
    for (std::size_t c = 0; c < C; ++c) {
      const T e = std::exp(logits[c * n + i] - mx);
      p[c * n + i] = e;
      sum += e;
    }
    const T inv = T{1} / sum;
    for (std::size_t c = 0; c < C; ++c) p[c * n + i] *= inv;
  }
  return p;
}

template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs, const BasicTensor<T>& grad_probs) {
  require(probs.dims() == grad_probs.dims(), "softmax_backward: dims mismatch");
  const std::size_t C = probs.dim(0);
  const std::size_t n = shape_size(spatial_dims(probs));
  BasicTensor<T> g(probs.dims());
  for (std::size_t i = 0; i < n; ++i) {
    T dot{0};
    for (std::size_t c = 0; c < C; ++c) dot += probs[c * n + i] * grad_probs[c * n + i];
    for (std::size_t c = 0; c < C; ++c) g[c * n + i] = probs[c * n + i] * (grad_probs[c * n + i] - dot);
  }
  return g;
}

template <typename T>
LabelMap argmax_channels(const BasicTensor<T>& scores) {
  require_rank4(scores, "argmax_channels", "scores");
  const std::size_t C = scores.dim(0);
  require(C >= 1 && C <= 256, "argmax_channels: channel count must be in [1, 256]");
  const std::size_t n = shape_size(spatial_dims(scores));
  LabelMap labels(spatial_dims(scores));
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (scores[c * n + i] > scores[best * n + i]) best = c;
    labels[i] = static_cast<std::uint8_t>(best);
  }
  return labels;
}

#define RENALSEG_INSTANTIATE_OPS(T)                                                                                \
  template BasicTensor<T> conv3d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);             \
  template ConvGrads<T> conv3d_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,       \
                                        bool);                                                                     \
  template BasicTensor<T> conv1x1(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);            \
  template ConvGrads<T> conv1x1_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BasicTensor<T> conv_transpose3d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);   \
  template ConvGrads<T> conv_transpose3d_backward(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                                  const BasicTensor<T>&);                                          \
  template PoolResult<T> maxpool3d(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> maxpool3d_backward(const BasicTensor<T>&, const std::vector<std::uint32_t>&,             \
                                             const Shape&);                                                        \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                             \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template DropoutResult<T> dropout(const BasicTensor<T>&, double, Mode, std::mt19937_64&);                        \
  template BasicTensor<T> dropout_backward(const BasicTensor<T>&, const std::vector<T>&);                          \
  template BasicTensor<T> batchnorm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,           \
                                    BatchNormRunning<T>&, Mode, BatchNormCache<T>*);                               \
  template BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>&, const BasicTensor<T>&,                      \
                                                const BatchNormCache<T>&);                                         \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>&, std::size_t);           \
  template BasicTensor<T> softmax_channels(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> softmax_backward(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template LabelMap argmax_channels(const BasicTensor<T>&);

RENALSEG_INSTANTIATE_OPS(float)
RENALSEG_INSTANTIATE_OPS(double)

}  // namespace renalseg::ops
