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

#include "renalseg/preprocess.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>

#include "renalseg/parallel.hpp"

namespace renalseg {

void Volume4D::validate() const {
  if (data.rank() != 4) throw std::invalid_argument("volume: data must be [T,D,H,W], got " + shape_string(data.dims()));
  if (time_points_sec.size() != data.dim(0))
    throw std::invalid_argument("volume: " + std::to_string(time_points_sec.size()) + " time points for " +
                                std::to_string(data.dim(0)) + " frames");
  for (std::size_t i = 1; i < time_points_sec.size(); ++i)
    if (!(time_points_sec[i] > time_points_sec[i - 1]))
      throw std::invalid_argument("volume: time points must be strictly increasing");
  if (!(spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0))
    throw std::invalid_argument("volume: voxel spacing must be positive");
}

namespace {

// Source coordinate of output index i for a corner-aligned mapping of S -> n samples.
double aligned_coord(std::size_t i, std::size_t src, std::size_t n) {
  if (n == 1) return 0.5 * static_cast<double>(src - 1);
  return static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(n - 1);
}

// Linear resampling along the middle axis of an [outer, S, inner] block.
// `coord(i)` gives the source position of output index i; positions outside
// [0, S-1] yield zero when `zero_outside`, otherwise they are clamped.
void resample_axis(const float* in, std::size_t outer, std::size_t src, std::size_t inner, std::size_t n,
                   const std::function<double(std::size_t)>& coord, bool zero_outside, float* out) {
  struct Tap {
    std::size_t i0, i1;
    float f;
    bool zero;
  };
  std::vector<Tap> taps(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = coord(i);
    Tap& t = taps[i];
    t.zero = zero_outside && (pos < 0.0 || pos > static_cast<double>(src - 1));
    const double p = std::clamp(pos, 0.0, static_cast<double>(src - 1));
    t.i0 = static_cast<std::size_t>(std::floor(p));
    if (src >= 2) t.i0 = std::min(t.i0, src - 2);
    t.f = src >= 2 ? static_cast<float>(p - static_cast<double>(t.i0)) : 0.0f;
    t.i1 = src >= 2 ? t.i0 + 1 : t.i0;
  }
  for (std::size_t o = 0; o < outer; ++o) {
    const float* block = in + o * src * inner;
    float* dst_block = out + o * n * inner;
    if (inner == 1) {
      for (std::size_t i = 0; i < n; ++i) {
        const Tap& t = taps[i];
        const float a = block[t.i0], b = block[t.i1];
        dst_block[i] = t.zero ? 0.0f : (t.f == 0.0f ? a : a + t.f * (b - a));
      }
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const Tap& t = taps[i];
      float* d = dst_block + i * inner;
      if (t.zero) {
        std::fill_n(d, inner, 0.0f);
        continue;
      }
      const float* a = block + t.i0 * inner;
      const float* b = block + t.i1 * inner;
      if (t.f == 0.0f) {
        std::copy_n(a, inner, d);
      } else {
        for (std::size_t k = 0; k < inner; ++k) d[k] = a[k] + t.f * (b[k] - a[k]);
      }
    }
  }
}

// Applies resample_axis to axes W, H, D of every channel of a [C,D,H,W] tensor.
// Channels are processed one at a time through two scratch frames so the
// intermediates stay small.
Tensor resample_separable(const Tensor& vol, const Shape& target,
                          const std::function<std::function<double(std::size_t)>(std::size_t, std::size_t, std::size_t)>& coord_for,
                          bool zero_outside) {
  const std::size_t C = vol.dim(0);
  const Shape src_dims{vol.dim(1), vol.dim(2), vol.dim(3)};
  std::vector<std::size_t> active;  // spatial axes (0..2) that need a pass, W first
  std::vector<std::function<double(std::size_t)>> coords(3);
  for (std::size_t a = 3; a-- > 0;) {
    if (src_dims[a] == target[a] && !zero_outside) continue;
    active.push_back(a);
    coords[a] = coord_for(a, src_dims[a], target[a]);
  }
  Tensor out({C, target[0], target[1], target[2]});
  const std::size_t in_frame = shape_size(src_dims), out_frame = shape_size(target);
  std::vector<std::vector<float>> scratch(2 * static_cast<std::size_t>(std::max(1, num_threads())));
  parallel_for(C, [&](std::size_t begin, std::size_t end, std::size_t worker) {
    auto& buf_a = scratch[2 * worker];
    auto& buf_b = scratch[2 * worker + 1];
    for (std::size_t c = begin; c < end; ++c) {
      const float* src = vol.data() + c * in_frame;
      float* final_dst = out.data() + c * out_frame;
      if (active.empty()) {
        std::copy_n(src, in_frame, final_dst);
        continue;
      }
      Shape cur = src_dims;
      for (std::size_t k = 0; k < active.size(); ++k) {
        const std::size_t a = active[k];
        std::size_t outer = 1, inner = 1;
        for (std::size_t j = 0; j < a; ++j) outer *= cur[j];
        for (std::size_t j = a + 1; j < 3; ++j) inner *= cur[j];
        const std::size_t n = target[a];
        float* dst = final_dst;
        if (k + 1 < active.size()) {
          auto& buf = (k % 2 == 0) ? buf_a : buf_b;
          buf.resize(outer * n * inner);
          dst = buf.data();
        }
        resample_axis(src, outer, cur[a], inner, n, coords[a], zero_outside, dst);
        cur[a] = n;
        src = dst;
      }
    }
  });
  return out;
}

void check_target(const Shape& target) {
  if (target.size() != 3) throw std::invalid_argument("resample: target must have 3 spatial dims");
  for (std::size_t d : target)
    if (d == 0) throw std::invalid_argument("resample: target dims must be >= 1, got " + shape_string(target));
}

}  // namespace

Tensor resample_trilinear(const Tensor& vol, const Shape& target_dims) {
  check_target(target_dims);
  if (vol.rank() != 4) throw std::invalid_argument("resample_trilinear: expected [C,D,H,W], got " + shape_string(vol.dims()));
  for (std::size_t a = 1; a < 4; ++a)
    if (vol.dim(a) == 0) throw std::invalid_argument("resample_trilinear: source dims must be >= 1");
  return resample_separable(
      vol, target_dims,
      [](std::size_t, std::size_t src, std::size_t n) {
        return std::function<double(std::size_t)>([src, n](std::size_t i) { return aligned_coord(i, src, n); });
      },
      false);
}

Volume4D resample_volume(const Volume4D& vol, const Shape& target_dims) {
  return {resample_trilinear(vol.data, target_dims), vol.spacing, vol.time_points_sec};
}

// ---------------------------------------------------------------- PCA

void symmetric_eigen(std::vector<double> a, std::size_t n, std::vector<double>& eigenvalues,
                     std::vector<std::vector<double>>& eigenvectors) {
  if (a.size() != n * n) throw std::invalid_argument("symmetric_eigen: matrix size mismatch");
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto at = [&](std::size_t r, std::size_t c) -> double& { return a[r * n + c]; };

  double scale = 0.0;
  for (double x : a) scale += x * x;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += at(p, q) * at(p, q);
    if (off <= 1e-30 * scale || off == 0.0) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return at(i, i) > at(j, j); });
  eigenvalues.assign(n, 0.0);
  eigenvectors.assign(n, std::vector<double>(n));
  for (std::size_t r = 0; r < n; ++r) {
    eigenvalues[r] = at(order[r], order[r]);
    for (std::size_t k = 0; k < n; ++k) eigenvectors[r][k] = v[k * n + order[r]];
  }
}

PCABasis fit_pca_time(const Volume4D& vol, std::size_t components) {
  vol.validate();
  const std::size_t T = vol.timepoints();
  const std::size_t N = shape_size(vol.grid());
  if (T < 2) throw std::invalid_argument("fit_pca_time: need at least 2 time points, found " + std::to_string(T));
  if (components < 1 || components > T)
    throw std::invalid_argument("fit_pca_time: cannot keep " + std::to_string(components) + " components of " +
                                std::to_string(T) + " time points");
  if (N < T) throw std::invalid_argument("fit_pca_time: need at least as many voxels as time points");

  PCABasis basis;
  basis.mean_curve.assign(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const float* row = vol.data.data() + t * N;
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i) s += row[i];
    basis.mean_curve[t] = s / static_cast<double>(N);
  }

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(T));
  constexpr std::size_t kChunk = 4096;
  Eigen::MatrixXd block(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(kChunk));
  for (std::size_t start = 0; start < N; start += kChunk) {
    const std::size_t len = std::min(kChunk, N - start);
    for (std::size_t t = 0; t < T; ++t) {
      const float* row = vol.data.data() + t * N + start;
      for (std::size_t i = 0; i < len; ++i)
        block(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)) = row[i] - basis.mean_curve[t];
    }
    const auto b = block.leftCols(static_cast<Eigen::Index>(len));
    cov.noalias() += b * b.transpose();
  }
  cov /= static_cast<double>(N);

  std::vector<double> m(T * T);
  for (std::size_t r = 0; r < T; ++r)
    for (std::size_t c = 0; c < T; ++c) m[r * T + c] = cov(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  basis.total_variance = cov.trace();
  double mean_sq = 0.0;
  for (double x : basis.mean_curve) mean_sq += x * x;
  basis.degenerate = basis.total_variance <= 1e-12 * std::max(1.0, mean_sq / static_cast<double>(T));

  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
  symmetric_eigen(std::move(m), T, values, vectors);
  for (std::size_t k = 0; k < components; ++k) {
    auto& row = vectors[k];
    std::size_t big = 0;
    for (std::size_t t = 1; t < T; ++t)
      if (std::abs(row[t]) > std::abs(row[big])) big = t;
    if (row[big] < 0.0)
      for (double& x : row) x = -x;
    basis.components.push_back(row);
    basis.explained_variance.push_back(basis.degenerate ? 0.0 : std::max(values[k], 0.0));
  }
  if (basis.degenerate) basis.total_variance = 0.0;
  return basis;
}

Tensor project_pca(const Volume4D& vol, const PCABasis& basis) {
  vol.validate();
  const std::size_t T = vol.timepoints();
  if (basis.timepoints() != T)
    throw std::invalid_argument("project_pca: basis has " + std::to_string(basis.timepoints()) +
                                " time points, volume has " + std::to_string(T));
  const std::size_t K = basis.rank();
  const Shape grid = vol.grid();
  const std::size_t N = shape_size(grid);
  Tensor out({K, grid[0], grid[1], grid[2]});
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> acc(N, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double w = basis.components[k][t];
      const double mu = basis.mean_curve[t];
      const float* row = vol.data.data() + t * N;
      for (std::size_t i = 0; i < N; ++i) acc[i] += (row[i] - mu) * w;
    }
    float* dst = out.data() + k * N;
    for (std::size_t i = 0; i < N; ++i) dst[i] = static_cast<float>(acc[i]);
  }
  return out;
}

// ---------------------------------------------------------------- temporal resampling

Volume4D resample_time(const Volume4D& vol, std::size_t n_samples, double duration_sec) {
  vol.validate();
  if (n_samples < 2) throw std::invalid_argument("resample_time: need at least 2 samples, got " + std::to_string(n_samples));
  if (!(duration_sec > 0.0)) throw std::invalid_argument("resample_time: duration must be positive");
  const std::size_t T = vol.timepoints();
  if (T < 1) throw std::invalid_argument("resample_time: volume has no frames");
  const Shape grid = vol.grid();
  const std::size_t N = shape_size(grid);
  const auto& times = vol.time_points_sec;

  Volume4D out{Tensor({n_samples, grid[0], grid[1], grid[2]}), vol.spacing, std::vector<double>(n_samples)};
  for (std::size_t j = 0; j < n_samples; ++j) {
    const double t = duration_sec * static_cast<double>(j) / static_cast<double>(n_samples - 1);
    out.time_points_sec[j] = t;
    std::size_t a = 0, b = 0;
    double f = 0.0;
    if (t <= times.front()) {
      a = b = 0;
    } else if (t >= times.back()) {
      a = b = T - 1;
    } else {
      b = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), t) - times.begin());
      a = b - 1;
      f = (t - times[a]) / (times[b] - times[a]);
    }
    const float* ra = vol.data.data() + a * N;
    const float* rb = vol.data.data() + b * N;
    float* dst = out.data.data() + j * N;
    if (a == b || f == 0.0) {
      std::copy_n(ra, N, dst);
    } else {
      for (std::size_t i = 0; i < N; ++i) dst[i] = static_cast<float>(ra[i] + f * (static_cast<double>(rb[i]) - ra[i]));
    }
  }
  return out;
}

// ---------------------------------------------------------------- normalization, augmentation, labels

namespace {

// Sum of f(x[i]) with eight interleaved accumulators (fixed order, so results
// are reproducible) to break the floating-point dependency chain.
template <typename F>
double lane_sum(const float* x, std::size_t n, F f) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += f(static_cast<double>(x[i + l]));
  for (; i < n; ++i) acc[0] += f(static_cast<double>(x[i]));
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

}  // namespace

Tensor normalize(const Tensor& x) {
  if (x.rank() < 1) throw std::invalid_argument("normalize: expected a channel-first tensor");
  const std::size_t C = x.dim(0);
  const std::size_t n = C == 0 ? 0 : x.size() / C;
  Tensor out(x.dims());
  for (std::size_t c = 0; c < C; ++c) {
    const float* src = x.data() + c * n;
    float* dst = out.data() + c * n;
    const double mean = n ? lane_sum(src, n, [](double v) { return v; }) / static_cast<double>(n) : 0.0;
    const double var =
        n ? lane_sum(src, n, [mean](double v) { return (v - mean) * (v - mean); }) / static_cast<double>(n) : 0.0;
    if (var <= 1e-20 * std::max(1.0, mean * mean)) {
      std::fill_n(dst, n, 0.0f);
      continue;
    }
    const double inv = 1.0 / std::sqrt(var);
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>((src[i] - mean) * inv);
  }
  return out;
}

std::pair<Tensor, LabelMap> augment_scale(const Tensor& vol, const LabelMap& labels, double factor) {
  if (!(factor >= 0.5 && factor <= 2.0))
    throw std::invalid_argument("augment_scale: factor must lie in [0.5, 2], got " + std::to_string(factor));
  if (vol.rank() != 4 || labels.dims() != spatial_dims(vol))
    throw std::invalid_argument("augment_scale: labels " + shape_string(labels.dims()) + " do not match volume " +
                                shape_string(vol.dims()));
  if (factor == 1.0) return {vol, labels};

  auto coord = [factor](std::size_t i, std::size_t size) {
    const double centre = 0.5 * static_cast<double>(size - 1);
    return centre + (static_cast<double>(i) - centre) / factor;
  };
  Tensor data = resample_separable(
      vol, spatial_dims(vol),
      [&coord](std::size_t, std::size_t src, std::size_t) {
        return std::function<double(std::size_t)>([&coord, src](std::size_t i) { return coord(i, src); });
      },
      true);

  const Shape g = labels.dims();
  LabelMap out(g);
  std::array<std::vector<std::ptrdiff_t>, 3> src_index;
  for (std::size_t a = 0; a < 3; ++a) {
    src_index[a].resize(g[a]);
    for (std::size_t i = 0; i < g[a]; ++i) {
      const double p = std::floor(coord(i, g[a]) + 0.5);
      src_index[a][i] = (p < 0.0 || p > static_cast<double>(g[a] - 1)) ? -1 : static_cast<std::ptrdiff_t>(p);
    }
  }
  for (std::size_t z = 0; z < g[0]; ++z)
    for (std::size_t y = 0; y < g[1]; ++y)
      for (std::size_t x = 0; x < g[2]; ++x) {
        const auto sz = src_index[0][z], sy = src_index[1][y], sx = src_index[2][x];
        out(z, y, x) = (sz < 0 || sy < 0 || sx < 0) ? std::uint8_t{0}
                                                     : labels(static_cast<std::size_t>(sz), static_cast<std::size_t>(sy),
                                                              static_cast<std::size_t>(sx));
      }
  return {std::move(data), std::move(out)};
}

LabelMap resample_nearest(const LabelMap& labels, const Shape& target_dims) {
  check_target(target_dims);
  if (labels.rank() != 3) throw std::invalid_argument("resample_nearest: expected a [D,H,W] label map");
  if (labels.dims() == target_dims) return labels;
  const Shape g = labels.dims();
  std::array<std::vector<std::size_t>, 3> idx;
  for (std::size_t a = 0; a < 3; ++a) {
    idx[a].resize(target_dims[a]);
    for (std::size_t i = 0; i < target_dims[a]; ++i)
      idx[a][i] = std::min(g[a] - 1, static_cast<std::size_t>(std::floor(aligned_coord(i, g[a], target_dims[a]) + 0.5)));
  }
  LabelMap out(target_dims);
  for (std::size_t z = 0; z < target_dims[0]; ++z)
    for (std::size_t y = 0; y < target_dims[1]; ++y)
      for (std::size_t x = 0; x < target_dims[2]; ++x) out(z, y, x) = labels(idx[0][z], idx[1][y], idx[2][x]);
  return out;
}

Tensor one_hot(const LabelMap& labels, std::size_t num_classes) {
  if (labels.rank() != 3) throw std::invalid_argument("one_hot: expected a [D,H,W] label map");
  if (num_classes == 0) throw std::invalid_argument("one_hot: num_classes must be positive");
  const Shape g = labels.dims();
  const std::size_t n = labels.size();
  Tensor out({num_classes, g[0], g[1], g[2]});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = labels[i];
    if (c >= num_classes)
      throw std::invalid_argument("one_hot: label " + std::to_string(c) + " at voxel " + std::to_string(i) +
                                  " is outside [0, " + std::to_string(num_classes) + ")");
    out[c * n + i] = 1.0f;
  }
  return out;
}

}  // namespace renalseg
