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

#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "renalseg/preprocess.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace renalseg;
using namespace renalseg::testing;

namespace {

Volume4D make_volume(Tensor data, std::vector<double> times = {}) {
  if (times.empty())
    for (std::size_t t = 0; t < data.dim(0); ++t) times.push_back(10.0 * t);
  return Volume4D{std::move(data), VoxelSpacing{1.5, 1.5, 3.0}, std::move(times)};
}

// Random curves drawn from a few latent profiles plus noise.
Volume4D random_curves(std::size_t T, Shape grid, std::mt19937_64& rng) {
  const std::size_t N = shape_size(grid);
  Tensor d({T, grid[0], grid[1], grid[2]});
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> prof(3, std::vector<double>(T));
  for (auto& p : prof)
    for (auto& x : p) x = g(rng);
  for (std::size_t i = 0; i < N; ++i) {
    const double a = 3 * g(rng), b = 1.5 * g(rng), c = 0.5 * g(rng);
    for (std::size_t t = 0; t < T; ++t)
      d[t * N + i] = static_cast<float>(2.0 + a * prof[0][t] + b * prof[1][t] + c * prof[2][t] + 0.1 * g(rng));
  }
  return make_volume(std::move(d));
}

double curve_dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("trilinear resampling reproduces an affine ramp") {
  Tensor ramp({2, 5, 7, 9});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t z = 0; z < 5; ++z)
      for (std::size_t y = 0; y < 7; ++y)
        for (std::size_t x = 0; x < 9; ++x) ramp(c, z, y, x) = float(1.0 + c + 2.0 * z - 0.5 * y + 0.25 * x);
  const Shape target{9, 4, 13};
  const Tensor r = resample_trilinear(ramp, target);
  CHECK(r.dims() == Shape{2, 9, 4, 13});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t z = 0; z < 9; ++z)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 13; ++x) {
          const double zz = z * 4.0 / 8.0, yy = y * 6.0 / 3.0, xx = x * 8.0 / 12.0;
          CHECK(r(c, z, y, x) == doctest::Approx(1.0 + c + 2.0 * zz - 0.5 * yy + 0.25 * xx).epsilon(1e-5));
        }
}

TEST_CASE("resampling to the same size is the identity and corners are kept") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor<float>({3, 4, 5, 6}, rng);
  CHECK(resample_trilinear(x, {4, 5, 6}) == x);
  const Tensor up = resample_trilinear(x, {7, 9, 11});
  CHECK(up(1, 0, 0, 0) == x(1, 0, 0, 0));
  CHECK(up(2, 6, 8, 10) == doctest::Approx(x(2, 3, 4, 5)));
  const Tensor centre = resample_trilinear(Tensor({1, 1, 1, 3}, std::vector<float>{1, 2, 4}), {1, 1, 1});
  CHECK(centre[0] == 2.0f);
}

TEST_CASE("PCA agrees with a dense eigen-decomposition of the covariance") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t T = 6 + trial;
    const Volume4D v = random_curves(T, {3, 8, 9}, rng);
    const std::size_t N = 3 * 8 * 9;
    const PCABasis b = fit_pca_time(v, 4);

    Eigen::MatrixXd X(N, T);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t t = 0; t < T; ++t) X(i, t) = v.data[t * N + i];
    const Eigen::RowVectorXd mu = X.colwise().mean();
    const Eigen::MatrixXd C = (X.rowwise() - mu).transpose() * (X.rowwise() - mu) / double(N);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    CHECK(b.total_variance == doctest::Approx(C.trace()).epsilon(1e-9));
    for (std::size_t k = 0; k < 4; ++k) {
      const Eigen::Index col = Eigen::Index(T - 1 - k);
      CHECK(b.explained_variance[k] == doctest::Approx(es.eigenvalues()(col)).epsilon(1e-8));
      double align = 0.0;
      for (std::size_t t = 0; t < T; ++t) align += b.components[k][t] * es.eigenvectors()(Eigen::Index(t), col);
      CHECK(std::abs(align) == doctest::Approx(1.0).epsilon(1e-6));
    }
    for (std::size_t t = 0; t < T; ++t) CHECK(b.mean_curve[t] == doctest::Approx(mu(Eigen::Index(t))).epsilon(1e-9));
  }
}

TEST_CASE("PCA components are orthonormal, ordered and sign-fixed") {
  std::mt19937_64 rng(3);
  const PCABasis b = fit_pca_time(random_curves(12, {4, 6, 6}, rng), 5);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j)
      CHECK(curve_dot(b.components[i], b.components[j]) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-9));
    if (i > 0) CHECK(b.explained_variance[i] <= b.explained_variance[i - 1]);
    double big = 0.0;
    for (double x : b.components[i])
      if (std::abs(x) > std::abs(big)) big = x;
    CHECK(big > 0.0);
  }
}

TEST_CASE("a rank-one volume puts all variance in the first component") {
  const std::size_t T = 8;
  Tensor d({T, 2, 3, 4});
  const std::size_t N = 24;
  std::vector<double> u(T);
  for (std::size_t t = 0; t < T; ++t) u[t] = std::sin(0.7 * t) + 0.3;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t t = 0; t < T; ++t) d[t * N + i] = float(5.0 + (double(i) - 11.5) * u[t]);
  const PCABasis b = fit_pca_time(make_volume(d), 3);
  CHECK(b.explained_variance[0] / b.total_variance > 1.0 - 1e-6);
  CHECK(b.explained_variance[1] < 1e-6 * b.total_variance);
  const double norm = std::sqrt(curve_dot(u, u));
  CHECK(std::abs(curve_dot(b.components[0], u)) / norm == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("identical curves give a degenerate basis and zero projections") {
  Tensor d({5, 2, 2, 3});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 12; ++i) d[t * 12 + i] = float(3.0 + t);
  const Volume4D v = make_volume(d);
  const PCABasis b = fit_pca_time(v, 2);
  CHECK(b.degenerate);
  CHECK(b.total_variance == 0.0);
  for (double e : b.explained_variance) CHECK(e == 0.0);
  const Tensor proj = project_pca(v, b);
  for (float x : proj.storage()) CHECK(x == doctest::Approx(0.0).epsilon(1e-6));
  CHECK_THROWS_AS(fit_pca_time(v, 6), std::invalid_argument);
  CHECK_THROWS_AS(fit_pca_time(v, 0), std::invalid_argument);
}

TEST_CASE("the first PCA channel captures more variance than random unit directions") {
  std::mt19937_64 rng(4);
  const Volume4D v = random_curves(10, {4, 5, 6}, rng);
  const PCABasis b = fit_pca_time(v, 1);
  const Tensor proj = project_pca(v, b);
  auto var_of = [](const std::vector<double>& x) {
    double m = 0.0, s = 0.0;
    for (double a : x) m += a;
    m /= double(x.size());
    for (double a : x) s += (a - m) * (a - m);
    return s / double(x.size());
  };
  const std::size_t N = 120;
  std::vector<double> first(proj.storage().begin(), proj.storage().end());
  const double best = var_of(first);
  CHECK(best == doctest::Approx(b.explained_variance[0]).epsilon(1e-5));
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> dir(10);
    for (auto& x : dir) x = g(rng);
    const double n = std::sqrt(curve_dot(dir, dir));
    for (auto& x : dir) x /= n;
    std::vector<double> p(N, 0.0);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t t = 0; t < 10; ++t) p[i] += dir[t] * v.data[t * N + i];
    CHECK(var_of(p) <= best * (1.0 + 1e-6));
  }
}

TEST_CASE("temporal resampling interpolates and clamps") {
  Tensor d({3, 1, 1, 2}, std::vector<float>{0, 10, 10, 20, 30, 0});
  const Volume4D v = make_volume(d, {20.0, 40.0, 80.0});
  const Volume4D r = resample_time(v, 11, 100.0);
  CHECK(r.timepoints() == 11);
  CHECK(r.time_points_sec[5] == doctest::Approx(50.0));
  const double want[] = {0, 0, 0, 5, 10, 15, 20, 25, 30, 30, 30};
  for (std::size_t j = 0; j < 11; ++j) CHECK(r.data[j * 2] == doctest::Approx(want[j]));
  CHECK(r.data[5 * 2 + 1] == doctest::Approx(15.0));
  CHECK_THROWS_AS(resample_time(v, 1, 100.0), std::invalid_argument);
  CHECK_THROWS_AS(resample_time(v, 5, 0.0), std::invalid_argument);
}

TEST_CASE("temporal resampling onto the acquired grid is the identity") {
  std::mt19937_64 rng(5);
  const Volume4D v = make_volume(random_tensor<float>({7, 2, 3, 2}, rng), {0, 50, 100, 150, 200, 250, 300});
  CHECK(resample_time(v, 7, 300.0).data == v.data);
}

TEST_CASE("normalize gives zero mean, unit variance and is idempotent") {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor<float>({3, 6, 7, 8}, rng, -4.0, 9.0);
  const Tensor n = normalize(x);
  const std::size_t N = 336;
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, s = 0.0;
    for (std::size_t i = 0; i < N; ++i) m += n[c * N + i];
    m /= N;
    for (std::size_t i = 0; i < N; ++i) s += (n[c * N + i] - m) * (n[c * N + i] - m);
    CHECK(std::abs(m) < 1e-5);
    CHECK(s / N == doctest::Approx(1.0).epsilon(1e-5));
  }
  CHECK(max_abs_diff(normalize(n), n) < 1e-5);
  const Tensor flat = normalize(Tensor({1, 2, 2, 2}, 7.0f));
  for (float v : flat.storage()) CHECK(v == 0.0f);
}

TEST_CASE("scaling by two enlarges a centred object eightfold") {
  LabelMap l({32, 32, 32}, 0);
  Tensor v({1, 32, 32, 32}, 0.0f);
  for (std::size_t z = 12; z < 20; ++z)
    for (std::size_t y = 12; y < 20; ++y)
      for (std::size_t x = 12; x < 20; ++x) {
        l(z, y, x) = 1;
        v(0, z, y, x) = 1.0f;
      }
  const auto [sv, sl] = augment_scale(v, l, 2.0);
  std::size_t count = 0;
  for (auto q : sl.storage()) count += q == 1;
  CHECK(double(count) / 512.0 == doctest::Approx(8.0).epsilon(0.1));
  const auto [hv, hl] = augment_scale(v, l, 0.5);
  count = 0;
  for (auto q : hl.storage()) count += q == 1;
  CHECK(double(count) / 512.0 == doctest::Approx(1.0 / 8.0).epsilon(0.35));
  CHECK(hv(0, 0, 0, 0) == 0.0f);

  const auto [iv, il] = augment_scale(v, l, 1.0);
  CHECK(iv == v);
  CHECK(il == l);
  CHECK_THROWS_AS(augment_scale(v, l, 2.5), std::invalid_argument);
  CHECK_THROWS_AS(augment_scale(v, LabelMap({32, 32, 31}), 1.2), std::invalid_argument);
}

TEST_CASE("nearest-neighbour label resampling and one-hot encoding") {
  LabelMap l({1, 2, 2}, std::vector<std::uint8_t>{0, 1, 2, 1});
  const LabelMap up = resample_nearest(l, {1, 3, 3});
  CHECK(up(0, 0, 0) == 0);
  CHECK(up(0, 0, 2) == 1);
  CHECK(up(0, 2, 0) == 2);
  CHECK(resample_nearest(l, {1, 2, 2}) == l);

  const Tensor h = one_hot(l, 3);
  CHECK(h.dims() == Shape{3, 1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    float s = 0.0f;
    for (std::size_t c = 0; c < 3; ++c) s += h[c * 4 + i];
    CHECK(s == 1.0f);
    CHECK(h[l[i] * 4 + i] == 1.0f);
  }
  CHECK_THROWS_AS(one_hot(l, 2), std::invalid_argument);
}

TEST_CASE("trilinear resampling matches the per-voxel oracle") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> len(1, 9);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor<float>({2, len(rng) + 1, len(rng) + 1, len(rng) + 1}, rng);
    const Shape target{len(rng), len(rng), len(rng)};
    CHECK(max_abs_diff(resample_trilinear(x, target), trilinear_oracle(x.cast<double>(), target)) < 1e-5);
  }
}

TEST_CASE("temporal resampling matches the per-curve oracle") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t T = 3 + trial % 6;
    std::vector<double> times{std::uniform_real_distribution<double>(0.0, 30.0)(rng)};
    for (std::size_t i = 1; i < T; ++i) times.push_back(times.back() + std::uniform_real_distribution<double>(1.0, 60.0)(rng));
    const Volume4D v = make_volume(random_tensor<float>({T, 2, 2, 3}, rng), times);
    const Volume4D r = resample_time(v, 17, 250.0);
    for (std::size_t i = 0; i < 12; ++i) {
      std::vector<double> curve(T);
      for (std::size_t t = 0; t < T; ++t) curve[t] = v.data[t * 12 + i];
      for (std::size_t j = 0; j < 17; ++j)
        CHECK(r.data[j * 12 + i] == doctest::Approx(interp_oracle(times, curve, 250.0 * j / 16.0)).epsilon(1e-5));
    }
  }
}
