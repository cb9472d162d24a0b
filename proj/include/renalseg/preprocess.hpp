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

#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "renalseg/tensor.hpp"

namespace renalseg {

/// Voxel edge lengths in millimetres along x (W axis), y (H axis) and z (D axis).
struct VoxelSpacing {
  double x = 1.0;
  double y = 1.0;
  double z = 1.0;

  double volume_mm3() const { return x * y * z; }
  friend bool operator==(const VoxelSpacing&, const VoxelSpacing&) = default;
};

/// A dynamic acquisition: data [T,D,H,W] with one sample time per frame.
struct Volume4D {
  Tensor data;
  VoxelSpacing spacing;
  std::vector<double> time_points_sec;

  std::size_t timepoints() const { return data.rank() == 4 ? data.dim(0) : 0; }
  Shape grid() const { return {data.dim(1), data.dim(2), data.dim(3)}; }
  void validate() const;
};

/// Temporal principal components of a volume's voxel curves.
struct PCABasis {
  std::vector<double> mean_curve;            // length T
  std::vector<std::vector<double>> components;  // K rows of length T, orthonormal
  std::vector<double> explained_variance;    // K eigenvalues, non-increasing
  double total_variance = 0.0;               // trace of the covariance
  bool degenerate = false;                   // all curves identical

  std::size_t timepoints() const { return mean_curve.size(); }
  std::size_t rank() const { return components.size(); }
};

/// Eigen-decomposition of a symmetric n x n matrix (row-major) by cyclic Jacobi
/// rotations. Eigenvalues are returned in descending order, eigenvectors as rows.
void symmetric_eigen(std::vector<double> matrix, std::size_t n, std::vector<double>& eigenvalues,
                     std::vector<std::vector<double>>& eigenvectors);

/// Trilinear resampling of every channel with corner-aligned coordinates
/// (output index i maps to input i * (S - 1) / (S' - 1)). A single-voxel target
/// axis samples the source centre.
Tensor resample_trilinear(const Tensor& vol, const Shape& target_dims);

/// Resamples each frame of a volume spatially; times and channels are kept.
Volume4D resample_volume(const Volume4D& vol, const Shape& target_dims);

/// Fits the top `components` temporal principal components, treating each voxel
/// curve as one sample. Sign convention: the largest-magnitude entry of every
/// component is positive.
PCABasis fit_pca_time(const Volume4D& vol, std::size_t components = 5);

/// Channel k = centred voxel curve dotted with component k. Output [K,D,H,W].
Tensor project_pca(const Volume4D& vol, const PCABasis& basis);

/// Linear interpolation of every voxel curve onto `n_samples` uniform times in
/// [0, duration_sec]; times outside the acquired range take the nearest frame.
Volume4D resample_time(const Volume4D& vol, std::size_t n_samples = 50, double duration_sec = 300.0);

/// Per-channel z-score over spatial positions; zero-variance channels become 0.
Tensor normalize(const Tensor& x);

/// Scales image content by `factor` about the volume centre and crops/pads back
/// to the original size: trilinear for data (zero outside), nearest neighbour
/// for labels (background outside). factor must lie in [0.5, 2].
std::pair<Tensor, LabelMap> augment_scale(const Tensor& vol, const LabelMap& labels, double factor);

/// Nearest-neighbour resampling of a label map with the corner-aligned mapping.
LabelMap resample_nearest(const LabelMap& labels, const Shape& target_dims);

/// Indicator channels [num_classes, D, H, W] of a label map.
Tensor one_hot(const LabelMap& labels, std::size_t num_classes);

}  // namespace renalseg
