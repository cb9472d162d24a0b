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

#include <cstdint>
#include <span>
#include <vector>

#include "renalseg/tensor.hpp"

namespace renalseg {

/// Per-class weights w^c and the clamp applied to probabilities before the logs.
struct LossConfig {
  std::vector<double> class_weights;
  double clip_epsilon = 1e-7;

  void validate(std::size_t num_classes) const;
};

template <typename T>
struct LossResult {
  double loss = 0.0;
  BasicTensor<T> grad;  // d loss / d pred
};

/// Weighted binary cross-entropy summed over every channel of a softmax output:
///
///   loss = -(1/N) * sum_i w[c(i)] * (t_i log p_i + (1 - t_i) log(1 - p_i))
///
/// where N counts voxel-channel elements and c(i) is the channel of element i.
/// Probabilities are clamped to [eps, 1 - eps]; the gradient is zero where the
/// clamp is active. `target` must be one-hot across channels.
template <typename T>
LossResult<T> weighted_cross_entropy(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                                     const LossConfig& cfg);

/// Inverse-frequency class weights over a whole label set,
/// weight[c] = total / (num_classes * count[c]), rescaled so the smallest is 1.
/// Throws if a class never occurs.
std::vector<double> compute_class_weights(std::span<const LabelMap> labels, std::size_t num_classes);
std::vector<double> compute_class_weights(std::span<const Tensor> one_hot_labels);

}  // namespace renalseg
