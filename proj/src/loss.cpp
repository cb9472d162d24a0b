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

#include "renalseg/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace renalseg {

void LossConfig::validate(std::size_t num_classes) const {
  if (class_weights.size() != num_classes)
    throw std::invalid_argument("loss: expected " + std::to_string(num_classes) + " class weights, got " +
                                std::to_string(class_weights.size()));
  for (double w : class_weights)
    if (!(w > 0.0)) throw std::invalid_argument("loss: class weights must be positive");
  if (!(clip_epsilon > 0.0 && clip_epsilon < 0.5))
    throw std::invalid_argument("loss: clip_epsilon must lie in (0, 0.5)");
}

template <typename T>
LossResult<T> weighted_cross_entropy(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                                     const LossConfig& cfg) {
  if (pred.rank() != 4 || pred.dims() != target.dims())
    throw std::invalid_argument("weighted_cross_entropy: pred " + shape_string(pred.dims()) + " and target " +
                                shape_string(target.dims()) + " must be equal [C,D,H,W]");
  const std::size_t C = pred.dim(0);
  cfg.validate(C);
  const std::size_t n = shape_size(spatial_dims(pred));
  for (std::size_t i = 0; i < n; ++i) {
    T sum{0};
    for (std::size_t c = 0; c < C; ++c) {
      const T t = target[c * n + i];
      if (t != T{0} && t != T{1})
        throw std::invalid_argument("weighted_cross_entropy: target is not one-hot at voxel " + std::to_string(i));
      sum += t;
    }
    if (sum != T{1})
      throw std::invalid_argument("weighted_cross_entropy: target channels do not sum to 1 at voxel " +
                                  std::to_string(i));
  }

  const double lo = cfg.clip_epsilon, hi = 1.0 - cfg.clip_epsilon;
  const double inv_count = 1.0 / static_cast<double>(pred.size());
  LossResult<T> r{0.0, BasicTensor<T>(pred.dims())};
  double total = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    const double w = cfg.class_weights[c];
    double channel = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t e = c * n + i;
      const double raw = pred[e];
      const double p = std::clamp(raw, lo, hi);
      const double t = target[e];
      channel += t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
      const bool clamped = raw < lo || raw > hi;
      r.grad[e] = clamped ? T{0} : static_cast<T>(-w * inv_count * (t / p - (1.0 - t) / (1.0 - p)));
    }
    total += w * channel;
  }
  r.loss = -total * inv_count;
  return r;
}

template LossResult<float> weighted_cross_entropy(const Tensor&, const Tensor&, const LossConfig&);
template LossResult<double> weighted_cross_entropy(const TensorD&, const TensorD&, const LossConfig&);

namespace {

std::vector<double> weights_from_counts(const std::vector<std::uint64_t>& counts) {
  const std::size_t C = counts.size();
  std::uint64_t total = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (counts[c] == 0) throw std::invalid_argument("compute_class_weights: class " + std::to_string(c) +
                                                    " does not occur in the training labels");
    total += counts[c];
  }
  std::vector<double> w(C);
  for (std::size_t c = 0; c < C; ++c)
    w[c] = static_cast<double>(total) / (static_cast<double>(C) * static_cast<double>(counts[c]));
  const double lowest = *std::min_element(w.begin(), w.end());
  for (double& x : w) x /= lowest;
  return w;
}

}  // namespace

std::vector<double> compute_class_weights(std::span<const LabelMap> labels, std::size_t num_classes) {
  if (num_classes == 0) throw std::invalid_argument("compute_class_weights: num_classes must be positive");
  std::vector<std::uint64_t> counts(num_classes, 0);
  for (const auto& l : labels)
    for (std::uint8_t v : l.storage()) {
      if (v >= num_classes)
        throw std::invalid_argument("compute_class_weights: label " + std::to_string(v) + " out of range");
      ++counts[v];
    }
  return weights_from_counts(counts);
}

std::vector<double> compute_class_weights(std::span<const Tensor> one_hot_labels) {
  if (one_hot_labels.empty()) throw std::invalid_argument("compute_class_weights: empty label set");
  const std::size_t C = one_hot_labels.front().dim(0);
  std::vector<std::uint64_t> counts(C, 0);
  for (const auto& t : one_hot_labels) {
    if (t.rank() != 4 || t.dim(0) != C)
      throw std::invalid_argument("compute_class_weights: inconsistent one-hot tensors");
    const std::size_t n = shape_size(spatial_dims(t));
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < n; ++i)
        if (t[c * n + i] != 0.0f) ++counts[c];
  }
  return weights_from_counts(counts);
}

}  // namespace renalseg
