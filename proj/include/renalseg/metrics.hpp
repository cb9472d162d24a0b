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
#include <string>
#include <vector>

#include "renalseg/preprocess.hpp"
#include "renalseg/tensor.hpp"

namespace renalseg {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Voxelwise counts; a voxel is foreground when its value is nonzero.
ConfusionCounts confusion(const LabelMap& pred, const LabelMap& truth);
/// Counts for one class of a multi-class label map (foreground = value == label).
ConfusionCounts confusion(const LabelMap& pred, const LabelMap& truth, std::uint8_t label);

// Both masks empty gives 1.0; any other zero denominator gives 0.0.
double precision(const ConfusionCounts& c);
double recall(const ConfusionCounts& c);
double dice(const ConfusionCounts& c);

/// |count(pred) - count(truth)| * voxel volume, in millilitres.
double volumetric_error_ml(std::uint64_t pred_count, std::uint64_t truth_count, const VoxelSpacing& spacing);
double volumetric_error_ml(const ConfusionCounts& c, const VoxelSpacing& spacing);

struct KidneyMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double dice = 0.0;
  double vee_ml = 0.0;
};

KidneyMetrics kidney_metrics(const ConfusionCounts& c, const VoxelSpacing& spacing);

struct MetricSummary {
  KidneyMetrics mean;
  KidneyMetrics sd;  // population standard deviation
  std::size_t count = 0;
};

MetricSummary summarize(const std::vector<KidneyMetrics>& items);

struct EvaluationReport {
  KidneyMetrics right;  // label 1
  KidneyMetrics left;   // label 2
  KidneyMetrics mean;

  /// Human-readable table followed by a key=value block
  /// (right.precision=..., left.dice=..., mean.vee_ml=...).
  std::string to_text() const;
};

EvaluationReport evaluate_labels(const LabelMap& pred, const LabelMap& truth, const VoxelSpacing& spacing);

}  // namespace renalseg
