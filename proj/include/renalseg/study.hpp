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

// End-to-end desk study: train both networks on a generated phantom series
// and score the cascade on held-out phantoms at two noise levels.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "renalseg/cascade.hpp"
#include "renalseg/config.hpp"
#include "renalseg/metrics.hpp"

namespace renalseg {

struct StudySettings {
  RunConfig run;  // phantom series, preprocessing, network width, learning rate, seed
  std::size_t train_count = 20;
  std::size_t test_count = 4;
  std::size_t loc_epochs = 60;
  std::size_t seg_epochs = 60;
  /// Training phantoms alternate between noise 0 and this sigma; every test
  /// phantom is scored at both.
  double moderate_noise = 0.1;
  std::function<void(const std::string&)> log;

  /// Settings sized to finish on one CPU core in about ten minutes:
  /// base width 4, learning rate 1e-3, one augmented copy, 15 epochs per network.
  static StudySettings desk(std::uint64_t seed = 1);
};

struct KidneyOutcome {
  std::size_t phantom = 0;
  double noise_sigma = 0.0;
  double pelvis_fraction = 0.0;
  std::uint8_t class_id = 0;
  bool localized = false;
  double bbox_iou = 0.0;
  KidneyMetrics metrics;
};

struct StudyReport {
  std::vector<KidneyOutcome> kidneys;
  std::vector<double> loc_loss;
  std::vector<double> seg_loss;
  std::vector<std::uint8_t> loc_checkpoint;
  std::vector<std::uint8_t> seg_checkpoint;
  std::vector<LabelMap> masks;  // one per (test phantom, noise level), in evaluation order
  std::vector<double> predict_ms;
  double seconds = 0.0;

  double mean_dice(double noise_sigma) const;
  double min_bbox_iou() const;
  /// Mean Dice over normal (pelvis_fraction == 0) or abnormal kidneys at one noise level.
  double mean_dice(double noise_sigma, bool abnormal) const;
  std::string summary() const;
};

StudyReport run_phantom_study(const StudySettings& s);

}  // namespace renalseg
