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

// Two-stage pipeline: a localizer on a coarse PCA-reduced grid finds one box
// per kidney, a segmenter labels each box at a fixed resolution, and the masks
// are pasted back into the original grid.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "renalseg/config.hpp"
#include "renalseg/preprocess.hpp"
#include "renalseg/tensor.hpp"
#include "renalseg/unet.hpp"

namespace renalseg {

/// Axis-aligned voxel box, lo inclusive and hi exclusive, in (z, y, x) order.
struct BoundingBox {
  std::array<std::size_t, 3> lo{};
  std::array<std::size_t, 3> hi{};
  std::uint8_t class_id = 0;

  Shape dims() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
  std::size_t volume() const { return shape_size(dims()); }
  /// Throws unless lo < hi on every axis and the box fits in `grid`.
  void validate(const Shape& grid) const;
  std::string to_string() const;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

double box_iou(const BoundingBox& a, const BoundingBox& b);

/// Tight box around every voxel equal to `label`; nullopt if there is none.
std::optional<BoundingBox> tight_box(const LabelMap& labels, std::uint8_t label);

/// Largest 6-connected component of voxels equal to `label`, as a 0/1 mask.
/// Equal sizes resolve to the component whose first voxel has the lowest
/// linear index. An absent label gives an all-zero mask.
LabelMap largest_component(const LabelMap& labels, std::uint8_t label);

/// Maps a box on a resampled grid back to `grid` through the inverse of the
/// corner-aligned resampling: index i on `small` sits at i * (S - 1) / (s - 1).
BoundingBox map_box(const BoundingBox& box, const Shape& small, const Shape& grid);

/// Grows each side by round(margin * side length) voxels, clamped to `grid`.
BoundingBox expand_box(const BoundingBox& box, double margin, const Shape& grid);

/// For every class 1..num_classes-1 of a coarse prediction: largest component,
/// tight box, map_box to `grid`, then expand_box. Classes with no voxels give no box.
std::vector<BoundingBox> boxes_from_prediction(const LabelMap& prediction, std::size_t num_classes, const Shape& grid,
                                               double margin);

Volume4D crop_volume(const Volume4D& vol, const BoundingBox& box);
LabelMap crop_labels(const LabelMap& labels, const BoundingBox& box);

/// Writes each (box, mask) into a background canvas with the box's class id;
/// where two masks claim a voxel the lower class id wins.
LabelMap reassemble(const std::vector<std::pair<BoundingBox, LabelMap>>& masks, const Shape& grid);
/// Tight box and binary mask of every class 1..num_classes-1 present in `labels`.
std::vector<std::pair<BoundingBox, LabelMap>> extract_kidneys(const LabelMap& labels, std::size_t num_classes = 3);

struct CascadeSettings {
  std::size_t pca_components = 5;
  std::size_t loc_size = 64;
  std::size_t seg_size = 64;
  std::size_t time_samples = 50;
  double duration_sec = 300.0;
  double bbox_margin = 0.10;

  static CascadeSettings from(const RunConfig& cfg);
  Shape loc_grid() const { return {loc_size, loc_size, loc_size}; }
  Shape seg_grid() const { return {seg_size, seg_size, seg_size}; }
};

struct CascadeModel {
  UNet3D localizer;
  UNet3D segmenter;
  CascadeSettings settings;

  /// Checks the networks' channel counts against the preprocessing settings.
  void validate() const;
};

/// Resample to the localizer grid, project onto the volume's own temporal
/// principal components, z-score each component.
Tensor localizer_input(const Volume4D& vol, const CascadeSettings& s);
/// Resample a crop to the uniform time grid and spatially to the segmenter
/// grid (the two commute; frames are shrunk first), then z-score each time channel.
Tensor segmenter_input(const Volume4D& crop, const CascadeSettings& s);

struct Localization {
  std::vector<BoundingBox> boxes;
  LabelMap coarse;  // argmax on the localizer grid
};

Localization localize(CascadeModel& model, const Volume4D& vol);
/// Binary mask with the crop's own dims. Boxes thinner than 2 voxels are rejected.
LabelMap segment_crop(CascadeModel& model, const Volume4D& vol, const BoundingBox& box);

struct SegmentationResult {
  LabelMap labels;
  std::vector<BoundingBox> boxes;
  bool no_kidneys_found = false;
  double localize_ms = 0.0;
  double segment_ms = 0.0;
  double total_ms = 0.0;

  /// "timing localize_ms=<ms> segment_ms=<ms> total_ms=<ms> boxes=<n>"
  std::string timing_line() const;
};

SegmentationResult predict(CascadeModel& model, const Volume4D& vol);

// ---------------------------------------------------------------- training

struct TrainSettings {
  std::size_t epochs = 60;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  std::size_t augment_copies = 4;
  double scale_min = 0.8;
  double scale_max = 1.2;
  /// Called after every epoch with its mean training loss.
  std::function<void(std::size_t epoch, double loss)> on_epoch;

  static TrainSettings from(const RunConfig& cfg);
};

struct TrainResult {
  UNet3D net;
  std::vector<double> loss_history;  // mean loss per epoch
  std::vector<double> class_weights;
};

struct LocalizerSample {
  Tensor input;     // [K, s, s, s]
  LabelMap labels;  // [s, s, s], classes 0..2
};

/// The preprocessed subject plus `augment_copies` rescaled copies with factors
/// drawn uniformly from [scale_min, scale_max] by a generator seeded with `seed`.
std::vector<LocalizerSample> localizer_samples(const Volume4D& vol, const LabelMap& labels, const CascadeSettings& s,
                                               const TrainSettings& t, std::uint64_t seed);

struct SegmenterSample {
  Volume4D crop;    // uniform time grid, native spatial resolution
  LabelMap target;  // [s, s, s], 0/1
};

/// One sample per kidney class present, cropped from its ground-truth box grown
/// by the margin. Label-empty crops are dropped and reported in `warnings`.
std::vector<SegmenterSample> segmenter_samples(const Volume4D& vol, const LabelMap& labels, const CascadeSettings& s,
                                               std::vector<std::string>* warnings = nullptr);
/// A single candidate crop; nullopt (with a warning) when it holds no label.
std::optional<SegmenterSample> segmenter_sample(const Volume4D& vol, const LabelMap& labels, const BoundingBox& box,
                                                const CascadeSettings& s, std::vector<std::string>* warnings = nullptr);

TrainResult train_localizer(const std::vector<LocalizerSample>& samples, const UNetConfig& cfg,
                            const TrainSettings& t);
TrainResult train_segmenter(const std::vector<SegmenterSample>& samples, const UNetConfig& cfg,
                            const CascadeSettings& s, const TrainSettings& t);

}  // namespace renalseg
