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
#include <filesystem>
#include <string>
#include <vector>

#include "renalseg/phantom.hpp"
#include "renalseg/unet.hpp"

namespace renalseg {

/// Run parameters read from line-oriented `key = value` text. Blank lines and
/// lines starting with '#' are ignored; unknown or repeated keys and
/// out-of-range values are rejected with the offending line number.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 60;
  double learning_rate = 1e-4;
  std::size_t depth = 3;
  std::size_t base_filters = 8;
  double dropout_rate = 0.25;
  std::size_t pca_components = 5;
  std::size_t time_samples = 50;
  double duration_sec = 300.0;
  double bbox_margin = 0.10;
  std::size_t augment_copies = 4;
  double scale_min = 0.8;
  double scale_max = 1.2;
  std::size_t loc_size = 64;  // localizer grid edge
  std::size_t seg_size = 64;  // segmenter grid edge

  std::size_t phantom_count = 4;
  std::size_t phantom_depth = 32;
  std::size_t phantom_height = 224;
  std::size_t phantom_width = 224;
  double phantom_spacing_x = 1.25;
  double phantom_spacing_y = 1.25;
  double phantom_spacing_z = 3.0;
  std::size_t phantom_timepoints = 40;
  double phantom_noise_sigma = 0.0;
  double phantom_abnormal_fraction = 0.5;  // share of phantoms with an enlarged pelvis
  double phantom_pelvis_min = 0.5;
  double phantom_pelvis_max = 0.8;

  static RunConfig parse(const std::string& text, const std::string& origin = "config");
  static RunConfig load(const std::filesystem::path& path);
  /// Applies one `key=value` assignment after range checking it.
  void set(const std::string& key, const std::string& value);
  /// Cross-field checks (scale range ordering, grid divisibility).
  void validate() const;
  std::string to_text() const;
  static std::vector<std::string> keys();

  UNetConfig localizer() const;
  UNetConfig segmenter() const;
  /// Phantom `index` of a deterministic series derived from `seed`.
  PhantomSpec phantom(std::size_t index) const;
};

}  // namespace renalseg
