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

// RV4D container. Layout (little-endian):
//   "RV4D" | u32 version=1 | u32 ndims | u32 dims[ndims] | u8 dtype (1=f32, 2=u8)
//   | f32 spacing x, y, z (mm) | u32 n_timepoints | f32 times[n] (seconds)
//   | payload, row-major | u32 CRC-32 of all preceding bytes
// Dynamic volumes are stored as ndims=4 [T,D,H,W]; label maps as ndims=3 with no times.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "renalseg/preprocess.hpp"
#include "renalseg/tensor.hpp"

namespace renalseg::rv4d {

inline constexpr std::uint32_t kVersion = 1;
enum class DType : std::uint8_t { Float32 = 1, Label8 = 2 };

struct Contents {
  Shape dims;
  DType dtype = DType::Float32;
  VoxelSpacing spacing;
  std::vector<float> times;
  Tensor real;     // filled for Float32
  LabelMap labels; // filled for Label8
};

std::vector<std::uint8_t> encode(const Volume4D& vol);
std::vector<std::uint8_t> encode(const LabelMap& labels, const VoxelSpacing& spacing);
/// Validates the CRC before parsing; errors are io::FormatError naming `origin`
/// and the byte offset.
Contents decode(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

void write_volume(const std::filesystem::path& path, const Volume4D& vol);
void write_labels(const std::filesystem::path& path, const LabelMap& labels, const VoxelSpacing& spacing);
Volume4D read_volume(const std::filesystem::path& path);
std::pair<LabelMap, VoxelSpacing> read_labels(const std::filesystem::path& path);

}  // namespace renalseg::rv4d
