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

// Procedural labeled 4D phantoms: two ellipsoidal kidneys (parenchyma shell
// around an optional pelvis cavity), an aorta-like cylinder and a liver-like
// blob, each tissue following its own contrast-enhancement curve.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "renalseg/preprocess.hpp"
#include "renalseg/tensor.hpp"

namespace renalseg {

struct TissueCurve {
  double amplitude = 0.0;
  double onset_sec = 0.0;
  double time_to_peak_sec = 1.0;
  double alpha = 1.0;
  double baseline = 0.0;

  void validate(const std::string& tissue) const;
};

/// baseline for t <= onset, otherwise
/// baseline + A * s^alpha * exp(alpha * (1 - s)) with s = (t - onset) / tp.
/// The peak, baseline + A, is reached at t = onset + tp.
double gamma_variate(const TissueCurve& curve, double t);

enum class Tissue : std::uint8_t { Background = 0, Liver, Aorta, Parenchyma, Pelvis };
inline constexpr std::size_t kTissueCount = 5;
const char* tissue_name(Tissue t);

struct CurveTable {
  TissueCurve background{0.0, 0.0, 60.0, 1.0, 0.10};
  TissueCurve liver{0.35, 20.0, 140.0, 1.5, 0.25};
  TissueCurve aorta{2.00, 10.0, 15.0, 3.0, 0.15};
  TissueCurve parenchyma{1.20, 15.0, 40.0, 2.0, 0.20};
  TissueCurve pelvis{1.00, 90.0, 120.0, 2.5, 0.10};

  const TissueCurve& operator[](Tissue t) const;
};

struct Ellipsoid {
  std::array<double, 3> center{};    // voxel coordinates (z, y, x)
  std::array<double, 3> radii_mm{};  // semi-axes along z, y, x
};

struct PhantomSpec {
  Shape grid{32, 224, 224};                 // (D, H, W)
  VoxelSpacing spacing{1.25, 1.25, 3.0};
  // Index 0 is the right kidney (label 1), index 1 the left kidney (label 2).
  std::array<Ellipsoid, 2> kidneys{};
  double pelvis_fraction = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  std::size_t n_timepoints = 40;
  double duration_sec = 300.0;

  std::array<double, 2> aorta_center{};  // (y, x) voxel coordinates; runs along z
  double aorta_radius_mm = 10.0;
  Ellipsoid liver{};
  CurveTable curves{};

  /// Canonical layout centred in `grid`.
  static PhantomSpec standard(const Shape& grid = {32, 224, 224}, const VoxelSpacing& spacing = {1.25, 1.25, 3.0});
  /// Standard layout with seeded jitter of kidney positions and sizes.
  static PhantomSpec randomized(std::uint64_t seed, double pelvis_fraction, double noise_sigma,
                                const Shape& grid = {32, 224, 224},
                                const VoxelSpacing& spacing = {1.25, 1.25, 3.0});

  std::vector<double> frame_times() const;
  /// Throws std::invalid_argument on bad parameters, out-of-grid or overlapping kidneys.
  void validate() const;
};

struct Phantom {
  Volume4D volume;
  LabelMap labels;  // 0 background, 1 right parenchyma, 2 left parenchyma
  LabelMap tissue;  // Tissue code per voxel
};

Phantom generate_phantom(const PhantomSpec& spec);

/// Smallest L2 distance over frame times between the curves of any two
/// distinct tissues.
double min_curve_distance(const PhantomSpec& spec);

std::string describe(const PhantomSpec& spec);

}  // namespace renalseg
