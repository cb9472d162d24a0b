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

#include "renalseg/phantom.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

namespace renalseg {

void TissueCurve::validate(const std::string& tissue) const {
  if (!(time_to_peak_sec > 0.0)) throw std::invalid_argument(tissue + " curve: time to peak must be positive");
  if (!(alpha > 0.0)) throw std::invalid_argument(tissue + " curve: alpha must be positive");
  if (!(amplitude >= 0.0)) throw std::invalid_argument(tissue + " curve: amplitude must be non-negative");
  if (!std::isfinite(onset_sec) || !std::isfinite(baseline))
    throw std::invalid_argument(tissue + " curve: onset and baseline must be finite");
}

double gamma_variate(const TissueCurve& c, double t) {
  if (t <= c.onset_sec) return c.baseline;
  const double s = (t - c.onset_sec) / c.time_to_peak_sec;
  return c.baseline + c.amplitude * std::pow(s, c.alpha) * std::exp(c.alpha * (1.0 - s));
}

const char* tissue_name(Tissue t) {
  switch (t) {
    case Tissue::Background: return "background";
    case Tissue::Liver: return "liver";
    case Tissue::Aorta: return "aorta";
    case Tissue::Parenchyma: return "parenchyma";
    case Tissue::Pelvis: return "pelvis";
  }
  return "unknown";
}

const TissueCurve& CurveTable::operator[](Tissue t) const {
  switch (t) {
    case Tissue::Background: return background;
    case Tissue::Liver: return liver;
    case Tissue::Aorta: return aorta;
    case Tissue::Parenchyma: return parenchyma;
    case Tissue::Pelvis: return pelvis;
  }
  throw std::invalid_argument("unknown tissue code");
}

namespace {

std::array<double, 3> extent_mm(const Shape& grid, const VoxelSpacing& sp) {
  return {static_cast<double>(grid[0]) * sp.z, static_cast<double>(grid[1]) * sp.y, static_cast<double>(grid[2]) * sp.x};
}

std::array<double, 3> spacing_zyx(const VoxelSpacing& sp) { return {sp.z, sp.y, sp.x}; }

// Normalized squared radius of voxel (z,y,x); <= 1 means inside.
double ellipsoid_r2(const Ellipsoid& e, const std::array<double, 3>& sp, double z, double y, double x, double scale) {
  const double dz = (z - e.center[0]) * sp[0] / (e.radii_mm[0] * scale);
  const double dy = (y - e.center[1]) * sp[1] / (e.radii_mm[1] * scale);
  const double dx = (x - e.center[2]) * sp[2] / (e.radii_mm[2] * scale);
  return dz * dz + dy * dy + dx * dx;
}

// Inclusive voxel index range covered by an ellipsoid along one axis, clamped to the grid.
std::pair<std::size_t, std::size_t> axis_range(const Ellipsoid& e, const std::array<double, 3>& sp, const Shape& grid,
                                               std::size_t a) {
  const double half = e.radii_mm[a] / sp[a];
  const double lo = std::max(0.0, std::floor(e.center[a] - half));
  const double hi = std::min(static_cast<double>(grid[a] - 1), std::ceil(e.center[a] + half));
  if (hi < lo) return {1, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

PhantomSpec PhantomSpec::standard(const Shape& grid, const VoxelSpacing& spacing) {
  PhantomSpec s;
  s.grid = grid;
  s.spacing = spacing;
  if (grid.size() != 3) throw std::invalid_argument("phantom grid must have 3 dims (D,H,W)");
  const auto ext = extent_mm(grid, spacing);
  const auto sp = spacing_zyx(spacing);
  auto vox = [&](std::size_t a, double offset_fraction) {
    return 0.5 * static_cast<double>(grid[a] - 1) + offset_fraction * ext[a] / sp[a];
  };
  for (int k = 0; k < 2; ++k) {
    const double side = k == 0 ? -1.0 : 1.0;
    s.kidneys[k].center = {vox(0, 0.0), vox(1, 0.10), vox(2, side * 0.25)};
    s.kidneys[k].radii_mm = {0.36 * ext[0], 0.09 * ext[1], 0.08 * ext[2]};
  }
  s.aorta_center = {vox(1, 0.05), vox(2, 0.0)};
  s.aorta_radius_mm = 0.035 * ext[2];
  s.liver.center = {vox(0, 0.2), vox(1, -0.15), vox(2, -0.22)};
  s.liver.radii_mm = {0.30 * ext[0], 0.14 * ext[1], 0.16 * ext[2]};
  return s;
}

PhantomSpec PhantomSpec::randomized(std::uint64_t seed, double pelvis_fraction, double noise_sigma, const Shape& grid,
                                    const VoxelSpacing& spacing) {
  PhantomSpec s = standard(grid, spacing);
  s.seed = seed;
  s.pelvis_fraction = pelvis_fraction;
  s.noise_sigma = noise_sigma;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const auto ext = extent_mm(grid, spacing);
  const auto sp = spacing_zyx(spacing);
  const std::array<double, 3> jitter{0.05, 0.03, 0.03};
  for (auto& kidney : s.kidneys) {
    for (std::size_t a = 0; a < 3; ++a) kidney.center[a] += unit(rng) * jitter[a] * ext[a] / sp[a];
    for (std::size_t a = 0; a < 3; ++a) kidney.radii_mm[a] *= 1.0 + 0.15 * unit(rng);
  }
  s.liver.center[1] += unit(rng) * 0.03 * ext[1] / sp[1];
  s.liver.center[2] += unit(rng) * 0.03 * ext[2] / sp[2];
  return s;
}

std::vector<double> PhantomSpec::frame_times() const {
  std::vector<double> t(n_timepoints);
  for (std::size_t i = 0; i < n_timepoints; ++i)
    t[i] = n_timepoints == 1 ? 0.0 : duration_sec * static_cast<double>(i) / static_cast<double>(n_timepoints - 1);
  return t;
}

void PhantomSpec::validate() const {
  if (grid.size() != 3 || grid[0] == 0 || grid[1] == 0 || grid[2] == 0)
    throw std::invalid_argument("phantom: grid must be three positive dims, got " + shape_string(grid));
  if (!(spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0))
    throw std::invalid_argument("phantom: voxel spacing must be positive");
  if (!(pelvis_fraction >= 0.0 && pelvis_fraction < 1.0))
    throw std::invalid_argument("phantom: pelvis_fraction must lie in [0, 1), got " + std::to_string(pelvis_fraction));
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("phantom: noise_sigma must be non-negative");
  if (n_timepoints < 2) throw std::invalid_argument("phantom: need at least 2 time points");
  if (!(duration_sec > 0.0)) throw std::invalid_argument("phantom: duration must be positive");
  if (!(aorta_radius_mm >= 0.0)) throw std::invalid_argument("phantom: aorta radius must be non-negative");
  for (std::size_t t = 0; t < kTissueCount; ++t)
    curves[static_cast<Tissue>(t)].validate(tissue_name(static_cast<Tissue>(t)));

  const auto sp = spacing_zyx(spacing);
  const char* names[2] = {"right kidney", "left kidney"};
  for (int k = 0; k < 2; ++k) {
    const auto& e = kidneys[k];
    for (std::size_t a = 0; a < 3; ++a) {
      if (!(e.radii_mm[a] > 0.0)) throw std::invalid_argument(std::string("phantom: ") + names[k] + " radii must be positive");
      const double half = e.radii_mm[a] / sp[a];
      if (e.center[a] - half < 0.0 || e.center[a] + half > static_cast<double>(grid[a] - 1))
        throw std::invalid_argument(std::string("phantom: ") + names[k] + " extends outside the grid along axis " +
                                    "zyx"[a]);
    }
  }
  for (std::size_t a = 0; a < 3; ++a)
    if (!(liver.radii_mm[a] >= 0.0)) throw std::invalid_argument("phantom: liver radii must be non-negative");

  std::array<std::pair<std::size_t, std::size_t>, 3> box;
  for (std::size_t a = 0; a < 3; ++a) {
    const auto r0 = axis_range(kidneys[0], sp, grid, a);
    const auto r1 = axis_range(kidneys[1], sp, grid, a);
    box[a] = {std::max(r0.first, r1.first), std::min(r0.second, r1.second)};
    if (box[a].first > box[a].second) return;
  }
  for (std::size_t z = box[0].first; z <= box[0].second; ++z)
    for (std::size_t y = box[1].first; y <= box[1].second; ++y)
      for (std::size_t x = box[2].first; x <= box[2].second; ++x) {
        const double fz = static_cast<double>(z), fy = static_cast<double>(y), fx = static_cast<double>(x);
        if (ellipsoid_r2(kidneys[0], sp, fz, fy, fx, 1.0) <= 1.0 && ellipsoid_r2(kidneys[1], sp, fz, fy, fx, 1.0) <= 1.0)
          throw std::invalid_argument("phantom: kidneys overlap at voxel (" + std::to_string(z) + "," +
                                      std::to_string(y) + "," + std::to_string(x) + ")");
      }
}

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Shape& g = spec.grid;
  const auto sp = spacing_zyx(spec.spacing);
  const std::size_t n = shape_size(g);

  LabelMap tissue(g, static_cast<std::uint8_t>(Tissue::Background));
  LabelMap labels(g, 0);
  const bool has_liver = spec.liver.radii_mm[0] > 0.0 && spec.liver.radii_mm[1] > 0.0 && spec.liver.radii_mm[2] > 0.0;
  const double aorta_r = spec.aorta_radius_mm;
  for (std::size_t z = 0; z < g[0]; ++z)
    for (std::size_t y = 0; y < g[1]; ++y)
      for (std::size_t x = 0; x < g[2]; ++x) {
        const double fz = static_cast<double>(z), fy = static_cast<double>(y), fx = static_cast<double>(x);
        Tissue t = Tissue::Background;
        std::uint8_t label = 0;
        if (has_liver && ellipsoid_r2(spec.liver, sp, fz, fy, fx, 1.0) <= 1.0) t = Tissue::Liver;
        if (aorta_r > 0.0) {
          const double dy = (fy - spec.aorta_center[0]) * sp[1], dx = (fx - spec.aorta_center[1]) * sp[2];
          if (dy * dy + dx * dx <= aorta_r * aorta_r) t = Tissue::Aorta;
        }
        for (int k = 0; k < 2; ++k) {
          if (ellipsoid_r2(spec.kidneys[k], sp, fz, fy, fx, 1.0) > 1.0) continue;
          if (spec.pelvis_fraction > 0.0 && ellipsoid_r2(spec.kidneys[k], sp, fz, fy, fx, spec.pelvis_fraction) <= 1.0) {
            t = Tissue::Pelvis;
          } else {
            t = Tissue::Parenchyma;
            label = static_cast<std::uint8_t>(k + 1);
          }
        }
        tissue(z, y, x) = static_cast<std::uint8_t>(t);
        labels(z, y, x) = label;
      }

  const auto times = spec.frame_times();
  const std::size_t T = times.size();
  std::vector<float> curve(kTissueCount * T);
  for (std::size_t k = 0; k < kTissueCount; ++k)
    for (std::size_t i = 0; i < T; ++i)
      curve[k * T + i] = static_cast<float>(gamma_variate(spec.curves[static_cast<Tissue>(k)], times[i]));

  Volume4D vol{Tensor({T, g[0], g[1], g[2]}), spec.spacing, times};
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < T; ++i) {
    float* frame = vol.data.data() + i * n;
    for (std::size_t v = 0; v < n; ++v) frame[v] = curve[tissue[v] * T + i];
    if (spec.noise_sigma > 0.0)
      for (std::size_t v = 0; v < n; ++v) frame[v] += static_cast<float>(spec.noise_sigma * noise(rng));
  }
  return {std::move(vol), std::move(labels), std::move(tissue)};
}

double min_curve_distance(const PhantomSpec& spec) {
  const auto times = spec.frame_times();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < kTissueCount; ++a)
    for (std::size_t b = a + 1; b < kTissueCount; ++b) {
      double ss = 0.0;
      for (double t : times) {
        const double d = gamma_variate(spec.curves[static_cast<Tissue>(a)], t) -
                         gamma_variate(spec.curves[static_cast<Tissue>(b)], t);
        ss += d * d;
      }
      best = std::min(best, std::sqrt(ss));
    }
  return best;
}

std::string describe(const PhantomSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << "grid=" << s.grid[0] << "x" << s.grid[1] << "x" << s.grid[2] << " spacing=" << s.spacing.x << ","
     << s.spacing.y << "," << s.spacing.z << " seed=" << s.seed << " pelvis_fraction=" << s.pelvis_fraction
     << " noise_sigma=" << s.noise_sigma << " timepoints=" << s.n_timepoints << " duration_sec=" << s.duration_sec;
  for (int k = 0; k < 2; ++k) {
    const auto& e = s.kidneys[k];
    os << (k == 0 ? " right" : " left") << "_center=" << e.center[0] << "," << e.center[1] << "," << e.center[2]
       << (k == 0 ? " right" : " left") << "_radii_mm=" << e.radii_mm[0] << "," << e.radii_mm[1] << ","
       << e.radii_mm[2];
  }
  return os.str();
}

}  // namespace renalseg
