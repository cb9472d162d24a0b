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

#include <doctest.h>

#include <cmath>

#include "renalseg/phantom.hpp"

using namespace renalseg;

namespace {

std::size_t count_label(const LabelMap& l, std::uint8_t v) {
  std::size_t n = 0;
  for (auto x : l.storage()) n += x == v;
  return n;
}

PhantomSpec small_spec(double pelvis = 0.0, double noise = 0.0) {
  return PhantomSpec::randomized(5, pelvis, noise, {16, 64, 64}, {2.5, 2.5, 4.0});
}

}  // namespace

TEST_CASE("gamma variate starts at baseline and peaks at onset plus time to peak") {
  const TissueCurve c{1.5, 12.0, 30.0, 2.0, 0.2};
  CHECK(gamma_variate(c, 0.0) == 0.2);
  CHECK(gamma_variate(c, 12.0) == 0.2);
  CHECK(gamma_variate(c, 42.0) == doctest::Approx(1.7).epsilon(1e-12));
  double prev = gamma_variate(c, 12.0);
  for (double t = 12.5; t <= 42.0; t += 0.5) {
    const double v = gamma_variate(c, t);
    CHECK(v > prev);
    prev = v;
  }
  for (double t = 42.5; t <= 400.0; t += 0.5) {
    const double v = gamma_variate(c, t);
    CHECK(v < prev);
    CHECK(v > 0.2);
    prev = v;
  }
  const TissueCurve flat{0.0, 0.0, 60.0, 1.0, 0.1};
  CHECK(gamma_variate(flat, 123.0) == 0.1);
}

TEST_CASE("curve validation") {
  CHECK_THROWS_AS((TissueCurve{1.0, 0.0, 0.0, 1.0, 0.0}.validate("x")), std::invalid_argument);
  CHECK_THROWS_AS((TissueCurve{1.0, 0.0, 1.0, -1.0, 0.0}.validate("x")), std::invalid_argument);
  CHECK_THROWS_AS((TissueCurve{-1.0, 0.0, 1.0, 1.0, 0.0}.validate("x")), std::invalid_argument);
  CHECK_NOTHROW((TissueCurve{1.0, 0.0, 1.0, 1.0, 0.0}.validate("x")));
}

TEST_CASE("noiseless voxels follow their tissue curve exactly") {
  const PhantomSpec spec = small_spec(0.6);
  const Phantom p = generate_phantom(spec);
  const auto times = spec.frame_times();
  CHECK(p.volume.timepoints() == spec.n_timepoints);
  CHECK(times.front() == 0.0);
  CHECK(times.back() == doctest::Approx(spec.duration_sec));
  const std::size_t n = p.labels.size();
  for (std::size_t v = 0; v < n; v += 7)
    for (std::size_t i = 0; i < times.size(); ++i)
      CHECK(p.volume.data[i * n + v] ==
            static_cast<float>(gamma_variate(spec.curves[static_cast<Tissue>(p.tissue[v])], times[i])));
  for (std::size_t v = 0; v < n; ++v) {
    const bool parenchyma = p.tissue[v] == static_cast<std::uint8_t>(Tissue::Parenchyma);
    CHECK(parenchyma == (p.labels[v] != 0));
  }
}

TEST_CASE("every tissue is present and distinguishable") {
  const PhantomSpec spec = small_spec(0.6);
  const Phantom p = generate_phantom(spec);
  for (std::uint8_t t = 0; t < kTissueCount; ++t) CHECK(count_label(p.tissue, t) > 0);
  CHECK(count_label(p.labels, 1) > 0);
  CHECK(count_label(p.labels, 2) > 0);
  CHECK(min_curve_distance(spec) > 0.1);
}

TEST_CASE("the right kidney lies at lower x") {
  const Phantom p = generate_phantom(small_spec());
  double x1 = 0.0, x2 = 0.0;
  for (std::size_t z = 0; z < 16; ++z)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) {
        if (p.labels(z, y, x) == 1) x1 += x;
        if (p.labels(z, y, x) == 2) x2 += x;
      }
  CHECK(x1 / count_label(p.labels, 1) < x2 / count_label(p.labels, 2));
}

TEST_CASE("generation is deterministic for a fixed phantom description") {
  const PhantomSpec spec = small_spec(0.5, 0.1);
  const Phantom a = generate_phantom(spec), b = generate_phantom(spec);
  CHECK(a.volume.data == b.volume.data);
  CHECK(a.labels == b.labels);
  PhantomSpec other = spec;
  other.seed = spec.seed + 1;
  CHECK(generate_phantom(other).volume.data != a.volume.data);
  CHECK(generate_phantom(other).labels == a.labels);
  CHECK(PhantomSpec::randomized(9, 0.5, 0.1).kidneys[0].center == PhantomSpec::randomized(9, 0.5, 0.1).kidneys[0].center);
}

TEST_CASE("noise has the requested spread") {
  const PhantomSpec clean = small_spec(0.0, 0.0), noisy = small_spec(0.0, 0.2);
  const Phantom a = generate_phantom(clean), b = generate_phantom(noisy);
  double s = 0.0, ss = 0.0;
  const std::size_t n = a.volume.data.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double d = double(b.volume.data[i]) - a.volume.data[i];
    s += d;
    ss += d * d;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::sqrt(ss / n) == doctest::Approx(0.2).epsilon(0.01));
}

TEST_CASE("a pelvis of fraction f removes about f cubed of the kidney") {
  // fine grid so voxelization error stays small
  PhantomSpec base = PhantomSpec::standard({48, 96, 96}, {2.0, 2.0, 2.5});
  PhantomSpec hollow = base;
  hollow.pelvis_fraction = 0.7;
  const Phantom full = generate_phantom(base), cut = generate_phantom(hollow);
  for (std::uint8_t k : {1, 2}) {
    const double ratio = double(count_label(cut.labels, k)) / double(count_label(full.labels, k));
    CHECK(ratio == doctest::Approx(1.0 - 0.7 * 0.7 * 0.7).epsilon(0.1));
  }
  CHECK(count_label(cut.tissue, static_cast<std::uint8_t>(Tissue::Pelvis)) > 0);
  CHECK(count_label(full.tissue, static_cast<std::uint8_t>(Tissue::Pelvis)) == 0);
}

TEST_CASE("spec validation names the problem") {
  PhantomSpec s = small_spec();
  CHECK_NOTHROW(s.validate());
  s.pelvis_fraction = 1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = small_spec();
  s.noise_sigma = -1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = small_spec();
  s.kidneys[0].center[2] = 500.0;
  try {
    s.validate();
    FAIL("out-of-grid kidney accepted");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("outside") != std::string::npos);
  }
  s = small_spec();
  s.kidneys[1] = s.kidneys[0];
  try {
    s.validate();
    FAIL("overlap accepted");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("overlap") != std::string::npos);
  }
  s = small_spec();
  s.n_timepoints = 1;
  CHECK_THROWS_AS(generate_phantom(s), std::invalid_argument);
}

TEST_CASE("describe lists the key parameters") {
  const std::string d = describe(small_spec(0.5, 0.25));
  CHECK(d.find("pelvis_fraction=0.5 ") != std::string::npos);
  CHECK(d.find("seed=5") != std::string::npos);
}
