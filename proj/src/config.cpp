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

#include "renalseg/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <variant>

namespace renalseg {

namespace {

struct Field {
  const char* key;
  std::variant<std::size_t RunConfig::*, double RunConfig::*> member;
  double min;
  double max;
  bool max_exclusive = false;
  bool min_exclusive = false;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"epochs", &RunConfig::epochs, 1, 1e6},
      {"learning_rate", &RunConfig::learning_rate, 0, 1, false, true},
      {"depth", &RunConfig::depth, 1, 6},
      {"base_filters", &RunConfig::base_filters, 1, 256},
      {"dropout_rate", &RunConfig::dropout_rate, 0, 1, true},
      {"pca_components", &RunConfig::pca_components, 1, 64},
      {"time_samples", &RunConfig::time_samples, 2, 1000},
      {"duration_sec", &RunConfig::duration_sec, 0, 1e5, false, true},
      {"bbox_margin", &RunConfig::bbox_margin, 0, 1},
      {"augment_copies", &RunConfig::augment_copies, 0, 64},
      {"scale_min", &RunConfig::scale_min, 0.5, 2},
      {"scale_max", &RunConfig::scale_max, 0.5, 2},
      {"loc_size", &RunConfig::loc_size, 2, 512},
      {"seg_size", &RunConfig::seg_size, 2, 512},
      {"phantom_count", &RunConfig::phantom_count, 0, 100000},
      {"phantom_depth", &RunConfig::phantom_depth, 4, 4096},
      {"phantom_height", &RunConfig::phantom_height, 4, 4096},
      {"phantom_width", &RunConfig::phantom_width, 4, 4096},
      {"phantom_spacing_x", &RunConfig::phantom_spacing_x, 0, 100, false, true},
      {"phantom_spacing_y", &RunConfig::phantom_spacing_y, 0, 100, false, true},
      {"phantom_spacing_z", &RunConfig::phantom_spacing_z, 0, 100, false, true},
      {"phantom_timepoints", &RunConfig::phantom_timepoints, 2, 1000},
      {"phantom_noise_sigma", &RunConfig::phantom_noise_sigma, 0, 100},
      {"phantom_abnormal_fraction", &RunConfig::phantom_abnormal_fraction, 0, 1},
      {"phantom_pelvis_min", &RunConfig::phantom_pelvis_min, 0, 1, true},
      {"phantom_pelvis_max", &RunConfig::phantom_pelvis_max, 0, 1, true},
  };
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

constexpr const char* kSeedKey = "seed";

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return f;
  throw std::invalid_argument("unknown key '" + key + "'");
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& value) {
  Int out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument(key + ": '" + value + "' is not a non-negative integer");
  return out;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  if (key == kSeedKey) {
    if (value.empty()) throw std::invalid_argument(key + ": missing value");
    seed = parse_int<std::uint64_t>(key, value);
    return;
  }
  const Field& f = find_field(key);
  if (value.empty()) throw std::invalid_argument(key + ": missing value");
  auto check = [&](double v) {
    const bool low = f.min_exclusive ? v <= f.min : v < f.min;
    const bool high = f.max_exclusive ? v >= f.max : v > f.max;
    if (low || high || !std::isfinite(v))
      throw std::invalid_argument(key + " = " + value + " is outside " + (f.min_exclusive ? "(" : "[") +
                                  format_double(f.min) + ", " + format_double(f.max) + (f.max_exclusive ? ")" : "]"));
  };
  if (auto m = std::get_if<std::size_t RunConfig::*>(&f.member)) {
    const auto v = parse_int<std::size_t>(key, value);
    check(static_cast<double>(v));
    this->*(*m) = v;
  } else {
    const auto m2 = std::get<double RunConfig::*>(f.member);
    double v = 0.0;
    std::size_t used = 0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size()) throw std::invalid_argument(key + ": '" + value + "' is not a number");
    check(v);
    this->*m2 = v;
  }
}

void RunConfig::validate() const {
  if (scale_min > scale_max) throw std::invalid_argument("scale_min must not exceed scale_max");
  if (phantom_pelvis_min > phantom_pelvis_max)
    throw std::invalid_argument("phantom_pelvis_min must not exceed phantom_pelvis_max");
  const std::size_t multiple = std::size_t{1} << depth;
  if (loc_size % multiple != 0)
    throw std::invalid_argument("loc_size " + std::to_string(loc_size) + " is not divisible by 2^depth = " +
                                std::to_string(multiple));
  if (seg_size % multiple != 0)
    throw std::invalid_argument("seg_size " + std::to_string(seg_size) + " is not divisible by 2^depth = " +
                                std::to_string(multiple));
  if (pca_components > phantom_timepoints)
    throw std::invalid_argument("pca_components exceeds phantom_timepoints");
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    try {
      if (eq == std::string::npos) throw std::invalid_argument("expected key = value");
      const std::string key = trim(s.substr(0, eq));
      if (!seen.insert(key).second) throw std::invalid_argument("duplicate key '" + key + "'");
      cfg.set(key, s.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << kSeedKey << " = " << seed << "\n";
  for (const auto& f : fields()) {
    os << f.key << " = ";
    if (auto m = std::get_if<std::size_t RunConfig::*>(&f.member)) os << this->*(*m);
    else os << format_double(this->*std::get<double RunConfig::*>(f.member));
    os << "\n";
  }
  return os.str();
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out{kSeedKey};
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

UNetConfig RunConfig::localizer() const {
  UNetConfig c = UNetConfig::localizer();
  c.in_channels = pca_components;
  c.depth = depth;
  c.base_filters = base_filters;
  c.dropout_rate = dropout_rate;
  return c;
}

UNetConfig RunConfig::segmenter() const {
  UNetConfig c = UNetConfig::segmenter();
  c.in_channels = time_samples;
  c.depth = depth;
  c.base_filters = base_filters;
  return c;
}

PhantomSpec RunConfig::phantom(std::size_t index) const {
  const std::uint64_t stream = seed * 0x100000001b3ULL + index * 0x9e3779b97f4a7c15ULL + 1;
  std::mt19937_64 rng(stream);
  // Abnormal phantoms are spread evenly through the series.
  const double before = std::floor(static_cast<double>(index) * phantom_abnormal_fraction);
  const double after = std::floor(static_cast<double>(index + 1) * phantom_abnormal_fraction);
  double pelvis = 0.0;
  if (after > before) {
    std::uniform_real_distribution<double> u(phantom_pelvis_min, phantom_pelvis_max);
    pelvis = u(rng);
  }
  const Shape grid{phantom_depth, phantom_height, phantom_width};
  const VoxelSpacing spacing{phantom_spacing_x, phantom_spacing_y, phantom_spacing_z};
  PhantomSpec spec = PhantomSpec::randomized(rng(), pelvis, phantom_noise_sigma, grid, spacing);
  spec.n_timepoints = phantom_timepoints;
  spec.duration_sec = duration_sec;
  return spec;
}

}  // namespace renalseg
