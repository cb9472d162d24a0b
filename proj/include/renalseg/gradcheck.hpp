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

namespace renalseg {

struct GradCheckOptions {
  std::uint64_t seed = 1;
  std::size_t points = 10;  // coordinates probed per op
  double step = 1e-3;       // central-difference step
  /// Test hook: scales the analytic gradient of the named op by 1.1 so the
  /// check must fail.
  std::string corrupt_op;
};

struct GradCheckResult {
  std::string op;
  std::size_t points = 0;
  std::size_t redrawn = 0;  // probes discarded for crossing a kink
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Central-difference checks of every differentiable op and of a depth-2
/// U-Net, all in 64-bit arithmetic. The relative error of one coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& options = {});
/// Names of the checked ops in report order.
std::vector<std::string> gradcheck_ops();
std::string format_gradcheck(const std::vector<GradCheckResult>& results);

}  // namespace renalseg
