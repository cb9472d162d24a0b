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

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "renalseg/tensor.hpp"

namespace renalseg {

template <typename T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;  // same dims as value
};

using Parameter = BasicParameter<float>;

struct AdamSettings {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  Tensor m;
  Tensor v;
  std::uint64_t step_count = 0;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_parameter(const Parameter& p, const AdamSettings& s = {}) {
    if (!(s.learning_rate > 0.0) || !(s.beta1 >= 0.0 && s.beta1 < 1.0) || !(s.beta2 >= 0.0 && s.beta2 < 1.0) ||
        !(s.epsilon > 0.0))
      throw std::invalid_argument("adam: invalid hyperparameters");
    return {Tensor(p.value.dims()), Tensor(p.value.dims()), 0, s.learning_rate, s.beta1, s.beta2, s.epsilon};
  }
};

/// One bias-corrected Adam update of `p` from its current gradient.
inline void adam_step(Parameter& p, AdamState& s) {
  if (p.grad.dims() != p.value.dims() || s.m.dims() != p.value.dims() || s.v.dims() != p.value.dims())
    throw std::invalid_argument("adam_step: state does not match parameter " + p.name);
  ++s.step_count;
  const double t = static_cast<double>(s.step_count);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double g = p.grad[i];
    const double m = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
    const double v = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
    s.m[i] = static_cast<float>(m);
    s.v[i] = static_cast<float>(v);
    p.value[i] = static_cast<float>(p.value[i] - s.learning_rate * (m / c1) / (std::sqrt(v / c2) + s.epsilon));
  }
}

}  // namespace renalseg
