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

// Layer kernels with explicit reverse-mode counterparts. Every forward op has
// a matching *_backward that maps the gradient of the op's output to the
// gradients of its inputs; the network composes them in reverse order.
//
// All ops take channel-first [C,D,H,W] tensors and are instantiated for float
// (training) and double (gradient checks).

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "renalseg/tensor.hpp"

namespace renalseg::ops {

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;  // empty when not requested
  BasicTensor<T> kernel;
  BasicTensor<T> bias;
};

// 3x3x3 convolution, stride 1, zero padding 1 (output has the input's spatial size).
// kernel [C_out, C_in, 3, 3, 3], bias [C_out].
template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias);
template <typename T>
ConvGrads<T> conv3d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                             const BasicTensor<T>& grad_out, bool want_input_grad = true);

// Pointwise channel mixing. kernel [C_out, C_in, 1, 1, 1].
template <typename T>
BasicTensor<T> conv1x1(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias);
template <typename T>
ConvGrads<T> conv1x1_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                              const BasicTensor<T>& grad_out);

// 2x2x2 transposed convolution with stride 2. kernel [C_in, C_out, 2, 2, 2];
// each input voxel writes a disjoint 2x2x2 output block.
template <typename T>
BasicTensor<T> conv_transpose3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                const BasicTensor<T>& bias);
template <typename T>
ConvGrads<T> conv_transpose3d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                                       const BasicTensor<T>& grad_out);

template <typename T>
struct PoolResult {
  BasicTensor<T> output;
  std::vector<std::uint32_t> argmax;  // linear input index per output element
};

// 2x2x2 max pooling, stride 2. Ties go to the lowest linear index.
template <typename T>
PoolResult<T> maxpool3d(const BasicTensor<T>& input);
template <typename T>
BasicTensor<T> maxpool3d_backward(const BasicTensor<T>& grad_out, const std::vector<std::uint32_t>& argmax,
                                  const Shape& input_dims);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);
// `input` is the pre-activation; the subgradient at 0 is 0.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_out);

template <typename T>
struct DropoutResult {
  BasicTensor<T> output;
  std::vector<T> mask;  // per-element multiplier; empty means identity
};

// Inverted dropout: survivors are scaled by 1/(1-rate). Identity in eval mode.
template <typename T>
DropoutResult<T> dropout(const BasicTensor<T>& input, double rate, Mode mode, std::mt19937_64& rng);
template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_out, const std::vector<T>& mask);

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

template <typename T>
struct BatchNormRunning {
  BasicTensor<T> mean;  // [C]
  BasicTensor<T> var;   // [C]
};

template <typename T>
struct BatchNormCache {
  BasicTensor<T> normalized;
  std::vector<T> inv_std;
  Mode mode = Mode::Eval;
};

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

// Per-channel normalization over all spatial positions of the sample.
// Train mode uses the sample statistics and folds them into `running`
// (running = 0.9 * running + 0.1 * sample, population variance);
// eval mode uses `running` as is.
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                         BatchNormRunning<T>& running, Mode mode, BatchNormCache<T>* cache = nullptr);
template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& gamma,
                                     const BatchNormCache<T>& cache);

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);
// Inverse of concat_channels for gradients: first `channels_a` channels, then the rest.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& grad, std::size_t channels_a);

template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits);
template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs, const BasicTensor<T>& grad_probs);

// Per-voxel index of the largest channel; ties resolve to the lowest channel.
template <typename T>
LabelMap argmax_channels(const BasicTensor<T>& scores);

}  // namespace renalseg::ops
