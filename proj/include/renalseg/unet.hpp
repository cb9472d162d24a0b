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
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "renalseg/adam.hpp"
#include "renalseg/ops.hpp"
#include "renalseg/tensor.hpp"

namespace renalseg {

/// Topology of a 3D U-Net. Level l of the contracting path has
/// base_filters * 2^l channels; the bottleneck has base_filters * 2^depth.
struct UNetConfig {
  std::size_t in_channels = 5;
  std::size_t out_classes = 3;
  std::size_t depth = 3;
  std::size_t base_filters = 8;
  bool use_dropout = true;
  double dropout_rate = 0.25;
  bool use_final_batchnorm = true;

  /// 5 PCA channels in, right kidney / left kidney / background out, dropout after pooling.
  static UNetConfig localizer();
  /// 50 time samples in, kidney / non-kidney out, no dropout.
  static UNetConfig segmenter();

  void validate() const;
  /// Input spatial sizes must be divisible by this.
  std::size_t spatial_multiple() const { return std::size_t{1} << depth; }
  std::size_t channels_at(std::size_t level) const { return base_filters << level; }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// Number of trainable scalars for a configuration:
///   conv(a->b) = 27ab + b,  up(a->b) = 8ab + b,  c_l = base * 2^l, c_{-1} = in
///   sum_{l<depth} [conv(c_{l-1}->c_l) + conv(c_l->c_l) + up(c_{l+1}->c_l) + conv(2c_l->c_l) + conv(c_l->c_l)]
///   + conv(c_{depth-1}->c_depth) + conv(c_depth->c_depth) + 2 c_0 [batchnorm] + c_0 out + out
std::size_t unet_parameter_count(const UNetConfig& cfg);

/// Receives (stage name, activation dims) for every stage of a forward pass.
using ForwardHook = std::function<void(const std::string&, const Shape&)>;

template <typename T>
class BasicUNet {
 public:
  /// He-uniform weights (bound sqrt(6 / fan_in)), zero biases, unit batchnorm scale.
  static BasicUNet build(const UNetConfig& cfg, std::uint64_t seed);

  const UNetConfig& config() const noexcept { return config_; }
  std::vector<BasicParameter<T>>& parameters() noexcept { return params_; }
  const std::vector<BasicParameter<T>>& parameters() const noexcept { return params_; }
  ops::BatchNormRunning<T>& batchnorm_running() noexcept { return running_; }
  const ops::BatchNormRunning<T>& batchnorm_running() const noexcept { return running_; }
  std::size_t parameter_count() const;
  BasicParameter<T>& parameter(const std::string& name);

  /// Logits [out_classes, D, H, W]. Train mode applies dropout (drawing from `rng`)
  /// and per-sample batchnorm statistics, and keeps activations for backward().
  BasicTensor<T> forward(const BasicTensor<T>& input, Mode mode, std::mt19937_64* rng = nullptr,
                         const ForwardHook& hook = {});

  /// Accumulates parameter gradients for the most recent forward pass.
  void backward(const BasicTensor<T>& grad_logits);
  void zero_grad();

  /// Fingerprint of the piecewise-linear regime of the last forward pass
  /// (ReLU signs and pooling winners). Equal fingerprints mean the network is
  /// smooth between the two evaluated points.
  std::uint64_t activation_pattern() const;

 private:
  struct ConvPair {
    std::size_t w1, b1, w2, b2;  // parameter indices
    BasicTensor<T> input, pre1, act1, pre2, act2;
  };
  struct EncoderLevel {
    ConvPair convs;
    std::vector<std::uint32_t> argmax;
    std::vector<T> dropout_mask;
  };
  struct DecoderLevel {
    std::size_t up_w, up_b;
    BasicTensor<T> up_input;
    ConvPair convs;
  };

  std::size_t add_param(const std::string& name, Shape dims);
  ConvPair make_pair(const std::string& prefix, std::size_t in, std::size_t out);
  BasicTensor<T> run_pair(ConvPair& p, const BasicTensor<T>& x);
  BasicTensor<T> back_pair(ConvPair& p, const BasicTensor<T>& grad, bool want_input_grad);

  UNetConfig config_;
  std::vector<BasicParameter<T>> params_;
  std::vector<EncoderLevel> enc_;
  ConvPair bottleneck_{};
  std::vector<DecoderLevel> dec_;
  std::size_t bn_gamma_ = 0, bn_beta_ = 0, head_w_ = 0, head_b_ = 0;
  ops::BatchNormRunning<T> running_;
  ops::BatchNormCache<T> bn_cache_;
  BasicTensor<T> head_input_;
  Shape input_dims_;
  bool has_cache_ = false;
};

using UNet3D = BasicUNet<float>;

/// A network plus one Adam state per parameter.
struct TrainableUNet {
  UNet3D net;
  std::vector<AdamState> adam;

  static TrainableUNet wrap(UNet3D net, const AdamSettings& settings);
  void step();
};

// RCKP checkpoints: magic "RCKP", u32 version 1, u32 tensor count, then per tensor
// u16 name length, name bytes, u32 ndims, u32 dims, float32 payload (all little-endian),
// followed by a u32 CRC-32 of every preceding byte. The first tensor, "__config__",
// stores the UNetConfig fields; batchnorm running statistics are stored alongside
// the trainable parameters.
std::vector<std::uint8_t> serialize_checkpoint(const UNet3D& net);
UNet3D deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "checkpoint");
void save_checkpoint(const UNet3D& net, const std::filesystem::path& path);
UNet3D load_checkpoint(const std::filesystem::path& path);
/// Exact size in bytes of the checkpoint written for `cfg`.
std::size_t checkpoint_size(const UNetConfig& cfg);

}  // namespace renalseg
