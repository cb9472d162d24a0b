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

#include <filesystem>
#include <map>
#include <random>

#include <unistd.h>

#include "renalseg/io.hpp"
#include "renalseg/loss.hpp"
#include "renalseg/unet.hpp"
#include "test_util.hpp"

using namespace renalseg;
using namespace renalseg::testing;

namespace {

// Counts scalars by walking the layer list rather than the closed form.
std::size_t count_by_layers(const UNetConfig& cfg) {
  auto conv3 = [](std::size_t a, std::size_t b) { return a * b * 27 + b; };
  auto up = [](std::size_t a, std::size_t b) { return a * b * 8 + b; };
  std::size_t total = 0, prev = cfg.in_channels;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::size_t c = cfg.base_filters << l;
    total += conv3(prev, c) + conv3(c, c);
    prev = c;
  }
  const std::size_t bottom = cfg.base_filters << cfg.depth;
  total += conv3(prev, bottom) + conv3(bottom, bottom);
  for (std::size_t l = cfg.depth; l-- > 0;) {
    const std::size_t c = cfg.base_filters << l;
    total += up(c * 2, c) + conv3(2 * c, c) + conv3(c, c);
  }
  if (cfg.use_final_batchnorm) total += 2 * cfg.base_filters;
  return total + cfg.base_filters * cfg.out_classes + cfg.out_classes;
}

UNetConfig small(std::size_t depth = 2, std::size_t base = 2) {
  UNetConfig c;
  c.in_channels = 3;
  c.out_classes = 2;
  c.depth = depth;
  c.base_filters = base;
  c.use_dropout = false;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("renalseg_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST_CASE("parameter count agrees with the layer walk for depths 1 to 4") {
  for (std::size_t depth = 1; depth <= 4; ++depth)
    for (std::size_t base : {1, 2, 4, 8}) {
      UNetConfig cfg = UNetConfig::localizer();
      cfg.depth = depth;
      cfg.base_filters = base;
      CHECK(unet_parameter_count(cfg) == count_by_layers(cfg));
      if (depth <= 3 && base <= 4) CHECK(UNet3D::build(cfg, 1).parameter_count() == count_by_layers(cfg));
    }
  UNetConfig seg = UNetConfig::segmenter();
  CHECK(unet_parameter_count(seg) == count_by_layers(seg));
}

TEST_CASE("forward stages have the expected shapes") {
  UNetConfig cfg = UNetConfig::localizer();
  cfg.base_filters = 2;
  UNet3D net = UNet3D::build(cfg, 3);
  std::mt19937_64 rng(3);
  std::map<std::string, Shape> seen;
  const Tensor logits =
      net.forward(random_tensor<float>({5, 16, 8, 24}, rng), Mode::Eval, nullptr,
                  [&](const std::string& stage, const Shape& dims) { seen[stage] = dims; });
  CHECK(logits.dims() == Shape{3, 16, 8, 24});
  CHECK(seen.at("enc0") == Shape{2, 16, 8, 24});
  CHECK(seen.at("pool0") == Shape{2, 8, 4, 12});
  CHECK(seen.at("enc2") == Shape{8, 4, 2, 6});
  CHECK(seen.at("pool2") == Shape{8, 2, 1, 3});
  CHECK(seen.at("bottleneck") == Shape{16, 2, 1, 3});
  CHECK(seen.at("dec2") == Shape{8, 4, 2, 6});
  CHECK(seen.at("dec0") == Shape{2, 16, 8, 24});
  CHECK(seen.at("logits") == logits.dims());
}

TEST_CASE("forward rejects bad inputs with the offending axis named") {
  UNet3D net = UNet3D::build(small(), 1);
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(net.forward(Tensor({2, 8, 8, 8}), Mode::Eval), std::invalid_argument);
  try {
    net.forward(Tensor({3, 8, 6, 8}), Mode::Eval);
    FAIL("accepted H=6");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("axis H") != std::string::npos);
  }
  UNetConfig d = small();
  d.use_dropout = true;
  UNet3D dn = UNet3D::build(d, 1);
  CHECK_THROWS_AS(dn.forward(Tensor({3, 8, 8, 8}), Mode::Train), std::invalid_argument);
  CHECK_THROWS_AS(UNet3D::build(small(0), 1), std::invalid_argument);
  UNet3D fresh = UNet3D::build(small(), 1);
  CHECK_THROWS_AS(fresh.backward(Tensor({2, 8, 8, 8})), std::logic_error);
}

TEST_CASE("build is deterministic in the seed") {
  const UNet3D a = UNet3D::build(small(), 7), b = UNet3D::build(small(), 7), c = UNet3D::build(small(), 8);
  CHECK(serialize_checkpoint(a) == serialize_checkpoint(b));
  CHECK(serialize_checkpoint(a) != serialize_checkpoint(c));
}

TEST_CASE("checkpoint roundtrip preserves parameters and predictions") {
  UNet3D net = UNet3D::build(small(2, 3), 5);
  std::mt19937_64 rng(5);
  // move the running statistics away from their initial values
  for (int i = 0; i < 3; ++i) net.forward(random_tensor<float>({3, 8, 8, 8}, rng), Mode::Train);
  const auto bytes = serialize_checkpoint(net);
  CHECK(bytes.size() == checkpoint_size(net.config()));
  UNet3D back = deserialize_checkpoint(bytes);
  CHECK(back.config() == net.config());
  REQUIRE(back.parameters().size() == net.parameters().size());
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    CHECK(back.parameters()[i].name == net.parameters()[i].name);
    CHECK(back.parameters()[i].value == net.parameters()[i].value);
  }
  CHECK(back.batchnorm_running().mean == net.batchnorm_running().mean);
  CHECK(back.batchnorm_running().var == net.batchnorm_running().var);
  const Tensor x = random_tensor<float>({3, 8, 8, 8}, rng);
  CHECK(back.forward(x, Mode::Eval) == net.forward(x, Mode::Eval));

  const auto path = temp_path("roundtrip.rckp");
  save_checkpoint(net, path);
  CHECK(io::read_file(path) == bytes);
  CHECK(serialize_checkpoint(load_checkpoint(path)) == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt and truncated checkpoints are rejected") {
  const auto bytes = serialize_checkpoint(UNet3D::build(small(), 2));
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto bad = bytes;
    const std::size_t at = std::uniform_int_distribution<std::size_t>(0, bad.size() - 1)(rng);
    bad[at] ^= static_cast<std::uint8_t>(1u << (trial % 8));
    CHECK_THROWS_AS(deserialize_checkpoint(bad), io::FormatError);
  }
  for (std::size_t keep : {std::size_t{0}, std::size_t{3}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(keep));
    CHECK_THROWS_AS(deserialize_checkpoint(cut), io::FormatError);
  }
  CHECK_THROWS(load_checkpoint(temp_path("missing.rckp")));
}

TEST_CASE("checkpoint size grows with the topology") {
  CHECK(checkpoint_size(small(2, 2)) < checkpoint_size(small(2, 4)));
  CHECK(checkpoint_size(small(1, 2)) < checkpoint_size(small(2, 2)));
  CHECK(checkpoint_size(small(2, 2)) > 4 * unet_parameter_count(small(2, 2)));
}

TEST_CASE("gradient accumulates across backward calls and zero_grad resets it") {
  UNet3D net = UNet3D::build(small(), 4);
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor<float>({3, 8, 8, 8}, rng), g = random_tensor<float>({2, 8, 8, 8}, rng);
  net.zero_grad();
  net.forward(x, Mode::Train);
  net.backward(g);
  const Tensor once = net.parameters()[0].grad;
  net.forward(x, Mode::Train);
  net.backward(g);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(net.parameters()[0].grad[i] == doctest::Approx(2.0 * once[i]));
  net.zero_grad();
  for (const auto& p : net.parameters())
    for (float v : p.grad.storage()) CHECK(v == 0.0f);
}

TEST_CASE("a small Adam step on one batch lowers its loss") {
  std::mt19937_64 rng(21);
  const int trials = 20;
  int lowered = 0;
  for (int trial = 0; trial < trials; ++trial) {
    TrainableUNet tu = TrainableUNet::wrap(UNet3D::build(small(), 100 + trial), AdamSettings{1e-4});
    const Tensor x = random_tensor<float>({3, 8, 8, 8}, rng);
    Tensor target({2, 8, 8, 8}, 0.0f);
    const LabelMap l = random_labels({8, 8, 8}, rng, 2);
    for (std::size_t i = 0; i < l.size(); ++i) target[l[i] * l.size() + i] = 1.0f;
    const LossConfig cfg{{1.0, 1.0}};
    auto loss_of = [&] {
      return weighted_cross_entropy(ops::softmax_channels(tu.net.forward(x, Mode::Train)), target, cfg);
    };
    tu.net.zero_grad();
    const Tensor probs = ops::softmax_channels(tu.net.forward(x, Mode::Train));
    const auto before = weighted_cross_entropy(probs, target, cfg);
    tu.net.backward(ops::softmax_backward(probs, before.grad));
    tu.step();
    lowered += loss_of().loss < before.loss;
  }
  CHECK(lowered >= trials * 95 / 100);
}
