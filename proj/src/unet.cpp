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

#include "renalseg/unet.hpp"

#include <cmath>
#include <stdexcept>

#include "renalseg/io.hpp"

namespace renalseg {

UNetConfig UNetConfig::localizer() { return UNetConfig{5, 3, 3, 8, true, 0.25, true}; }

UNetConfig UNetConfig::segmenter() { return UNetConfig{50, 2, 3, 8, false, 0.25, true}; }

void UNetConfig::validate() const {
  if (in_channels < 1 || out_classes < 1) throw std::invalid_argument("unet: channel counts must be positive");
  if (out_classes > 255) throw std::invalid_argument("unet: at most 255 output classes");
  if (depth < 1 || depth > 8) throw std::invalid_argument("unet: depth must lie in [1, 8]");
  if (base_filters < 1) throw std::invalid_argument("unet: base_filters must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw std::invalid_argument("unet: dropout_rate must lie in [0, 1)");
}

std::size_t unet_parameter_count(const UNetConfig& cfg) {
  cfg.validate();
  auto conv = [](std::size_t a, std::size_t b) { return 27 * a * b + b; };
  auto up = [](std::size_t a, std::size_t b) { return 8 * a * b + b; };
  std::size_t total = 0;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::size_t prev = l == 0 ? cfg.in_channels : cfg.channels_at(l - 1);
    const std::size_t c = cfg.channels_at(l);
    total += conv(prev, c) + conv(c, c);
    total += up(cfg.channels_at(l + 1), c) + conv(2 * c, c) + conv(c, c);
  }
  total += conv(cfg.channels_at(cfg.depth - 1), cfg.channels_at(cfg.depth)) +
           conv(cfg.channels_at(cfg.depth), cfg.channels_at(cfg.depth));
  if (cfg.use_final_batchnorm) total += 2 * cfg.base_filters;
  total += cfg.base_filters * cfg.out_classes + cfg.out_classes;
  return total;
}

// ---------------------------------------------------------------- construction

template <typename T>
std::size_t BasicUNet<T>::add_param(const std::string& name, Shape dims) {
  BasicTensor<T> value(dims);
  BasicTensor<T> grad(std::move(dims));
  params_.push_back({name, std::move(value), std::move(grad)});
  return params_.size() - 1;
}

template <typename T>
typename BasicUNet<T>::ConvPair BasicUNet<T>::make_pair(const std::string& prefix, std::size_t in, std::size_t out) {
  ConvPair p{};
  p.w1 = add_param(prefix + ".conv1.weight", {out, in, 3, 3, 3});
  p.b1 = add_param(prefix + ".conv1.bias", {out});
  p.w2 = add_param(prefix + ".conv2.weight", {out, out, 3, 3, 3});
  p.b2 = add_param(prefix + ".conv2.bias", {out});
  return p;
}

template <typename T>
BasicUNet<T> BasicUNet<T>::build(const UNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  BasicUNet net;
  net.config_ = cfg;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::size_t prev = l == 0 ? cfg.in_channels : cfg.channels_at(l - 1);
    net.enc_.push_back({net.make_pair("enc" + std::to_string(l), prev, cfg.channels_at(l)), {}, {}});
  }
  net.bottleneck_ = net.make_pair("bottleneck", cfg.channels_at(cfg.depth - 1), cfg.channels_at(cfg.depth));
  net.dec_.resize(cfg.depth);
  for (std::size_t k = cfg.depth; k-- > 0;) {
    const std::string prefix = "dec" + std::to_string(k);
    const std::size_t c = cfg.channels_at(k);
    DecoderLevel& d = net.dec_[k];
    d.up_w = net.add_param(prefix + ".up.weight", {cfg.channels_at(k + 1), c, 2, 2, 2});
    d.up_b = net.add_param(prefix + ".up.bias", {c});
    d.convs = net.make_pair(prefix, 2 * c, c);
  }
  if (cfg.use_final_batchnorm) {
    net.bn_gamma_ = net.add_param("final_bn.gamma", {cfg.base_filters});
    net.bn_beta_ = net.add_param("final_bn.beta", {cfg.base_filters});
    net.params_[net.bn_gamma_].value.fill(T{1});
  }
  net.head_w_ = net.add_param("head.weight", {cfg.out_classes, cfg.base_filters, 1, 1, 1});
  net.head_b_ = net.add_param("head.bias", {cfg.out_classes});
  net.running_.mean = BasicTensor<T>({cfg.base_filters}, T{0});
  net.running_.var = BasicTensor<T>({cfg.base_filters}, T{1});

  std::mt19937_64 rng(seed);
  for (auto& p : net.params_) {
    if (p.value.rank() != 5) continue;  // biases and batchnorm keep their constant init
    const bool transposed = p.name.ends_with(".up.weight");
    // fan_in: taps * input channels; a stride-2 2x2x2 transpose feeds each output from one tap per input channel.
    const std::size_t fan_in = transposed ? p.value.dim(0) : p.value.dim(1) * p.value.dim(2) * p.value.dim(3) * p.value.dim(4);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : p.value.storage()) v = static_cast<T>(u(rng));
  }
  return net;
}

template <typename T>
std::size_t BasicUNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
BasicParameter<T>& BasicUNet<T>::parameter(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw std::out_of_range("unet: no parameter named " + name);
}

template <typename T>
void BasicUNet<T>::zero_grad() {
  for (auto& p : params_) p.grad.fill(T{0});
}

// ---------------------------------------------------------------- forward / backward

template <typename T>
BasicTensor<T> BasicUNet<T>::run_pair(ConvPair& p, const BasicTensor<T>& x) {
  p.input = x;
  p.pre1 = ops::conv3d(x, params_[p.w1].value, params_[p.b1].value);
  p.act1 = ops::relu(p.pre1);
  p.pre2 = ops::conv3d(p.act1, params_[p.w2].value, params_[p.b2].value);
  p.act2 = ops::relu(p.pre2);
  return p.act2;
}

template <typename T>
BasicTensor<T> BasicUNet<T>::back_pair(ConvPair& p, const BasicTensor<T>& grad, bool want_input_grad) {
  auto accumulate = [this](std::size_t w, std::size_t b, const ops::ConvGrads<T>& g) {
    auto& gw = params_[w].grad;
    auto& gb = params_[b].grad;
    for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += g.kernel[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g.bias[i];
  };
  auto g2 = ops::conv3d_backward(p.act1, params_[p.w2].value, ops::relu_backward(p.pre2, grad));
  accumulate(p.w2, p.b2, g2);
  auto g1 = ops::conv3d_backward(p.input, params_[p.w1].value, ops::relu_backward(p.pre1, g2.input), want_input_grad);
  accumulate(p.w1, p.b1, g1);
  return std::move(g1.input);
}

template <typename T>
BasicTensor<T> BasicUNet<T>::forward(const BasicTensor<T>& input, Mode mode, std::mt19937_64* rng,
                                     const ForwardHook& hook) {
  static constexpr const char* kAxis[] = {"D", "H", "W"};
  if (input.rank() != 4) throw std::invalid_argument("unet: input must be [C,D,H,W], got " + shape_string(input.dims()));
  if (input.dim(0) != config_.in_channels)
    throw std::invalid_argument("unet: expected " + std::to_string(config_.in_channels) + " input channels, found " +
                                std::to_string(input.dim(0)));
  for (std::size_t a = 0; a < 3; ++a)
    if (input.dim(a + 1) == 0 || input.dim(a + 1) % config_.spatial_multiple() != 0)
      throw std::invalid_argument(std::string("unet: spatial axis ") + kAxis[a] + " has size " +
                                  std::to_string(input.dim(a + 1)) + ", not a multiple of " +
                                  std::to_string(config_.spatial_multiple()));
  const bool dropout_active = mode == Mode::Train && config_.use_dropout && config_.dropout_rate > 0.0;
  if (dropout_active && rng == nullptr) throw std::invalid_argument("unet: train-mode dropout needs a generator");
  auto report = [&](const std::string& stage, const BasicTensor<T>& t) {
    if (hook) hook(stage, t.dims());
  };

  input_dims_ = input.dims();
  BasicTensor<T> x = input;
  for (std::size_t l = 0; l < config_.depth; ++l) {
    EncoderLevel& e = enc_[l];
    report("enc" + std::to_string(l), run_pair(e.convs, x));
    auto pooled = ops::maxpool3d(e.convs.act2);
    e.argmax = std::move(pooled.argmax);
    e.dropout_mask.clear();
    if (dropout_active) {
      auto dropped = ops::dropout(pooled.output, config_.dropout_rate, mode, *rng);
      e.dropout_mask = std::move(dropped.mask);
      x = std::move(dropped.output);
    } else {
      x = std::move(pooled.output);
    }
    report("pool" + std::to_string(l), x);
  }
  x = run_pair(bottleneck_, x);
  report("bottleneck", x);
  for (std::size_t k = config_.depth; k-- > 0;) {
    DecoderLevel& d = dec_[k];
    d.up_input = std::move(x);
    auto up = ops::conv_transpose3d(d.up_input, params_[d.up_w].value, params_[d.up_b].value);
    x = run_pair(d.convs, ops::concat_channels(enc_[k].convs.act2, up));
    report("dec" + std::to_string(k), x);
  }
  if (config_.use_final_batchnorm) {
    bn_cache_ = {};
    x = ops::batchnorm(x, params_[bn_gamma_].value, params_[bn_beta_].value, running_, mode, &bn_cache_);
  }
  head_input_ = std::move(x);
  auto logits = ops::conv1x1(head_input_, params_[head_w_].value, params_[head_b_].value);
  report("logits", logits);
  has_cache_ = true;
  return logits;
}

template <typename T>
void BasicUNet<T>::backward(const BasicTensor<T>& grad_logits) {
  if (!has_cache_) throw std::logic_error("unet: backward() called without a preceding forward()");
  auto add = [](BasicTensor<T>& dst, const BasicTensor<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  };
  auto gh = ops::conv1x1_backward(head_input_, params_[head_w_].value, grad_logits);
  add(params_[head_w_].grad, gh.kernel);
  add(params_[head_b_].grad, gh.bias);
  BasicTensor<T> g = std::move(gh.input);
  if (config_.use_final_batchnorm) {
    auto gb = ops::batchnorm_backward(g, params_[bn_gamma_].value, bn_cache_);
    add(params_[bn_gamma_].grad, gb.gamma);
    add(params_[bn_beta_].grad, gb.beta);
    g = std::move(gb.input);
  }

  std::vector<BasicTensor<T>> skip_grads(config_.depth);
  for (std::size_t k = 0; k < config_.depth; ++k) {
    DecoderLevel& d = dec_[k];
    auto gcat = back_pair(d.convs, g, true);
    auto [gskip, gup] = ops::split_channels(gcat, enc_[k].convs.act2.dim(0));
    skip_grads[k] = std::move(gskip);
    auto gt = ops::conv_transpose3d_backward(d.up_input, params_[d.up_w].value, gup);
    add(params_[d.up_w].grad, gt.kernel);
    add(params_[d.up_b].grad, gt.bias);
    g = std::move(gt.input);
  }
  g = back_pair(bottleneck_, g, true);
  for (std::size_t l = config_.depth; l-- > 0;) {
    EncoderLevel& e = enc_[l];
    g = ops::dropout_backward(g, e.dropout_mask);
    g = ops::maxpool3d_backward(g, e.argmax, e.convs.act2.dims());
    add(g, skip_grads[l]);
    g = back_pair(e.convs, g, l > 0);
  }
}

template <typename T>
std::uint64_t BasicUNet<T>::activation_pattern() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) { h = (h ^ v) * 1099511628211ULL; };
  auto signs = [&](const ConvPair& p) {
    for (const auto* t : {&p.pre1, &p.pre2})
      for (std::size_t i = 0; i < t->size(); ++i) mix((*t)[i] > T{0} ? 2 * i + 1 : 2 * i);
  };
  for (const auto& e : enc_) {
    signs(e.convs);
    for (auto a : e.argmax) mix(a);
  }
  signs(bottleneck_);
  for (const auto& d : dec_) signs(d.convs);
  return h;
}

template class BasicUNet<float>;
template class BasicUNet<double>;

// ---------------------------------------------------------------- training wrapper

TrainableUNet TrainableUNet::wrap(UNet3D net, const AdamSettings& settings) {
  TrainableUNet t{std::move(net), {}};
  for (const auto& p : t.net.parameters()) t.adam.push_back(AdamState::for_parameter(p, settings));
  return t;
}

void TrainableUNet::step() {
  auto& params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) adam_step(params[i], adam[i]);
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'R', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr const char* kConfigName = "__config__";
constexpr const char* kRunningMean = "final_bn.running_mean";
constexpr const char* kRunningVar = "final_bn.running_var";

Tensor config_tensor(const UNetConfig& c) {
  return Tensor({7}, {static_cast<float>(c.in_channels), static_cast<float>(c.out_classes),
                      static_cast<float>(c.depth), static_cast<float>(c.base_filters),
                      c.use_dropout ? 1.0f : 0.0f, static_cast<float>(c.dropout_rate),
                      c.use_final_batchnorm ? 1.0f : 0.0f});
}

void write_tensor(io::ByteWriter& w, const std::string& name, const Tensor& t) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.text(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.dims()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.storage()) w.f32(v);
}

std::vector<std::pair<std::string, const Tensor*>> checkpoint_entries(const UNet3D& net, const Tensor& cfg) {
  std::vector<std::pair<std::string, const Tensor*>> entries{{kConfigName, &cfg}};
  for (const auto& p : net.parameters()) entries.emplace_back(p.name, &p.value);
  if (net.config().use_final_batchnorm) {
    entries.emplace_back(kRunningMean, &net.batchnorm_running().mean);
    entries.emplace_back(kRunningVar, &net.batchnorm_running().var);
  }
  return entries;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const UNet3D& net) {
  const Tensor cfg = config_tensor(net.config());
  const auto entries = checkpoint_entries(net, cfg);
  io::ByteWriter w;
  w.bytes({reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 4});
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) write_tensor(w, name, *t);
  w.seal();
  return std::move(w.buffer());
}

std::size_t checkpoint_size(const UNetConfig& cfg) {
  const UNet3D net = UNet3D::build(cfg, 0);
  const Tensor c = config_tensor(cfg);
  std::size_t n = 4 + 4 + 4 + 4;  // magic, version, count, CRC
  for (const auto& [name, t] : checkpoint_entries(net, c)) n += 2 + name.size() + 4 + 4 * t->rank() + 4 * t->size();
  return n;
}

UNet3D deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin) {
  io::ByteReader r(bytes, origin);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) r.fail("bad magic, not an RCKP checkpoint");
  r.verify_crc();
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported RCKP version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  auto read_tensor = [&r](std::string& name) {
    name = r.text(r.u16());
    const std::uint32_t ndims = r.u32();
    if (ndims > 8) r.fail("tensor '" + name + "' has implausible rank " + std::to_string(ndims));
    Shape dims(ndims);
    for (auto& d : dims) d = r.u32();
    const std::size_t n = shape_size(dims);
    if (n * 4 > r.remaining()) r.fail("truncated payload for tensor '" + name + "'");
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    return Tensor(std::move(dims), std::move(data));
  };

  std::string name;
  if (count == 0) r.fail("checkpoint holds no tensors");
  Tensor cfg_t = read_tensor(name);
  if (name != kConfigName || cfg_t.size() != 7) r.fail("first tensor must be " + std::string(kConfigName));
  UNetConfig cfg;
  cfg.in_channels = static_cast<std::size_t>(cfg_t[0]);
  cfg.out_classes = static_cast<std::size_t>(cfg_t[1]);
  cfg.depth = static_cast<std::size_t>(cfg_t[2]);
  cfg.base_filters = static_cast<std::size_t>(cfg_t[3]);
  cfg.use_dropout = cfg_t[4] != 0.0f;
  cfg.dropout_rate = static_cast<double>(cfg_t[5]);
  cfg.use_final_batchnorm = cfg_t[6] != 0.0f;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    r.fail(std::string("invalid stored configuration: ") + e.what());
  }

  UNet3D net = UNet3D::build(cfg, 0);
  const std::size_t expected = 1 + net.parameters().size() + (cfg.use_final_batchnorm ? 2 : 0);
  if (count != expected)
    r.fail("tensor count " + std::to_string(count) + " does not match configuration (expected " +
           std::to_string(expected) + ")");
  auto place = [&](Tensor& dst, const std::string& want) {
    Tensor t = read_tensor(name);
    if (name != want) r.fail("expected tensor '" + want + "', found '" + name + "'");
    if (t.dims() != dst.dims())
      r.fail("tensor '" + name + "' has dims " + shape_string(t.dims()) + ", expected " + shape_string(dst.dims()));
    dst = std::move(t);
  };
  for (auto& p : net.parameters()) place(p.value, p.name);
  if (cfg.use_final_batchnorm) {
    place(net.batchnorm_running().mean, kRunningMean);
    place(net.batchnorm_running().var, kRunningVar);
  }
  if (r.remaining() != 4) r.fail("unexpected trailing bytes before CRC");
  return net;
}

void save_checkpoint(const UNet3D& net, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_checkpoint(net));
}

UNet3D load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return deserialize_checkpoint(bytes, path.string());
}

}  // namespace renalseg
