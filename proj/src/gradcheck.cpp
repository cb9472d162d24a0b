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

#include "renalseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>

#include "renalseg/loss.hpp"
#include "renalseg/ops.hpp"
#include "renalseg/unet.hpp"

namespace renalseg {

namespace {

using Inputs = std::vector<TensorD>;

struct Case {
  std::string name;
  double tolerance;
  Inputs inputs;
  std::function<double(const Inputs&)> loss;
  std::function<Inputs(const Inputs&)> grad;
  // Piecewise-linear regime at a point; probes whose +/- step changes it are
  // degenerate and are redrawn. Absent for smooth ops.
  std::function<std::uint64_t(const Inputs&)> regime = {};
};

TensorD random_tensor(Shape dims, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(dims));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

// Values bounded away from zero by `gap` so that no probe crosses the ReLU kink.
TensorD away_from_zero(Shape dims, std::mt19937_64& rng, double gap) {
  TensorD t(std::move(dims));
  std::uniform_real_distribution<double> u(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.storage()) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

// A random permutation of well-separated levels: every 2x2x2 block has a unique maximum.
TensorD distinct_values(Shape dims, std::mt19937_64& rng, double gap) {
  TensorD t(std::move(dims));
  std::vector<std::size_t> perm(t.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < perm.size(); ++i) t[i] = gap * (static_cast<double>(perm[i]) - 0.5 * perm.size());
  return t;
}

double dot(const TensorD& a, const TensorD& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<Case> build_cases(std::mt19937_64& rng, double step) {
  std::vector<Case> cases;

  {
    const TensorD r = random_tensor({3, 4, 5, 4}, rng);
    cases.push_back({"conv3d", 1e-4,
                     {random_tensor({2, 4, 5, 4}, rng), random_tensor({3, 2, 3, 3, 3}, rng), random_tensor({3}, rng)},
                     [r](const Inputs& in) { return dot(ops::conv3d(in[0], in[1], in[2]), r); },
                     [r](const Inputs& in) {
                       auto g = ops::conv3d_backward(in[0], in[1], r);
                       return Inputs{g.input, g.kernel, g.bias};
                     }});
  }
  {
    const TensorD r = random_tensor({3, 4, 4, 4}, rng);
    cases.push_back({"conv1x1", 1e-4,
                     {random_tensor({4, 4, 4, 4}, rng), random_tensor({3, 4, 1, 1, 1}, rng), random_tensor({3}, rng)},
                     [r](const Inputs& in) { return dot(ops::conv1x1(in[0], in[1], in[2]), r); },
                     [r](const Inputs& in) {
                       auto g = ops::conv1x1_backward(in[0], in[1], r);
                       return Inputs{g.input, g.kernel, g.bias};
                     }});
  }
  {
    const TensorD r = random_tensor({2, 4, 6, 4}, rng);
    cases.push_back({"conv_transpose3d", 1e-4,
                     {random_tensor({3, 2, 3, 2}, rng), random_tensor({3, 2, 2, 2, 2}, rng), random_tensor({2}, rng)},
                     [r](const Inputs& in) { return dot(ops::conv_transpose3d(in[0], in[1], in[2]), r); },
                     [r](const Inputs& in) {
                       auto g = ops::conv_transpose3d_backward(in[0], in[1], r);
                       return Inputs{g.input, g.kernel, g.bias};
                     }});
  }
  {
    const TensorD r = random_tensor({2, 2, 2, 2}, rng);
    cases.push_back({"maxpool3d", 1e-4,
                     {distinct_values({2, 4, 4, 4}, rng, 20.0 * step)},
                     [r](const Inputs& in) { return dot(ops::maxpool3d(in[0]).output, r); },
                     [r](const Inputs& in) {
                       auto p = ops::maxpool3d(in[0]);
                       return Inputs{ops::maxpool3d_backward(r, p.argmax, in[0].dims())};
                     }});
  }
  {
    const TensorD r = random_tensor({2, 3, 3, 3}, rng);
    cases.push_back({"relu", 1e-4,
                     {away_from_zero({2, 3, 3, 3}, rng, 10.0 * step)},
                     [r](const Inputs& in) { return dot(ops::relu(in[0]), r); },
                     [r](const Inputs& in) { return Inputs{ops::relu_backward(in[0], r)}; }});
  }
  {
    const TensorD r = random_tensor({2, 3, 3, 3}, rng);
    // Fixed mask: the op is linear in its input once the mask is drawn.
    std::mt19937_64 mask_rng(rng());
    const auto mask = ops::dropout(TensorD({2, 3, 3, 3}, 1.0), 0.25, Mode::Train, mask_rng).mask;
    cases.push_back({"dropout", 1e-4,
                     {random_tensor({2, 3, 3, 3}, rng)},
                     [r, mask](const Inputs& in) {
                       TensorD out = in[0];
                       for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
                       return dot(out, r);
                     },
                     [r, mask](const Inputs&) { return Inputs{ops::dropout_backward(r, mask)}; }});
  }
  {
    const TensorD r = random_tensor({3, 3, 4, 3}, rng);
    auto run = [](const Inputs& in, ops::BatchNormCache<double>* cache) {
      ops::BatchNormRunning<double> running{TensorD({3}, 0.0), TensorD({3}, 1.0)};
      return ops::batchnorm(in[0], in[1], in[2], running, Mode::Train, cache);
    };
    cases.push_back({"batchnorm", 1e-3,
                     {random_tensor({3, 3, 4, 3}, rng, -2.0, 2.0), random_tensor({3}, rng, 0.5, 1.5),
                      random_tensor({3}, rng)},
                     [r, run](const Inputs& in) { return dot(run(in, nullptr), r); },
                     [r, run](const Inputs& in) {
                       ops::BatchNormCache<double> cache;
                       run(in, &cache);
                       auto g = ops::batchnorm_backward(r, in[1], cache);
                       return Inputs{g.input, g.gamma, g.beta};
                     }});
  }
  {
    const TensorD r = random_tensor({5, 2, 3, 2}, rng);
    cases.push_back({"concat_channels", 1e-4,
                     {random_tensor({2, 2, 3, 2}, rng), random_tensor({3, 2, 3, 2}, rng)},
                     [r](const Inputs& in) { return dot(ops::concat_channels(in[0], in[1]), r); },
                     [r](const Inputs&) {
                       auto [a, b] = ops::split_channels(r, 2);
                       return Inputs{a, b};
                     }});
  }
  {
    TensorD target({3, 3, 3, 3}, 0.0);
    std::uniform_int_distribution<std::size_t> cls(0, 2);
    for (std::size_t v = 0; v < 27; ++v) target[cls(rng) * 27 + v] = 1.0;
    const LossConfig cfg{{1.0, 2.5, 4.0}, 1e-7};
    cases.push_back({"softmax_weighted_ce", 1e-4,
                     {random_tensor({3, 3, 3, 3}, rng, -2.0, 2.0)},
                     [target, cfg](const Inputs& in) {
                       return weighted_cross_entropy(ops::softmax_channels(in[0]), target, cfg).loss;
                     },
                     [target, cfg](const Inputs& in) {
                       const TensorD p = ops::softmax_channels(in[0]);
                       return Inputs{ops::softmax_backward(p, weighted_cross_entropy(p, target, cfg).grad)};
                     }});
  }
  {
    UNetConfig cfg{2, 3, 2, 2, true, 0.25, true};
    auto net = std::make_shared<BasicUNet<double>>(BasicUNet<double>::build(cfg, rng()));
    const std::uint64_t dropout_seed = rng();
    Inputs inputs{random_tensor({2, 8, 8, 8}, rng)};
    for (const auto& p : net->parameters()) inputs.push_back(p.value);
    TensorD target({3, 8, 8, 8}, 0.0);
    std::uniform_int_distribution<std::size_t> cls(0, 2);
    for (std::size_t v = 0; v < 512; ++v) target[cls(rng) * 512 + v] = 1.0;
    const LossConfig loss_cfg{{1.0, 2.0, 3.0}, 1e-7};
    auto forward = [net, dropout_seed, target, loss_cfg](const Inputs& in) {
      auto& params = net->parameters();
      for (std::size_t i = 0; i < params.size(); ++i) params[i].value = in[i + 1];
      std::mt19937_64 drop(dropout_seed);
      const TensorD probs = ops::softmax_channels(net->forward(in[0], Mode::Train, &drop));
      return std::make_pair(probs, weighted_cross_entropy(probs, target, loss_cfg));
    };
    cases.push_back({"unet_depth2", 1e-3, inputs, [forward](const Inputs& in) { return forward(in).second.loss; },
                     [net, forward](const Inputs& in) {
                       auto [probs, loss] = forward(in);
                       net->zero_grad();
                       // The network does not expose the input gradient; probe parameters only.
                       net->backward(ops::softmax_backward(probs, loss.grad));
                       Inputs g{TensorD()};
                       for (const auto& p : net->parameters()) g.push_back(p.grad);
                       return g;
                     },
                     [net, forward](const Inputs& in) {
                       forward(in);
                       return net->activation_pattern();
                     }});
  }
  return cases;
}

GradCheckResult check_case(const Case& c, std::size_t points, double step, std::mt19937_64& rng, bool corrupt) {
  Inputs grads = c.grad(c.inputs);
  if (corrupt)
    for (auto& g : grads)
      for (auto& v : g.storage()) v *= 1.1;

  // Probe coordinates drawn uniformly over every input that has a gradient.
  std::vector<std::pair<std::size_t, std::size_t>> slots;
  std::size_t total = 0;
  for (std::size_t k = 0; k < c.inputs.size(); ++k)
    if (!grads[k].empty()) total += c.inputs[k].size();
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);

  GradCheckResult r{c.name, points, 0, 0.0, c.tolerance, false};
  Inputs probe = c.inputs;
  const std::uint64_t base_regime = c.regime ? c.regime(probe) : 0;
  std::size_t redrawn = 0;
  for (std::size_t p = 0; p < points;) {
    std::size_t flat = pick(rng), k = 0;
    while (grads[k].empty() || flat >= c.inputs[k].size()) {
      if (!grads[k].empty()) flat -= c.inputs[k].size();
      ++k;
    }
    const double orig = probe[k][flat];
    probe[k][flat] = orig + step;
    const double plus = c.loss(probe);
    const bool plus_ok = !c.regime || c.regime(probe) == base_regime;
    probe[k][flat] = orig - step;
    const double minus = c.loss(probe);
    const bool minus_ok = !c.regime || c.regime(probe) == base_regime;
    probe[k][flat] = orig;
    if (!plus_ok || !minus_ok) {
      if (++redrawn > 100 * points) throw std::runtime_error("gradcheck: no non-degenerate probe found for " + c.name);
      continue;
    }
    ++p;
    const double numeric = (plus - minus) / (2.0 * step);
    const double analytic = grads[k][flat];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic - numeric) / denom);
  }
  r.redrawn = redrawn;
  r.passed = r.max_rel_error < r.tolerance;
  return r;
}

}  // namespace

std::vector<std::string> gradcheck_ops() {
  return {"conv3d", "conv1x1", "conv_transpose3d", "maxpool3d", "relu", "dropout", "batchnorm", "concat_channels",
          "softmax_weighted_ce", "unet_depth2"};
}

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& options) {
  if (options.points == 0) throw std::invalid_argument("gradcheck: need at least one probe point");
  if (!(options.step > 0.0)) throw std::invalid_argument("gradcheck: step must be positive");
  const auto names = gradcheck_ops();
  if (!options.corrupt_op.empty() && std::find(names.begin(), names.end(), options.corrupt_op) == names.end())
    throw std::invalid_argument("gradcheck: unknown op '" + options.corrupt_op + "'");
  std::mt19937_64 rng(options.seed);
  std::vector<GradCheckResult> results;
  for (const auto& c : build_cases(rng, options.step))
    results.push_back(check_case(c, options.points, options.step, rng, c.name == options.corrupt_op));
  return results;
}

std::string format_gradcheck(const std::vector<GradCheckResult>& results) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-22s %6s %8s %14s %10s  %s\n", "op", "points", "redrawn", "max_rel_error", "tolerance", "status");
  os << line;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-22s %6zu %8zu %14.3e %10.0e  %s\n", r.op.c_str(), r.points, r.redrawn, r.max_rel_error,
                  r.tolerance, r.passed ? "PASS" : "FAIL");
    os << line;
  }
  return os.str();
}

}  // namespace renalseg
