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

#include "renalseg/cascade.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <limits>
#include <random>
#include <stdexcept>

#include "renalseg/loss.hpp"
#include "renalseg/ops.hpp"

namespace renalseg {

// ---------------------------------------------------------------- boxes

void BoundingBox::validate(const Shape& grid) const {
  if (grid.size() != 3) throw std::invalid_argument("bounding box: grid must be 3-D");
  for (std::size_t a = 0; a < 3; ++a) {
    if (lo[a] >= hi[a]) throw std::invalid_argument("bounding box " + to_string() + " is empty along axis " + "zyx"[a]);
    if (hi[a] > grid[a])
      throw std::invalid_argument("bounding box " + to_string() + " exceeds grid " + shape_string(grid));
  }
}

std::string BoundingBox::to_string() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "class %u [%zu,%zu)x[%zu,%zu)x[%zu,%zu)", static_cast<unsigned>(class_id), lo[0], hi[0],
                lo[1], hi[1], lo[2], hi[2]);
  return buf;
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
  double inter = 1.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t lo = std::max(a.lo[i], b.lo[i]);
    const std::size_t hi = std::min(a.hi[i], b.hi[i]);
    if (hi <= lo) return 0.0;
    inter *= static_cast<double>(hi - lo);
  }
  const double uni = static_cast<double>(a.volume()) + static_cast<double>(b.volume()) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::optional<BoundingBox> tight_box(const LabelMap& labels, std::uint8_t label) {
  if (labels.rank() != 3) throw std::invalid_argument("tight_box: expected a [D,H,W] label map");
  const Shape g = labels.dims();
  BoundingBox box;
  box.class_id = label;
  box.lo = {g[0], g[1], g[2]};
  bool any = false;
  for (std::size_t z = 0; z < g[0]; ++z)
    for (std::size_t y = 0; y < g[1]; ++y)
      for (std::size_t x = 0; x < g[2]; ++x) {
        if (labels(z, y, x) != label) continue;
        any = true;
        const std::array<std::size_t, 3> p{z, y, x};
        for (std::size_t a = 0; a < 3; ++a) {
          box.lo[a] = std::min(box.lo[a], p[a]);
          box.hi[a] = std::max(box.hi[a], p[a] + 1);
        }
      }
  if (!any) return std::nullopt;
  return box;
}

LabelMap largest_component(const LabelMap& labels, std::uint8_t label) {
  if (labels.rank() != 3) throw std::invalid_argument("largest_component: expected a [D,H,W] label map");
  const Shape g = labels.dims();
  const std::size_t n = labels.size();
  const std::size_t sy = g[2], sz = g[1] * g[2];
  std::vector<std::uint32_t> component(n, 0);
  std::vector<std::size_t> queue;
  std::uint32_t current = 0, best = 0;
  std::size_t best_size = 0;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (labels[seed] != label || component[seed] != 0) continue;
    ++current;
    queue.assign(1, seed);
    component[seed] = current;
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const std::size_t v = queue[head];
      const std::size_t z = v / sz, y = (v / sy) % g[1], x = v % sy;
      auto visit = [&](std::size_t u) {
        if (labels[u] == label && component[u] == 0) {
          component[u] = current;
          queue.push_back(u);
        }
      };
      if (x > 0) visit(v - 1);
      if (x + 1 < g[2]) visit(v + 1);
      if (y > 0) visit(v - sy);
      if (y + 1 < g[1]) visit(v + sy);
      if (z > 0) visit(v - sz);
      if (z + 1 < g[0]) visit(v + sz);
    }
    if (queue.size() > best_size) {
      best_size = queue.size();
      best = current;
    }
  }
  LabelMap mask(g, 0);
  if (best != 0)
    for (std::size_t i = 0; i < n; ++i) mask[i] = component[i] == best ? 1 : 0;
  return mask;
}

BoundingBox map_box(const BoundingBox& box, const Shape& small, const Shape& grid) {
  box.validate(small);
  BoundingBox out;
  out.class_id = box.class_id;
  for (std::size_t a = 0; a < 3; ++a) {
    if (small[a] == 1) {
      out.lo[a] = 0;
      out.hi[a] = grid[a];
      continue;
    }
    const double scale = static_cast<double>(grid[a] - 1) / static_cast<double>(small[a] - 1);
    const double lo = std::floor(static_cast<double>(box.lo[a]) * scale + 1e-9);
    const double hi = std::ceil(static_cast<double>(box.hi[a] - 1) * scale - 1e-9) + 1.0;
    out.lo[a] = static_cast<std::size_t>(lo);
    out.hi[a] = std::min(grid[a], static_cast<std::size_t>(hi));
  }
  return out;
}

BoundingBox expand_box(const BoundingBox& box, double margin, const Shape& grid) {
  if (!(margin >= 0.0)) throw std::invalid_argument("expand_box: margin must be non-negative");
  box.validate(grid);
  BoundingBox out = box;
  for (std::size_t a = 0; a < 3; ++a) {
    const auto grow = static_cast<std::size_t>(std::lround(margin * static_cast<double>(box.hi[a] - box.lo[a])));
    out.lo[a] = box.lo[a] > grow ? box.lo[a] - grow : 0;
    out.hi[a] = std::min(grid[a], box.hi[a] + grow);
  }
  return out;
}

std::vector<BoundingBox> boxes_from_prediction(const LabelMap& prediction, std::size_t num_classes, const Shape& grid,
                                               double margin) {
  std::vector<BoundingBox> boxes;
  for (std::size_t c = 1; c < num_classes; ++c) {
    const auto label = static_cast<std::uint8_t>(c);
    const LabelMap component = largest_component(prediction, label);
    auto box = tight_box(component, 1);
    if (!box) continue;
    box->class_id = label;
    boxes.push_back(expand_box(map_box(*box, prediction.dims(), grid), margin, grid));
  }
  return boxes;
}

Volume4D crop_volume(const Volume4D& vol, const BoundingBox& box) {
  vol.validate();
  const Shape g = vol.grid();
  box.validate(g);
  const Shape d = box.dims();
  const std::size_t T = vol.timepoints();
  Volume4D out{Tensor({T, d[0], d[1], d[2]}), vol.spacing, vol.time_points_sec};
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t z = 0; z < d[0]; ++z)
      for (std::size_t y = 0; y < d[1]; ++y) {
        const float* src = &vol.data(t, box.lo[0] + z, box.lo[1] + y, box.lo[2]);
        std::copy_n(src, d[2], &out.data(t, z, y, 0));
      }
  return out;
}

LabelMap crop_labels(const LabelMap& labels, const BoundingBox& box) {
  box.validate(labels.dims());
  const Shape d = box.dims();
  LabelMap out(d);
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      std::copy_n(&labels(box.lo[0] + z, box.lo[1] + y, box.lo[2]), d[2], &out(z, y, 0));
  return out;
}

LabelMap reassemble(const std::vector<std::pair<BoundingBox, LabelMap>>& masks, const Shape& grid) {
  LabelMap canvas(grid, 0);
  for (const auto& [box, mask] : masks) {
    box.validate(grid);
    if (mask.dims() != box.dims())
      throw std::invalid_argument("reassemble: mask dims " + shape_string(mask.dims()) + " do not match " +
                                  box.to_string());
    const Shape d = box.dims();
    for (std::size_t z = 0; z < d[0]; ++z)
      for (std::size_t y = 0; y < d[1]; ++y)
        for (std::size_t x = 0; x < d[2]; ++x) {
          if (mask(z, y, x) == 0) continue;
          auto& dst = canvas(box.lo[0] + z, box.lo[1] + y, box.lo[2] + x);
          if (dst == 0 || box.class_id < dst) dst = box.class_id;
        }
  }
  return canvas;
}

std::vector<std::pair<BoundingBox, LabelMap>> extract_kidneys(const LabelMap& labels, std::size_t num_classes) {
  std::vector<std::pair<BoundingBox, LabelMap>> out;
  for (std::size_t c = 1; c < num_classes; ++c) {
    const auto label = static_cast<std::uint8_t>(c);
    auto box = tight_box(labels, label);
    if (!box) continue;
    LabelMap mask = crop_labels(labels, *box);
    for (auto& v : mask.storage()) v = v == label ? 1 : 0;
    out.emplace_back(*box, std::move(mask));
  }
  return out;
}

// ---------------------------------------------------------------- inference

CascadeSettings CascadeSettings::from(const RunConfig& cfg) {
  return {cfg.pca_components, cfg.loc_size, cfg.seg_size, cfg.time_samples, cfg.duration_sec, cfg.bbox_margin};
}

void CascadeModel::validate() const {
  const auto& lc = localizer.config();
  const auto& sc = segmenter.config();
  if (lc.in_channels != settings.pca_components)
    throw std::invalid_argument("localizer expects " + std::to_string(lc.in_channels) +
                                " input channels, preprocessing produces " + std::to_string(settings.pca_components));
  if (lc.out_classes != 3)
    throw std::invalid_argument("localizer must have 3 output classes, found " + std::to_string(lc.out_classes));
  if (sc.in_channels != settings.time_samples)
    throw std::invalid_argument("segmenter expects " + std::to_string(sc.in_channels) +
                                " input channels, preprocessing produces " + std::to_string(settings.time_samples));
  if (sc.out_classes != 2)
    throw std::invalid_argument("segmenter must have 2 output classes, found " + std::to_string(sc.out_classes));
  if (settings.loc_size % lc.spatial_multiple() != 0 || settings.seg_size % sc.spatial_multiple() != 0)
    throw std::invalid_argument("network grid sizes must be divisible by 2^depth");
}

Tensor localizer_input(const Volume4D& vol, const CascadeSettings& s) {
  vol.validate();
  if (vol.timepoints() < s.pca_components)
    throw std::invalid_argument("volume has " + std::to_string(vol.timepoints()) + " time points, localizer needs at least " +
                                std::to_string(s.pca_components));
  const Volume4D small = resample_volume(vol, s.loc_grid());
  const PCABasis basis = fit_pca_time(small, s.pca_components);
  return normalize(project_pca(small, basis));
}

Tensor segmenter_input(const Volume4D& crop, const CascadeSettings& s) {
  // Both resamplings are linear along disjoint axes, so shrinking the frames
  // first gives the same result for far less work on large crops.
  const Volume4D small = resample_volume(crop, s.seg_grid());
  return normalize(resample_time(small, s.time_samples, s.duration_sec).data);
}

Localization localize(CascadeModel& model, const Volume4D& vol) {
  model.validate();
  const Tensor input = localizer_input(vol, model.settings);
  const Tensor logits = model.localizer.forward(input, Mode::Eval);
  Localization out;
  out.coarse = ops::argmax_channels(logits);
  out.boxes = boxes_from_prediction(out.coarse, model.localizer.config().out_classes, vol.grid(),
                                    model.settings.bbox_margin);
  return out;
}

LabelMap segment_crop(CascadeModel& model, const Volume4D& vol, const BoundingBox& box) {
  model.validate();
  box.validate(vol.grid());
  for (std::size_t a = 0; a < 3; ++a)
    if (box.hi[a] - box.lo[a] < 2)
      throw std::invalid_argument("segment_crop: " + box.to_string() + " is thinner than 2 voxels along axis " + "zyx"[a]);
  const Volume4D crop = crop_volume(vol, box);
  const Tensor logits = model.segmenter.forward(segmenter_input(crop, model.settings), Mode::Eval);
  return resample_nearest(ops::argmax_channels(logits), box.dims());
}

std::string SegmentationResult::timing_line() const {
  char buf[200];
  std::snprintf(buf, sizeof buf, "timing localize_ms=%.3f segment_ms=%.3f total_ms=%.3f boxes=%zu", localize_ms,
                segment_ms, total_ms, boxes.size());
  return buf;
}

SegmentationResult predict(CascadeModel& model, const Volume4D& vol) {
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::duration d) { return std::chrono::duration<double, std::milli>(d).count(); };
  const auto t0 = clock::now();
  Localization loc = localize(model, vol);
  const auto t1 = clock::now();
  std::vector<std::pair<BoundingBox, LabelMap>> masks;
  for (const auto& box : loc.boxes) masks.emplace_back(box, segment_crop(model, vol, box));
  SegmentationResult r;
  r.labels = reassemble(masks, vol.grid());
  const auto t2 = clock::now();
  r.boxes = std::move(loc.boxes);
  r.no_kidneys_found = r.boxes.empty();
  r.localize_ms = ms(t1 - t0);
  r.segment_ms = ms(t2 - t1);
  r.total_ms = ms(t2 - t0);
  return r;
}

// ---------------------------------------------------------------- training

TrainSettings TrainSettings::from(const RunConfig& cfg) {
  TrainSettings t;
  t.epochs = cfg.epochs;
  t.learning_rate = cfg.learning_rate;
  t.seed = cfg.seed;
  t.augment_copies = cfg.augment_copies;
  t.scale_min = cfg.scale_min;
  t.scale_max = cfg.scale_max;
  return t;
}

std::vector<LocalizerSample> localizer_samples(const Volume4D& vol, const LabelMap& labels, const CascadeSettings& s,
                                               const TrainSettings& t, std::uint64_t seed) {
  if (labels.dims() != vol.grid())
    throw std::invalid_argument("labels " + shape_string(labels.dims()) + " do not match volume grid " +
                                shape_string(vol.grid()));
  std::vector<LocalizerSample> out;
  out.push_back({localizer_input(vol, s), resample_nearest(labels, s.loc_grid())});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> factor(t.scale_min, t.scale_max);
  for (std::size_t k = 0; k < t.augment_copies; ++k) {
    auto [input, lab] = augment_scale(out[0].input, out[0].labels, factor(rng));
    out.push_back({std::move(input), std::move(lab)});
  }
  return out;
}

std::optional<SegmenterSample> segmenter_sample(const Volume4D& vol, const LabelMap& labels, const BoundingBox& box,
                                                const CascadeSettings& s, std::vector<std::string>* warnings) {
  LabelMap mask = crop_labels(labels, box);
  bool any = false;
  for (auto& v : mask.storage()) {
    v = v == box.class_id ? 1 : 0;
    any = any || v != 0;
  }
  if (!any) {
    if (warnings) warnings->push_back("skipping label-empty crop " + box.to_string());
    return std::nullopt;
  }
  return SegmenterSample{resample_time(crop_volume(vol, box), s.time_samples, s.duration_sec),
                         resample_nearest(mask, s.seg_grid())};
}

std::vector<SegmenterSample> segmenter_samples(const Volume4D& vol, const LabelMap& labels, const CascadeSettings& s,
                                               std::vector<std::string>* warnings) {
  if (labels.dims() != vol.grid())
    throw std::invalid_argument("labels " + shape_string(labels.dims()) + " do not match volume grid " +
                                shape_string(vol.grid()));
  std::vector<SegmenterSample> out;
  for (std::uint8_t c = 1; c <= 2; ++c) {
    const auto box = tight_box(labels, c);
    if (!box) {
      if (warnings) warnings->push_back("no voxels of class " + std::to_string(c) + "; no crop taken");
      continue;
    }
    if (auto sample = segmenter_sample(vol, labels, expand_box(*box, s.bbox_margin, vol.grid()), s, warnings))
      out.push_back(std::move(*sample));
  }
  return out;
}

namespace {

template <typename InputFn>
TrainResult train_network(std::size_t n, const std::vector<LabelMap>& targets, InputFn input_of,
                          const UNetConfig& cfg, const TrainSettings& t) {
  if (n < 2) throw std::invalid_argument("training needs at least 2 samples, got " + std::to_string(n));
  if (t.epochs < 1) throw std::invalid_argument("training needs at least one epoch");
  TrainResult result;
  result.class_weights = compute_class_weights(targets, cfg.out_classes);
  const LossConfig loss_cfg{result.class_weights, 1e-7};

  AdamSettings adam;
  adam.learning_rate = t.learning_rate;
  TrainableUNet model = TrainableUNet::wrap(UNet3D::build(cfg, t.seed), adam);
  std::mt19937_64 rng(t.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < t.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t i : order) {
      const Tensor input = input_of(i);
      const Tensor target = one_hot(targets[i], cfg.out_classes);
      model.net.zero_grad();
      const Tensor logits = model.net.forward(input, Mode::Train, &rng);
      const Tensor probs = ops::softmax_channels(logits);
      const auto loss = weighted_cross_entropy(probs, target, loss_cfg);
      if (!std::isfinite(loss.loss)) throw std::runtime_error("training loss is not finite at epoch " + std::to_string(epoch));
      model.net.backward(ops::softmax_backward(probs, loss.grad));
      model.step();
      total += loss.loss;
    }
    const double mean = total / static_cast<double>(n);
    result.loss_history.push_back(mean);
    if (t.on_epoch) t.on_epoch(epoch, mean);
  }
  result.net = std::move(model.net);
  return result;
}

}  // namespace

TrainResult train_localizer(const std::vector<LocalizerSample>& samples, const UNetConfig& cfg,
                            const TrainSettings& t) {
  std::vector<LabelMap> targets;
  for (const auto& s : samples) {
    if (s.input.rank() != 4 || s.input.dim(0) != cfg.in_channels)
      throw std::invalid_argument("localizer sample has dims " + shape_string(s.input.dims()) + ", network expects " +
                                  std::to_string(cfg.in_channels) + " channels");
    targets.push_back(s.labels);
  }
  return train_network(samples.size(), targets, [&](std::size_t i) -> const Tensor& { return samples[i].input; }, cfg,
                       t);
}

TrainResult train_segmenter(const std::vector<SegmenterSample>& samples, const UNetConfig& cfg,
                            const CascadeSettings& s, const TrainSettings& t) {
  if (cfg.in_channels != s.time_samples)
    throw std::invalid_argument("segmenter expects " + std::to_string(cfg.in_channels) + " channels, samples carry " +
                                std::to_string(s.time_samples));
  std::vector<LabelMap> targets;
  for (const auto& sample : samples) targets.push_back(sample.target);
  return train_network(samples.size(), targets, [&](std::size_t i) { return segmenter_input(samples[i].crop, s); }, cfg,
                       t);
}

}  // namespace renalseg
