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

#include "renalseg/study.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <limits>
#include <sstream>

#include "renalseg/phantom.hpp"

namespace renalseg {

namespace {

template <typename Pred>
double mean_dice_where(const std::vector<KidneyOutcome>& ks, Pred keep) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& k : ks)
    if (keep(k)) {
      sum += k.metrics.dice;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

double StudyReport::mean_dice(double noise_sigma) const {
  return mean_dice_where(kidneys, [&](const KidneyOutcome& k) { return k.noise_sigma == noise_sigma; });
}

double StudyReport::mean_dice(double noise_sigma, bool abnormal) const {
  return mean_dice_where(kidneys, [&](const KidneyOutcome& k) {
    return k.noise_sigma == noise_sigma && (k.pelvis_fraction > 0.0) == abnormal;
  });
}

double StudyReport::min_bbox_iou() const {
  double m = kidneys.empty() ? 0.0 : 1.0;
  for (const auto& k : kidneys) m = std::min(m, k.bbox_iou);
  return m;
}

std::string StudyReport::summary() const {
  std::ostringstream os;
  char line[200];
  os << "phantom noise  pelvis kidney  iou    dice   precision recall vee_ml\n";
  for (const auto& k : kidneys) {
    std::snprintf(line, sizeof line, "%-7zu %-6.3f %-6.2f %-7s %-6.3f %-6.3f %-9.3f %-6.3f %.2f\n", k.phantom,
                  k.noise_sigma, k.pelvis_fraction, k.class_id == 1 ? "right" : "left", k.bbox_iou, k.metrics.dice,
                  k.metrics.precision, k.metrics.recall, k.metrics.vee_ml);
    os << line;
  }
  return os.str();
}

StudySettings StudySettings::desk(std::uint64_t seed) {
  StudySettings s;
  s.run.seed = seed;
  s.run.base_filters = 4;
  s.run.learning_rate = 1e-3;
  s.run.augment_copies = 1;
  s.loc_epochs = 15;
  s.seg_epochs = 15;
  return s;
}

StudyReport run_phantom_study(const StudySettings& s) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto log = [&](const std::string& msg) {
    if (s.log) s.log(msg);
  };
  const CascadeSettings cs = CascadeSettings::from(s.run);
  TrainSettings ts = TrainSettings::from(s.run);

  std::vector<LocalizerSample> loc_samples;
  std::vector<SegmenterSample> seg_samples;
  std::vector<std::string> warnings;
  for (std::size_t i = 0; i < s.train_count; ++i) {
    PhantomSpec spec = s.run.phantom(i);
    spec.noise_sigma = i % 2 == 0 ? 0.0 : s.moderate_noise;
    const Phantom ph = generate_phantom(spec);
    for (auto& x : localizer_samples(ph.volume, ph.labels, cs, ts, s.run.seed * 1000003ULL + i))
      loc_samples.push_back(std::move(x));
    for (auto& x : segmenter_samples(ph.volume, ph.labels, cs, &warnings)) seg_samples.push_back(std::move(x));
  }
  for (const auto& w : warnings) log("warning: " + w);
  log("prepared " + std::to_string(loc_samples.size()) + " localizer and " + std::to_string(seg_samples.size()) +
      " segmenter samples");

  StudyReport report;
  ts.epochs = s.loc_epochs;
  ts.on_epoch = [&](std::size_t e, double loss) { log("loc epoch " + std::to_string(e) + " loss " + std::to_string(loss)); };
  TrainResult loc = train_localizer(loc_samples, s.run.localizer(), ts);
  loc_samples.clear();
  ts.epochs = s.seg_epochs;
  ts.on_epoch = [&](std::size_t e, double loss) { log("seg epoch " + std::to_string(e) + " loss " + std::to_string(loss)); };
  TrainResult seg = train_segmenter(seg_samples, s.run.segmenter(), cs, ts);
  seg_samples.clear();
  report.loc_loss = loc.loss_history;
  report.seg_loss = seg.loss_history;
  report.loc_checkpoint = serialize_checkpoint(loc.net);
  report.seg_checkpoint = serialize_checkpoint(seg.net);

  CascadeModel model{std::move(loc.net), std::move(seg.net), cs};
  for (std::size_t j = 0; j < s.test_count; ++j) {
    const std::size_t index = s.train_count + j;
    for (double noise : {0.0, s.moderate_noise}) {
      PhantomSpec spec = s.run.phantom(index);
      spec.noise_sigma = noise;
      const Phantom ph = generate_phantom(spec);
      const SegmentationResult result = predict(model, ph.volume);
      report.predict_ms.push_back(result.total_ms);
      for (std::uint8_t c = 1; c <= 2; ++c) {
        KidneyOutcome k;
        k.phantom = index;
        k.noise_sigma = noise;
        k.pelvis_fraction = spec.pelvis_fraction;
        k.class_id = c;
        const auto truth = tight_box(ph.labels, c);
        for (const auto& box : result.boxes)
          if (box.class_id == c && truth) {
            k.localized = true;
            k.bbox_iou = box_iou(box, expand_box(*truth, cs.bbox_margin, ph.labels.dims()));
          }
        k.metrics = kidney_metrics(confusion(result.labels, ph.labels, c), ph.volume.spacing);
        report.kidneys.push_back(k);
      }
      report.masks.push_back(result.labels);
      log("evaluated phantom " + std::to_string(index) + " noise " + std::to_string(noise));
    }
  }
  report.seconds = std::chrono::duration<double>(clock::now() - start).count();
  return report;
}

}  // namespace renalseg
