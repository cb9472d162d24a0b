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

#include "renalseg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace renalseg {

namespace {

void check_dims(const LabelMap& pred, const LabelMap& truth) {
  if (pred.dims() != truth.dims())
    throw std::invalid_argument("metrics: prediction dims " + shape_string(pred.dims()) + " differ from truth dims " +
                                shape_string(truth.dims()));
}

template <typename Pred>
ConfusionCounts count(const LabelMap& pred, const LabelMap& truth, Pred fg) {
  check_dims(pred, truth);
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = fg(pred[i]), t = fg(truth[i]);
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double ratio(std::uint64_t num, std::uint64_t den, const ConfusionCounts& c) {
  if (c.tp == 0 && c.fp == 0 && c.fn == 0) return 1.0;
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ConfusionCounts confusion(const LabelMap& pred, const LabelMap& truth) {
  return count(pred, truth, [](std::uint8_t v) { return v != 0; });
}

ConfusionCounts confusion(const LabelMap& pred, const LabelMap& truth, std::uint8_t label) {
  return count(pred, truth, [label](std::uint8_t v) { return v == label; });
}

double precision(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fp, c); }
double recall(const ConfusionCounts& c) { return ratio(c.tp, c.tp + c.fn, c); }
double dice(const ConfusionCounts& c) { return ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c); }

double volumetric_error_ml(std::uint64_t pred_count, std::uint64_t truth_count, const VoxelSpacing& spacing) {
  if (!(spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0))
    throw std::invalid_argument("volumetric_error_ml: voxel spacing must be positive");
  const std::uint64_t diff = pred_count > truth_count ? pred_count - truth_count : truth_count - pred_count;
  return static_cast<double>(diff) * spacing.volume_mm3() / 1000.0;
}

double volumetric_error_ml(const ConfusionCounts& c, const VoxelSpacing& spacing) {
  return volumetric_error_ml(c.tp + c.fp, c.tp + c.fn, spacing);
}

KidneyMetrics kidney_metrics(const ConfusionCounts& c, const VoxelSpacing& spacing) {
  return {precision(c), recall(c), dice(c), volumetric_error_ml(c, spacing)};
}

MetricSummary summarize(const std::vector<KidneyMetrics>& items) {
  MetricSummary s;
  s.count = items.size();
  if (items.empty()) return s;
  const double n = static_cast<double>(items.size());
  for (const auto& m : items) {
    s.mean.precision += m.precision / n;
    s.mean.recall += m.recall / n;
    s.mean.dice += m.dice / n;
    s.mean.vee_ml += m.vee_ml / n;
  }
  for (const auto& m : items) {
    s.sd.precision += (m.precision - s.mean.precision) * (m.precision - s.mean.precision) / n;
    s.sd.recall += (m.recall - s.mean.recall) * (m.recall - s.mean.recall) / n;
    s.sd.dice += (m.dice - s.mean.dice) * (m.dice - s.mean.dice) / n;
    s.sd.vee_ml += (m.vee_ml - s.mean.vee_ml) * (m.vee_ml - s.mean.vee_ml) / n;
  }
  s.sd.precision = std::sqrt(s.sd.precision);
  s.sd.recall = std::sqrt(s.sd.recall);
  s.sd.dice = std::sqrt(s.sd.dice);
  s.sd.vee_ml = std::sqrt(s.sd.vee_ml);
  return s;
}

EvaluationReport evaluate_labels(const LabelMap& pred, const LabelMap& truth, const VoxelSpacing& spacing) {
  EvaluationReport r;
  r.right = kidney_metrics(confusion(pred, truth, 1), spacing);
  r.left = kidney_metrics(confusion(pred, truth, 2), spacing);
  r.mean = summarize({r.right, r.left}).mean;
  return r;
}

std::string EvaluationReport::to_text() const {
  std::ostringstream os;
  char line[160];
  os << "kidney   precision  recall     dice       vee_ml\n";
  const std::pair<const char*, const KidneyMetrics*> rows[] = {{"right", &right}, {"left", &left}, {"mean", &mean}};
  for (const auto& [name, m] : rows) {
    std::snprintf(line, sizeof line, "%-8s %-10.6f %-10.6f %-10.6f %.4f\n", name, m->precision, m->recall, m->dice,
                  m->vee_ml);
    os << line;
  }
  os << "\n";
  for (const auto& [name, m] : rows) {
    os << name << ".precision=" << fmt(m->precision) << "\n";
    os << name << ".recall=" << fmt(m->recall) << "\n";
    os << name << ".dice=" << fmt(m->dice) << "\n";
    os << name << ".vee_ml=" << fmt(m->vee_ml) << "\n";
  }
  return os.str();
}

}  // namespace renalseg
