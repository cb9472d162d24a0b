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

// renalseg command-line tool.
//
// Exit status: 0 success, 1 usage error, 2 data error, 3 check failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "renalseg/cascade.hpp"
#include "renalseg/config.hpp"
#include "renalseg/gradcheck.hpp"
#include "renalseg/io.hpp"
#include "renalseg/metrics.hpp"
#include "renalseg/parallel.hpp"
#include "renalseg/phantom.hpp"
#include "renalseg/rv4d.hpp"
#include "renalseg/unet.hpp"

namespace fs = std::filesystem;
using namespace renalseg;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCheck = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Subject {
  fs::path volume;
  fs::path labels;
};

constexpr const char* kManifest = "manifest.txt";

std::string volume_name(std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "phantom_%04zu.rv4d", i);
  return buf;
}

std::string labels_name(std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "phantom_%04zu_labels.rv4d", i);
  return buf;
}

// Manifest lines: "volume=<file> labels=<file> <phantom description>".
std::vector<Subject> read_manifest(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("data directory " + dir.string() + " does not exist");
  const fs::path manifest = dir / kManifest;
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open " + manifest.string());
  std::vector<Subject> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tok;
    Subject s;
    while (ls >> tok) {
      if (tok.rfind("volume=", 0) == 0) s.volume = dir / tok.substr(7);
      if (tok.rfind("labels=", 0) == 0) s.labels = dir / tok.substr(7);
    }
    if (s.volume.empty() || s.labels.empty())
      throw std::runtime_error(manifest.string() + ":" + std::to_string(number) + ": expected volume= and labels=");
    out.push_back(s);
  }
  return out;
}

void write_loss_log(const fs::path& path, const std::vector<double>& history) {
  std::ostringstream os;
  char buf[64];
  for (std::size_t e = 0; e < history.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu %.9g\n", e, history[e]);
    os << buf;
  }
  io::write_text_atomic(path, os.str());
}

fs::path default_log(const fs::path& checkpoint) {
  fs::path log = checkpoint;
  log += ".loss.txt";
  return log;
}

int cmd_gen_phantoms(const RunConfig& cfg, const fs::path& out, std::size_t count) {
  fs::create_directories(out);
  std::ostringstream manifest;
  manifest << "# renalseg phantoms, seed " << cfg.seed << "\n";
  for (std::size_t i = 0; i < count; ++i) {
    const PhantomSpec spec = cfg.phantom(i);
    const Phantom ph = generate_phantom(spec);
    rv4d::write_volume(out / volume_name(i), ph.volume);
    rv4d::write_labels(out / labels_name(i), ph.labels, ph.volume.spacing);
    manifest << "volume=" << volume_name(i) << " labels=" << labels_name(i) << " " << describe(spec) << "\n";
  }
  io::write_text_atomic(out / kManifest, manifest.str());
  std::cout << "wrote " << count << " phantoms to " << out.string() << "\n";
  return 0;
}

int cmd_train(bool localizer, const RunConfig& cfg, const fs::path& data, const fs::path& out, fs::path log) {
  const auto subjects = read_manifest(data);
  if (subjects.size() < 2)
    throw std::runtime_error("training needs at least 2 subjects, " + data.string() + " lists " +
                             std::to_string(subjects.size()));
  const CascadeSettings settings = CascadeSettings::from(cfg);
  TrainSettings train = TrainSettings::from(cfg);
  train.on_epoch = [&](std::size_t epoch, double loss) {
    std::cerr << "epoch " << epoch << " loss " << loss << "\n";
  };

  TrainResult result;
  if (localizer) {
    std::vector<LocalizerSample> samples;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      const Volume4D vol = rv4d::read_volume(subjects[i].volume);
      const auto labels = rv4d::read_labels(subjects[i].labels).first;
      for (auto& s : localizer_samples(vol, labels, settings, train, cfg.seed * 1000003ULL + i))
        samples.push_back(std::move(s));
    }
    result = train_localizer(samples, cfg.localizer(), train);
  } else {
    std::vector<SegmenterSample> samples;
    std::vector<std::string> warnings;
    for (const auto& subject : subjects) {
      const Volume4D vol = rv4d::read_volume(subject.volume);
      const auto labels = rv4d::read_labels(subject.labels).first;
      for (auto& s : segmenter_samples(vol, labels, settings, &warnings)) samples.push_back(std::move(s));
    }
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    result = train_segmenter(samples, cfg.segmenter(), settings, train);
  }
  save_checkpoint(result.net, out);
  if (log.empty()) log = default_log(out);
  write_loss_log(log, result.loss_history);
  std::cout << "saved " << out.string() << " (final loss " << result.loss_history.back() << ")\n";
  return 0;
}

int cmd_predict(const RunConfig& cfg, const fs::path& loc, const fs::path& seg, const fs::path& volume,
                const fs::path& out) {
  CascadeModel model{load_checkpoint(loc), load_checkpoint(seg), CascadeSettings::from(cfg)};
  model.validate();
  const Volume4D vol = rv4d::read_volume(volume);
  const SegmentationResult result = predict(model, vol);
  rv4d::write_labels(out, result.labels, vol.spacing);
  for (const auto& box : result.boxes) std::cerr << "box " << box.to_string() << "\n";
  if (result.no_kidneys_found) std::cerr << "warning: localizer found no kidney; mask is empty\n";
  std::cout << result.timing_line() << "\n";
  return 0;
}

int cmd_evaluate(const fs::path& pred, const fs::path& truth, const std::vector<double>& spacing_override) {
  const auto [p, p_spacing] = rv4d::read_labels(pred);
  const auto [t, t_spacing] = rv4d::read_labels(truth);
  VoxelSpacing spacing = t_spacing;
  if (!spacing_override.empty()) spacing = {spacing_override[0], spacing_override[1], spacing_override[2]};
  std::cout << evaluate_labels(p, t, spacing).to_text();
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, std::size_t points, const std::string& corrupt) {
  const auto ops = gradcheck_ops();
  if (!corrupt.empty() && std::find(ops.begin(), ops.end(), corrupt) == ops.end()) {
    std::string known;
    for (const auto& op : ops) known += (known.empty() ? "" : ", ") + op;
    throw UsageError("unknown op '" + corrupt + "' for --corrupt (known: " + known + ")");
  }
  GradCheckOptions opts;
  opts.seed = cfg.seed == 0 ? 1 : cfg.seed;
  opts.points = points;
  opts.corrupt_op = corrupt;
  const auto results = run_gradcheck(opts);
  std::cout << format_gradcheck(results);
  for (const auto& r : results)
    if (!r.passed) return kExitCheck;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"renalseg: cascaded kidney segmentation of 4D DCE volumes"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 0;
  app.add_option("--config", config_path, "key=value run configuration file")->check(CLI::ExistingFile);
  app.add_option_function<std::uint64_t>(
      "--seed", [&](const std::uint64_t& s) { seed = s, seed_given = true; }, "override the configured seed");
  app.add_option("--threads", threads, "worker threads (default: RENALSEG_THREADS or 1)")->check(CLI::Range(1, 1024));

  auto* gen = app.add_subcommand("gen-phantoms", "write labeled synthetic volumes and a manifest");
  std::string gen_out;
  std::size_t gen_count = 0;
  bool gen_count_given = false;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option_function<std::size_t>(
      "--count", [&](const std::size_t& n) { gen_count = n, gen_count_given = true; },
      "number of phantoms (default: phantom_count)");

  std::string data_dir, ckpt_out, log_out;
  auto* train_loc = app.add_subcommand("train-loc", "train the localization network");
  auto* train_seg = app.add_subcommand("train-seg", "train the segmentation network");
  for (auto* sub : {train_loc, train_seg}) {
    sub->add_option("--data", data_dir, "directory with manifest.txt")->required();
    sub->add_option("--out", ckpt_out, "checkpoint path")->required();
    sub->add_option("--log", log_out, "loss log path (default: <out>.loss.txt)");
  }

  auto* pred = app.add_subcommand("predict", "segment one volume");
  std::string loc_ckpt, seg_ckpt, volume_in, mask_out;
  pred->add_option("--loc", loc_ckpt, "localizer checkpoint")->required();
  pred->add_option("--seg", seg_ckpt, "segmenter checkpoint")->required();
  pred->add_option("--volume", volume_in, "RV4D volume")->required();
  pred->add_option("--out", mask_out, "RV4D label output")->required();

  auto* eval = app.add_subcommand("evaluate", "compare a predicted label map with the truth");
  std::string pred_in, truth_in;
  std::vector<double> spacing;
  eval->add_option("--pred", pred_in, "predicted RV4D labels")->required();
  eval->add_option("--truth", truth_in, "reference RV4D labels")->required();
  eval->add_option("--spacing", spacing, "voxel spacing x y z in mm (default: from the truth file)")->expected(3);

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  std::size_t points = 10;
  std::string corrupt;
  grad->add_option("--points", points, "probe points per op")->check(CLI::Range(1, 100000));
  grad->add_option("--corrupt", corrupt, "scale the analytic gradient of this op (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = RunConfig::load(config_path);
    if (seed_given) cfg.seed = seed;
    if (threads > 0) set_num_threads(threads);
    if (gen_count_given) cfg.phantom_count = gen_count;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_phantoms(cfg, gen_out, cfg.phantom_count);
    if (*train_loc) return cmd_train(true, cfg, data_dir, ckpt_out, log_out);
    if (*train_seg) return cmd_train(false, cfg, data_dir, ckpt_out, log_out);
    if (*pred) return cmd_predict(cfg, loc_ckpt, seg_ckpt, volume_in, mask_out);
    if (*eval) return cmd_evaluate(pred_in, truth_in, spacing);
    if (*grad) return cmd_gradcheck(cfg, points, corrupt);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
