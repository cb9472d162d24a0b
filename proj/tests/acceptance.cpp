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

// Acceptance run: prints one "criterion N PASS|FAIL ..." line per criterion
// and exits nonzero if any criterion fails.
//
//   renalseg_acceptance [--cli <path to renalseg>] [--only 1,2,...] [--work <dir>]

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "renalseg/cascade.hpp"
#include "renalseg/gradcheck.hpp"
#include "renalseg/io.hpp"
#include "renalseg/loss.hpp"
#include "renalseg/metrics.hpp"
#include "renalseg/ops.hpp"
#include "renalseg/parallel.hpp"
#include "renalseg/phantom.hpp"
#include "renalseg/rv4d.hpp"
#include "renalseg/study.hpp"
#include "test_util.hpp"

using namespace renalseg;
using namespace renalseg::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, Verdict& v, double secs) {
  std::cout << "criterion " << id << ' ' << (v.pass ? "PASS" : "FAIL") << v.detail.str() << " secs="
            << fmt("%.1f", secs) << std::endl;
  failures += !v.pass;
}

// ---------------------------------------------------------------- 1

void gradients() {
  const auto t0 = Clock::now();
  Verdict v;
  const auto results = run_gradcheck();
  const std::set<std::string> required{"conv3d", "conv1x1", "conv_transpose3d", "maxpool3d", "relu",
                                       "batchnorm", "softmax_weighted_ce", "unet_depth2"};
  std::set<std::string> seen;
  for (const auto& r : results) {
    seen.insert(r.op);
    const double want = (r.op == "batchnorm" || r.op == "unet_depth2") ? 1e-3 : 1e-4;
    v.require(r.passed && r.max_rel_error < want && r.points == 10, r.op + " err=" + fmt("%.3g", r.max_rel_error));
    v.detail << ' ' << r.op << '=' << fmt("%.2g", r.max_rel_error);
  }
  for (const auto& op : required) v.require(seen.count(op) == 1, "missing " + op);
  const double secs = seconds_since(t0);
  v.require(secs < 120.0, "runtime");
  report(1, v, secs);
}

// ---------------------------------------------------------------- 2

void oracles() {
  const auto t0 = Clock::now();
  Verdict v;
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> small(1, 4), ch(1, 4);
  const int n = 20;
  double conv = 0, convt = 0, pool = 0, c1 = 0, pca = 0, space = 0, time = 0;
  std::size_t conf_bad = 0;
  for (int i = 0; i < n; ++i) {
    const std::size_t ci = ch(rng), co = ch(rng);
    const TensorD x = random_tensor<double>({ci, small(rng), small(rng) + 1, small(rng) + 2}, rng);
    const TensorD k3 = random_tensor<double>({co, ci, 3, 3, 3}, rng), b = random_tensor<double>({co}, rng);
    conv = std::max(conv, max_rel_diff(ops::conv3d(x, k3, b), conv3d_oracle(x, k3, b)));
    const TensorD k2 = random_tensor<double>({ci, co, 2, 2, 2}, rng);
    convt = std::max(convt, max_rel_diff(ops::conv_transpose3d(x, k2, b), conv_transpose_oracle(x, k2, b)));
    const TensorD k1 = random_tensor<double>({co, ci, 1, 1, 1}, rng);
    c1 = std::max(c1, max_rel_diff(ops::conv1x1(x, k1, b), conv1x1_oracle(x, k1, b)));
    const TensorD px = random_tensor<double>({ci, 2 * small(rng), 2 * small(rng), 2 * small(rng)}, rng);
    pool = std::max(pool, max_rel_diff(ops::maxpool3d(px).output, maxpool_oracle(px)));

    const LabelMap p = random_labels({3, 4, 5}, rng, 3), t = random_labels({3, 4, 5}, rng, 3);
    ConfusionCounts want;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const bool a = p[j] == 1, bb = t[j] == 1;
      (a && bb ? want.tp : a ? want.fp : bb ? want.fn : want.tn)++;
    }
    conf_bad += !(confusion(p, t, 1) == want);

    // PCA against a dense symmetric eigensolver on a loop-built covariance
    const std::size_t T = 5 + std::size_t(i % 6), N = 90;
    Volume4D vol{random_tensor<float>({T, 3, 5, 6}, rng), {}, {}};
    for (std::size_t tt = 0; tt < T; ++tt) vol.time_points_sec.push_back(double(tt));
    for (std::size_t vx = 0; vx < N; ++vx) {
      const double s = std::uniform_real_distribution<double>(-3.0, 3.0)(rng);
      for (std::size_t tt = 0; tt < T; ++tt) vol.data[tt * N + vx] += float(s * std::sin(0.5 * double(tt) + 1.0));
    }
    const PCABasis basis = fit_pca_time(vol, 3);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(Eigen::Index(T), Eigen::Index(T));
    std::vector<double> mu(T, 0.0);
    for (std::size_t tt = 0; tt < T; ++tt) {
      for (std::size_t vx = 0; vx < N; ++vx) mu[tt] += vol.data[tt * N + vx];
      mu[tt] /= double(N);
    }
    for (std::size_t a = 0; a < T; ++a)
      for (std::size_t c = 0; c < T; ++c) {
        double s = 0.0;
        for (std::size_t vx = 0; vx < N; ++vx) s += (vol.data[a * N + vx] - mu[a]) * (vol.data[c * N + vx] - mu[c]);
        cov(Eigen::Index(a), Eigen::Index(c)) = s / double(N);
      }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    for (std::size_t k = 0; k < 3; ++k) {
      const Eigen::Index col = Eigen::Index(T - 1 - k);
      const double ev = es.eigenvalues()(col);
      pca = std::max(pca, std::abs(basis.explained_variance[k] - ev) / std::max(ev, 1e-12));
      double align = 0.0;
      for (std::size_t tt = 0; tt < T; ++tt) align += basis.components[k][tt] * es.eigenvectors()(Eigen::Index(tt), col);
      pca = std::max(pca, 1.0 - std::abs(align));
    }

    const Tensor sx = random_tensor<float>({2, small(rng) + 1, small(rng) + 2, small(rng) + 3}, rng);
    const Shape target{small(rng) + 2, small(rng), small(rng) + 4};
    space = std::max(space, max_abs_diff(resample_trilinear(sx, target), trilinear_oracle(sx.cast<double>(), target)));

    const Volume4D rt = resample_time(vol, 9, 12.0);
    for (std::size_t vx = 0; vx < N; vx += 7) {
      std::vector<double> curve(T);
      for (std::size_t tt = 0; tt < T; ++tt) curve[tt] = vol.data[tt * N + vx];
      for (std::size_t j = 0; j < 9; ++j)
        time = std::max(time, std::abs(rt.data[j * N + vx] -
                                       interp_oracle(vol.time_points_sec, curve, 12.0 * double(j) / 8.0)));
    }
  }
  v.require(conv < 1e-5, "conv3d");
  v.require(convt < 1e-5, "conv_transpose3d");
  v.require(c1 < 1e-5, "conv1x1");
  v.require(pool == 0.0, "maxpool3d");
  v.require(conf_bad == 0, "confusion");
  v.require(pca < 1e-6, "pca");
  v.require(space < 1e-5, "trilinear");
  v.require(time < 1e-5, "time resampling");
  v.detail << " instances=" << n << " conv3d=" << fmt("%.2g", conv) << " conv_transpose3d=" << fmt("%.2g", convt)
           << " conv1x1=" << fmt("%.2g", c1) << " maxpool3d=" << fmt("%.2g", pool) << " confusion_mismatches=" << conf_bad
           << " pca=" << fmt("%.2g", pca) << " trilinear=" << fmt("%.2g", space) << " time=" << fmt("%.2g", time);
  const double secs = seconds_since(t0);
  v.require(secs < 120.0, "runtime");
  report(2, v, secs);
}

// ---------------------------------------------------------------- 3

void loss_semantics() {
  const auto t0 = Clock::now();
  Verdict v;
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t C = 2 + std::size_t(i % 3);
    const Tensor p = ops::softmax_channels(random_tensor<float>({C, 3, 3, 4}, rng, -5.0, 5.0));
    const LabelMap l = random_labels({3, 3, 4}, rng, int(C));
    Tensor t({C, 3, 3, 4}, 0.0f);
    for (std::size_t j = 0; j < l.size(); ++j) t[l[j] * l.size() + j] = 1.0f;
    double s = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double q = std::clamp<double>(p[j], 1e-7, 1.0 - 1e-7);
      s += t[j] * std::log(q) + (1.0 - t[j]) * std::log(1.0 - q);
    }
    const double want = -s / double(p.size());
    const double got = weighted_cross_entropy(p, t, LossConfig{std::vector<double>(C, 1.0)}).loss;
    worst = std::max(worst, std::abs(got - want));
  }
  const Tensor half({2, 1, 1, 1}, 0.5f), target({2, 1, 1, 1}, std::vector<float>{1.0f, 0.0f});
  const double l2 = weighted_cross_entropy(half, target, LossConfig{{1.0, 1.0}}).loss;
  v.require(worst < 1e-6, "scalar loop");
  v.require(std::abs(l2 - std::log(2.0)) < 1e-6, "log 2");
  v.detail << " max_abs_diff=" << fmt("%.2g", worst) << " half_case=" << fmt("%.9f", l2);
  report(3, v, seconds_since(t0));
}

// ---------------------------------------------------------------- 4

void adjointness() {
  const auto t0 = Clock::now();
  Verdict v;
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const std::size_t ci = 1 + std::size_t(i % 3), co = 1 + std::size_t(i % 2);
    const TensorD x = random_tensor<double>({ci, 2, 3, 2}, rng), y = random_tensor<double>({co, 4, 6, 4}, rng);
    const TensorD k = random_tensor<double>({ci, co, 2, 2, 2}, rng);
    const double lhs = dot(conv_stride2(y, k), x);
    const double rhs = dot(y, ops::conv_transpose3d(x, k, TensorD({co}, 0.0)));
    worst = std::max(worst, std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-12}));
  }
  v.require(worst < 1e-4, "inner products differ");
  v.detail << " pairs=10 max_rel=" << fmt("%.2g", worst);
  report(4, v, seconds_since(t0));
}

// ---------------------------------------------------------------- 5, 6

StudyReport run_study(int pass) {
  StudySettings s = StudySettings::desk(1);
  s.log = [pass](const std::string& m) { std::cerr << "[study " << pass << "] " << m << std::endl; };
  return run_phantom_study(s);
}

void phantom_study(const StudyReport& r) {
  Verdict v;
  const double noisy = StudySettings::desk().moderate_noise;
  const double d0 = r.mean_dice(0.0), dn = r.mean_dice(noisy), iou = r.min_bbox_iou();
  v.require(iou >= 0.5, "bbox iou");
  v.require(d0 >= 0.85, "dice at noise 0");
  v.require(dn >= 0.75, "dice at moderate noise");
  v.require(r.seconds <= 1800.0, "runtime");
  v.detail << " kidneys=" << r.kidneys.size() << " min_iou=" << fmt("%.3f", iou) << " dice_noise0=" << fmt("%.4f", d0)
           << " dice_noise" << noisy << '=' << fmt("%.4f", dn) << " dice_normal=" << fmt("%.4f", r.mean_dice(0.0, false))
           << " dice_abnormal=" << fmt("%.4f", r.mean_dice(0.0, true));
  std::cerr << r.summary();
  report(5, v, r.seconds);
}

void determinism(const StudyReport& a, const StudyReport& b) {
  Verdict v;
  v.require(a.loc_checkpoint == b.loc_checkpoint, "localizer checkpoint");
  v.require(a.seg_checkpoint == b.seg_checkpoint, "segmenter checkpoint");
  v.require(a.masks == b.masks, "masks");
  v.require(!a.loc_checkpoint.empty() && !a.masks.empty(), "empty study output");
  v.detail << " threads=" << num_threads() << " checkpoint_bytes=" << a.loc_checkpoint.size() + a.seg_checkpoint.size()
           << " masks=" << a.masks.size();
  report(6, v, a.seconds + b.seconds);
}

// ---------------------------------------------------------------- 7

double median_predict_ms(CascadeModel& model, const Volume4D& vol) {
  std::vector<double> ms;
  for (int i = 0; i < 3; ++i) ms.push_back(predict(model, vol).total_ms);
  std::sort(ms.begin(), ms.end());
  return ms[1];
}

void efficiency(const std::optional<StudyReport>& trained) {
  const auto t0 = Clock::now();
  Verdict v;
  const StudySettings s = StudySettings::desk();
  CascadeModel model;
  if (trained) {
    model = {deserialize_checkpoint(trained->loc_checkpoint), deserialize_checkpoint(trained->seg_checkpoint),
             CascadeSettings::from(s.run)};
  } else {
    model = {UNet3D::build(s.run.localizer(), 1), UNet3D::build(s.run.segmenter(), 2), CascadeSettings::from(s.run)};
  }
  PhantomSpec big = PhantomSpec::standard({32, 224, 224}, {1.25, 1.25, 3.0});
  PhantomSpec cube = PhantomSpec::standard({64, 64, 64}, {1.25, 1.25, 3.0});
  const Phantom pb = generate_phantom(big), pc = generate_phantom(cube);
  const double tb = median_predict_ms(model, pb.volume), tc = median_predict_ms(model, pc.volume);
  const double ratio = tb / tc;
  v.require(ratio <= 2.0, "ratio");
  v.detail << " T=" << big.n_timepoints << " ms_224x224x32=" << fmt("%.1f", tb) << " ms_64x64x64=" << fmt("%.1f", tc)
           << " ratio=" << fmt("%.3f", ratio) << " trained=" << (trained ? "yes" : "no");
  report(7, v, seconds_since(t0));
}

// ---------------------------------------------------------------- 8

void metric_identities() {
  const auto t0 = Clock::now();
  Verdict v;
  std::mt19937_64 rng(8);
  double worst = 0.0;
  int used = 0;
  for (int i = 0; i < 50; ++i) {
    const double density = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
    LabelMap p({6, 7, 8}), t({6, 7, 8});
    std::bernoulli_distribution bit(density);
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] = bit(rng);
      t[j] = bit(rng);
    }
    const ConfusionCounts c = confusion(p, t);
    const double pr = precision(c), re = recall(c);
    if (pr + re == 0.0) continue;
    ++used;
    worst = std::max(worst, std::abs(dice(c) - 2.0 * pr * re / (pr + re)));
  }
  const double vee = volumetric_error_ml(3000, 2000, VoxelSpacing{1.25, 1.25, 3.0});
  v.require(used == 50, "degenerate pairs");
  v.require(worst < 1e-9, "harmonic mean");
  v.require(std::abs(vee - 4.6875) < 1e-12, "vee");
  v.detail << " pairs=" << used << " max_abs=" << fmt("%.2g", worst) << " vee_ml=" << fmt("%.6f", vee);
  report(8, v, seconds_since(t0));
}

// ---------------------------------------------------------------- 9

template <typename F>
bool rejects(F&& f) {
  try {
    f();
  } catch (const io::FormatError&) {
    return true;
  }
  return false;
}

int run_cli(const std::string& cli, const std::string& args) {
  const std::string cmd = "\"" + cli + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void formats(const std::optional<StudyReport>& trained, const std::string& cli, const std::filesystem::path& work) {
  const auto t0 = Clock::now();
  Verdict v;
  PhantomSpec spec = PhantomSpec::randomized(9, 0.6, 0.1, {16, 48, 48}, {2.5, 2.5, 4.0});
  spec.n_timepoints = 12;
  const Phantom p = generate_phantom(spec);
  const auto vol_bytes = rv4d::encode(p.volume);
  const auto lab_bytes = rv4d::encode(p.labels, p.volume.spacing);
  const rv4d::Contents vc = rv4d::decode(vol_bytes), lc = rv4d::decode(lab_bytes);
  Volume4D back{vc.real, vc.spacing, std::vector<double>(vc.times.begin(), vc.times.end())};
  v.require(vc.real == p.volume.data && rv4d::encode(back) == vol_bytes, "rv4d volume roundtrip");
  v.require(lc.labels == p.labels && rv4d::encode(lc.labels, lc.spacing) == lab_bytes, "rv4d label roundtrip");

  const UNet3D net = trained ? deserialize_checkpoint(trained->seg_checkpoint) : UNet3D::build(UNetConfig::segmenter(), 1);
  const auto ck = serialize_checkpoint(net);
  v.require(serialize_checkpoint(deserialize_checkpoint(ck)) == ck, "rckp roundtrip");

  std::mt19937_64 rng(9);
  int rejected = 0, attempts = 0;
  for (const auto* bytes : {&vol_bytes, &lab_bytes, &ck}) {
    for (int i = 0; i < 10; ++i) {
      auto bad = *bytes;
      bad[std::uniform_int_distribution<std::size_t>(0, bad.size() - 1)(rng)] ^= 0x10;
      std::vector<std::uint8_t> cut(bytes->begin(), bytes->begin() + long(bytes->size() * std::size_t(i) / 10));
      ++attempts;
      rejected += bytes == &ck ? rejects([&] { deserialize_checkpoint(bad); }) && rejects([&] { deserialize_checkpoint(cut); })
                               : rejects([&] { rv4d::decode(bad); }) && rejects([&] { rv4d::decode(cut); });
    }
  }
  v.require(rejected == attempts, "library rejection");
  v.detail << " corrupt_and_truncated_rejected=" << rejected << '/' << attempts;

  if (!cli.empty()) {
    std::filesystem::create_directories(work);
    auto put = [&](const std::string& name, std::vector<std::uint8_t> b) {
      io::write_file_atomic(work / name, b);
      return (work / name).string();
    };
    auto flip = [](std::vector<std::uint8_t> b) {
      b[b.size() / 2] ^= 0x01;
      return b;
    };
    auto cut = [](std::vector<std::uint8_t> b) {
      b.resize(b.size() - 5);
      return b;
    };
    const std::string good_lab = put("labels.rv4d", lab_bytes), good_vol = put("volume.rv4d", vol_bytes);
    const std::string good_ck = put("seg.rckp", ck);
    const int codes[] = {
        run_cli(cli, "evaluate --pred " + put("crc_labels.rv4d", flip(lab_bytes)) + " --truth " + good_lab),
        run_cli(cli, "evaluate --pred " + put("cut_labels.rv4d", cut(lab_bytes)) + " --truth " + good_lab),
        run_cli(cli, "predict --loc " + put("crc.rckp", flip(ck)) + " --seg " + good_ck + " --volume " + good_vol +
                         " --out " + (work / "o.rv4d").string()),
        run_cli(cli, "predict --loc " + put("cut.rckp", cut(ck)) + " --seg " + good_ck + " --volume " + good_vol +
                         " --out " + (work / "o.rv4d").string()),
        run_cli(cli, "predict --loc " + good_ck + " --seg " + good_ck + " --volume " +
                         put("crc_volume.rv4d", flip(vol_bytes)) + " --out " + (work / "o.rv4d").string()),
    };
    int nonzero = 0;
    for (int c : codes) nonzero += c != 0;
    v.require(nonzero == 5, "cli exit codes");
    v.require(run_cli(cli, "evaluate --pred " + good_lab + " --truth " + good_lab) == 0, "cli accepts good files");
    v.detail << " cli_nonzero_exits=" << nonzero << "/5";
  } else {
    v.detail << " cli=not-built";
  }
  report(9, v, seconds_since(t0));
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  std::set<int> only;
  std::filesystem::path work = std::filesystem::temp_directory_path() / "renalseg_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--cli" && i + 1 < argc) {
      cli = argv[++i];
    } else if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::cerr << "usage: renalseg_acceptance [--cli path] [--work dir] [--only 1,2,...]\n";
      return 1;
    }
  }
  auto want = [&](int id) { return only.empty() || only.count(id) > 0; };
  set_num_threads(1);

  if (want(1)) gradients();
  if (want(2)) oracles();
  if (want(3)) loss_semantics();
  if (want(4)) adjointness();
  if (want(8)) metric_identities();

  std::optional<StudyReport> first;
  if (want(5) || want(6)) {
    first = run_study(1);
    if (want(5)) phantom_study(*first);
    if (want(6)) determinism(*first, run_study(2));
  }
  if (want(7)) efficiency(first);
  if (want(9)) formats(first, cli, work);

  std::cout << (failures == 0 ? "ALL CRITERIA PASS" : std::to_string(failures) + " CRITERIA FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
