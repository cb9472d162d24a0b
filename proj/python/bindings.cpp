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

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "renalseg/cascade.hpp"
#include "renalseg/config.hpp"
#include "renalseg/gradcheck.hpp"
#include "renalseg/io.hpp"
#include "renalseg/metrics.hpp"
#include "renalseg/parallel.hpp"
#include "renalseg/phantom.hpp"
#include "renalseg/preprocess.hpp"
#include "renalseg/rv4d.hpp"
#include "renalseg/unet.hpp"

namespace py = pybind11;
using namespace renalseg;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Shape shape_of(const py::array& a) {
  Shape s;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) s.push_back(static_cast<std::size_t>(a.shape(i)));
  return s;
}

Tensor to_tensor(const FloatArray& a) {
  Tensor t(shape_of(a));
  std::memcpy(t.data(), a.data(), t.size() * sizeof(float));
  return t;
}

LabelMap to_labels(const ByteArray& a) {
  if (a.ndim() != 3) throw std::invalid_argument("label maps must be 3-D (D, H, W)");
  LabelMap t(shape_of(a));
  std::memcpy(t.data(), a.data(), t.size());
  return t;
}

template <typename T>
py::array_t<T> to_numpy(const BasicTensor<T>& t) {
  std::vector<py::ssize_t> dims(t.dims().begin(), t.dims().end());
  py::array_t<T> out(dims);
  std::memcpy(out.mutable_data(), t.data(), t.size() * sizeof(T));
  return out;
}

VoxelSpacing spacing_of(const std::array<double, 3>& xyz) { return {xyz[0], xyz[1], xyz[2]}; }
std::array<double, 3> spacing_tuple(const VoxelSpacing& s) { return {s.x, s.y, s.z}; }

Volume4D to_volume(const FloatArray& data, const std::vector<double>& times, const std::array<double, 3>& spacing) {
  if (data.ndim() != 4) throw std::invalid_argument("volumes must be 4-D (T, D, H, W)");
  Volume4D v{to_tensor(data), spacing_of(spacing), times};
  v.validate();
  return v;
}

py::dict metrics_dict(const KidneyMetrics& m) {
  py::dict d;
  d["precision"] = m.precision;
  d["recall"] = m.recall;
  d["dice"] = m.dice;
  d["vee_ml"] = m.vee_ml;
  return d;
}

py::tuple box_tuple(const BoundingBox& b) { return py::make_tuple(b.class_id, b.lo, b.hi); }

// A trained cascade loaded from two checkpoints.
class Predictor {
 public:
  Predictor(const std::filesystem::path& loc, const std::filesystem::path& seg, const std::string& config_text)
      : model_{load_checkpoint(loc), load_checkpoint(seg),
               CascadeSettings::from(config_text.empty() ? RunConfig{} : RunConfig::parse(config_text))} {
    model_.validate();
  }

  py::dict predict(const FloatArray& data, const std::vector<double>& times, const std::array<double, 3>& spacing) {
    const Volume4D vol = to_volume(data, times, spacing);
    SegmentationResult r;
    {
      py::gil_scoped_release release;
      r = renalseg::predict(model_, vol);
    }
    py::dict d;
    d["labels"] = to_numpy(r.labels);
    py::list boxes;
    for (const auto& b : r.boxes) boxes.append(box_tuple(b));
    d["boxes"] = boxes;
    d["localize_ms"] = r.localize_ms;
    d["segment_ms"] = r.segment_ms;
    d["total_ms"] = r.total_ms;
    return d;
  }

 private:
  CascadeModel model_;
};

}  // namespace

PYBIND11_MODULE(_renalseg, m) {
  m.doc() = "Cascaded 3D U-Net kidney segmentation of 4D DCE volumes";

  py::register_exception<io::FormatError>(m, "FormatError", PyExc_ValueError);

  m.def("set_num_threads", &set_num_threads, py::arg("n"));
  m.def("num_threads", &num_threads);

  m.def(
      "generate_phantom",
      [](std::uint64_t seed, double pelvis_fraction, double noise_sigma, std::array<std::size_t, 3> grid,
         std::array<double, 3> spacing, std::size_t timepoints) {
        PhantomSpec spec = PhantomSpec::randomized(seed, pelvis_fraction, noise_sigma, Shape(grid.begin(), grid.end()),
                                                   spacing_of(spacing));
        spec.n_timepoints = timepoints;
        Phantom p;
        {
          py::gil_scoped_release release;
          p = generate_phantom(spec);
        }
        py::dict d;
        d["volume"] = to_numpy(p.volume.data);
        d["labels"] = to_numpy(p.labels);
        d["tissue"] = to_numpy(p.tissue);
        d["times"] = p.volume.time_points_sec;
        d["spacing"] = spacing_tuple(p.volume.spacing);
        d["description"] = describe(spec);
        return d;
      },
      py::arg("seed"), py::arg("pelvis_fraction") = 0.0, py::arg("noise_sigma") = 0.0,
      py::arg("grid") = std::array<std::size_t, 3>{32, 224, 224}, py::arg("spacing") = std::array<double, 3>{1.25, 1.25, 3.0},
      py::arg("timepoints") = 40,
      "Labeled synthetic volume: dict with volume [T,D,H,W], labels, tissue, times, spacing (x, y, z).");

  m.def(
      "gamma_variate",
      [](double amplitude, double onset, double time_to_peak, double alpha, double baseline, double t) {
        return gamma_variate(TissueCurve{amplitude, onset, time_to_peak, alpha, baseline}, t);
      },
      py::arg("amplitude"), py::arg("onset"), py::arg("time_to_peak"), py::arg("alpha"), py::arg("baseline"), py::arg("t"));

  m.def(
      "resample_trilinear",
      [](const FloatArray& data, std::array<std::size_t, 3> target) {
        if (data.ndim() != 4) throw std::invalid_argument("expected a [C,D,H,W] array");
        return to_numpy(resample_trilinear(to_tensor(data), Shape(target.begin(), target.end())));
      },
      py::arg("data"), py::arg("target"));

  m.def(
      "resample_time",
      [](const FloatArray& data, const std::vector<double>& times, std::size_t samples, double duration) {
        return to_numpy(resample_time(to_volume(data, times, {1, 1, 1}), samples, duration).data);
      },
      py::arg("data"), py::arg("times"), py::arg("samples") = 50, py::arg("duration") = 300.0);

  m.def(
      "fit_pca_time",
      [](const FloatArray& data, std::size_t components) {
        std::vector<double> times(static_cast<std::size_t>(data.shape(0)));
        for (std::size_t i = 0; i < times.size(); ++i) times[i] = static_cast<double>(i);
        const PCABasis b = fit_pca_time(to_volume(data, times, {1, 1, 1}), components);
        py::dict d;
        d["mean_curve"] = b.mean_curve;
        d["components"] = b.components;
        d["explained_variance"] = b.explained_variance;
        d["total_variance"] = b.total_variance;
        d["degenerate"] = b.degenerate;
        return d;
      },
      py::arg("data"), py::arg("components") = 5);

  m.def(
      "confusion",
      [](const ByteArray& pred, const ByteArray& truth, int label) {
        const ConfusionCounts c = label < 0 ? confusion(to_labels(pred), to_labels(truth))
                                            : confusion(to_labels(pred), to_labels(truth), static_cast<std::uint8_t>(label));
        py::dict d;
        d["tp"] = c.tp;
        d["fp"] = c.fp;
        d["fn"] = c.fn;
        d["tn"] = c.tn;
        return d;
      },
      py::arg("pred"), py::arg("truth"), py::arg("label") = -1,
      "Voxel counts; label -1 treats every nonzero value as foreground.");

  m.def(
      "evaluate",
      [](const ByteArray& pred, const ByteArray& truth, std::array<double, 3> spacing) {
        const EvaluationReport r = evaluate_labels(to_labels(pred), to_labels(truth), spacing_of(spacing));
        py::dict d;
        d["right"] = metrics_dict(r.right);
        d["left"] = metrics_dict(r.left);
        d["mean"] = metrics_dict(r.mean);
        return d;
      },
      py::arg("pred"), py::arg("truth"), py::arg("spacing") = std::array<double, 3>{1.25, 1.25, 3.0});

  m.def(
      "volumetric_error_ml",
      [](std::uint64_t pred, std::uint64_t truth, std::array<double, 3> spacing) {
        return volumetric_error_ml(pred, truth, spacing_of(spacing));
      },
      py::arg("pred_count"), py::arg("truth_count"), py::arg("spacing"));

  m.def(
      "write_volume",
      [](const std::filesystem::path& path, const FloatArray& data, const std::vector<double>& times,
         std::array<double, 3> spacing) { rv4d::write_volume(path, to_volume(data, times, spacing)); },
      py::arg("path"), py::arg("data"), py::arg("times"), py::arg("spacing"));
  m.def(
      "read_volume",
      [](const std::filesystem::path& path) {
        const Volume4D v = rv4d::read_volume(path);
        return py::make_tuple(to_numpy(v.data), v.time_points_sec, spacing_tuple(v.spacing));
      },
      py::arg("path"), "Returns (data [T,D,H,W], times, spacing (x, y, z)).");
  m.def(
      "write_labels",
      [](const std::filesystem::path& path, const ByteArray& labels, std::array<double, 3> spacing) {
        rv4d::write_labels(path, to_labels(labels), spacing_of(spacing));
      },
      py::arg("path"), py::arg("labels"), py::arg("spacing"));
  m.def(
      "read_labels",
      [](const std::filesystem::path& path) {
        const auto [labels, spacing] = rv4d::read_labels(path);
        return py::make_tuple(to_numpy(labels), spacing_tuple(spacing));
      },
      py::arg("path"));

  m.def(
      "gradcheck",
      [](std::uint64_t seed, std::size_t points) {
        GradCheckOptions o;
        o.seed = seed;
        o.points = points;
        std::vector<GradCheckResult> results;
        {
          py::gil_scoped_release release;
          results = run_gradcheck(o);
        }
        py::list out;
        for (const auto& r : results) {
          py::dict d;
          d["op"] = r.op;
          d["points"] = r.points;
          d["redrawn"] = r.redrawn;
          d["max_rel_error"] = r.max_rel_error;
          d["tolerance"] = r.tolerance;
          d["passed"] = r.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 1, py::arg("points") = 10);

  m.def("parameter_count", [](std::size_t in, std::size_t out, std::size_t depth, std::size_t base) {
    UNetConfig c;
    c.in_channels = in;
    c.out_classes = out;
    c.depth = depth;
    c.base_filters = base;
    return unet_parameter_count(c);
  }, py::arg("in_channels"), py::arg("out_classes"), py::arg("depth"), py::arg("base_filters"));

  py::class_<Predictor>(m, "Predictor")
      .def(py::init<const std::filesystem::path&, const std::filesystem::path&, const std::string&>(),
           py::arg("localizer"), py::arg("segmenter"), py::arg("config_text") = "")
      .def("predict", &Predictor::predict, py::arg("data"), py::arg("times"), py::arg("spacing"),
           "Labels (0 background, 1 right, 2 left), boxes and timings for one volume.");
}
