#include "facetrack/depth_filter.hpp"
#include "facetrack/model_io.hpp"
#include "facetrack/parallel.hpp"
#include "facetrack/pipeline.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace facetrack;

namespace {

using DepthArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

KeyValueConfig to_kv(const py::dict& d) {
  KeyValueConfig c;
  for (const auto& [k, v] : d) {
    std::string value;
    if (py::isinstance<py::bool_>(v)) {
      value = v.cast<bool>() ? "true" : "false";
    } else if (py::isinstance<py::list>(v) || py::isinstance<py::tuple>(v)) {
      for (const auto& item : v) {
        if (!value.empty()) value += ',';
        value += py::str(item).cast<std::string>();
      }
    } else {
      value = py::str(v).cast<std::string>();
    }
    c.set(py::str(k).cast<std::string>(), value);
  }
  return c;
}

DepthMap to_depth(const DepthArray& a) {
  require(a.ndim() == 2, ErrorCategory::dimension_mismatch, "depth must be a 2D array");
  DepthMap d(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), d.values.begin());
  return d;
}

DepthArray from_depth(const DepthMap& d) {
  DepthArray a({d.height, d.width});
  std::copy(d.values.begin(), d.values.end(), a.mutable_data());
  return a;
}

GrayImage to_gray_image(const ByteArray& a) {
  require(a.ndim() == 2, ErrorCategory::dimension_mismatch, "guide must be a 2D uint8 array");
  GrayImage g(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), g.values.begin());
  return g;
}

ByteArray from_color(const ColorImage& c) {
  ByteArray a({c.height, c.width, 3});
  std::copy(c.rgb.begin(), c.rgb.end(), a.mutable_data());
  return a;
}

FilterConfig filter_config(const py::dict& d) { return PipelineConfig::from(to_kv(d)).filter; }

py::dict record_dict(const FrameRecord& f) {
  py::dict d;
  d["frame"] = f.frame;
  d["ok"] = f.ok;
  d["error"] = f.error;
  d["rotation"] = Vec3(f.params.pose.rotation);
  d["translation"] = Vec3(f.params.pose.translation);
  d["expression"] = VectorX(f.params.expr);
  d["landmarks"] = Eigen::MatrixXd(f.landmarks.transpose());
  d["w_id"] = VectorX(f.w_id);
  d["rmse"] = f.rmse;
  d["e2d"] = f.e2d;
  d["e3d"] = f.e3d;
  d["ereg"] = f.ereg;
  d["correspondences"] = f.correspondences;
  d["identity_locked"] = f.identity_locked;
  return d;
}

py::dict track_dict(const TrackResult& r) {
  py::dict d;
  py::list frames;
  for (const FrameRecord& f : r.frames) frames.append(record_dict(f));
  d["frames"] = frames;
  d["partial"] = r.partial;
  d["mean_rmse"] = r.mean_rmse;
  d["lost_fraction"] = r.lost_fraction;
  d["mean_e3d"] = r.mean_e3d;
  d["identity_lock_frame"] = r.identity_lock_frame;
  d["initial_identity_rms"] = r.initial_identity_rms;
  d["final_identity_rms"] = r.final_identity_rms;
  return d;
}

}  // namespace

PYBIND11_MODULE(_facetrack, m) {
  m.doc() = "Blendshape face tracking and face-prior depth recovery";

  static py::exception<Error> error(m, "FacetrackError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, ("[" + std::string(to_string(e.category())) + "] " + e.what()).c_str());
    }
  });

  m.def("set_thread_count", &set_thread_count, py::arg("threads"));

  py::class_<ReducedCoreTensor>(m, "CoreTensor")
      .def_static("load", &read_core_tensor, py::arg("path"))
      .def("save", [](const ReducedCoreTensor& t, const fs::path& p) { write_core_tensor(p, t); }, py::arg("path"))
      .def_property_readonly("vertices", [](const ReducedCoreTensor& t) { return t.dims().vertices; })
      .def_property_readonly("identities", [](const ReducedCoreTensor& t) { return t.dims().identities; })
      .def_property_readonly("expressions", [](const ReducedCoreTensor& t) { return t.dims().expressions; })
      .def("contract",
           [](const ReducedCoreTensor& t, const VectorX& w_id, const VectorX& w_exp) {
             return Eigen::MatrixXd(contract(t, w_id, w_exp).transpose());
           },
           py::arg("w_id"), py::arg("w_exp"), "Vertices as an (N_v, 3) array.")
      .def("blend",
           [](const ReducedCoreTensor& t, const VectorX& w_id, const VectorX& e) {
             return Eigen::MatrixXd(blend(build_blendshapes(t, w_id), e).transpose());
           },
           py::arg("w_id"), py::arg("e"));

  m.def("mean_identity", &mean_identity, py::arg("identities"));
  m.def("gen_rig_tensor", [](int seed) { return gen_rig(RigDims{}, static_cast<std::uint64_t>(seed)).core; },
        py::arg("seed") = 7);

  m.def("recover_depth",
        [](const DepthArray& raw, const DepthArray& prior, const ByteArray& guide, const py::dict& config) {
          const RecoverResult r = recover(to_depth(raw), to_depth(prior), to_gray_image(guide), filter_config(config));
          return py::make_tuple(from_depth(r.depth), r.flagged);
        },
        py::arg("raw"), py::arg("prior"), py::arg("guide"), py::arg("config") = py::dict(),
        "Face-prior depth recovery. Depths in meters, 0 = invalid.");
  m.def("mae_mm",
        [](const DepthArray& a, const DepthArray& truth) {
          const DepthMap x = to_depth(a), t = to_depth(truth);
          return eval_mae(x, t, valid_mask({&x, &t}));
        },
        py::arg("depth"), py::arg("truth"));

  m.def("synth",
        [](const py::dict& config, const fs::path& out) {
          const SynthSummary s = cmd_synth(sequence_spec_from(to_kv(config)), out);
          py::dict d;
          d["frames"] = s.frames;
          d["distance"] = s.distance;
          d["sigma_mm"] = s.sigma_mm;
          return d;
        },
        py::arg("config"), py::arg("out"));
  m.def("train_synthetic",
        [](const py::dict& config, const fs::path& model_out) {
          const KeyValueConfig c = to_kv(config);
          const TrainSummary s = cmd_train_synthetic(c, PipelineConfig::from(c), model_out);
          py::dict d;
          d["residuals"] = s.report.residuals;
          d["landmark_rmse"] = s.report.landmark_rmse;
          d["pairs"] = s.pairs;
          d["fit_rmse"] = s.fit_rmse;
          return d;
        },
        py::arg("config"), py::arg("model_out"));
  m.def("track", [](const py::dict& config) { return track_dict(cmd_track(PipelineConfig::from(to_kv(config)))); },
        py::arg("config"), "Config keys as in the command line tool, e.g. paths.sequence.");
  m.def("read_track", [](const fs::path& p) { return track_dict(read_track_results(p)); }, py::arg("path"));
  m.def("depth",
        [](const py::dict& config, const fs::path& track_file) {
          const DepthReport r = cmd_depth(PipelineConfig::from(to_kv(config)), track_file);
          py::dict d;
          d["mae_raw"] = r.mae_raw;
          d["mae_prior"] = r.mae_prior;
          d["mae_recovered"] = r.mae_recovered;
          d["frames"] = r.frames.size();
          return d;
        },
        py::arg("config"), py::arg("track_file"));
  m.def("evaluate",
        [](const fs::path& sequence, const fs::path& track_file, double tau) {
          const EvalSummary s = cmd_eval(sequence, track_file, tau);
          return py::make_tuple(s.frames, s.mean_rmse, s.lost_fraction);
        },
        py::arg("sequence"), py::arg("track_file"), py::arg("tau") = 10.0);

  m.def("read_color", [](const fs::path& p) { return from_color(read_ppm(p)); }, py::arg("path"));
  m.def("read_depth_pgm16", [](const fs::path& p) { return from_depth(read_pgm16(p)); }, py::arg("path"));
  m.def("read_depth_raw", [](const fs::path& p) { return from_depth(read_depth_raw(p)); }, py::arg("path"));
}
