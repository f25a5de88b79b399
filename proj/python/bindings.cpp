#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <memory>

#include "dnbp/checkpoint.hpp"
#include "dnbp/error.hpp"
#include "dnbp/evaluation.hpp"
#include "dnbp/training.hpp"

namespace py = pybind11;
using namespace dnbp;

namespace {

using Frames = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Frames frames_to_array(const std::vector<Image>& frames) {
  Frames out({static_cast<py::ssize_t>(frames.size()), py::ssize_t{kRenderSize}, py::ssize_t{kRenderSize}, py::ssize_t{3}});
  auto* dst = out.mutable_data();
  for (const auto& f : frames) {
    std::memcpy(dst, f.rgb.data(), f.rgb.size());
    dst += f.rgb.size();
  }
  return out;
}

std::vector<Image> array_to_frames(const Frames& a) {
  if (a.ndim() != 4 || a.shape(1) != kRenderSize || a.shape(2) != kRenderSize || a.shape(3) != 3)
    throw ShapeError("frames must have shape (F, 128, 128, 3)");
  std::vector<Image> out;
  const std::size_t n = static_cast<std::size_t>(kRenderSize) * kRenderSize * 3;
  for (py::ssize_t f = 0; f < a.shape(0); ++f) {
    Image img(kRenderSize, kRenderSize);
    std::memcpy(img.rgb.data(), a.data() + f * n, n);
    out.push_back(std::move(img));
  }
  return out;
}

py::array_t<float> keypoints_to_array(const std::vector<std::vector<Keypoint>>& kp) {
  const py::ssize_t f = static_cast<py::ssize_t>(kp.size());
  const py::ssize_t v = f ? static_cast<py::ssize_t>(kp[0].size()) : 0;
  py::array_t<float> out({f, v, py::ssize_t{2}});
  auto r = out.mutable_unchecked<3>();
  for (py::ssize_t i = 0; i < f; ++i)
    for (py::ssize_t k = 0; k < v; ++k) {
      r(i, k, 0) = kp[i][k].x;
      r(i, k, 1) = kp[i][k].y;
    }
  return out;
}

std::vector<std::vector<Keypoint>> array_to_keypoints(const py::array_t<float, py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != 2) throw ShapeError("keypoints must have shape (F, V, 2)");
  auto r = a.unchecked<3>();
  std::vector<std::vector<Keypoint>> out(a.shape(0), std::vector<Keypoint>(a.shape(1)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t k = 0; k < a.shape(1); ++k) out[i][k] = {r(i, k, 0), r(i, k, 1)};
  return out;
}

py::dict sequence_dict(const SequenceRecord& rec) {
  py::dict d;
  d["task"] = task_name(rec.task);
  d["seed"] = rec.seed;
  d["clutter_kind"] = clutter_kind_name(rec.clutter_kind);
  d["clutter_ratio"] = rec.clutter_ratio;
  d["frame_clutter_ratios"] = rec.frame_ratios;
  d["frames"] = frames_to_array(rec.frames);
  d["keypoints"] = keypoints_to_array(rec.labels);
  if (rec.decile >= 0) d["decile"] = rec.decile;
  return d;
}

TrainConfig config_from(const py::dict& overrides) {
  TrainConfig cfg;
  for (const auto& [k, v] : overrides) set_config_value(cfg, py::str(k), py::str(v));
  cfg.validate();
  return cfg;
}

// Tracks raw frames with eval-mode inference.
py::dict track_frames(const Potentials& pots, const Frames& frames, int particles, std::uint64_t seed) {
  InferenceConfig cfg = TrainConfig{}.inference(Mode::Eval);
  if (particles > 0) cfg.particles = particles;
  SequenceRecord seq;
  seq.frames = array_to_frames(frames);
  std::vector<FramePrediction> preds;
  {
    py::gil_scoped_release release;
    preds = dnbp_predictor(pots, cfg)(seq, seed);
  }
  std::vector<std::vector<Keypoint>> est;
  py::array_t<double> ent({static_cast<py::ssize_t>(preds.size()), static_cast<py::ssize_t>(pots.graph().num_nodes())});
  auto e = ent.mutable_unchecked<2>();
  for (std::size_t f = 0; f < preds.size(); ++f) {
    est.push_back(preds[f].estimates);
    for (std::size_t k = 0; k < preds[f].entropies.size(); ++k) e(f, k) = preds[f].entropies[k];
  }
  py::dict out;
  out["estimates"] = keypoints_to_array(est);
  out["entropies"] = ent;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Differentiable nonparametric belief propagation: simulators, training and tracking.";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.attr("RENDER_SIZE") = kRenderSize;

  m.def("pendulum_keypoints", [](double th1, double th2) {
    return keypoints_to_array({pendulum_keypoints(PendulumState{th1, th2, 0.0, 0.0})});
  }, py::arg("theta1"), py::arg("theta2"), "Base, middle joint and end effector for the given joint angles, shape (1, 3, 2).");

  m.def("simulate_sequence", [](const std::string& task, int frames, int beneath, int above, const std::string& kind,
                                std::uint64_t seed) {
    return sequence_dict(simulate_sequence(task_from_name(task), frames, beneath, above, clutter_kind_from_name(kind), seed));
  }, py::arg("task"), py::arg("frames"), py::arg("clutter_beneath") = 0, py::arg("clutter_above") = 0,
        py::arg("clutter_kind") = "none", py::arg("seed") = 0);

  m.def("generate_dataset", [](const std::string& task, const std::string& split, const std::string& out, double scale,
                               std::uint64_t seed, int frames, int jobs) {
    GenerateOptions opt;
    opt.scale = scale;
    opt.frames = frames;
    opt.jobs = jobs;
    py::gil_scoped_release release;
    return generate_dataset(task_from_name(task), split, opt, seed, out);
  }, py::arg("task"), py::arg("split"), py::arg("out"), py::arg("scale") = 1.0, py::arg("seed") = 0,
        py::arg("frames") = 0, py::arg("jobs") = 1, "Writes <out>/<split>/ and returns the number of sequences.");

  m.def("read_sequence", [](const std::string& dir) { return sequence_dict(read_sequence(dir)); }, py::arg("path"));

  m.def("config_keys", &config_keys);

  m.def("pixel_error", [](const py::array_t<float, py::array::forcecast>& pred,
                          const py::array_t<float, py::array::forcecast>& truth) {
    return avg_euclidean_error(array_to_keypoints(pred), array_to_keypoints(truth));
  }, py::arg("pred"), py::arg("truth"), "Mean keypoint distance in pixels of the 128x128 frame.");

  py::class_<Potentials, std::unique_ptr<Potentials>>(m, "Model")
      .def(py::init([](const std::string& graph, std::uint64_t seed) {
             return std::make_unique<Potentials>(GraphSpec::by_name(graph), seed);
           }),
           py::arg("graph") = "pendulum", py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return load_checkpoint(path); }, py::arg("path"))
      .def("save", [](const Potentials& p, const std::string& path) { save_checkpoint(p, path); }, py::arg("path"))
      .def("to_bytes", [](const Potentials& p) { return py::bytes(checkpoint_bytes(p)); })
      .def_property_readonly("graph", [](const Potentials& p) { return p.graph().name(); })
      .def_property_readonly("num_nodes", [](const Potentials& p) { return p.graph().num_nodes(); })
      .def_property_readonly("edges", [](const Potentials& p) { return p.graph().edges(); })
      .def_property_readonly("num_parameters", [](const Potentials& p) { return p.params().num_values(); })
      .def("track", &track_frames, py::arg("frames"), py::arg("particles") = 0, py::arg("seed") = 0,
           "Tracks (F, 128, 128, 3) uint8 frames; returns per-frame estimates and entropies.");

  m.def("train", [](const std::string& data, const std::string& checkpoint, const py::dict& config,
                    const std::function<void(py::dict)>& on_epoch) {
    const TrainConfig cfg = config_from(config);
    py::gil_scoped_release release;
    const TrainResult r = train_from_disk(data, checkpoint, cfg, [&](const EpochLog& l) {
      if (!on_epoch) return;
      py::gil_scoped_acquire acquire;
      py::dict d;
      d["epoch"] = l.epoch;
      d["train_loss"] = l.train_loss;
      d["val_loss"] = l.val_loss;
      d["skipped"] = l.skipped;
      d["seconds"] = l.seconds;
      on_epoch(d);
    });
    py::gil_scoped_acquire acquire;
    py::dict out;
    out["best_epoch"] = r.best_epoch;
    out["best_val"] = r.best_val;
    out["epochs"] = static_cast<int>(r.epochs.size());
    return out;
  }, py::arg("data"), py::arg("checkpoint"), py::arg("config") = py::dict(), py::arg("on_epoch") = nullptr,
        "Trains on <data>/train (and val) with `key: value` config overrides and writes the best checkpoint.");

  m.def("evaluate", [](const std::string& checkpoint, const std::string& split_dir, std::uint64_t seed, int particles,
                       int max_frames, int jobs, const std::string& csv) {
    auto pots = load_checkpoint(checkpoint);
    InferenceConfig cfg = TrainConfig{}.inference(Mode::Eval);
    if (particles > 0) cfg.particles = particles;
    EvalResult r;
    {
      py::gil_scoped_release release;
      r = evaluate_dataset(split_dir, dnbp_predictor(*pots, cfg), seed, jobs, max_frames);
    }
    if (!csv.empty()) write_eval_csv(csv, pots->graph().name(), r);
    std::vector<double> deciles;
    for (int b = 0; b < r.report.bins; ++b) deciles.push_back(r.report.bin_mean(b));
    py::dict out;
    out["mean_error_px"] = r.report.overall();
    out["baseline_px"] = r.baseline_px;
    out["decile_error_px"] = deciles;
    return out;
  }, py::arg("checkpoint"), py::arg("split_dir"), py::arg("seed") = 0, py::arg("particles") = 0,
        py::arg("max_frames") = 0, py::arg("jobs") = 1, py::arg("csv") = "");
}
