#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pan/commands.hpp"
#include "pan/engine.hpp"
#include "pan/error.hpp"

namespace py = pybind11;
using namespace pan;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I32 = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

IntTensor to_labels(const I32& a) {
  IntTensor t(Shape(a.shape(), a.shape() + a.ndim()));
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

py::array_t<double> to_numpy(const Tensor& t) {
  py::array_t<double> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<std::int32_t> to_numpy(const IntTensor& t) {
  py::array_t<std::int32_t> out(std::vector<py::ssize_t>(t.shape.begin(), t.shape.end()));
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

DatasetSpec dataset_spec(std::uint64_t seed, std::int64_t size, std::int64_t num_classes) {
  DatasetSpec spec;
  spec.seed = seed;
  spec.height = spec.width = size;
  spec.num_classes = num_classes;
  spec.validate();
  return spec;
}

py::dict metrics_dict(const Metrics& m) {
  py::list per_class;
  for (const auto& v : m.per_class_iou) per_class.append(v ? py::cast(*v) : py::none());
  py::dict d;
  d["mean_iou"] = m.mean_iou;
  d["pixel_acc"] = m.pixel_acc;
  d["per_class_iou"] = per_class;
  return d;
}

}  // namespace

PYBIND11_MODULE(_pan, m) {
  m.doc() = "Pyramid attention segmentation network on a small reverse-mode autodiff core";

  // translators run newest first, so the base class goes in first
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("poly_lr",
        [](std::int64_t iter, std::int64_t max_iter, double base_lr, double power) {
          TrainConfig cfg;
          cfg.max_iter = max_iter;
          cfg.base_lr = base_lr;
          cfg.power = power;
          return poly_lr(iter, cfg);
        },
        py::arg("iter"), py::arg("max_iter"), py::arg("base_lr") = 4e-3, py::arg("power") = 0.9);

  m.def("segmentation_metrics",
        [](const I32& gt, const I32& pred, std::int64_t num_classes) {
          if (gt.ndim() != pred.ndim() || !std::equal(gt.shape(), gt.shape() + gt.ndim(), pred.shape()))
            throw ShapeError("prediction", "ground truth and prediction shapes differ");
          ConfusionMatrix cm(num_classes);
          cm.add(to_labels(gt), to_labels(pred));
          return metrics_dict(compute_metrics(cm));
        },
        py::arg("ground_truth"), py::arg("prediction"), py::arg("num_classes"));

  m.def("generate_sample",
        [](std::int64_t index, std::uint64_t seed, std::int64_t size, std::int64_t num_classes) {
          const Sample s = generate_sample(dataset_spec(seed, size, num_classes), index);
          return py::make_tuple(to_numpy(s.image), to_numpy(s.label));
        },
        py::arg("index"), py::arg("seed") = 0, py::arg("size") = 64, py::arg("num_classes") = 4,
        "Synthetic (image [3,H,W], label [H,W]) pair; a pure function of its arguments.");

  m.def("gradcheck",
        [](std::int64_t samples, double h, double tol, std::uint64_t seed, bool include_corrupted) {
          std::vector<GradcheckCase> cases = gradcheck_suite(seed);
          if (include_corrupted) cases.push_back(corrupted_backward_case(seed));
          py::list out;
          for (const auto& c : cases) {
            GradcheckReport r;
            {
              py::gil_scoped_release release;
              r = c.run(samples, h, tol);
            }
            py::dict d;
            d["name"] = r.name;
            d["max_rel_error"] = r.max_rel_error;
            d["checked"] = r.checked;
            d["passed"] = r.passed;
            d["worst"] = r.worst;
            out.append(d);
          }
          return out;
        },
        py::arg("samples") = 100, py::arg("h") = 1e-5, py::arg("tol") = 1e-4, py::arg("seed") = 7,
        py::arg("include_corrupted") = false);

  m.def("case_names", [](std::uint64_t seed) {
    std::vector<std::string> names;
    for (const auto& c : gradcheck_suite(seed)) names.push_back(c.name);
    return names;
  }, py::arg("seed") = 7);

  py::class_<PanModel>(m, "Model")
      .def(py::init([](std::int64_t num_classes, std::int64_t width, std::uint64_t seed) {
             return PanModel(PanConfig::desk(num_classes, width), seed);
           }),
           py::arg("num_classes") = 4, py::arg("width") = 32, py::arg("seed") = 0)
      .def_property_readonly("num_classes", [](const PanModel& self) { return self.config().num_classes; })
      .def_property_readonly("parameter_count", [](const PanModel& self) { return self.params().parameter_count(); })
      .def("parameter_names",
           [](const PanModel& self) {
             std::vector<std::string> names;
             for (const auto& p : self.params().parameters()) names.push_back(p->name);
             return names;
           })
      .def("logits",
           [](const PanModel& self, const F64& images) {
             const Tensor x = to_tensor(images);
             Tensor y;
             {
               py::gil_scoped_release release;
               y = self.predict_logits(x);
             }
             return to_numpy(y);
           },
           py::arg("images"), "Eval-mode logits for [N,3,H,W] images (H, W divisible by 16).")
      .def("predict",
           [](const PanModel& self, const F64& image) {
             const Tensor x = to_tensor(image);
             IntTensor mask;
             {
               py::gil_scoped_release release;
               mask = predict_mask(self, x);
             }
             return to_numpy(mask);
           },
           py::arg("image"), "Argmax mask [H,W] for one [3,H,W] image of any extent.")
      .def("train_synthetic",
           [](PanModel& self, std::int64_t num_samples, std::uint64_t data_seed, std::int64_t max_iter,
              std::int64_t batch_size, double base_lr, bool augment, std::uint64_t seed) {
             const auto data = generate_dataset(dataset_spec(data_seed, 64, self.config().num_classes), num_samples);
             TrainConfig cfg;
             cfg.max_iter = max_iter;
             cfg.batch_size = batch_size;
             cfg.base_lr = base_lr;
             cfg.seed = seed;
             if (!augment) {
               cfg.flip = false;
               cfg.min_scale = cfg.max_scale = 1.0;
             }
             cfg.validate();
             std::vector<double> losses;
             {
               py::gil_scoped_release release;
               for (const auto& r : train(self, data, cfg)) losses.push_back(r.loss);
             }
             return losses;
           },
           py::arg("num_samples"), py::arg("data_seed") = 0, py::arg("max_iter") = 300, py::arg("batch_size") = 8,
           py::arg("base_lr") = 4e-3, py::arg("augment") = true, py::arg("seed") = 0,
           "Train on generated samples; returns the per-iteration loss.")
      .def("evaluate_synthetic",
           [](const PanModel& self, std::int64_t num_samples, std::uint64_t data_seed, std::vector<double> scales,
              bool flip) {
             const auto data = generate_dataset(dataset_spec(data_seed, 64, self.config().num_classes), num_samples);
             EvalConfig cfg;
             cfg.scales = std::move(scales);
             cfg.flip = flip;
             cfg.validate();
             EvalResult r;
             {
               py::gil_scoped_release release;
               r = evaluate(self, data, cfg);
             }
             return metrics_dict(r.metrics);
           },
           py::arg("num_samples"), py::arg("data_seed") = 0, py::arg("scales") = std::vector<double>{1.0},
           py::arg("flip") = false)
      .def("save", [](const PanModel& self, const std::string& path) { save_checkpoint(path, self); }, py::arg("path"))
      .def("load", [](PanModel& self, const std::string& path) { load_checkpoint(path, self); }, py::arg("path"));

  m.attr("MULTI_SCALE_GRID") = kMultiScaleGrid;
}
