// Python bindings: datasets as numpy arrays, checkpoint inference, metrics,
// embedding and the command line.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <sstream>

#include "cli.hpp"
#include "ppks/checkpoint.hpp"
#include "ppks/config.hpp"
#include "ppks/embedding.hpp"
#include "ppks/error.hpp"
#include "ppks/explain.hpp"
#include "ppks/metrics.hpp"
#include "ppks/ops.hpp"
#include "ppks/training.hpp"

namespace py = pybind11;
using namespace ppks;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

// (N, H, W, 3) or (H, W, 3)
std::vector<Image> images_from(const FloatArray& a) {
  const bool single = a.ndim() == 3;
  if ((a.ndim() != 3 && a.ndim() != 4) || a.shape(a.ndim() - 1) != 3)
    throw ShapeError("expected images of shape (N, H, W, 3)");
  const auto n = single ? std::size_t{1} : static_cast<std::size_t>(a.shape(0));
  const int h = static_cast<int>(a.shape(single ? 0 : 1)), w = static_cast<int>(a.shape(single ? 1 : 2));
  const float* p = a.data();
  std::vector<Image> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image img(w, h);
    std::copy(p, p + img.pixels.size(), img.pixels.begin());
    p += img.pixels.size();
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<const Image*> pointers(const std::vector<Image>& images) {
  std::vector<const Image*> out;
  for (const Image& img : images) out.push_back(&img);
  return out;
}

py::array_t<float> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  const float* p = a.data();
  return Tensor::from(shape, std::vector<float>(p, p + shape_numel(shape)));
}

py::array_t<double> to_numpy(const Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.data(), m.data() + m.size(), out.mutable_data());
  return out;
}

Matrix matrix_from(const DoubleArray& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  Matrix m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + m.size(), m.data());
  return m;
}

std::vector<int> ints(const IntArray& a) { return {a.data(), a.data() + a.size()}; }

py::object parse_json(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

struct Model {
  std::shared_ptr<Checkpoint> ckpt;

  bool is_ppnet() const { return ckpt->kind == ModelKind::ppnet; }
  PPNet& ppnet() {
    if (!is_ppnet()) throw ValueError("operation needs a prototype checkpoint");
    return ckpt->ppnet;
  }

  std::pair<std::vector<int>, py::array_t<float>> run(const FloatArray& images) {
    const std::vector<Image> imgs = images_from(images);
    std::vector<std::vector<float>> logits;
    std::vector<int> pred;
    {
      py::gil_scoped_release release;
      pred = is_ppnet() ? predict(ckpt->ppnet, pointers(imgs), ckpt->meta.stats, 32, &logits)
                        : predict(ckpt->baseline, pointers(imgs), ckpt->meta.stats, 32, &logits);
    }
    const std::size_t k = ckpt->meta.classes.size();
    py::array_t<float> out({static_cast<py::ssize_t>(imgs.size()), static_cast<py::ssize_t>(k)});
    for (std::size_t i = 0; i < imgs.size(); ++i) std::copy(logits[i].begin(), logits[i].end(), out.mutable_data() + i * k);
    return {pred, out};
  }
};

DatasetManifest manifest_from(const std::string& config_json) { return config_from_json(config_json).dataset; }

}  // namespace

PYBIND11_MODULE(_ppks, m) {
  m.doc() = "Prototype network for kidney-stone patch classification";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ValueError>(m, "ValueError", base.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the ppks command line; returns (exit_code, stdout, stderr).");

  m.def(
      "default_config", [] { return config_to_json(RunConfig{}); }, "Resolved default run configuration as JSON.");

  m.def(
      "planned_counts",
      [](const std::string& config_json) {
        const PlannedCounts c = planned_counts(manifest_from(config_json));
        py::dict d;
        d["total"] = c.total;
        d["train"] = c.train;
        d["test"] = c.test;
        d["augmented_train"] = c.augmented_train;
        return d;
      },
      py::arg("config_json") = "{}");

  py::class_<Dataset>(m, "Dataset")
      .def_static(
          "synthesize",
          [](const std::string& config_json) {
            py::gil_scoped_release release;
            return synth_dataset(manifest_from(config_json));
          },
          py::arg("config_json") = "{}")
      .def_static("load", &load_dataset, py::arg("root"))
      .def("save", [](const Dataset& d, const std::filesystem::path& root) { write_dataset(root, d); })
      .def_property_readonly("classes", [](const Dataset& d) { return d.manifest.classes; })
      .def_property_readonly("mean", [](const Dataset& d) { return d.stats.mean; })
      .def_property_readonly("std", [](const Dataset& d) { return d.stats.stddev; })
      .def(
          "images",
          [](const Dataset& d, const std::string& split) {
            const auto& ps = split == "train" ? d.train : d.test;
            const auto s = static_cast<py::ssize_t>(d.manifest.patch_size);
            py::array_t<float> out({static_cast<py::ssize_t>(ps.size()), s, s, py::ssize_t{3}});
            float* p = out.mutable_data();
            for (const Patch& patch : ps) p = std::copy(patch.image.pixels.begin(), patch.image.pixels.end(), p);
            return out;
          },
          py::arg("split") = "test")
      .def(
          "labels",
          [](const Dataset& d, const std::string& split) {
            std::vector<int> out;
            for (const Patch& p : split == "train" ? d.train : d.test) out.push_back(p.label);
            return py::array_t<int>(out.size(), out.data());
          },
          py::arg("split") = "test")
      .def(
          "ids",
          [](const Dataset& d, const std::string& split) {
            std::vector<std::string> out;
            for (const Patch& p : split == "train" ? d.train : d.test) out.push_back(p.id);
            return out;
          },
          py::arg("split") = "test");

  py::class_<Model>(m, "Model")
      .def_static(
          "load", [](const std::filesystem::path& path) { return Model{std::make_shared<Checkpoint>(load_checkpoint(path))}; },
          py::arg("path"))
      .def_property_readonly("kind", [](const Model& md) { return md.is_ppnet() ? "ppnet" : "baseline"; })
      .def_property_readonly("classes", [](const Model& md) { return md.ckpt->meta.classes; })
      .def_property_readonly("num_prototypes", [](Model& md) { return md.is_ppnet() ? md.ckpt->ppnet.num_prototypes() : 0; })
      .def_property_readonly("metadata", [](const Model& md) { return parse_json(md.ckpt->meta.metadata); })
      .def(
          "predict", [](Model& md, const FloatArray& images) { return md.run(images).first; }, py::arg("images"),
          "Class indices for images of shape (N, H, W, 3) in [0, 1].")
      .def(
          "logits", [](Model& md, const FloatArray& images) { return md.run(images).second; }, py::arg("images"))
      .def(
          "activation_scores",
          [](Model& md, const FloatArray& images) {
            const std::vector<Image> imgs = images_from(images);
            PPNet& net = md.ppnet();
            py::gil_scoped_release release;
            Tensor t = activation_scores(net, pointers(imgs), md.ckpt->meta.stats);
            py::gil_scoped_acquire acquire;
            return to_numpy(t);
          },
          py::arg("images"))
      .def(
          "explain",
          [](Model& md, const FloatArray& image, const std::string& input_id, const Dataset& dataset, int k,
             const std::filesystem::path& out_dir) {
            const std::vector<Image> imgs = images_from(image);
            if (imgs.size() != 1) throw ShapeError("explain takes a single image");
            const ExplanationReport r = ppks::explain(md.ppnet(), imgs[0], input_id, dataset, k, out_dir);
            return parse_json(report_json(r, md.ckpt->meta.classes));
          },
          py::arg("image"), py::arg("input_id"), py::arg("dataset"), py::arg("k") = 3, py::arg("out_dir"),
          "Writes out_dir/<input_id>/report.json with heatmaps and returns the report.");

  m.def(
      "weighted_metrics",
      [](const IntArray& truth, const IntArray& predicted, const std::vector<std::string>& classes) {
        const std::vector<int> t = ints(truth), p = ints(predicted);
        return parse_json(metrics_json(weighted_metrics(t, p, static_cast<int>(classes.size())), classes));
      },
      py::arg("truth"), py::arg("predicted"), py::arg("classes"));

  m.def(
      "embed",
      [](const DoubleArray& vectors, int k_neighbors, int epochs, double min_dist, std::uint64_t seed) {
        EmbeddingConfig cfg;
        cfg.k_neighbors = k_neighbors;
        cfg.epochs = epochs;
        cfg.min_dist = min_dist;
        cfg.seed = seed;
        const Matrix x = matrix_from(vectors);
        Embedding e;
        {
          py::gil_scoped_release release;
          e = embed(x, cfg);
        }
        return py::make_tuple(to_numpy(e.coords), e.a, e.b, e.spectral);
      },
      py::arg("vectors"), py::arg("k_neighbors") = 15, py::arg("epochs") = 200, py::arg("min_dist") = 0.1,
      py::arg("seed") = 0, "3-D layout; returns (coords, a, b, spectral_init).");

  m.def(
      "knn_purity",
      [](const DoubleArray& coords, const IntArray& labels, int k) {
        return knn_purity(matrix_from(coords), ints(labels), k);
      },
      py::arg("coords"), py::arg("labels"), py::arg("k") = 10);

  py::module_ ops = m.def_submodule("ops", "Forward tensor kernels on float32 arrays");
  ops.def(
      "conv2d",
      [](const FloatArray& x, const FloatArray& w, std::optional<FloatArray> b, int stride, int padding) {
        NoGradGuard guard;
        return to_numpy(b ? conv2d(from_numpy(x), from_numpy(w), from_numpy(*b), stride, padding)
                          : conv2d(from_numpy(x), from_numpy(w), stride, padding));
      },
      py::arg("x"), py::arg("weight"), py::arg("bias") = py::none(), py::arg("stride") = 1, py::arg("padding") = 0);
  ops.def(
      "maxpool2d",
      [](const FloatArray& x) {
        NoGradGuard guard;
        return to_numpy(maxpool2d(from_numpy(x)));
      },
      py::arg("x"));
  ops.def(
      "distance_map",
      [](const FloatArray& z, const FloatArray& protos) {
        NoGradGuard guard;
        return to_numpy(distance_map(from_numpy(z), from_numpy(protos)));
      },
      py::arg("features"), py::arg("prototypes"));
}
