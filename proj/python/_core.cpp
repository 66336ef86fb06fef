#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli.hpp"
#include "sp/checkpoint.hpp"
#include "sp/data.hpp"
#include "sp/embeddings.hpp"
#include "sp/evaluation.hpp"
#include "sp/gradcheck.hpp"
#include "sp/training.hpp"

namespace py = pybind11;
using namespace sp;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

Tensor from_numpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor t(shape);
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

py::dict parameter_dict(const std::vector<const Parameter*>& params) {
  py::dict out;
  for (const Parameter* p : params) out[py::str(p->name)] = to_numpy(p->value);
  return out;
}

Array stacked_images(const Split& split) {
  if (split.empty()) return Array(std::vector<py::ssize_t>{0});
  const Tensor& first = split[0].image;
  std::vector<py::ssize_t> shape{py::ssize_t(split.size())};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Array out(shape);
  double* dst = out.mutable_data();
  for (const auto& r : split.records()) dst = std::copy(r.image.data(), r.image.data() + r.image.size(), dst);
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Few-shot image recognition with semantic prompts";

  auto base_error = py::register_exception<Error>(m, "SempromptError", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base_error);
  py::register_exception<ConfigError>(m, "ConfigError", base_error);
  py::register_exception<NumericError>(m, "NumericError", base_error);
  py::register_exception<StateError>(m, "StateError", base_error);
  py::register_exception<InputError>(m, "InputError", base_error);
  py::register_exception<ParseError>(m, "ParseError", base_error);
  py::register_exception<IoError>(m, "IoError", base_error);
  py::register_exception<TrainingError>(m, "TrainingError", base_error);
  py::register_exception<ConvergenceError>(m, "ConvergenceError", base_error);

  py::enum_<Mechanism>(m, "Mechanism")
      .value("none", Mechanism::none)
      .value("spatial", Mechanism::spatial)
      .value("channel", Mechanism::channel)
      .value("both", Mechanism::both);
  py::enum_<ProjectorKind>(m, "Projector")
      .value("linear", ProjectorKind::linear)
      .value("mlp", ProjectorKind::mlp);
  py::enum_<Pooling>(m, "Pooling")
      .value("head", Pooling::head)
      .value("patches", Pooling::patches)
      .value("all", Pooling::all);
  py::enum_<ClassifierKind>(m, "Classifier")
      .value("nearest_prototype", ClassifierKind::nearest_prototype)
      .value("logistic_regression", ClassifierKind::logistic_regression);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("image_size", &ModelConfig::image_size)
      .def_readwrite("channels", &ModelConfig::channels)
      .def_readwrite("patch_size", &ModelConfig::patch_size)
      .def_readwrite("depth", &ModelConfig::depth)
      .def_readwrite("width", &ModelConfig::width)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("mlp_ratio", &ModelConfig::mlp_ratio)
      .def_readwrite("init_std", &ModelConfig::init_std)
      .def_property_readonly("num_patches", &ModelConfig::num_patches)
      .def("validate", &ModelConfig::validate);

  py::class_<PromptConfig>(m, "PromptConfig")
      .def(py::init<>())
      .def_static("defaults_for", &PromptConfig::defaults_for, py::arg("model"))
      .def_readwrite("inject_layer", &PromptConfig::inject_layer)
      .def_readwrite("mechanism", &PromptConfig::mechanism)
      .def_readwrite("projector", &PromptConfig::projector)
      .def_readwrite("pooling", &PromptConfig::pooling)
      .def_readwrite("semantic_dim", &PromptConfig::semantic_dim)
      .def("validate", &PromptConfig::validate, py::arg("model"));

  py::class_<Encoder>(m, "Encoder")
      .def(py::init<const ModelConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_property_readonly("config", &Encoder::config)
      .def("parameters",
           [](const Encoder& e) { return parameter_dict(e.parameters()); },
           "Parameter arrays keyed by name (copies).");

  py::class_<PromptModule>(m, "PromptModule")
      .def(py::init<const PromptConfig&, const ModelConfig&, std::uint64_t>(), py::arg("config"),
           py::arg("model"), py::arg("seed") = 0)
      .def_property_readonly("config", &PromptModule::config)
      .def("parameters", [](const PromptModule& p) { return parameter_dict(p.parameters()); });

  m.def(
      "encode", [](const Encoder& enc, const Array& image) { return to_numpy(encode(from_numpy(image), enc)); },
      py::arg("encoder"), py::arg("image"), "Pooled feature of one (H, W, C) image.");
  m.def(
      "encode_with_prompt",
      [](const Encoder& enc, const PromptModule& prompt, const Array& image, const Array& semantic) {
        return to_numpy(encode_with_prompt(from_numpy(image), from_numpy(semantic), enc, prompt));
      },
      py::arg("encoder"), py::arg("prompt"), py::arg("image"), py::arg("semantic"));

  py::class_<SyntheticConfig>(m, "SyntheticConfig")
      .def(py::init<>())
      .def_readwrite("image_size", &SyntheticConfig::image_size)
      .def_readwrite("channels", &SyntheticConfig::channels)
      .def_readwrite("cell_size", &SyntheticConfig::cell_size)
      .def_readwrite("clutter_prob", &SyntheticConfig::clutter_prob)
      .def_readwrite("pixel_noise", &SyntheticConfig::pixel_noise)
      .def_readwrite("motif_jitter", &SyntheticConfig::motif_jitter);

  py::class_<Split>(m, "Split")
      .def("__len__", &Split::size)
      .def("images", &stacked_images, "All images stacked as (N, H, W, C).")
      .def("labels",
           [](const Split& s) {
             std::vector<std::size_t> out;
             for (const auto& r : s.records()) out.push_back(r.class_id);
             return out;
           })
      .def_property_readonly("class_ids", &Split::class_ids)
      .def_property_readonly("class_names", &Split::class_names);

  py::class_<SplitDataset>(m, "Dataset")
      .def_readonly("base", &SplitDataset::base)
      .def_readonly("validation", &SplitDataset::validation)
      .def_readonly("novel", &SplitDataset::novel)
      .def("split", &SplitDataset::split, py::return_value_policy::reference_internal)
      .def_property_readonly("class_names", [](const SplitDataset& d) {
        std::vector<std::string> out;
        for (const auto& c : d.classes) out.push_back(c.name);
        return out;
      });

  m.def("generate_dataset", &generate_synthetic_dataset, py::arg("num_classes"),
        py::arg("per_class"), py::arg("config") = SyntheticConfig{}, py::arg("seed") = 0);
  m.def("save_dataset", &save_dataset, py::arg("path"), py::arg("dataset"));
  m.def("load_dataset", &load_dataset, py::arg("path"));

  py::class_<ClassEmbeddingTable>(m, "EmbeddingTable")
      .def_property_readonly("dim", &ClassEmbeddingTable::dim)
      .def("names", &ClassEmbeddingTable::names)
      .def("__len__", &ClassEmbeddingTable::size)
      .def("__contains__", &ClassEmbeddingTable::contains)
      .def("__getitem__", [](const ClassEmbeddingTable& t, const std::string& name) {
        return to_numpy(t.at(name));
      });
  m.def("load_embeddings", &load_embeddings, py::arg("path"));
  m.def(
      "aligned_embeddings",
      [](const SplitDataset& d, std::size_t dim, std::uint64_t seed, double noise) {
        std::vector<std::string> names;
        std::vector<Tensor> latents;
        for (const auto& c : d.classes) {
          names.push_back(c.name);
          latents.push_back(c.latent);
        }
        return synth_aligned_embeddings(names, latents, dim, seed, noise);
      },
      py::arg("dataset"), py::arg("dim") = 32, py::arg("seed") = 0, py::arg("noise") = 0.1,
      "Class-name embeddings that share structure with each class's motif.");

  m.def(
      "load_checkpoint",
      [](const std::filesystem::path& path) {
        Checkpoint ck = load_checkpoint(path);
        py::object prompt = ck.prompt ? py::cast(std::move(*ck.prompt)) : py::none();
        return py::make_tuple(std::move(ck.encoder), prompt, ck.extra);
      },
      py::arg("path"), "Returns (encoder, prompt or None, extra metadata).");

  m.def(
      "meta_loss",
      [](const Array& q, const Array& p, const std::vector<std::size_t>& labels, double tau) {
        return meta_loss(from_numpy(q), from_numpy(p), labels, tau);
      },
      py::arg("queries"), py::arg("prototypes"), py::arg("labels"), py::arg("tau") = 0.2);
  m.def(
      "classify_cosine",
      [](const Array& q, const Array& p) { return classify_cosine(from_numpy(q), from_numpy(p)); },
      py::arg("queries"), py::arg("prototypes"));

  py::class_<EvalConfig>(m, "EvalConfig")
      .def(py::init<>())
      .def_readwrite("way", &EvalConfig::way)
      .def_readwrite("shot", &EvalConfig::shot)
      .def_readwrite("queries", &EvalConfig::queries)
      .def_readwrite("episodes", &EvalConfig::episodes)
      .def_readwrite("classifier", &EvalConfig::classifier)
      .def_readwrite("seed", &EvalConfig::seed)
      .def_readwrite("threads", &EvalConfig::threads);

  py::class_<EvalReport>(m, "EvalReport")
      .def_static("from_accuracies", &EvalReport::from_accuracies, py::arg("accuracies"),
                  py::arg("way") = 5, py::arg("shot") = 1,
                  py::arg("classifier") = ClassifierKind::nearest_prototype,
                  py::arg("mechanism") = Mechanism::none)
      .def_readonly("mean", &EvalReport::mean)
      .def_readonly("ci95", &EvalReport::ci95)
      .def_readonly("episode_accuracy", &EvalReport::episode_accuracy)
      .def("summary", &EvalReport::summary)
      .def("__repr__", [](const EvalReport& r) { return "EvalReport(" + r.summary() + ")"; });

  m.def(
      "evaluate",
      [](const Encoder& enc, const PromptModule* prompt, const Split& split,
         const ClassEmbeddingTable* table, const EvalConfig& cfg) {
        py::gil_scoped_release release;
        return evaluate(enc, prompt, split, table, cfg);
      },
      py::arg("encoder"), py::arg("prompt"), py::arg("split"), py::arg("embeddings"),
      py::arg("config") = EvalConfig{});

  m.def(
      "gradient_check",
      [](double epsilon, double tolerance, std::uint64_t seed) {
        GradCheckOptions opts;
        opts.epsilon = epsilon;
        opts.tolerance = tolerance;
        opts.seed = seed;
        const GradCheckSuiteReport r = run_gradient_checks(opts);
        py::list rows;
        for (const auto& e : r.per_parameter) rows.append(py::make_tuple(e.name, e.max_error));
        return py::make_tuple(r.passed, r.max_error, rows);
      },
      py::arg("epsilon") = 1e-4, py::arg("tolerance") = 1e-4, py::arg("seed") = 0,
      "Returns (passed, worst relative error, [(parameter, error), ...]).");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a command-line invocation in-process: (exit code, stdout, stderr).");
}
