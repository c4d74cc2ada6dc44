// Python bindings for the patchforge library.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "patchforge/errors.hpp"
#include "patchforge/pipeline.hpp"

namespace py = pybind11;
using namespace patchforge;

namespace {

template <class T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <class T>
BasicTensor<T> to_tensor(const Array<T>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return BasicTensor<T>(std::move(shape), std::vector<T>(a.data(), a.data() + a.size()));
}

template <class T>
Array<T> to_array(const BasicTensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array<T> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

patches::Mask to_mask(const Array<std::uint8_t>& a) {
  if (a.ndim() != 2) throw DimensionError("mask must be 2-D");
  patches::Mask m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  for (py::ssize_t i = 0; i < a.size(); ++i) m.bits[static_cast<std::size_t>(i)] = a.data()[i] != 0;
  return m;
}

Array<bool> from_mask(const patches::Mask& m) {
  Array<bool> out({static_cast<py::ssize_t>(m.height), static_cast<py::ssize_t>(m.width)});
  for (std::size_t i = 0; i < m.bits.size(); ++i) out.mutable_data()[i] = m.bits[i] != 0;
  return out;
}

py::dict case_to_dict(const patches::CaseRecord& c) {
  py::dict d;
  d["case_id"] = c.case_id;
  d["patient_id"] = c.patient_id;
  d["image"] = to_array(c.image);
  d["liver"] = from_mask(c.liver);
  py::list lesions;
  for (const auto& m : c.lesions) lesions.append(from_mask(m));
  d["lesions"] = lesions;
  return d;
}

patches::CaseRecord case_from_dict(const py::dict& d) {
  patches::CaseRecord c;
  c.case_id = d.contains("case_id") ? d["case_id"].cast<std::string>() : "case";
  c.patient_id = d.contains("patient_id") ? d["patient_id"].cast<std::string>() : "patient";
  c.image = to_tensor(d["image"].cast<Array<float>>());
  c.liver = to_mask(d["liver"].cast<Array<std::uint8_t>>());
  if (d.contains("lesions"))
    for (auto m : d["lesions"]) c.lesions.push_back(to_mask(m.cast<Array<std::uint8_t>>()));
  c.validate();
  return c;
}

py::object parse_json(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

pipeline::RunConfig make_config(const std::string& text, const std::map<std::string, std::string>& overrides) {
  pipeline::RunConfig c;
  if (!text.empty()) c.load_text(text, "<python>");
  for (const auto& [k, v] : overrides) c.set(k, v);
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dual field-of-view patch CNN for liver lesion detection";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<DomainError>(m, "DomainError", base);
  py::register_exception<IndexError>(m, "IndexError", base);
  py::register_exception<DataError>(m, "DataError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<IoError>(m, "IoError", base);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<CheckpointError>(m, "CheckpointError", base);
  py::register_exception<GenerationError>(m, "GenerationError", base);

  // --- kernels ---------------------------------------------------------------
  m.def(
      "conv2d",
      [](const Array<double>& input, const Array<double>& weights, const Array<double>& bias, int pad, int stride) {
        const layers::LayerParams<double> p(to_tensor(weights), to_tensor(bias));
        return to_array(layers::conv2d_forward(to_tensor(input), p, pad, stride));
      },
      py::arg("input"), py::arg("weights"), py::arg("bias"), py::arg("pad") = 0, py::arg("stride") = 1,
      "Convolution of an (H, W, Cin) input with (k, k, Cin, Cout) weights.");
  m.def(
      "softmax", [](const Array<double>& scores) { return to_array(layers::softmax(to_tensor(scores))); },
      py::arg("scores"));
  m.def(
      "fuse_non_lesion",
      [](const std::vector<double>& p) {
        const auto f = detect::fuse_non_lesion(p);
        return py::make_tuple(f.lesion, f.non_lesion);
      },
      py::arg("probabilities"), "(lesion, non_lesion) from a class probability vector with lesion first.");
  m.def(
      "resample_patch",
      [](const Array<float>& crop, int out, bool flip, double angle_deg) {
        return to_array(patches::resample_patch(to_tensor(crop), out, {flip, angle_deg}));
      },
      py::arg("crop"), py::arg("out") = patches::kPatchSize, py::arg("flip") = false, py::arg("angle_deg") = 0.0);
  m.def(
      "connected_components",
      [](const Array<std::uint8_t>& mask) {
        const auto m = to_mask(mask);
        Array<std::int32_t> labels({static_cast<py::ssize_t>(m.height), static_cast<py::ssize_t>(m.width)});
        std::fill(labels.mutable_data(), labels.mutable_data() + labels.size(), 0);
        const auto comps = detect::connected_components(m);
        for (std::size_t k = 0; k < comps.size(); ++k)
          for (auto i : comps[k].pixels) labels.mutable_data()[i] = static_cast<std::int32_t>(k + 1);
        return labels;
      },
      py::arg("mask"), "8-connected component labels (0 = background), numbered in raster order.");
  m.def("lr_at_epoch",
        [](int epoch, double base_lr, double decay_factor, int decay_start_epoch, int decay_every) {
          train::TrainConfig c;
          c.base_lr = base_lr;
          c.lr_decay_factor = decay_factor;
          c.decay_start_epoch = decay_start_epoch;
          c.decay_every = decay_every;
          return train::lr_at_epoch(c, epoch);
        },
        py::arg("epoch"), py::arg("base_lr") = 1e-4, py::arg("decay_factor") = 0.1, py::arg("decay_start_epoch") = 31,
        py::arg("decay_every") = 10);
  m.def("equivalent_diameter_mm", &eval::equivalent_diameter_mm, py::arg("area_px"),
        py::arg("spacing_mm") = eval::kPixelSpacingMm);

  // --- network ---------------------------------------------------------------
  py::class_<net::Network>(m, "Network")
      .def_static("multiclass", &net::build_parallel_multiclass, py::arg("seed") = 0)
      .def_static("binary", &net::build_binary, py::arg("seed") = 0)
      .def_static("load", &net::load_checkpoint, py::arg("path"))
      .def("save", [](const net::Network& n, const std::filesystem::path& p) { net::save_checkpoint(n, p); })
      .def_property_readonly("class_names", [](const net::Network& n) { return n.spec().class_names; })
      .def_property_readonly("param_count", &net::Network::param_count)
      .def_property_readonly("branch_param_count", [](const net::Network& n) { return net::branch_param_count(n.spec()); })
      .def_readwrite("intensity_mean", &net::Network::intensity_mean)
      .def(
          "forward",
          [](const net::Network& n, const Array<float>& small, const Array<float>& large) {
            return to_array(n.forward(to_tensor(small), to_tensor(large)));
          },
          py::arg("small"), py::arg("large"), "Class probabilities for one (32, 32, 1) patch pair.")
      .def(
          "probability_map",
          [](const net::Network& n, const py::dict& case_dict, int stride, int workers) {
            const auto c = patches::normalize_test_case(case_from_dict(case_dict), n.intensity_mean);
            const auto map = detect::infer_map(n, c, n.intensity_mean, stride, workers);
            return py::make_tuple(to_array(map.lesion_prob), from_mask(map.evaluated));
          },
          py::arg("case"), py::arg("stride") = 1, py::arg("workers") = 1,
          "(lesion probability, evaluated mask) over the case's liver.");

  // --- data ------------------------------------------------------------------
  m.def(
      "generate_case",
      [](std::uint64_t seed, const std::string& config_text, const std::map<std::string, std::string>& overrides) {
        return case_to_dict(phantom::generate_case(make_config(config_text, overrides).phantom, seed));
      },
      py::arg("seed"), py::arg("config") = "", py::arg("overrides") = std::map<std::string, std::string>{},
      "One synthetic case as a dict of numpy arrays; phantom.* keys come from the config.");
  m.def(
      "label_pixel",
      [](const py::dict& case_dict, long x, long y) {
        return patches::to_string(patches::label_pixel(case_from_dict(case_dict), x, y));
      },
      py::arg("case"), py::arg("x"), py::arg("y"));
  m.def(
      "extract_patch_pair",
      [](const py::dict& case_dict, long x, long y, double intensity_mean) {
        const auto s = patches::extract_patch_pair(case_from_dict(case_dict), x, y, intensity_mean);
        return py::make_tuple(to_array(s.small), to_array(s.large));
      },
      py::arg("case"), py::arg("x"), py::arg("y"), py::arg("intensity_mean") = 0.0);
  m.def(
      "load_cases",
      [](const std::filesystem::path& manifest) {
        py::list out;
        for (const auto& c : patches::load_cases(manifest)) out.append(case_to_dict(c));
        return out;
      },
      py::arg("manifest"));

  // --- configuration and pipelines ----------------------------------------------
  m.def(
      "effective_config",
      [](const std::string& text, const std::map<std::string, std::string>& overrides) {
        return make_config(text, overrides).to_text();
      },
      py::arg("config") = "", py::arg("overrides") = std::map<std::string, std::string>{},
      "Fully resolved configuration text (defaults < config text < overrides).");
  m.def("config_keys", &pipeline::RunConfig::documented_keys);
  m.def(
      "generate_dataset",
      [](const std::filesystem::path& out_dir, const std::string& text, const std::map<std::string, std::string>& overrides) {
        const auto c = make_config(text, overrides);
        phantom::generate_dataset(c.phantom, c.phantom_cases, c.phantom_patients, c.stage_seed("phantom"), out_dir);
        return out_dir / "manifest.json";
      },
      py::arg("out_dir"), py::arg("config") = "", py::arg("overrides") = std::map<std::string, std::string>{},
      "Writes phantom cases plus manifest.json; returns the manifest path.");
  m.def(
      "cross_validate",
      [](const std::filesystem::path& manifest, const std::string& text, const std::map<std::string, std::string>& overrides,
         const std::function<void(const std::string&)>& log) {
        const auto c = make_config(text, overrides);
        const auto cases = patches::load_cases(manifest);
        pipeline::XvalResult r;
        {
          py::gil_scoped_release release;
          pipeline::Logger logger;
          if (log) {
            logger = [&log](const std::string& line) {
              py::gil_scoped_acquire acquire;
              log(line);
            };
          }
          r = pipeline::cross_validate(cases, c, logger);
        }
        py::dict d;
        d["report"] = parse_json(r.report.to_json());
        d["summary"] = parse_json(pipeline::xval_summary_json(r, c));
        return d;
      },
      py::arg("manifest"), py::arg("config") = "", py::arg("overrides") = std::map<std::string, std::string>{},
      py::arg("log") = nullptr, "Patient-level cross-validation; returns the pooled report and the summary.");
}
