#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "balancelab/errors.hpp"
#include "balancelab/harness.hpp"

namespace py = pybind11;
namespace bl = balancelab;

namespace {

std::vector<std::vector<double>> to_rows(const bl::Matrix& m) {
  std::vector<std::vector<double>> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r].assign(m.row(r).begin(), m.row(r).end());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "balancelab core bindings";
  m.attr("__version__") = bl::kToolVersion;

  auto base = py::register_exception<bl::Error>(m, "Error");
  py::register_exception<bl::ParseError>(m, "ParseError", base.ptr());
  py::register_exception<bl::FormatError>(m, "FormatError", base.ptr());
  py::register_exception<bl::InvalidArgument>(m, "InvalidArgument", base.ptr());
  py::register_exception<bl::ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<bl::ContractError>(m, "ContractError", base.ptr());
  py::register_exception<bl::NumericError>(m, "NumericError", base.ptr());
  py::register_exception<bl::DispatchError>(m, "DispatchError", base.ptr());
  py::register_exception<bl::DivergenceError>(m, "DivergenceError", base.ptr());

  py::class_<bl::SyntheticSpec>(m, "SyntheticSpec")
      .def(py::init<>())
      .def_readwrite("modalities", &bl::SyntheticSpec::modalities)
      .def_readwrite("classes", &bl::SyntheticSpec::classes)
      .def_readwrite("dims", &bl::SyntheticSpec::dims)
      .def_readwrite("signal", &bl::SyntheticSpec::signal)
      .def_readwrite("noise", &bl::SyntheticSpec::noise)
      .def_readwrite("samples", &bl::SyntheticSpec::samples)
      .def_readwrite("seed", &bl::SyntheticSpec::seed)
      .def("validate", &bl::SyntheticSpec::validate);

  py::class_<bl::Dataset>(m, "Dataset")
      .def_property_readonly("size", &bl::Dataset::size)
      .def_property_readonly("modalities", &bl::Dataset::modalities)
      .def_property_readonly("dims", &bl::Dataset::dims)
      .def_readonly("classes", &bl::Dataset::classes)
      .def_readonly("labels", &bl::Dataset::labels)
      .def("features", [](const bl::Dataset& d, std::size_t i) { return to_rows(d.features.at(i)); })
      .def("same_contents", &bl::Dataset::same_contents)
      .def("to_text", [](const bl::Dataset& d) { return bl::to_text(d); });

  m.def("generate", &bl::generate);
  m.def("dataset_from_text", &bl::from_text);
  m.def("save_dataset", &bl::save);
  m.def("load_dataset", py::overload_cast<const std::filesystem::path&>(&bl::load));

  m.def("shapley_values", [](const std::vector<double>& v, std::size_t m) { return bl::shapley_values(v, m); },
        py::arg("subset_values"), py::arg("modalities"));
  m.def("imbalance", [](const std::vector<double>& phi) { return bl::imbalance(phi); });
  m.def("grad_modulation", [](const std::vector<double>& s, double a) { return bl::grad_modulation(s, a); },
        py::arg("scores"), py::arg("alpha"));
  m.def("method_names", [] {
    std::vector<std::string> out;
    for (auto k : bl::all_methods()) out.emplace_back(bl::method_name(k));
    return out;
  });

  py::class_<bl::ExperimentConfig>(m, "ExperimentConfig")
      .def_readwrite("seeds", &bl::ExperimentConfig::seeds)
      .def_readwrite("master_seed", &bl::ExperimentConfig::master_seed)
      .def_readwrite("output_dir", &bl::ExperimentConfig::output_dir)
      .def_readwrite("shapley", &bl::ExperimentConfig::shapley)
      .def_property_readonly("method", [](const bl::ExperimentConfig& c) { return std::string(bl::method_name(c.method.kind)); })
      .def("method_param", [](const bl::ExperimentConfig& c, const std::string& n) { return bl::method_param(c.method, n); })
      .def("set_method_param", [](bl::ExperimentConfig& c, const std::string& n, double v) { bl::set_method_param(c.method, n, v); })
      .def("serialize", [](const bl::ExperimentConfig& c) { return bl::serialize_config(c); })
      .def(py::self == py::self);

  m.def("parse_config", &bl::parse_config);
  m.def("parse_config_file", &bl::parse_config_file);

  py::class_<bl::RunReport>(m, "RunReport")
      .def_readonly("modalities", &bl::RunReport::modalities)
      .def_property_readonly("all_failed", &bl::RunReport::all_failed)
      .def_property_readonly("failures", [](const bl::RunReport& r) {
        std::vector<std::string> out;
        for (const auto& f : r.failures) out.push_back(f.method + " seed " + std::to_string(f.seed) + ": " + f.message);
        return out;
      })
      .def("csv", [](const bl::RunReport& r) { return bl::report_csv(r); })
      .def("json", [](const bl::RunReport& r) { return bl::report_json(r); });

  m.def("run_experiment", [](const bl::ExperimentConfig& c, std::size_t jobs) {
    py::gil_scoped_release release;
    return bl::run_experiment(c, {jobs, true});
  }, py::arg("config"), py::arg("jobs") = 1);
  m.def("run_sweep", [](const bl::ExperimentConfig& c, const std::string& param, const std::vector<double>& values,
                        std::size_t jobs) {
    py::gil_scoped_release release;
    return bl::run_sweep(c, param, values, {jobs, true});
  }, py::arg("config"), py::arg("param"), py::arg("values"), py::arg("jobs") = 1);
  m.def("report_from_json", &bl::report_from_json);
  m.def("compare_table", [](const std::vector<bl::RunReport>& reports) {
    const auto t = bl::compare_table(reports);
    return py::make_tuple(t.text, t.csv);
  });
}
