#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "quasicausal/dgp.hpp"
#include "quasicausal/duration.hpp"
#include "quasicausal/errors.hpp"
#include "quasicausal/pipeline.hpp"
#include "quasicausal/quasi_exp.hpp"
#include "quasicausal/regress.hpp"

namespace py = pybind11;
using namespace quasicausal;
using nlohmann::json;

namespace {

// JSON crosses the boundary as text; the Python layer parses it.
pipeline::RunConfig parse_config(const std::string& text, const std::string& output_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  auto c = pipeline::RunConfig::from_json(j);
  if (!output_dir.empty()) c.output_dir = output_dir;
  return c;
}

// Owned by the module attributes for the lifetime of the interpreter.
PyObject* g_error = nullptr;
PyObject* g_config_error = nullptr;
PyObject* g_data_error = nullptr;
PyObject* g_estimation_error = nullptr;

void translate(std::exception_ptr p) {
  try {
    if (p) std::rethrow_exception(p);
  } catch (const Error& e) {
    PyObject* type = g_error;
    switch (e.kind()) {
      case ErrorKind::config: type = g_config_error; break;
      case ErrorKind::data: type = g_data_error; break;
      case ErrorKind::estimation: type = g_estimation_error; break;
    }
    PyErr_SetString(type, e.what());
  }
}

py::dict fit_dict(const regress::FitResult& f) {
  py::dict d;
  d["names"] = f.names;
  d["coefficients"] = f.coefficients;
  d["vcov"] = f.vcov;
  d["n_obs"] = f.n_obs;
  d["n_clusters"] = f.n_clusters;
  d["dropped_columns"] = f.dropped_columns;
  d["r_squared"] = f.r_squared;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the quasicausal package.";

  g_error = py::exception<Error>(m, "Error", PyExc_RuntimeError).ptr();
  g_config_error = py::exception<Error>(m, "ConfigError", g_error).ptr();
  g_data_error = py::exception<Error>(m, "DataError", g_error).ptr();
  g_estimation_error = py::exception<Error>(m, "EstimationError", g_error).ptr();
  py::register_exception_translator(&translate);

  m.def("default_dgp_params", [] { return dgp::to_json(dgp::DgpParams{}).dump(); },
        "Default simulation parameters as JSON text.");

  m.def(
      "simulate",
      [](const std::string& config, const std::string& output_dir) {
        const auto c = parse_config(config, output_dir);
        py::gil_scoped_release release;
        const auto s = pipeline::cmd_simulate(c);
        return json{{"output_dir", s.output_dir}, {"moments", s.moments}}.dump();
      },
      py::arg("config"), py::arg("output_dir") = "");

  m.def(
      "estimate",
      [](const std::string& config, const std::string& output_dir) {
        const auto c = parse_config(config, output_dir);
        py::gil_scoped_release release;
        return pipeline::cmd_estimate(c).report.dump();
      },
      py::arg("config"), py::arg("output_dir") = "");

  m.def(
      "mediate",
      [](const std::string& config, const std::string& output_dir) {
        const auto c = parse_config(config, output_dir);
        py::gil_scoped_release release;
        return pipeline::cmd_mediate(c).report.dump();
      },
      py::arg("config"), py::arg("output_dir") = "");

  m.def("report", &pipeline::cmd_report, py::arg("output_dir"),
        "Writes report.csv next to report.json and returns the text summary.");

  m.def(
      "ols",
      [](const regress::Matrix& x, const regress::Vector& y, const std::vector<std::int64_t>& clusters,
         std::vector<std::string> names) { return fit_dict(regress::ols(x, y, clusters, std::move(names))); },
      py::arg("x"), py::arg("y"), py::arg("clusters"), py::arg("names") = std::vector<std::string>{},
      "OLS with CR1 cluster-robust covariance; collinear columns are dropped.");

  m.def(
      "cox",
      [](const std::vector<double>& entry, const std::vector<double>& exit, const std::vector<int>& event,
         const regress::Matrix& x, const std::string& ties) {
        duration::SurvivalData d;
        d.entry = entry;
        d.exit = exit;
        d.event = event;
        d.x = x;
        for (Eigen::Index j = 0; j < x.cols(); ++j) d.names.push_back("x" + std::to_string(j));
        for (std::size_t i = 0; i < exit.size(); ++i) {
          d.stratum.push_back(0);
          d.id.push_back(static_cast<std::int64_t>(i));
        }
        duration::CoxOptions o;
        o.ties = duration::parse_ties(ties);
        const auto f = duration::cox_fit(d, o);
        py::dict out;
        out["coefficients"] = f.coefficients;
        out["vcov"] = f.vcov;
        out["log_partial_likelihood"] = f.log_partial_likelihood;
        out["n_events"] = f.n_events;
        return out;
      },
      py::arg("entry"), py::arg("exit"), py::arg("event"), py::arg("x"), py::arg("ties") = "efron",
      "Cox proportional hazards fit on counting-process data.");

  m.def(
      "e_value",
      [](double hr, double ci_bound) {
        const auto e = duration::e_value(hr, ci_bound);
        return py::make_tuple(e.e_value, e.e_value_ci);
      },
      py::arg("hazard_ratio"), py::arg("ci_bound"));

  m.def("indirect_least_squares", &quasi_exp::indirect_least_squares, py::arg("did_estimate"),
        py::arg("treated_share"));
}
