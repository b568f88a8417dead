#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "twfm/asymptotics.hpp"
#include "twfm/estimator.hpp"
#include "twfm/io.hpp"
#include "twfm/sampler.hpp"
#include "twfm/spectral.hpp"

namespace py = pybind11;
using namespace twfm;

PYBIND11_MODULE(_twfm, m) {
  m.doc() = "Two-way factor model: likelihood, estimation and limiting variances.";
  m.attr("__version__") = io::version();

  static py::exception<Error> base_error(m, "TwfmError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const CapExceededError& e) {
      PyErr_SetString(PyExc_MemoryError, e.what());
    } catch (const Error& e) {
      py::set_error(base_error, e.what());
    }
  });

  py::class_<Dims>(m, "Dims")
      .def(py::init<Index, Index, Index, Index>(), py::arg("p"), py::arg("q"), py::arg("r"),
           py::arg("c"))
      .def_readwrite("p", &Dims::p)
      .def_readwrite("q", &Dims::q)
      .def_readwrite("r", &Dims::r)
      .def_readwrite("c", &Dims::c)
      .def("__repr__", [](const Dims& d) { return "Dims" + to_string(d); });

  py::class_<ModelParams>(m, "ModelParams")
      .def(py::init<>())
      .def_readwrite("dims", &ModelParams::dims)
      .def_readwrite("L", &ModelParams::L)
      .def_readwrite("Lambda", &ModelParams::Lambda)
      .def_readwrite("psiF", &ModelParams::psiF)
      .def_readwrite("psiE", &ModelParams::psiE)
      .def_readwrite("sigma2", &ModelParams::sigma2)
      .def("to_json", [](const ModelParams& t) { return io::to_json(t).dump(); })
      .def_static("from_json", [](const std::string& text) {
        return io::params_from_json(io::json::parse(text));
      });

  m.def("validate", [](const ModelParams& t, double tol) {
    const ValidationReport rep = validate(t, tol);
    return py::make_tuple(rep.ok(), rep.summary());
  }, py::arg("params"), py::arg("tol") = tolerance::kExact,
        "Returns (ok, summary) for the model and identification conditions.");

  m.def("sample_params", &sample_params, py::arg("dims"), py::arg("psiF"), py::arg("psiE"),
        py::arg("sigma2"), py::arg("seed"));

  m.def("sample", [](const ModelParams& t, std::uint64_t seed, const std::string& dist, int df) {
    FactorDistribution fd;
    if (dist == "chisq") {
      fd = {FactorKind::kCenteredChiSquare, df};
    } else if (dist != "gaussian") {
      throw InputError("dist must be gaussian or chisq");
    }
    const SampleBundle b = sample(t, fd, seed);
    py::dict out;
    out["X"] = b.X.values;
    out["F"] = b.scores.F;
    out["E"] = b.scores.E;
    out["noise"] = b.noise;
    return out;
  }, py::arg("params"), py::arg("seed"), py::arg("dist") = "gaussian", py::arg("df") = 1);

  m.def("log_likelihood", py::overload_cast<const ModelParams&, const MatrixXd&>(&log_likelihood),
        py::arg("params"), py::arg("X"),
        "Twice the Gaussian log-density without the constant.");
  m.def("log_det_sigma", &log_det_sigma, py::arg("params"));
  m.def("dense_sigma", &dense_sigma, py::arg("params"), py::arg("max_pq") = 4096);

  py::class_<FitResult>(m, "FitResult")
      .def_readonly("theta_hat", &FitResult::theta_hat)
      .def_readonly("loglik_trace", &FitResult::loglik_trace)
      .def_readonly("ic1_trace", &FitResult::ic1_trace)
      .def_readonly("converged", &FitResult::converged)
      .def_readonly("gradient_norm", &FitResult::gradient_norm)
      .def_readonly("warnings", &FitResult::warnings)
      .def_readonly("restart_logliks", &FitResult::restart_logliks)
      .def_property_readonly("stop_reason", [](const FitResult& r) { return to_string(r.stop_reason); })
      .def_property_readonly("F", [](const FitResult& r) { return r.scores.F; })
      .def_property_readonly("E", [](const FitResult& r) { return r.scores.E; })
      .def_property_readonly("loglik", &FitResult::loglik);

  m.def("fit", [](const MatrixXd& X, Index r, Index c, double err0, double eps0, int max_outer,
                  int restarts, std::uint64_t seed) {
    FitConfig cfg;
    cfg.err0 = err0;
    cfg.eps0 = eps0;
    cfg.max_outer = max_outer;
    cfg.restarts = restarts;
    cfg.init.seed = seed;
    py::gil_scoped_release release;
    return fit(X, Dims{X.rows(), X.cols(), r, c}, cfg);
  }, py::arg("X"), py::arg("r"), py::arg("c"), py::arg("err0") = 0.01, py::arg("eps0") = 0.005,
        py::arg("max_outer") = 500, py::arg("restarts") = 0, py::arg("seed") = 0);

  m.def("asymptotic_variances", [](const ModelParams& t, double y) {
    const AsymptoticVariances v = limiting_variances(t, y);
    py::dict out;
    out["L"] = v.sigmaL;
    out["Lambda"] = v.sigmaLambda;
    out["psiF"] = v.varPsiF;
    out["psiE"] = v.varPsiE;
    out["sigma2"] = v.varSigma2;
    return out;
  }, py::arg("params"), py::arg("y"));

  m.def("scalar_loading_variance", &scalar_loading_variance, py::arg("sigma2"),
        py::arg("psiF"), py::arg("y"), py::arg("delta"));

  m.def("loading_r2", [](const MatrixXd& est, const MatrixXd& truth) {
    return loading_accuracy_r2(est, truth).per_column;
  }, py::arg("estimate"), py::arg("truth"));
}
