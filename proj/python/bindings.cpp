#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rcisysid/conic_qp.hpp"
#include "rcisysid/error.hpp"
#include "rcisysid/pipeline.hpp"
#include "rcisysid/plant.hpp"
#include "rcisysid/reduce.hpp"
#include "rcisysid/train.hpp"

namespace py = pybind11;
using namespace rcisysid;

namespace {

Dataset make_dataset(const Mat& u, const Mat& y) {
  Dataset d{u, y, 1.0};
  d.validate();
  return d;
}

py::tuple as_tuple(const Dataset& d) { return py::make_tuple(d.u, d.y); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings of the rcisysid C++ library";

  static py::exception<ConfigError> config_error(m, "ConfigError", PyExc_ValueError);
  static py::exception<NumericalError> numerical_error(m, "NumericalError", PyExc_ArithmeticError);
  static py::exception<InfeasibleError> infeasible_error(m, "InfeasibleError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      config_error(e.what());
    } catch (const NumericalError& e) {
      numerical_error(e.what());
    } catch (const InfeasibleError& e) {
      infeasible_error(e.what());
    }
  });

  py::class_<QlpvModel>(m, "QlpvModel")
      .def_static("lti", &QlpvModel::lti, py::arg("A"), py::arg("B"), py::arg("C"))
      .def_readwrite("A", &QlpvModel::A)
      .def_readwrite("B", &QlpvModel::B)
      .def_readwrite("K", &QlpvModel::K)
      .def_readwrite("C", &QlpvModel::C)
      .def_readwrite("x0", &QlpvModel::x0)
      .def_property_readonly("nx", &QlpvModel::nx)
      .def_property_readonly("nu", &QlpvModel::nu)
      .def_property_readonly("ny", &QlpvModel::ny)
      .def_property_readonly("np", &QlpvModel::np)
      .def("schedule", [](const QlpvModel& q, const Vec& x, const Vec& u) { return q.net.schedule(x, u); })
      .def("step", &QlpvModel::step);

  m.def("gen_trigonometric", [](int n, std::uint64_t seed) { return as_tuple(gen_trigonometric(n, seed)); },
        py::arg("n"), py::arg("seed"), "Input and output arrays (channels x samples) of the trigonometric system.");
  m.def(
      "gen_msd_chain",
      [](int n_train, int n_test, std::uint64_t seed) {
        auto [tr, te] = gen_msd_chain(n_train, n_test, seed);
        return py::make_tuple(as_tuple(tr), as_tuple(te));
      },
      py::arg("n_train"), py::arg("n_test"), py::arg("seed"));

  m.def("bfr", &bfr, py::arg("y"), py::arg("y_hat"));

  m.def(
      "simulate",
      [](const QlpvModel& q, const Mat& u, const Mat& y, bool observer) {
        const Trajectory t = simulate(q, make_dataset(u, y), observer ? SimMode::Observer : SimMode::Prediction);
        return py::make_tuple(t.x, t.y_hat);
      },
      py::arg("model"), py::arg("u"), py::arg("y"), py::arg("observer") = false);

  m.def(
      "fit_lti",
      [](const Mat& u, const Mat& y, int nx, int adam_iters, int lbfgs_iters, std::uint64_t seed, double kappa_x) {
        TrainConfig cfg;
        cfg.adam_iters = adam_iters;
        cfg.lbfgs_iters = lbfgs_iters;
        cfg.seed = seed;
        cfg.kappa_x = kappa_x;
        cfg.log_every = 0;
        const LtiFit f = fit_lti(make_dataset(u, y), nx, cfg, nullptr);
        return QlpvModel::lti(f.A, f.B, f.C);
      },
      py::arg("u"), py::arg("y"), py::arg("nx"), py::arg("adam_iters") = 1000, py::arg("lbfgs_iters") = 5000,
      py::arg("seed") = 0, py::arg("kappa_x") = 0.0);

  m.def("lump_constant_branches", &lump_constant_branches, py::arg("model"), py::arg("threshold") = 1e-6);

  m.def(
      "solve_qp",
      [](const Mat& P, const Vec& c, const Mat& G, const Vec& h, const Mat& A_eq, const Vec& b_eq, double tol) {
        qp::QpProblem p;
        p.P = P;
        p.c = c;
        p.G = G.size() ? G : Mat(0, c.size());
        p.h = h;
        p.A_eq = A_eq.size() ? A_eq : Mat(0, c.size());
        p.b_eq = b_eq;
        qp::QpSettings s;
        s.tol = tol;
        const qp::QpSolution sol = qp::solve(p, s);
        return py::make_tuple(sol.x, qp::to_string(sol.status), sol.objective);
      },
      py::arg("P"), py::arg("c"), py::arg("G") = Mat(), py::arg("h") = Vec(), py::arg("A_eq") = Mat(),
      py::arg("b_eq") = Vec(), py::arg("tol") = 1e-8, "Returns (x, status, objective).");

  m.def(
      "load_model", [](const std::string& path) { return load_artifact(path).model; }, py::arg("path"),
      "Model stored in a stage artifact.");

  m.def(
      "run_pipeline",
      [](const std::string& config_json, const std::string& out_dir) {
        const PipelineConfig cfg = PipelineConfig::from_json(Json::parse(config_json));
        py::gil_scoped_release release;
        const Artifact a = run_pipeline(cfg, out_dir);
        std::map<std::string, double> metrics = a.metrics;
        metrics["r"] = a.r;
        return std::make_pair(a.stage, metrics);
      },
      py::arg("config_json"), py::arg("out_dir"), "Runs the enabled stages; returns (last stage, its metrics).");
}
