#include "rcisysid/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "rcisysid/error.hpp"
#include "rcisysid/plant.hpp"
#include "rcisysid/reduce.hpp"

namespace rcisysid {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Typed reads from one config section; unknown keys are rejected.
class Section {
 public:
  Section(const Json& root, const char* name) : name_(name) {
    if (root.contains(name)) {
      j_ = root.at(name);
      if (!j_.is_object()) throw ConfigError(std::string("config section '") + name + "' must be an object");
    } else {
      j_ = Json::object();
    }
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception&) {
      throw ConfigError(name_ + "." + key + " has the wrong type");
    }
  }

  void get_vec(const char* key, std::optional<Vec>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    std::vector<double> v;
    get(key, v);
    out = Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key " + name_ + "." + k);
  }

 private:
  std::string name_;
  Json j_;
  std::set<std::string> seen_;
};

void read_train(Section& s, TrainConfig& t) {
  s.get("adam_iters", t.adam_iters);
  s.get("adam_lr", t.adam_lr);
  s.get("lbfgs_iters", t.lbfgs_iters);
  s.get("log_every", t.log_every);
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Model plant seen through the scaler, for records without a physical plant.
class ScaledModelPlant : public Plant {
 public:
  ScaledModelPlant(const QlpvModel& m, const Scaler& s) : inner_(m, Vec::Zero(m.nx())), s_(s) {}
  Vec output() const override { return s_.y_mean + s_.y_std.cwiseProduct(inner_.output()); }
  void apply(const Vec& u) override { inner_.apply((u - s_.u_mean).cwiseQuotient(s_.u_std)); }

 private:
  ModelPlant inner_;
  Scaler s_;
};

Artifact base_artifact(const PipelineConfig& cfg, const std::string& stage, const Artifact* prev) {
  Artifact a;
  if (prev) a = *prev;
  a.stage = stage;
  a.config_hash = cfg.hash;
  a.seed = cfg.seed;
  a.metrics.clear();
  return a;
}

void fill_fit_metrics(Artifact& a, const Datasets& d) {
  a.metrics["nx"] = a.model.nx();
  a.metrics["np"] = a.model.np();
  a.metrics["bfr_train"] = artifact_bfr(a, d.train_s);
  a.metrics["bfr_test"] = prediction_bfr(a.model, d.test_s, Vec::Zero(a.model.nx()));
  const Mat e = d.train_s.y - simulate(a.model, d.train_s, SimMode::Prediction).y_hat;
  a.metrics["mse"] = e.squaredNorm() / d.train_s.size();
  a.metrics["r"] = a.r;
}

// Refresh q at the artifact's model and disturbance set.
void refresh_set(const PipelineConfig& cfg, Artifact& a) {
  const RciSolution sol = solve_r(a.model, a.w, rci_spec(cfg, a));
  if (sol.feasible()) {
    a.q = sol.q;
    a.vertex_inputs = sol.vertex_inputs;
    a.r = sol.r_value;
    a.metrics["rci_max_violation"] = rci_residuals(a.model, a.w, rci_spec(cfg, a), sol.q, sol.vertex_inputs).max();
  } else {
    a.q.resize(0);
    a.vertex_inputs.resize(0, 0);
    a.r = kInf;
  }
}

Mat physical_y_box(const Artifact& a) {
  if (!a.Y.vertices) throw ConfigError("output constraint set has no vertex list");
  Mat v = *a.Y.vertices;
  for (int k = 0; k < v.cols(); ++k) v.col(k) = a.scaler.y_mean + a.scaler.y_std.cwiseProduct(v.col(k));
  Mat box(v.rows(), 2);
  box.col(0) = v.rowwise().minCoeff();
  box.col(1) = v.rowwise().maxCoeff();
  return box;
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> sections{"seed",     "data",       "stages",   "lti",    "init_rci",
                                              "constraints", "qlpv",    "reduce",   "concurrent", "sweep_kp",
                                              "control",  "comment"};
  for (const auto& [k, v] : j.items())
    if (!sections.count(k)) throw ConfigError("unknown config section '" + k + "'");

  PipelineConfig c;
  c.raw = j;
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("seed must be a non-negative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  c.concurrent.adam_iters = 2000;
  c.concurrent.lbfgs_iters = 0;
  c.concurrent.tau = 1e-4;
  c.net.uses_input = false;

  Section data(j, "data");
  data.get("kind", c.data.kind);
  data.get("n_train", c.data.n_train);
  data.get("n_test", c.data.n_test);
  data.get("seed", c.data.seed);
  data.get("train_csv", c.data.train_csv);
  data.get("test_csv", c.data.test_csv);
  data.get("tones", c.data.tones);
  data.get("f_low", c.data.f_low);
  data.get("f_high", c.data.f_high);
  data.finish();
  if (c.data.kind != "trig" && c.data.kind != "msd" && c.data.kind != "csv")
    throw ConfigError("data.kind must be trig, msd or csv");
  if (c.data.kind == "csv") {
    for (const auto& p : {c.data.train_csv, c.data.test_csv})
      if (p.empty() || !std::filesystem::exists(p)) throw ConfigError("csv data file not found: '" + p + "'");
  } else if (c.data.n_train < 1 || c.data.n_test < 1) {
    throw ConfigError("data.n_train and data.n_test must be >= 1");
  }

  Section st(j, "stages");
  st.get("lti", c.stages.lti);
  st.get("init_rci", c.stages.init_rci);
  st.get("qlpv", c.stages.qlpv);
  st.get("reduce", c.stages.reduce);
  st.get("concurrent", c.stages.concurrent);
  st.get("control", c.stages.control);
  st.finish();

  Section lti(j, "lti");
  lti.get("nx", c.nx);
  lti.get("kappa_x", c.lti.kappa_x);
  read_train(lti, c.lti);
  lti.finish();
  if (c.nx < 1) throw ConfigError("lti.nx must be >= 1");

  Section ir(j, "init_rci");
  ir.get("M", c.M);
  ir.get("kappa", c.kappa);
  ir.get("rho_start", c.init.rho_start);
  ir.get("rho_end", c.init.rho_end);
  ir.get("adam_iters", c.init.adam_iters);
  ir.get("adam_lr", c.init.adam_lr);
  ir.get("lbfgs_iters", c.init.lbfgs_iters);
  ir.get("feas_tol", c.init.feas_tol);
  ir.finish();
  if (c.M < 1) throw ConfigError("init_rci.M must be >= 1");
  if (!(c.kappa > 1.0)) throw ConfigError("init_rci.kappa must exceed 1");

  Section con(j, "constraints");
  con.get_vec("u_lo", c.u_lo);
  con.get_vec("u_hi", c.u_hi);
  con.get_vec("y_lo", c.y_lo);
  con.get_vec("y_hi", c.y_hi);
  con.get("y_fraction", c.y_fraction);
  con.finish();
  if (c.u_lo.has_value() != c.u_hi.has_value() || c.y_lo.has_value() != c.y_hi.has_value())
    throw ConfigError("constraint boxes need both lower and upper bounds");
  if (!(c.y_fraction > 0.0)) throw ConfigError("constraints.y_fraction must be positive");

  Section q(j, "qlpv");
  q.get("np", c.net.n_p);
  q.get("hidden_layers", c.net.hidden_layers);
  q.get("width", c.net.width);
  q.get("uses_input", c.net.uses_input);
  q.get("kappa_p", c.qlpv.kappa_p);
  q.get("rho_ineq", c.qlpv.rho_ineq);
  q.get("zero_group_threshold", c.qlpv.zero_group_threshold);
  read_train(q, c.qlpv);
  q.finish();
  if (c.net.n_p < 1 || c.net.hidden_layers < 0 || c.net.width < 1) throw ConfigError("invalid qlpv network shape");

  Section red(j, "reduce");
  red.get("np", c.reduce_np);
  red.get("with_ci", c.reduce_with_ci);
  red.get("refine_iters", c.reduce_refine_iters);
  red.finish();
  if (c.reduce_refine_iters < 0) throw ConfigError("reduce.refine_iters must be >= 0");

  Section cc(j, "concurrent");
  cc.get("tau", c.concurrent.tau);
  cc.get("tau_grid", c.tau_grid);
  read_train(cc, c.concurrent);
  cc.finish();
  if (c.tau_grid.empty()) throw ConfigError("concurrent.tau_grid must not be empty");

  Section kp(j, "sweep_kp");
  kp.get("np", c.sweep_kp_np);
  kp.get("grid", c.kp_grid);
  kp.finish();
  if (c.kp_grid.empty()) throw ConfigError("sweep_kp.grid must not be empty");

  Section ctl(j, "control");
  ctl.get("T", c.control.T);
  ctl.get("hold", c.control.hold);
  ctl.get("levels", c.control.levels);
  ctl.get("qx", c.control.weights.qx);
  ctl.get("qq", c.control.weights.qq);
  ctl.get("r", c.control.weights.r);
  ctl.get("clamp_integrator", c.control.clamp_integrator);
  ctl.finish();
  if (c.control.T < 1 || c.control.hold < 1 || c.control.levels.empty()) throw ConfigError("invalid control schedule");

  for (TrainConfig* t : {&c.lti, &c.qlpv, &c.concurrent}) {
    t->kappa = c.kappa;
    t->validate();
  }
  c.set_seed(c.seed);
  return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) { return from_json(read_json_file(path)); }

void PipelineConfig::set_seed(std::uint64_t s) {
  seed = s;
  raw["seed"] = s;
  for (TrainConfig* t : {&lti, &qlpv, &concurrent}) t->seed = s;
  init.seed = s;
  hash = config_hash(raw);
}

Datasets scale_datasets(const Dataset& train, const Dataset& test) {
  Datasets d;
  d.train = train;
  d.test = test;
  d.scaler = fit_scaler(train);
  d.train_s = apply_scaler(train, d.scaler);
  d.test_s = apply_scaler(test, d.scaler);
  return d;
}

Datasets make_datasets(const PipelineConfig& cfg) {
  const DataConfig& dc = cfg.data;
  if (dc.kind == "trig") return scale_datasets(gen_trigonometric(dc.n_train, dc.seed), gen_trigonometric(dc.n_test, dc.seed + 1));
  if (dc.kind == "msd") {
    MsdParams p;
    p.tones = dc.tones;
    p.f_low = dc.f_low;
    p.f_high = dc.f_high;
    auto [tr, te] = gen_msd_chain(dc.n_train, dc.n_test, dc.seed, p);
    return scale_datasets(tr, te);
  }
  return scale_datasets(load_csv(dc.train_csv), load_csv(dc.test_csv));
}

std::pair<ConstraintPolyhedron, ConstraintPolyhedron> constraint_boxes(const PipelineConfig& cfg,
                                                                       const Dataset& train) {
  const Vec umax = train.u.cwiseAbs().rowwise().maxCoeff();
  const Vec ymax = cfg.y_fraction * train.y.cwiseAbs().rowwise().maxCoeff();
  const Vec ulo = cfg.u_lo.value_or(-umax), uhi = cfg.u_hi.value_or(umax);
  const Vec ylo = cfg.y_lo.value_or(-ymax), yhi = cfg.y_hi.value_or(ymax);
  if (ulo.size() != train.nu() || uhi.size() != train.nu() || ylo.size() != train.ny() || yhi.size() != train.ny())
    throw ConfigError("constraint boxes do not match the data channels");
  return {ConstraintPolyhedron::box(ulo, uhi), ConstraintPolyhedron::box(ylo, yhi)};
}

RciSpec rci_spec(const PipelineConfig& cfg, const Artifact& a) {
  if (a.sigma.size() == 0) throw ConfigError("artifact '" + a.stage + "' carries no set template; run init-rci first");
  RciSpec s;
  s.tmpl = make_box_template(a.model.nx(), a.sigma);
  s.U = a.U;
  s.Y = a.Y;
  s.M = cfg.M;
  return s;
}

double artifact_bfr(const Artifact& a, const Dataset& scaled) { return prediction_bfr(a.model, scaled, a.model.x0); }

StageResult stage_lti(const PipelineConfig& cfg, const Datasets& d) {
  const LtiFit fit = fit_lti(d.train_s, cfg.nx, cfg.lti, &d.test_s);
  if (fit.nx == 0) throw InfeasibleError("lti: group lasso pruned every state");
  StageResult res;
  Artifact& a = res.artifact;
  a = base_artifact(cfg, "lti", nullptr);
  a.model = QlpvModel::lti(fit.A, fit.B, fit.C);
  a.scaler = d.scaler;
  const auto [U, Y] = constraint_boxes(cfg, d.train);
  a.U = U.to_scaled(d.scaler.u_mean, d.scaler.u_std);
  a.Y = Y.to_scaled(d.scaler.y_mean, d.scaler.y_std);
  const Mat e = d.train_s.y - simulate(a.model, d.train_s, SimMode::Prediction).y_hat;
  a.w = estimate_disturbance(e, cfg.kappa).set;
  fill_fit_metrics(a, d);
  a.metrics["eps_w"] = a.w.eps_w.sum();
  res.log = fit.log;
  return res;
}

StageResult stage_init_rci(const PipelineConfig& cfg, const Artifact& prev) {
  if (prev.model.np() != 1) throw ConfigError("init-rci expects the LTI artifact");
  const InitialRci init = solve_initial_rci(prev.model.A[0], prev.model.B[0], prev.model.C, prev.w, prev.U, prev.Y,
                                            cfg.M, cfg.init);
  StageResult res;
  Artifact& a = res.artifact;
  a = base_artifact(cfg, "init_rci", &prev);
  a.sigma = init.sigma;
  a.q = Vec::Ones(init.tmpl.nf());
  a.vertex_inputs = init.vertex_inputs;
  a.r = init.r_L;
  a.metrics["nx"] = a.model.nx();
  a.metrics["np"] = 1;
  a.metrics["r"] = a.r;
  a.metrics["rci_max_violation"] = init.max_violation;
  return res;
}

StageResult stage_qlpv(const PipelineConfig& cfg, const Artifact& prev, const Datasets& d) {
  if (prev.model.np() != 1) throw ConfigError("fit-qlpv expects an LTI artifact");
  const int nx = prev.model.nx();
  TemplatePolytope tmpl;
  Mat vin;
  if (prev.has_set()) {
    tmpl = make_box_template(nx, prev.sigma);
    vin = prev.vertex_inputs;
  } else if (cfg.qlpv.rho_ineq > 0.0) {
    throw ConfigError("fit-qlpv with rho_ineq > 0 needs the init-rci artifact");
  } else {
    tmpl = make_box_template(nx, Mat::Identity(nx, nx));
    vin = Mat::Zero(prev.model.nu(), tmpl.nv());
  }
  const QlpvFit fit = fit_qlpv_with_rci(d.train_s, prev.model.A[0], prev.model.B[0], prev.model.C, tmpl, vin, prev.w,
                                        prev.U, prev.Y, cfg.net, cfg.qlpv, &d.test_s);
  StageResult res;
  Artifact& a = res.artifact;
  a = base_artifact(cfg, "qlpv", &prev);
  a.model = lump_constant_branches(fit.model, cfg.qlpv.zero_group_threshold);
  const Mat e = d.train_s.y - simulate(a.model, d.train_s, SimMode::Prediction).y_hat;
  a.w = estimate_disturbance(e, cfg.kappa).set;
  a.r = kInf;
  if (prev.sigma.size()) refresh_set(cfg, a);
  fill_fit_metrics(a, d);
  a.metrics["active_branches"] = count_active_branches(fit.model.net, cfg.qlpv.zero_group_threshold);
  a.metrics["penalty"] = fit.report.rci_penalty;
  a.metrics["eps_w"] = a.w.eps_w.sum();
  res.log = fit.log;
  return res;
}

StageResult stage_reduce(const PipelineConfig& cfg, const Artifact& prev, const Datasets& d, int np_target) {
  StageResult res;
  Artifact& a = res.artifact;
  a = base_artifact(cfg, "reduce", &prev);
  a.model = lump_constant_branches(prev.model, cfg.qlpv.zero_group_threshold);
  if (np_target < 0 || np_target > a.model.np()) throw ConfigError("reduce: target n_p out of range");
  if (np_target > 0 && np_target < a.model.np()) {
    const ReductionPlan plan = select_indices(a.model, d.train_s, np_target);
    const bool ci = cfg.reduce_with_ci && prev.has_set();
    const TemplatePolytope tmpl = ci ? make_box_template(a.model.nx(), prev.sigma) : TemplatePolytope{};
    const ReducedMatrices red =
        reduce_matrices(plan, a.model, tmpl, ci ? prev.q : Vec(), ci ? prev.vertex_inputs : Mat(),
                        cfg.reduce_refine_iters);
    a.model = apply_reduction(a.model, plan, red);
    a.metrics["reduction_objective"] = red.objective;
  }
  const OutputRefit refit = refit_output_map(a.model, d.train_s, cfg.kappa);
  a.model.C = refit.C;
  a.w = refit.w;
  a.r = kInf;
  if (prev.sigma.size()) refresh_set(cfg, a);  // may be infeasible; accepted
  fill_fit_metrics(a, d);
  a.metrics["eps_w"] = a.w.eps_w.sum();
  return res;
}

StageResult stage_concurrent(const PipelineConfig& cfg, const Artifact& prev, const Datasets& d, double tau) {
  if (!prev.has_set()) throw InfeasibleError("fit-concurrent needs a finite size value at its starting model");
  TrainConfig tc = cfg.concurrent;
  tc.tau = tau;
  QlpvModel init = prev.model;
  for (auto& K : init.K) K.setZero();
  const ConcurrentFit fit = fit_concurrent(d.train_s, init, rci_spec(cfg, prev), tc, &d.test_s);
  StageResult res;
  Artifact& a = res.artifact;
  a = base_artifact(cfg, "concurrent", &prev);
  a.model = fit.model;
  a.w = fit.w;
  if (fit.rci.feasible()) {
    a.q = fit.rci.q;
    a.vertex_inputs = fit.rci.vertex_inputs;
    a.r = fit.rci.r_value;
    a.metrics["rci_max_violation"] = rci_residuals(a.model, a.w, rci_spec(cfg, a), a.q, a.vertex_inputs).max();
  } else {
    a.q.resize(0);
    a.r = kInf;
  }
  fill_fit_metrics(a, d);
  a.metrics["tau"] = tau;
  a.metrics["eps_w"] = a.w.eps_w.sum();
  res.log = fit.log;
  return res;
}

ClosedLoopLog stage_control(const PipelineConfig& cfg, const Artifact& prev, Artifact* summary) {
  if (!prev.has_set()) throw InfeasibleError("control-sim needs an artifact with a certified set");
  const TemplatePolytope tmpl = make_box_template(prev.model.nx(), prev.sigma);
  if (!contains(tmpl, prev.q, Vec::Zero(prev.model.nx())))
    throw InfeasibleError("control-sim: the origin is outside the invariant set");
  const Mat ybox = physical_y_box(prev);
  const Vec center = 0.5 * (ybox.col(0) + ybox.col(1)), half = 0.5 * (ybox.col(1) - ybox.col(0));
  const int ny = prev.model.ny();
  Mat ref(ny, cfg.control.T);
  for (int t = 0; t < cfg.control.T; ++t) {
    const double lv = cfg.control.levels[std::min<size_t>(t / cfg.control.hold, cfg.control.levels.size() - 1)];
    ref.col(t) = center + lv * half;
  }

  ClosedLoopConfig cc;
  cc.weights = cfg.control.weights;
  cc.scaler = prev.scaler;
  cc.clamp_integrator = cfg.control.clamp_integrator;
  std::unique_ptr<Plant> plant;
  if (cfg.data.kind == "msd")
    plant = std::make_unique<MsdPlant>();
  else
    plant = std::make_unique<ScaledModelPlant>(prev.model, prev.scaler);
  const ClosedLoopLog log =
      closed_loop(*plant, prev.model, tmpl, prev.q, prev.U, ref, cfg.control.T, cc);

  if (summary) {
    *summary = base_artifact(cfg, "control", &prev);
    int active = 0, y_out = 0;
    for (bool b : log.filter_active) active += b;
    for (int t = 0; t < log.y.cols(); ++t)
      for (int i = 0; i < ny; ++i)
        if (log.y(i, t) < ybox(i, 0) - 1e-9 || log.y(i, t) > ybox(i, 1) + 1e-9) ++y_out;
    summary->metrics["nx"] = prev.model.nx();
    summary->metrics["np"] = prev.model.np();
    summary->metrics["r"] = prev.r;
    summary->metrics["filter_active_steps"] = active;
    summary->metrics["y_violations"] = y_out;
    summary->metrics["max_set_violation"] = log.max_set_violation;
  }
  return log;
}

std::vector<SweepRow> sweep_tau(const PipelineConfig& cfg, const Artifact& prev, const Datasets& d) {
  std::vector<std::future<SweepRow>> jobs;
  for (double tau : cfg.tau_grid)
    jobs.push_back(std::async(std::launch::async, [&, tau] {
      SweepRow row;
      row.param = tau;
      try {
        const Artifact a = stage_concurrent(cfg, prev, d, tau).artifact;
        row.bfr_train = a.metrics.at("bfr_train");
        row.bfr_test = a.metrics.at("bfr_test");
        row.r = a.r;
        row.nonzero = a.model.np();
      } catch (const Error& e) {
        row.r = kInf;
        row.note = e.what();
      }
      return row;
    }));
  std::vector<SweepRow> rows;
  for (auto& j : jobs) rows.push_back(j.get());
  return rows;
}

std::vector<SweepRow> sweep_kp(const PipelineConfig& cfg, const Artifact& lti, const Datasets& d) {
  if (lti.model.np() != 1) throw ConfigError("sweep-kp expects the LTI artifact");
  std::vector<std::future<SweepRow>> jobs;
  for (double kp : cfg.kp_grid)
    jobs.push_back(std::async(std::launch::async, [&, kp] {
      PipelineConfig c = cfg;
      c.qlpv.kappa_p = kp;
      c.qlpv.rho_ineq = 0.0;
      c.net.n_p = cfg.sweep_kp_np;
      Artifact base = lti;
      base.sigma.resize(0, 0);
      base.q.resize(0);
      const StageResult r = stage_qlpv(c, base, d);
      SweepRow row;
      row.param = kp;
      row.bfr_train = r.artifact.metrics.at("bfr_train");
      row.bfr_test = r.artifact.metrics.at("bfr_test");
      row.nonzero = static_cast<int>(r.artifact.metrics.at("active_branches"));
      row.r = kInf;
      return row;
    }));
  std::vector<SweepRow> rows;
  for (auto& j : jobs) rows.push_back(j.get());
  return rows;
}

std::vector<ReductionRow> reduction_sweep(const PipelineConfig& cfg, const Artifact& prev, const Datasets& d) {
  const QlpvModel lumped = lump_constant_branches(prev.model, cfg.qlpv.zero_group_threshold);
  Artifact base = prev;
  base.model = lumped;
  std::vector<ReductionRow> rows;
  for (int np = 1; np <= lumped.np(); ++np) {
    ReductionRow row;
    row.np = np;
    if (np < lumped.np()) row.retained = select_indices(lumped, d.train_s, np).retained;
    else
      for (int i = 0; i + 1 < np; ++i) row.retained.push_back(i);
    try {
      const Artifact a = stage_reduce(cfg, base, d, np).artifact;
      row.bfr_train = a.metrics.at("bfr_train");
      row.bfr_test = a.metrics.at("bfr_test");
      row.r = a.r;
    } catch (const NumericalError& e) {
      row.r = kInf;
      row.note = e.what();
    }
    rows.push_back(row);
  }
  return rows;
}

void write_metrics_header(std::ostream& os) {
  os << "stage,config_hash,seed,nx,np,bfr_train,bfr_test,mse,r,eps_w,rci_max_violation\n";
}

void write_metrics_row(std::ostream& os, const Artifact& a) {
  auto m = [&](const char* k) {
    const auto it = a.metrics.find(k);
    return it == a.metrics.end() ? std::string() : fmt(it->second);
  };
  os << a.stage << ',' << a.config_hash << ',' << a.seed << ',' << m("nx") << ',' << m("np") << ','
     << m("bfr_train") << ',' << m("bfr_test") << ',' << m("mse") << ',' << fmt(a.r) << ',' << m("eps_w") << ','
     << m("rci_max_violation") << '\n';
}

void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  os << "iter,loss,mse,reg,penalty,r,bfr\n";
  for (const auto& r : log)
    os << r.iter << ',' << fmt(r.loss) << ',' << fmt(r.mse) << ',' << fmt(r.reg) << ',' << fmt(r.penalty) << ','
       << fmt(r.r) << ',' << fmt(r.bfr) << '\n';
}

void write_sweep(const std::vector<SweepRow>& rows, const std::string& param_name, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  os << param_name << ",bfr_train,bfr_test,r,nonzero_branches,note\n";
  for (const auto& r : rows) {
    std::string note = r.note;
    std::replace(note.begin(), note.end(), ',', ';');
    os << fmt(r.param) << ',' << fmt(r.bfr_train) << ',' << fmt(r.bfr_test) << ',' << fmt(r.r) << ',' << r.nonzero
       << ',' << note << '\n';
  }
}

void write_reduction(const std::vector<ReductionRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  os << "np,retained,bfr_train,bfr_test,r,r_status,note\n";
  for (const auto& r : rows) {
    std::string idx, note = r.note;
    for (size_t k = 0; k < r.retained.size(); ++k) idx += (k ? ";" : "") + std::to_string(r.retained[k] + 1);
    std::replace(note.begin(), note.end(), ',', ';');
    os << r.np << ',' << idx << ',' << fmt(r.bfr_train) << ',' << fmt(r.bfr_test) << ',' << fmt(r.r) << ','
       << (std::isfinite(r.r) ? "feasible" : "infeasible") << ',' << note << '\n';
  }
}

void write_control_log(const ClosedLoopLog& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  const int ny = static_cast<int>(log.y.rows()), nu = static_cast<int>(log.u.rows());
  const int nx = static_cast<int>(log.x.rows());
  os << 't';
  for (int i = 1; i <= ny; ++i) os << ",y" << i;
  for (int i = 1; i <= ny; ++i) os << ",y_ref" << i;
  for (int i = 1; i <= ny; ++i) os << ",y_model" << i;
  for (int i = 1; i <= nu; ++i) os << ",u" << i;
  for (int i = 1; i <= nu; ++i) os << ",u_des" << i;
  os << ",filter_active";
  for (int i = 1; i <= nx; ++i) os << ",x" << i;
  os << '\n';
  for (int t = 0; t < log.y.cols(); ++t) {
    os << t;
    for (int i = 0; i < ny; ++i) os << ',' << fmt(log.y(i, t));
    for (int i = 0; i < ny; ++i) os << ',' << fmt(log.y_ref(i, t));
    for (int i = 0; i < ny; ++i) os << ',' << fmt(log.y_model(i, t));
    for (int i = 0; i < nu; ++i) os << ',' << fmt(log.u(i, t));
    for (int i = 0; i < nu; ++i) os << ',' << fmt(log.u_des(i, t));
    os << ',' << (log.filter_active[t] ? 1 : 0);
    for (int i = 0; i < nx; ++i) os << ',' << fmt(log.x(i, t));
    os << '\n';
  }
}

void write_set_vertices(const Artifact& a, const std::string& path, bool append) {
  if (!a.has_set()) return;
  const TemplatePolytope tmpl = make_box_template(a.model.nx(), a.sigma);
  Mat V = tmpl.vertices(a.q);
  std::vector<int> order(V.cols());
  for (int k = 0; k < V.cols(); ++k) order[k] = k;
  if (V.rows() == 2) {
    const Vec c = V.rowwise().mean();
    std::sort(order.begin(), order.end(), [&](int i, int j) {
      return std::atan2(V(1, i) - c(1), V(0, i) - c(0)) < std::atan2(V(1, j) - c(1), V(0, j) - c(0));
    });
    order.push_back(order.front());  // closed polyline
  }
  const bool header = !append || !std::filesystem::exists(path);
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  if (!os) throw ConfigError("cannot write " + path);
  if (header) {
    os << "stage,vertex";
    for (int i = 1; i <= V.rows(); ++i) os << ",x" << i;
    os << '\n';
  }
  for (size_t k = 0; k < order.size(); ++k) {
    os << a.stage << ',' << k;
    for (int i = 0; i < V.rows(); ++i) os << ',' << fmt(V(i, order[k]));
    os << '\n';
  }
}

Artifact run_pipeline(const PipelineConfig& cfg, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const auto path = [&](const std::string& f) { return (std::filesystem::path(out_dir) / f).string(); };
  const Datasets d = make_datasets(cfg);
  save_csv(d.train, path("train.csv"));
  save_csv(d.test, path("test.csv"));

  std::ofstream metrics(path("metrics.csv"));
  write_metrics_header(metrics);
  std::filesystem::remove(path("sets.csv"));
  std::optional<Artifact> last;

  auto finish = [&](StageResult&& r) {
    save_artifact(r.artifact, path(r.artifact.stage + ".json"));
    if (!r.log.empty()) write_train_log(r.log, path(r.artifact.stage + "_log.csv"));
    write_metrics_row(metrics, r.artifact);
    metrics.flush();
    write_set_vertices(r.artifact, path("sets.csv"), true);
    const auto b = r.artifact.metrics.find("bfr_train");
    std::cerr << "[" << r.artifact.stage << "] bfr_train "
              << (b == r.artifact.metrics.end() ? std::string("-") : fmt(b->second)) << " r " << fmt(r.artifact.r)
              << "\n";
    last = std::move(r.artifact);
  };
  auto need = [&](const char* stage) -> const Artifact& {
    if (!last) throw ConfigError(std::string(stage) + " has no upstream artifact; enable an earlier stage");
    return *last;
  };
  auto run_stage = [&](const char* name, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      // stage name travels with the diagnostic
      const std::string msg = std::string(name) + ": " + e.what();
      if (dynamic_cast<const InfeasibleError*>(&e)) throw InfeasibleError(msg);
      if (dynamic_cast<const NumericalError*>(&e)) throw NumericalError(msg);
      throw ConfigError(msg);
    }
  };

  if (cfg.stages.lti) run_stage("lti", [&] { finish(stage_lti(cfg, d)); });
  if (cfg.stages.init_rci) run_stage("init_rci", [&] { finish(stage_init_rci(cfg, need("init_rci"))); });
  if (cfg.stages.qlpv) run_stage("qlpv", [&] { finish(stage_qlpv(cfg, need("qlpv"), d)); });
  if (cfg.stages.reduce) run_stage("reduce", [&] { finish(stage_reduce(cfg, need("reduce"), d, cfg.reduce_np)); });
  if (cfg.stages.concurrent)
    run_stage("concurrent", [&] { finish(stage_concurrent(cfg, need("concurrent"), d, cfg.concurrent.tau)); });
  if (cfg.stages.control)
    run_stage("control", [&] {
      Artifact summary;
      const ClosedLoopLog log = stage_control(cfg, need("control"), &summary);
      write_control_log(log, path("control.csv"));
      write_metrics_row(metrics, summary);
      std::ofstream cm(path("control_metrics.csv"));
      cm << "steps,filter_active_steps,y_violations,max_set_violation\n"
         << cfg.control.T << ',' << fmt(summary.metrics["filter_active_steps"]) << ','
         << fmt(summary.metrics["y_violations"]) << ',' << fmt(summary.metrics["max_set_violation"]) << '\n';
    });
  return need("pipeline");
}

}  // namespace rcisysid
