#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rcisysid/control.hpp"
#include "rcisysid/io.hpp"
#include "rcisysid/rci.hpp"
#include "rcisysid/train.hpp"

namespace rcisysid {

struct DataConfig {
  std::string kind = "trig";  // trig | msd | csv
  int n_train = 5000;
  int n_test = 5000;
  std::uint64_t seed = 7;
  std::string train_csv, test_csv;
  int tones = 50;
  double f_low = 0.1;
  double f_high = 100.0;
};

struct StageToggles {
  bool lti = true, init_rci = true, qlpv = true, reduce = false, concurrent = true, control = false;
};

struct ControlConfig {
  int T = 200;
  int hold = 50;                        // steps per reference level
  std::vector<double> levels{0.0, 0.9, -0.9, 0.5};  // fractions of the Y half-range
  LqrWeights weights;
  bool clamp_integrator = false;
};

/// Parsed experiment configuration. Every section is optional and falls back
/// to the defaults documented in the README.
struct PipelineConfig {
  Json raw;
  std::string hash;
  std::uint64_t seed = 0;
  DataConfig data;
  StageToggles stages;
  int nx = 2;
  NetConfig net;
  TrainConfig lti, qlpv, concurrent;
  InitialRciSettings init;
  int M = 50;
  double kappa = 1.1;
  std::optional<Vec> u_lo, u_hi, y_lo, y_hi;  // physical units
  double y_fraction = 0.9;
  int reduce_np = 0;  // 0 keeps n_p after lumping
  bool reduce_with_ci = true;
  int reduce_refine_iters = 0;  // reweighted passes after the bounding QP
  std::vector<double> tau_grid{1e-6, 1e-5, 1e-4, 1e-3};
  std::vector<double> kp_grid{0.0, 1e-3, 1e-2, 1e-1, 1.0};
  int sweep_kp_np = 10;
  ControlConfig control;

  /// Throws ConfigError on unknown keys, wrong types or invalid values.
  static PipelineConfig from_json(const Json& j);
  static PipelineConfig load(const std::string& path);
  /// Re-seeds every stage and refreshes the hash.
  void set_seed(std::uint64_t s);
};

struct Datasets {
  Dataset train, test;  // physical units
  Scaler scaler;
  Dataset train_s, test_s;  // scaled
};

Datasets make_datasets(const PipelineConfig& cfg);
/// Scaled datasets from physical records with the scaler fitted on `train`.
Datasets scale_datasets(const Dataset& train, const Dataset& test);

/// Default U and Y boxes in physical units.
std::pair<ConstraintPolyhedron, ConstraintPolyhedron> constraint_boxes(const PipelineConfig& cfg,
                                                                       const Dataset& train);

struct StageResult {
  Artifact artifact;
  std::vector<TrainLogRow> log;
};

StageResult stage_lti(const PipelineConfig& cfg, const Datasets& d);
StageResult stage_init_rci(const PipelineConfig& cfg, const Artifact& prev);
StageResult stage_qlpv(const PipelineConfig& cfg, const Artifact& prev, const Datasets& d);
StageResult stage_reduce(const PipelineConfig& cfg, const Artifact& prev, const Datasets& d, int np_target);
StageResult stage_concurrent(const PipelineConfig& cfg, const Artifact& prev, const Datasets& d, double tau);
ClosedLoopLog stage_control(const PipelineConfig& cfg, const Artifact& prev, Artifact* summary = nullptr);

/// Size QP setup of an artifact carrying a set.
RciSpec rci_spec(const PipelineConfig& cfg, const Artifact& a);

/// BFR of an artifact's model on a scaled record, from its x0.
double artifact_bfr(const Artifact& a, const Dataset& scaled);

struct SweepRow {
  double param = 0.0;
  double bfr_train = 0.0, bfr_test = 0.0, r = 0.0;
  int nonzero = 0;
  std::string note;
};

/// fit_concurrent from `prev` for each tau in the grid, run concurrently.
std::vector<SweepRow> sweep_tau(const PipelineConfig& cfg, const Artifact& prev, const Datasets& d);
/// Plain qLPV fits with n_p = cfg.sweep_kp_np over the kappa_p grid.
std::vector<SweepRow> sweep_kp(const PipelineConfig& cfg, const Artifact& lti, const Datasets& d);

struct ReductionRow {
  int np = 0;
  std::vector<int> retained;
  double bfr_train = 0.0, bfr_test = 0.0, r = 0.0;
  std::string note;  // failure diagnostic; BFRs are 0 then
};

/// Reduction to every order 1..n_p of the artifact model. An order whose
/// reduced model diverges on the training record is reported, not thrown.
std::vector<ReductionRow> reduction_sweep(const PipelineConfig& cfg, const Artifact& prev, const Datasets& d);

/// Runs the enabled stages in order, writing `<stage>.json`, training logs,
/// metrics.csv and the control log into `out_dir`. Returns the last artifact.
Artifact run_pipeline(const PipelineConfig& cfg, const std::string& out_dir);

// CSV emitters; schemas are listed in the README.
void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const Artifact& a);
void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path);
void write_sweep(const std::vector<SweepRow>& rows, const std::string& param_name, const std::string& path);
void write_reduction(const std::vector<ReductionRow>& rows, const std::string& path);
void write_control_log(const ClosedLoopLog& log, const std::string& path);
/// Vertices of X(q) in model coordinates, ordered as a closed polyline when n_x = 2.
void write_set_vertices(const Artifact& a, const std::string& path, bool append);

}  // namespace rcisysid
