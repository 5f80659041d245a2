#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "rcisysid/geometry.hpp"
#include "rcisysid/model.hpp"
#include "rcisysid/rci.hpp"

namespace rcisysid {

struct TrainConfig {
  int adam_iters = 1000;
  double adam_lr = 1e-3;
  int lbfgs_iters = 5000;
  std::uint64_t seed = 0;
  double kappa_x = 0.0;
  double kappa_p = 0.0;
  double tau = 0.0;
  double kappa = 1.1;
  double rho_ineq = 1e3;
  double zero_group_threshold = 1e-6;
  int log_every = 10;

  void validate() const;
};

/// Shape of the scheduling networks for the qLPV stages.
struct NetConfig {
  int n_p = 3;
  int hidden_layers = 1;
  int width = 3;
  bool uses_input = true;
};

struct LossReport {
  double mse = 0.0;
  double reg_groups = 0.0;
  double rci_penalty = 0.0;
  double r_value = std::numeric_limits<double>::infinity();
  double bfr_train = 0.0;
  double bfr_test = 0.0;
  double total = 0.0;
};

/// One record of the training log.
struct TrainLogRow {
  int iter = 0;
  double loss = 0.0;
  double mse = 0.0;
  double reg = 0.0;
  double penalty = 0.0;
  double r = std::numeric_limits<double>::infinity();
  double bfr = 0.0;
};

/// Which parameter blocks are free during a fit.
struct ParamMask {
  bool A = true, B = true, K = false, C = true, net = true, x0 = true;
};

/// Flattens the free parameters of a model into one vector, in the order
/// A_i, B_i, K_i, C, network (per branch: hidden W, b, then w_out, b_out), x0.
class ParamPacker {
 public:
  ParamPacker(const QlpvModel& shape, ParamMask mask);
  int size() const { return size_; }
  Vec pack(const QlpvModel& m) const;
  void unpack(const Vec& v, QlpvModel& m) const;

 private:
  template <class F>
  void visit(QlpvModel& m, F&& f) const;
  ParamMask mask_;
  int size_ = 0;
};

/// Model of the same shape with every parameter zero; holds gradients.
QlpvModel zeros_like(const QlpvModel& m);

/// Reverse-mode sweep through a simulated chain. `states` comes from
/// simulate(m, data, mode); `d_residual` (n_y x N) is the loss gradient with
/// respect to the residuals e_t = y_t - C s_t. Gradients are accumulated into
/// `grad`; in prediction mode the initial-state gradient goes to grad.x0.
void adjoint_gradient(const QlpvModel& m, const Dataset& data, SimMode mode, const Mat& states,
                      const Mat& d_residual, QlpvModel& grad);

/// (1/N) sum ||y_t - C x_t||^2 over the prediction chain, with gradient.
double prediction_mse(const QlpvModel& m, const Dataset& data, QlpvModel* grad, Mat* residuals = nullptr);

/// Smoothed group norm sqrt(|g|^2 + delta^2) - delta.
inline constexpr double kGroupDelta = 1e-8;

/// Norms of the LTI state groups (row and column i of A, row i of B,
/// column i of C).
Vec lti_group_norms(const Mat& A, const Mat& B, const Mat& C);

/// Number of scheduling branches whose last-layer weights are nonzero.
int count_active_branches(const SchedulingNet& net, double threshold);

struct LtiFit {
  Mat A, B, C;
  int nx = 0;            // after pruning
  Vec group_norms;       // before pruning
  LossReport report;
  std::vector<TrainLogRow> log;
};

/// LTI identification from x_0 = 0 with group lasso on the state groups;
/// groups whose norm falls below the threshold are pruned.
LtiFit fit_lti(const Dataset& train, int nx_hat, const TrainConfig& cfg, const Dataset* test = nullptr);

struct QlpvFit {
  QlpvModel model;
  Mat vertex_inputs;  // n_u x v, certifying X(1)
  LossReport report;
  std::vector<TrainLogRow> log;
};

/// qLPV identification starting from the replicated LTI model, penalizing
/// violations of the residual bound, of invariance of X(1) under every
/// vertex model, and of the output and input constraints at the vertices.
/// With cfg.rho_ineq = 0 this is plain qLPV fitting.
QlpvFit fit_qlpv_with_rci(const Dataset& train, const Mat& A_L, const Mat& B_L, const Mat& C_L,
                          const TemplatePolytope& tmpl, const Mat& vertex_inputs, const DisturbanceSet& w_L,
                          const ConstraintPolyhedron& U, const ConstraintPolyhedron& Y, const NetConfig& net,
                          const TrainConfig& cfg, const Dataset* test = nullptr);

/// Value of the qLPV-stage penalty and its pieces, for auditing.
struct QlpvPenalty {
  double residual = 0.0;
  double invariance = 0.0;
  double output = 0.0;
  double input = 0.0;
  double max_violation = 0.0;
};
QlpvPenalty qlpv_penalty(const QlpvModel& m, const Mat& residuals, const TemplatePolytope& tmpl,
                         const Mat& vertex_inputs, const DisturbanceSet& w_L, const ConstraintPolyhedron& U,
                         const ConstraintPolyhedron& Y);

/// Disturbance set from the observer residuals of the model (z_0 = 0).
DisturbanceEstimate observer_disturbance(const QlpvModel& m, const Dataset& data, double kappa,
                                         Mat* states = nullptr);

struct ConcurrentFit {
  QlpvModel model;
  DisturbanceSet w;
  RciSolution rci;
  LossReport report;
  std::vector<TrainLogRow> log;
};

/// Joint fit of prediction error plus tau times the size value, over
/// (A, B, K, C, theta, x0). The disturbance set follows the observer
/// residuals at every evaluation. Throws InfeasibleError when the size QP is
/// infeasible at the initial model.
ConcurrentFit fit_concurrent(const Dataset& train, const QlpvModel& init, const RciSpec& spec,
                             const TrainConfig& cfg, const Dataset* test = nullptr);

/// Loss of fit_concurrent at a given model, with gradient packed by `packer`.
/// +inf when the size QP is infeasible.
double concurrent_objective(const QlpvModel& m, const Dataset& train, const RciSpec& spec, double tau,
                            double kappa, QlpvModel* grad, double* r_out = nullptr);

/// BFR of the prediction chain, started from `x0`.
double prediction_bfr(const QlpvModel& m, const Dataset& data, const Vec& x0);

}  // namespace rcisysid
