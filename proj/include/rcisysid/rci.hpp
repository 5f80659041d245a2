#pragma once

#include "rcisysid/conic_qp.hpp"
#include "rcisysid/geometry.hpp"
#include "rcisysid/model.hpp"

namespace rcisysid {

enum class SizeMode { Tracking, L1 };

struct RciSpec {
  TemplatePolytope tmpl;
  ConstraintPolyhedron U;
  ConstraintPolyhedron Y;  // needs its vertex list
  int M = 50;
  SizeMode mode = SizeMode::Tracking;

  void validate(const QlpvModel& m) const;
};

/// Left-hand minus right-hand sides of the invariance conditions; the set is
/// certified when every entry is <= 0.
struct RciResiduals {
  Mat dynamics;  // f x (n_p * v), column i * v + k
  Mat output;    // m_y x v
  Mat input;     // m_u x v
  Vec cone;      // E q

  double max() const;
};

RciResiduals rci_residuals(const QlpvModel& m, const DisturbanceSet& w, const RciSpec& spec, const Vec& q,
                           const Mat& vertex_inputs);

struct RciSolution {
  Vec q;
  Mat vertex_inputs;          // n_u x v
  std::vector<Mat> x_traj;    // per output vertex, n_x x (M + 1)
  std::vector<Mat> u_traj;    // per output vertex, n_u x M
  double r_value = 0.0;       // +inf when infeasible
  qp::QpStatus status = qp::QpStatus::MaxIter;
  qp::QpSolution qp;

  bool feasible() const { return status == qp::QpStatus::Optimal; }
};

/// Layout of the size QP decision vector [q; u_1..u_v; U^1..U^{v_y}] with
/// U^j = (u^j_0, ..., u^j_{M-1}).
struct RciLayout {
  int nf = 0, nv = 0, nu = 0, nvy = 0, M = 0;
  int q_offset() const { return 0; }
  int u_offset(int k) const { return nf + k * nu; }
  int traj_offset(int j) const { return nf + nv * nu + j * M * nu; }
  int size() const { return nf + nv * nu + nvy * M * nu; }
};

/// Condensed size QP. Inequality rows are ordered: trajectory facets
/// (per j, t = 0..M-1), trajectory inputs, dynamics invariance (per i, k),
/// output invariance (per k), vertex inputs (per k), configuration cone.
qp::QpProblem assemble_r_qp(const QlpvModel& m, const DisturbanceSet& w, const RciSpec& spec);

RciSolution solve_r(const QlpvModel& m, const DisturbanceSet& w, const RciSpec& spec,
                    const qp::QpSettings& settings = {});

/// Same as solve_r; used after each pipeline stage to refresh q.
inline RciSolution recompute_q(const QlpvModel& m, const DisturbanceSet& w, const RciSpec& spec) {
  return solve_r(m, w, spec);
}

struct RGradient {
  MatList dA, dB, dK;
  Mat dC;
  Vec dc_w;
  Vec deps_w;
};

/// Envelope gradient of the size value with respect to the model and the
/// disturbance set, from the QP primal-dual pair. Throws NumericalError when
/// the KKT system at the solution is singular.
RGradient r_gradient(const QlpvModel& m, const DisturbanceSet& w, const RciSpec& spec, const RciSolution& sol);

double size_l1(const Vec& q);

/// Tracking distance of X(q) to the output vertices with q held fixed: the
/// size QP restricted to the nominal trajectory rows. +inf when infeasible.
double tracking_distance(const QlpvModel& m, const RciSpec& spec, const Vec& q);

struct InitialRciSettings {
  double rho_start = 1e2;
  double rho_end = 1e6;
  int adam_iters = 500;
  double adam_lr = 1e-2;
  int lbfgs_iters = 2000;
  double feas_tol = 1e-6;
  unsigned long long seed = 0;
};

struct InitialRci {
  Mat sigma;
  TemplatePolytope tmpl;
  Mat vertex_inputs;  // n_u x v, valid for q = 1
  double r_L = 0.0;
  double max_violation = 0.0;
  RciSolution trajectories;
};

/// Shape matrix Sigma for the box template such that X(1) is invariant for
/// the uncertain LTI model, maximizing the tracking size. Penalty NLP on
/// (Sigma, u, U), then an exact convex QP in (u, U) at the returned Sigma.
/// Throws InfeasibleError when no certified Sigma is found.
InitialRci solve_initial_rci(const Mat& A, const Mat& B, const Mat& C, const DisturbanceSet& w,
                             const ConstraintPolyhedron& U, const ConstraintPolyhedron& Y, int M,
                             const InitialRciSettings& settings = {});

}  // namespace rcisysid
