#pragma once

#include <string>

#include "rcisysid/linalg.hpp"

namespace rcisysid::qp {

/// minimize  1/2 x'Px + c'x + offset
/// subject to A_eq x = b_eq,  G x <= h.
struct QpProblem {
  Mat P;
  Vec c;
  double offset = 0.0;
  Mat A_eq;
  Vec b_eq;
  Mat G;
  Vec h;

  int n() const { return static_cast<int>(c.size()); }
  int m() const { return static_cast<int>(h.size()); }
  int p() const { return static_cast<int>(b_eq.size()); }

  /// Throws ConfigError on inconsistent dimensions, asymmetric or indefinite P.
  void validate() const;
};

enum class QpStatus { Optimal, Infeasible, DualInfeasible, MaxIter };

std::string to_string(QpStatus status);

struct QpSolution {
  Vec x;
  Vec y;  // equality multipliers
  Vec z;  // inequality multipliers, >= 0
  Vec s;  // inequality slacks h - Gx, >= 0
  double objective = 0.0;
  QpStatus status = QpStatus::MaxIter;
  double mu_final = 0.0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  double gap = 0.0;
  int iterations = 0;

  bool optimal() const { return status == QpStatus::Optimal; }
};

struct QpSettings {
  double tol = 1e-8;
  int max_iter = 100;
  /// Run the phase-1 feasibility LP when the main loop stalls, to tell
  /// Infeasible apart from MaxIter.
  bool phase1_on_failure = true;
};

/// Primal-dual interior point with Mehrotra predictor-corrector steps.
///
/// Residuals are relative: the primal residual against max(1 + |h|, |Gx|, |s|)
/// (and max(1 + |b|, |Ax|)), the dual residual against max(1 + |c|, |Px|, |G'z|),
/// and the duality gap s'z against 1 + |objective|, all in the infinity norm.
QpSolution solve(const QpProblem& problem, const QpSettings& settings = {});

inline QpSolution solve(const QpProblem& problem, double tol, int max_iter) {
  return solve(problem, QpSettings{tol, max_iter, true});
}

/// Quadratic regularization used to solve LPs through the QP path.
inline constexpr double kLpRegularization = 1e-9;

/// minimize c'x subject to G x <= h and A_eq x = b_eq.
///
/// Solved as a QP with P = kLpRegularization * I. An unbounded LP is
/// reported as DualInfeasible.
QpSolution solve_lp(const Vec& c, const Mat& G, const Vec& h, const Mat& A_eq = Mat(),
                    const Vec& b_eq = Vec(), const QpSettings& settings = {});

/// Gradient of a scalar with respect to every entry of the problem data.
struct QpGradient {
  Mat dP;
  Vec dc;
  Mat dA_eq;
  Vec db_eq;
  Mat dG;
  Vec dh;

  /// <gradient, perturbation>: first-order change for a data perturbation.
  double directional(const QpProblem& perturbation) const;
};

/// Gradient of the optimal value with respect to the data.
///
/// At an optimal barrier point these are the envelope expressions
/// dP = xx'/2, dc = x, dA = y x', db = -y, dG = z x', dh = -z. The relaxed
/// KKT system is factored first; a singular system throws NumericalError
/// carrying the reciprocal condition estimate.
QpGradient value_gradient(const QpProblem& problem, const QpSolution& solution);

/// Implicit differentiation of the relaxed KKT system: gradient of
/// x_bar' x*(data) with respect to the data.
QpGradient solution_vjp(const QpProblem& problem, const QpSolution& solution, const Vec& x_bar);

/// Reciprocal condition estimate of the reduced relaxed KKT matrix
/// P + G' diag(z/s) G (bordered by A_eq when present).
double kkt_rcond(const QpProblem& problem, const QpSolution& solution);

}  // namespace rcisysid::qp
