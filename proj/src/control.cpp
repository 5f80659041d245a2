#include "rcisysid/control.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rcisysid/conic_qp.hpp"
#include "rcisysid/error.hpp"

namespace rcisysid {

namespace {

constexpr double kFilterTol = 1e-9;

}  // namespace

DareResult solve_dare(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, double tol, int max_iter) {
  const int n = static_cast<int>(A.rows());
  if (A.cols() != n || B.rows() != n || Q.rows() != n || Q.cols() != n || R.rows() != B.cols() ||
      R.cols() != B.cols())
    throw ConfigError("Riccati data has inconsistent shapes");
  DareResult res;
  Mat P = Q;
  for (int it = 1; it <= max_iter; ++it) {
    const Mat BtP = B.transpose() * P;
    const Mat K = (R + BtP * B).ldlt().solve(BtP * A);
    Mat Pn = Q + A.transpose() * P * A - A.transpose() * P * B * K;
    Pn = 0.5 * (Pn + Pn.transpose());
    if (!Pn.allFinite()) throw NumericalError("Riccati iteration produced non-finite values");
    const double change = (Pn - P).cwiseAbs().maxCoeff() / std::max(1.0, Pn.cwiseAbs().maxCoeff());
    P = Pn;
    if (change < tol) {
      res.P = P;
      const Mat BtPn = B.transpose() * P;
      res.K = (R + BtPn * B).ldlt().solve(BtPn * A);
      res.iterations = it;
      return res;
    }
  }
  throw NumericalError("Riccati iteration did not converge in " + std::to_string(max_iter) + " iterations");
}

TrackingGain lqr_gain(const Mat& A, const Mat& B, const Mat& C, const LqrWeights& w) {
  const int nx = static_cast<int>(A.rows()), nu = static_cast<int>(B.cols()), ny = static_cast<int>(C.rows());
  Mat Aa = Mat::Zero(nx + ny, nx + ny), Ba = Mat::Zero(nx + ny, nu);
  Aa.topLeftCorner(nx, nx) = A;
  Aa.bottomLeftCorner(ny, nx) = C;
  Aa.bottomRightCorner(ny, ny).setIdentity();
  Ba.topRows(nx) = B;
  Mat Q = Mat::Zero(nx + ny, nx + ny);
  Q.topLeftCorner(nx, nx) = w.qx * Mat::Identity(nx, nx);
  Q.bottomRightCorner(ny, ny) = w.qq * Mat::Identity(ny, ny);
  const DareResult d = solve_dare(Aa, Ba, Q, w.r * Mat::Identity(nu, nu));
  return {-d.K.leftCols(nx), -d.K.rightCols(ny)};
}

FilterResult safety_filter(const QlpvModel& m, const TemplatePolytope& tmpl, const Vec& q,
                           const ConstraintPolyhedron& U, const Vec& x, const Vec& y, const Vec& u_des,
                           const MatList* gains) {
  if (m.net.uses_input && m.np() > 1)
    throw ConfigError("safety filter needs a scheduling function independent of the input");
  const int nu = m.nu();
  if (u_des.size() != nu || U.dim() != nu) throw ConfigError("input dimension mismatch in safety filter");
  const Vec p = m.net.schedule(x, Vec::Zero(nu));
  Mat L = Mat::Zero(m.nx(), m.ny());
  const MatList& Ls = gains ? *gains : m.K;
  if (static_cast<int>(Ls.size()) != m.np()) throw ConfigError("filter gains do not match n_p");
  for (int i = 0; i < m.np(); ++i) L += p(i) * Ls[i];
  const Vec drift = m.A_of(p) * x + L * (y - m.C * x);
  const Mat Bp = m.B_of(p);

  qp::QpProblem prob;
  prob.G.resize(U.H.rows() + tmpl.nf(), nu);
  prob.G << U.H, tmpl.F * Bp;
  prob.h.resize(prob.G.rows());
  prob.h << U.h, q - tmpl.F * drift;
  if ((prob.G * u_des - prob.h).maxCoeff() <= kFilterTol) return {u_des, false};

  prob.P = 2.0 * Mat::Identity(nu, nu);
  prob.c = -2.0 * u_des;
  prob.offset = u_des.squaredNorm();
  prob.A_eq = Mat::Zero(0, nu);
  prob.b_eq = Vec::Zero(0);
  const qp::QpSolution sol = qp::solve(prob, qp::QpSettings{1e-10, 200, true});
  if (!sol.optimal()) throw InfeasibleError("safety filter: no admissible input (" + qp::to_string(sol.status) + ")");
  return {sol.x, true};
}

ClosedLoopLog closed_loop(Plant& plant, const QlpvModel& m, const TemplatePolytope& tmpl, const Vec& q,
                          const ConstraintPolyhedron& U, const Mat& y_ref, int T, const ClosedLoopConfig& cfg) {
  m.validate();
  const int nx = m.nx(), nu = m.nu(), ny = m.ny();
  if (T < 1 || y_ref.rows() != ny || y_ref.cols() < 1) throw ConfigError("closed loop needs T >= 1 and a reference");
  const Scaler sc = cfg.scaler.u_mean.size() ? cfg.scaler : Scaler::identity(nu, ny);
  Vec x = cfg.x0.size() ? cfg.x0 : Vec::Zero(nx);
  if (x.size() != nx) throw ConfigError("observer start has the wrong size");
  Vec qi = Vec::Zero(ny);

  ClosedLoopLog log;
  log.y.resize(ny, T);
  log.y_ref.resize(ny, T);
  log.y_model.resize(ny, T);
  log.u.resize(nu, T);
  log.u_des.resize(nu, T);
  log.x.resize(nx, T + 1);
  log.x.col(0) = x;
  log.max_set_violation = (tmpl.F * x - q).maxCoeff();

  for (int t = 0; t < T; ++t) {
    const Vec y_phys = plant.output();
    if (!y_phys.allFinite()) throw NumericalError("plant output is not finite at step " + std::to_string(t));
    const Vec r_phys = y_ref.col(std::min<int>(t, static_cast<int>(y_ref.cols()) - 1));
    const Vec y = (y_phys - sc.y_mean).cwiseQuotient(sc.y_std);
    const Vec r = (r_phys - sc.y_mean).cwiseQuotient(sc.y_std);

    const Vec p = m.net.schedule(x, Vec::Zero(nu));
    Vec u_des = Vec::Zero(nu);
    bool fallback = false;
    try {
      const TrackingGain g = lqr_gain(m.A_of(p), m.B_of(p), m.C, cfg.weights);
      u_des = g.T_x * x + g.T_q * qi;
    } catch (const NumericalError&) {
      fallback = true;
    }

    FilterResult f;
    try {
      f = safety_filter(m, tmpl, q, U, x, y, u_des, cfg.filter_gains);
    } catch (const InfeasibleError& e) {
      throw InfeasibleError("invariance breach at step " + std::to_string(t) + ": " + e.what());
    }

    const Vec u_phys = sc.u_mean + sc.u_std.cwiseProduct(f.u);
    log.y.col(t) = y_phys;
    log.y_ref.col(t) = r_phys;
    log.y_model.col(t) = sc.y_mean + sc.y_std.cwiseProduct(m.C * x);
    log.u.col(t) = u_phys;
    log.u_des.col(t) = sc.u_mean + sc.u_std.cwiseProduct(u_des);
    log.filter_active.push_back(f.active);
    log.lqr_fallback.push_back(fallback);

    plant.apply(u_phys);
    // same update the filter certified
    const MatList& Ls = cfg.filter_gains ? *cfg.filter_gains : m.K;
    Mat L = Mat::Zero(nx, ny);
    for (int i = 0; i < m.np(); ++i) L += p(i) * Ls[i];
    x = m.A_of(p) * x + m.B_of(p) * f.u + L * (y - m.C * x);
    qi += y - r;
    if (cfg.clamp_integrator) qi = qi.cwiseMax(-cfg.integrator_limit).cwiseMin(cfg.integrator_limit);
    log.x.col(t + 1) = x;
    const double viol = (tmpl.F * x - q).maxCoeff();
    log.max_set_violation = std::max(log.max_set_violation, viol);
    if (viol > 1e-6) throw InfeasibleError("observer state left the invariant set at step " + std::to_string(t + 1));
  }
  return log;
}

}  // namespace rcisysid
