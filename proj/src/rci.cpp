#include "rcisysid/rci.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "rcisysid/error.hpp"
#include "rcisysid/optim.hpp"

namespace rcisysid {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double max_or(const Mat& m, double fallback) { return m.size() ? m.maxCoeff() : fallback; }

RciLayout layout_of(const QlpvModel& m, const RciSpec& spec) {
  RciLayout l;
  l.nf = spec.tmpl.nf();
  l.nv = spec.tmpl.nv();
  l.nu = m.nu();
  l.nvy = static_cast<int>(spec.Y.vertices->cols());
  l.M = spec.M;
  return l;
}

/// Gamma[t] maps the stacked inputs (u_0, ..., u_{M-1}) to x_t from x_0 = 0.
std::vector<Mat> condensed_maps(const Mat& A, const Mat& B, int M) {
  const int nx = static_cast<int>(A.rows()), nu = static_cast<int>(B.cols());
  std::vector<Mat> gamma(M + 1, Mat::Zero(nx, M * nu));
  for (int t = 0; t < M; ++t) {
    gamma[t + 1] = A * gamma[t];
    gamma[t + 1].middleCols(t * nu, nu) += B;
  }
  return gamma;
}

}  // namespace

void RciSpec::validate(const QlpvModel& m) const {
  if (M < 1) throw ConfigError("horizon M must be >= 1");
  if (tmpl.nx() != m.nx()) throw ConfigError("template dimension differs from model state dimension");
  if (U.dim() != m.nu()) throw ConfigError("input constraint dimension differs from model");
  if (Y.dim() != m.ny()) throw ConfigError("output constraint dimension differs from model");
  if (!Y.vertices || Y.vertices->cols() == 0) throw ConfigError("output constraint set needs vertices");
}

double RciResiduals::max() const {
  double r = -kInf;
  r = std::max(r, max_or(dynamics, -kInf));
  r = std::max(r, max_or(output, -kInf));
  r = std::max(r, max_or(input, -kInf));
  r = std::max(r, max_or(cone, -kInf));
  return r;
}

RciResiduals rci_residuals(const QlpvModel& m, const DisturbanceSet& w, const RciSpec& spec, const Vec& q,
                           const Mat& vertex_inputs) {
  const auto& T = spec.tmpl;
  const int nv = T.nv(), np = m.np();
  RciResiduals r;
  r.dynamics.resize(T.nf(), np * nv);
  r.output.resize(spec.Y.H.rows(), nv);
  r.input.resize(spec.U.H.rows(), nv);
  const Vec kew = w.kappa * w.eps_w;
  for (int i = 0; i < np; ++i) {
    const Mat FK = T.F * m.K[i];
    const Vec dist = FK * w.c_w + FK.cwiseAbs() * kew;
    for (int k = 0; k < nv; ++k) {
      const Vec xk = T.vertex_maps[k] * q;
      r.dynamics.col(i * nv + k) = T.F * (m.A[i] * xk + m.B[i] * vertex_inputs.col(k)) + dist - q;
    }
  }
  const Vec ydist = spec.Y.H * w.c_w + spec.Y.H.cwiseAbs() * kew - spec.Y.h;
  for (int k = 0; k < nv; ++k) {
    r.output.col(k) = spec.Y.H * (m.C * (T.vertex_maps[k] * q)) + ydist;
    r.input.col(k) = spec.U.H * vertex_inputs.col(k) - spec.U.h;
  }
  r.cone = T.E * q;
  return r;
}

qp::QpProblem assemble_r_qp(const QlpvModel& m, const DisturbanceSet& w, const RciSpec& spec) {
  spec.validate(m);
  const auto& T = spec.tmpl;
  const RciLayout L = layout_of(m, spec);
  const int nf = L.nf, nv = L.nv, nu = L.nu, nvy = L.nvy, M = L.M, np = m.np();
  const int mu = static_cast<int>(spec.U.H.rows()), my = static_cast<int>(spec.Y.H.rows());
  const int n = L.size();
  const Mat Abar = m.A_nominal(), Bbar = m.B_nominal();
  const auto gamma = condensed_maps(Abar, Bbar, M);
  const Mat& Yv = *spec.Y.vertices;

  qp::QpProblem p;
  p.P = Mat::Zero(n, n);
  p.c = Vec::Zero(n);
  if (spec.mode == SizeMode::Tracking) {
    Mat H = Mat::Zero(M * nu, M * nu);
    Mat CG_sum = Mat::Zero(m.ny(), M * nu);
    for (int t = 1; t <= M; ++t) {
      const Mat CG = m.C * gamma[t];
      H.noalias() += CG.transpose() * CG;
      CG_sum += CG;
    }
    for (int j = 0; j < nvy; ++j) {
      p.P.block(L.traj_offset(j), L.traj_offset(j), M * nu, M * nu) = 2.0 * H;
      p.c.segment(L.traj_offset(j), M * nu) = -2.0 * CG_sum.transpose() * Yv.col(j);
      p.offset += M * Yv.col(j).squaredNorm();
    }
  } else {
    p.P.diagonal().setConstant(qp::kLpRegularization);
    p.c.head(nf).setOnes();
  }

  const int rows = nvy * M * nf + nvy * M * mu + np * nv * nf + nv * my + nv * mu + static_cast<int>(T.E.rows());
  p.G = Mat::Zero(rows, n);
  p.h = Vec::Zero(rows);
  int r = 0;
  for (int j = 0; j < nvy; ++j)
    for (int t = 0; t < M; ++t) {
      p.G.block(r, L.traj_offset(j), nf, M * nu) = T.F * gamma[t];
      p.G.block(r, 0, nf, nf) = -Mat::Identity(nf, nf);
      r += nf;
    }
  for (int j = 0; j < nvy; ++j)
    for (int t = 0; t < M; ++t) {
      p.G.block(r, L.traj_offset(j) + t * nu, mu, nu) = spec.U.H;
      p.h.segment(r, mu) = spec.U.h;
      r += mu;
    }
  const Vec kew = w.kappa * w.eps_w;
  for (int i = 0; i < np; ++i) {
    const Mat FK = T.F * m.K[i];
    const Vec dist = FK * w.c_w + FK.cwiseAbs() * kew;
    const Mat FA = T.F * m.A[i], FB = T.F * m.B[i];
    for (int k = 0; k < nv; ++k) {
      p.G.block(r, 0, nf, nf) = FA * T.vertex_maps[k] - Mat::Identity(nf, nf);
      p.G.block(r, L.u_offset(k), nf, nu) = FB;
      p.h.segment(r, nf) = -dist;
      r += nf;
    }
  }
  const Vec ydist = spec.Y.h - spec.Y.H * w.c_w - spec.Y.H.cwiseAbs() * kew;
  const Mat HC = spec.Y.H * m.C;
  for (int k = 0; k < nv; ++k) {
    p.G.block(r, 0, my, nf) = HC * T.vertex_maps[k];
    p.h.segment(r, my) = ydist;
    r += my;
  }
  for (int k = 0; k < nv; ++k) {
    p.G.block(r, L.u_offset(k), mu, nu) = spec.U.H;
    p.h.segment(r, mu) = spec.U.h;
    r += mu;
  }
  p.G.block(r, 0, T.E.rows(), nf) = T.E;
  r += static_cast<int>(T.E.rows());
  return p;
}

RciSolution solve_r(const QlpvModel& m, const DisturbanceSet& w, const RciSpec& spec,
                    const qp::QpSettings& settings) {
  const auto problem = assemble_r_qp(m, w, spec);
  const RciLayout L = layout_of(m, spec);
  RciSolution sol;
  sol.qp = qp::solve(problem, settings);
  sol.status = sol.qp.status;
  if (!sol.feasible()) {
    sol.r_value = kInf;
    return sol;
  }
  const Vec& z = sol.qp.x;
  sol.q = z.head(L.nf);
  sol.vertex_inputs.resize(L.nu, L.nv);
  for (int k = 0; k < L.nv; ++k) sol.vertex_inputs.col(k) = z.segment(L.u_offset(k), L.nu);
  const Mat Abar = m.A_nominal(), Bbar = m.B_nominal();
  for (int j = 0; j < L.nvy; ++j) {
    Mat U = Eigen::Map<const Mat>(z.data() + L.traj_offset(j), L.nu, L.M);
    Mat X(m.nx(), L.M + 1);
    X.col(0).setZero();
    for (int t = 0; t < L.M; ++t) X.col(t + 1) = Abar * X.col(t) + Bbar * U.col(t);
    sol.x_traj.push_back(std::move(X));
    sol.u_traj.push_back(std::move(U));
  }
  sol.r_value = sol.qp.objective;
  return sol;
}

RGradient r_gradient(const QlpvModel& m, const DisturbanceSet& w, const RciSpec& spec, const RciSolution& sol) {
  if (!sol.feasible()) throw ConfigError("r_gradient needs an optimal size solution");
  const auto problem = assemble_r_qp(m, w, spec);
  const double rcond = qp::kkt_rcond(problem, sol.qp);
  if (!(rcond >= 1e-14))
    throw NumericalError("size QP KKT system is singular (rcond " + std::to_string(rcond) + ")");
  const auto& T = spec.tmpl;
  const RciLayout L = layout_of(m, spec);
  const int nx = m.nx(), nf = L.nf, nv = L.nv, nvy = L.nvy, M = L.M, np = m.np();
  const int mu = static_cast<int>(spec.U.H.rows()), my = static_cast<int>(spec.Y.H.rows());
  const Vec& lam = sol.qp.z;
  const Mat& Yv = *spec.Y.vertices;
  const Mat Abar = m.A_nominal();
  const bool tracking = spec.mode == SizeMode::Tracking;

  RGradient g;
  g.dA.assign(np, Mat::Zero(nx, nx));
  g.dB.assign(np, Mat::Zero(nx, m.nu()));
  g.dK.assign(np, Mat::Zero(nx, m.ny()));
  g.dC = Mat::Zero(m.ny(), nx);
  g.dc_w = Vec::Zero(m.ny());
  g.deps_w = Vec::Zero(m.ny());

  // nominal trajectories: cost and facet rows, adjoint sweep
  Mat dAbar = Mat::Zero(nx, nx), dBbar = Mat::Zero(nx, m.nu());
  for (int j = 0; j < nvy; ++j) {
    const Mat& X = sol.x_traj[j];
    const Mat& U = sol.u_traj[j];
    Vec adj = Vec::Zero(nx);
    for (int t = M; t >= 0; --t) {
      Vec ell = Vec::Zero(nx);
      if (t >= 1 && tracking) {
        const Vec e = Yv.col(j) - m.C * X.col(t);
        ell -= 2.0 * m.C.transpose() * e;
        g.dC -= 2.0 * e * X.col(t).transpose();
      }
      if (t <= M - 1) ell += T.F.transpose() * lam.segment((j * M + t) * nf, nf);
      if (t < M) {
        dAbar += adj * X.col(t).transpose();
        dBbar += adj * U.col(t).transpose();
        adj = ell + Abar.transpose() * adj;
      } else {
        adj = ell;
      }
    }
  }
  for (int i = 0; i < np; ++i) {
    g.dA[i] += dAbar / np;
    g.dB[i] += dBbar / np;
  }

  int r = nvy * M * nf + nvy * M * mu;
  const Vec kew = w.kappa * w.eps_w;
  for (int i = 0; i < np; ++i) {
    const Mat FK = T.F * m.K[i];
    const Mat sgn = FK.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
    for (int k = 0; k < nv; ++k) {
      const Vec nu_ik = lam.segment(r, nf);
      r += nf;
      const Vec xk = T.vertex_maps[k] * sol.q;
      const Vec Ftn = T.F.transpose() * nu_ik;
      g.dA[i] += Ftn * xk.transpose();
      g.dB[i] += Ftn * sol.vertex_inputs.col(k).transpose();
      g.dK[i] += Ftn * w.c_w.transpose();
      const Mat D = (nu_ik * kew.transpose()).cwiseProduct(sgn);
      g.dK[i] += T.F.transpose() * D;
      g.dc_w += FK.transpose() * nu_ik;
      g.deps_w += w.kappa * FK.cwiseAbs().transpose() * nu_ik;
    }
  }
  for (int k = 0; k < nv; ++k) {
    const Vec eta = lam.segment(r, my);
    r += my;
    const Vec xk = T.vertex_maps[k] * sol.q;
    g.dC += spec.Y.H.transpose() * eta * xk.transpose();
    g.dc_w += spec.Y.H.transpose() * eta;
    g.deps_w += w.kappa * spec.Y.H.cwiseAbs().transpose() * eta;
  }
  return g;
}

double size_l1(const Vec& q) { return q.cwiseAbs().sum(); }

namespace {

// Substitutes a fixed q into the size QP. Rows left without variables are
// dropped after checking them; nullopt when one of them fails.
std::optional<qp::QpProblem> pin_q(const qp::QpProblem& p, const Vec& q) {
  const int nf = static_cast<int>(q.size());
  const int n = p.n() - nf;
  const Vec h = p.h - p.G.leftCols(nf) * q;
  std::vector<int> keep;
  for (int r = 0; r < p.m(); ++r) {
    if (p.G.row(r).tail(n).cwiseAbs().maxCoeff() > 0.0) {
      keep.push_back(r);
    } else if (h(r) < -1e-9) {
      return std::nullopt;
    }
  }
  qp::QpProblem out;
  out.P = p.P.bottomRightCorner(n, n);
  out.c = p.c.tail(n) + p.P.bottomLeftCorner(n, nf) * q;
  out.offset = p.offset + p.c.head(nf).dot(q) + 0.5 * q.dot(p.P.topLeftCorner(nf, nf) * q);
  out.A_eq.resize(0, n);
  out.b_eq.resize(0);
  out.G.resize(static_cast<int>(keep.size()), n);
  out.h.resize(static_cast<int>(keep.size()));
  for (size_t i = 0; i < keep.size(); ++i) {
    out.G.row(i) = p.G.row(keep[i]).tail(n);
    out.h(i) = h(keep[i]);
  }
  return out;
}

}  // namespace

double tracking_distance(const QlpvModel& m, const RciSpec& spec, const Vec& q) {
  DisturbanceSet w{Vec::Zero(m.ny()), Vec::Zero(m.ny()), 1.1};
  auto p = assemble_r_qp(m, w, spec);
  const RciLayout L = layout_of(m, spec);
  const int rows = L.nvy * L.M * (L.nf + static_cast<int>(spec.U.H.rows()));
  p.G = p.G.topRows(rows).eval();
  p.h = p.h.head(rows).eval();
  const auto pinned = pin_q(p, q);
  if (!pinned) return kInf;
  const auto sol = qp::solve(*pinned);
  return sol.optimal() ? sol.objective : kInf;
}

namespace {

/// Penalized initial-set program in (Sigma, u_k, U^j).
struct InitialProgram {
  Mat A, B, C;
  DisturbanceSet w;
  ConstraintPolyhedron U, Y;
  int M = 0;
  Mat Ft;                 // [I; -I]
  std::vector<Vec> signs; // vertices of {Ft x <= 1}
  double rho = 1.0;

  int nx() const { return static_cast<int>(A.rows()); }
  int nu() const { return static_cast<int>(B.cols()); }
  int nvy() const { return static_cast<int>(Y.vertices->cols()); }
  int nv() const { return static_cast<int>(signs.size()); }
  int size() const { return nx() * nx() + nv() * nu() + nvy() * M * nu(); }

  // Returns (objective, max constraint violation).
  std::pair<double, double> eval(const Vec& th, Vec* grad) const {
    const int n = nx(), nu_ = nu(), nv_ = nv();
    const Eigen::Map<const Mat> Sig(th.data(), n, n);
    const Eigen::Map<const Mat> uk(th.data() + n * n, nu_, nv_);
    const double det = Sig.determinant();
    if (!(std::abs(det) >= 1e-8)) return {kInf, kInf};
    const Mat S = Sig.inverse();
    Mat gSig = Mat::Zero(n, n), gS = Mat::Zero(n, n), guk = Mat::Zero(nu_, nv_);
    Vec gU = Vec::Zero(nvy() * M * nu_);
    double f = 0.0, viol = 0.0;
    auto penalize = [&](const Vec& r) -> Vec {
      const Vec pos = r.cwiseMax(0.0);
      if (pos.size()) viol = std::max(viol, pos.maxCoeff());
      f += rho * pos.squaredNorm();
      return 2.0 * rho * pos;
    };
    const Vec kew = w.kappa * w.eps_w;
    const Vec ydist = Y.H * w.c_w + Y.H.cwiseAbs() * kew - Y.h;
    for (int k = 0; k < nv_; ++k) {
      const Vec wk = A * (Sig * signs[k]) + B * uk.col(k);
      const Vec lam = penalize(Ft * (S * wk) - Vec::Ones(Ft.rows()));
      gS += Ft.transpose() * lam * wk.transpose();
      const Vec phi = S.transpose() * Ft.transpose() * lam;
      gSig += A.transpose() * phi * signs[k].transpose();
      guk.col(k) += B.transpose() * phi;
      const Vec ly = penalize(Y.H * (C * (Sig * signs[k])) + ydist);
      gSig += C.transpose() * Y.H.transpose() * ly * signs[k].transpose();
      const Vec lu = penalize(U.H * uk.col(k) - U.h);
      guk.col(k) += U.H.transpose() * lu;
    }
    const Mat& Yv = *Y.vertices;
    for (int j = 0; j < nvy(); ++j) {
      const int off = n * n + nv_ * nu_ + j * M * nu_;
      const Eigen::Map<const Mat> Uj(th.data() + off, nu_, M);
      Mat X(n, M + 1);
      X.col(0).setZero();
      for (int t = 0; t < M; ++t) X.col(t + 1) = A * X.col(t) + B * Uj.col(t);
      Vec adj = Vec::Zero(n);
      for (int t = M; t >= 0; --t) {
        Vec ell = Vec::Zero(n);
        if (t >= 1) {
          const Vec e = Yv.col(j) - C * X.col(t);
          f += e.squaredNorm();
          ell -= 2.0 * C.transpose() * e;
        }
        if (t <= M - 1) {
          const Vec lam = penalize(Ft * (S * X.col(t)) - Vec::Ones(Ft.rows()));
          gS += Ft.transpose() * lam * X.col(t).transpose();
          ell += S.transpose() * Ft.transpose() * lam;
          const Vec lu = penalize(U.H * Uj.col(t) - U.h);
          gU.segment(j * M * nu_ + t * nu_, nu_) += U.H.transpose() * lu;
        }
        if (t < M) {
          gU.segment(j * M * nu_ + t * nu_, nu_) += B.transpose() * adj;
          adj = ell + A.transpose() * adj;
        } else {
          adj = ell;
        }
      }
    }
    if (grad) {
      gSig -= S.transpose() * gS * S.transpose();
      grad->resize(th.size());
      grad->head(n * n) = Eigen::Map<const Vec>(gSig.data(), n * n);
      grad->segment(n * n, nu_ * nv_) = Eigen::Map<const Vec>(guk.data(), nu_ * nv_);
      grad->tail(gU.size()) = gU;
    }
    return {f, viol};
  }
};

}  // namespace

InitialRci solve_initial_rci(const Mat& A, const Mat& B, const Mat& C, const DisturbanceSet& w,
                             const ConstraintPolyhedron& U, const ConstraintPolyhedron& Y, int M,
                             const InitialRciSettings& settings) {
  const int n = static_cast<int>(A.rows());
  if (!Y.vertices) throw ConfigError("output constraint set needs vertices");
  InitialProgram prog;
  prog.A = A;
  prog.B = B;
  prog.C = C;
  prog.w = w;
  prog.U = U;
  prog.Y = Y;
  prog.M = M;
  const auto unit = make_box_template(n, Mat::Identity(n, n));
  prog.Ft = unit.F;
  for (const Mat& V : unit.vertex_maps) prog.signs.push_back(V * Vec::Ones(2 * n));

  // Largest sigma * I meeting the output rows on every vertex, halved.
  const Vec kew = w.kappa * w.eps_w;
  const Vec slack = Y.h - Y.H * w.c_w - Y.H.cwiseAbs() * kew;
  if (slack.minCoeff() <= 0.0)
    throw InfeasibleError("initial set: output constraints leave no room for the disturbance set (min slack " +
                          std::to_string(slack.minCoeff()) + ")");
  const Mat HC = (Y.H * C).cwiseAbs();
  double s = kInf;
  for (int r = 0; r < HC.rows(); ++r) {
    const double row = HC.row(r).sum();
    if (row > 0.0) s = std::min(s, slack(r) / row);
  }
  if (!std::isfinite(s)) s = 1.0;
  s *= 0.5;

  Vec th = Vec::Zero(prog.size());
  Eigen::Map<Mat>(th.data(), n, n) = s * Mat::Identity(n, n);

  for (double rho = settings.rho_start; rho <= settings.rho_end * (1 + 1e-12); rho *= 10.0) {
    prog.rho = rho;
    auto obj = [&](const Vec& x, Vec* g) { return prog.eval(x, g).first; };
    optim::AdamSettings as;
    as.iters = settings.adam_iters;
    as.lr = settings.adam_lr;
    th = optim::adam(obj, th, as).x;
    optim::LbfgsSettings ls;
    ls.max_iter = settings.lbfgs_iters;
    th = optim::lbfgs(obj, th, ls).x;
  }

  // Exact polish: with Sigma fixed, inputs and trajectories solve a convex QP
  // with q pinned to 1. Shrink Sigma until it is feasible, gently at first
  // since the penalty optimum sits just outside the feasible boundary.
  Mat sigma = Eigen::Map<const Mat>(th.data(), n, n);
  double shrink = 1e-4;
  const QlpvModel lti = QlpvModel::lti(A, B, C);
  for (int attempt = 0; attempt < 40; ++attempt) {
    RciSpec spec;
    spec.tmpl = make_box_template(n, sigma);
    spec.U = U;
    spec.Y = Y;
    spec.M = M;
    const int nf = spec.tmpl.nf();
    auto pinned = pin_q(assemble_r_qp(lti, w, spec), Vec::Ones(nf));
    RciSolution sol;
    if (pinned) {
      // The penalty optimum tends to leave the invariance rows with no
      // interior; half the audit tolerance of slack keeps the QP well posed.
      pinned->h.array() += 0.5 * settings.feas_tol;
      sol.qp = qp::solve(*pinned);
      sol.status = sol.qp.status;
    }
    if (sol.feasible()) {
      const RciLayout L = layout_of(lti, spec);
      sol.q = Vec::Ones(nf);
      sol.qp.x = (Vec(L.size()) << sol.q, sol.qp.x).finished();
      sol.vertex_inputs.resize(L.nu, L.nv);
      for (int k = 0; k < L.nv; ++k) sol.vertex_inputs.col(k) = sol.qp.x.segment(L.u_offset(k), L.nu);
      for (int j = 0; j < L.nvy; ++j) {
        Mat Uj = Eigen::Map<const Mat>(sol.qp.x.data() + L.traj_offset(j), L.nu, L.M);
        Mat X(n, L.M + 1);
        X.col(0).setZero();
        for (int t = 0; t < L.M; ++t) X.col(t + 1) = A * X.col(t) + B * Uj.col(t);
        sol.x_traj.push_back(std::move(X));
        sol.u_traj.push_back(std::move(Uj));
      }
      sol.r_value = sol.qp.objective;
      const double viol = rci_residuals(lti, w, spec, sol.q, sol.vertex_inputs).max();
      if (viol <= settings.feas_tol) {
        InitialRci out;
        out.sigma = sigma;
        out.tmpl = spec.tmpl;
        out.vertex_inputs = sol.vertex_inputs;
        out.r_L = sol.r_value;
        out.max_violation = viol;
        out.trajectories = std::move(sol);
        return out;
      }
    }
    sigma *= 1.0 - shrink;
    shrink = std::min(0.1, 2.0 * shrink);
    if (std::abs(sigma.determinant()) < 1e-10) break;
  }
  prog.rho = 1.0;
  const double viol = prog.eval(th, nullptr).second;
  throw InfeasibleError("initial set: no certified shape found (max residual " + std::to_string(viol) + ")");
}

}  // namespace rcisysid
