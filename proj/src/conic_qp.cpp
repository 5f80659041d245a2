#include "rcisysid/conic_qp.hpp"

#include <Eigen/LU>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "rcisysid/error.hpp"

namespace rcisysid::qp {

namespace {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

double inf_norm(const Vec& v) { return v.size() == 0 ? 0.0 : v.lpNorm<Eigen::Infinity>(); }

double inf_norm(const Mat& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().rowwise().sum().maxCoeff();
}

SpMat to_sparse(const Mat& m, int rows, int cols) {
  if (m.size() == 0) return SpMat(rows, cols);
  return m.sparseView(1.0, 0.0);
}

/// Newton-system factorization for the reduced matrix P + G'WG (+ delta I),
/// bordered by A_eq when equality constraints exist.
class KktSystem {
 public:
  KktSystem(const Mat& P, const SpMat& G, const SpMat& A) : P_(P), G_(G), A_(A) {}

  void factor(const Vec& w) {
    const int n = static_cast<int>(P_.rows());
    K_ = P_;
    for (int i = 0; i < G_.outerSize(); ++i) {
      const double wi = w(i);
      for (SpMat::InnerIterator a(G_, i); a; ++a) {
        const double wa = wi * a.value();
        for (SpMat::InnerIterator b(G_, i); b; ++b) K_(a.col(), b.col()) += wa * b.value();
      }
    }
    const double scale = std::max(1.0, K_.diagonal().cwiseAbs().maxCoeff());
    delta_ = 1e-13 * scale;
    const int p = static_cast<int>(A_.rows());
    if (p == 0) {
      Kreg_ = K_;
      Kreg_.diagonal().array() += delta_;
      llt_.compute(Kreg_);
      use_llt_ = llt_.info() == Eigen::Success;
      if (!use_llt_) lu_.compute(Kreg_);
    } else {
      Kreg_.setZero(n + p, n + p);
      Kreg_.topLeftCorner(n, n) = K_;
      Kreg_.topLeftCorner(n, n).diagonal().array() += delta_;
      Mat Ad = Mat(A_);
      Kreg_.block(0, n, n, p) = Ad.transpose();
      Kreg_.block(n, 0, p, n) = Ad;
      Kreg_.bottomRightCorner(p, p).diagonal().array() = -delta_;
      use_llt_ = false;
      lu_.compute(Kreg_);
    }
  }

  /// Solves K dx + A'dy = rx, A dx = ry with two refinement sweeps.
  void solve(const Vec& rx, const Vec& ry, Vec& dx, Vec& dy) const {
    const int n = static_cast<int>(P_.rows());
    const int p = static_cast<int>(A_.rows());
    Vec rhs(n + p);
    rhs << rx, ry;
    Vec sol = raw_solve(rhs);
    for (int sweep = 0; sweep < 2; ++sweep) {
      Vec res = rhs - apply(sol);
      sol += raw_solve(res);
    }
    dx = sol.head(n);
    dy = sol.tail(p);
  }

 private:
  Vec raw_solve(const Vec& rhs) const { return use_llt_ ? Vec(llt_.solve(rhs)) : Vec(lu_.solve(rhs)); }

  Vec apply(const Vec& v) const {
    const int n = static_cast<int>(P_.rows());
    const int p = static_cast<int>(A_.rows());
    Vec out(n + p);
    out.head(n) = K_ * v.head(n);
    if (p > 0) {
      out.head(n) += A_.transpose() * v.tail(p);
      out.tail(p) = A_ * v.head(n);
    }
    return out;
  }

  const Mat& P_;
  const SpMat& G_;
  const SpMat& A_;
  Mat K_;
  Mat Kreg_;
  double delta_ = 0.0;
  bool use_llt_ = false;
  Eigen::LLT<Mat> llt_;
  Eigen::PartialPivLU<Mat> lu_;
};

double max_step(const Vec& v, const Vec& dv) {
  double alpha = std::numeric_limits<double>::infinity();
  for (int i = 0; i < v.size(); ++i) {
    if (dv(i) < 0.0) alpha = std::min(alpha, -v(i) / dv(i));
  }
  return alpha;
}

QpSolution solve_equality_only(const QpProblem& pr) {
  const int n = pr.n();
  const int p = pr.p();
  Mat K = Mat::Zero(n + p, n + p);
  K.topLeftCorner(n, n) = pr.P;
  if (p > 0) {
    K.block(0, n, n, p) = pr.A_eq.transpose();
    K.block(n, 0, p, n) = pr.A_eq;
  }
  Vec rhs(n + p);
  rhs << -pr.c, pr.b_eq;
  Eigen::FullPivLU<Mat> lu(K);
  Vec sol = lu.solve(rhs);
  QpSolution out;
  out.x = sol.head(n);
  out.y = sol.tail(p);
  out.z = Vec::Zero(0);
  out.s = Vec::Zero(0);
  out.iterations = 1;
  const Vec rd = pr.P * out.x + pr.c + (p > 0 ? Vec(pr.A_eq.transpose() * out.y) : Vec::Zero(n));
  const double pres = p > 0 ? inf_norm(Vec(pr.A_eq * out.x - pr.b_eq)) / (1.0 + inf_norm(pr.b_eq)) : 0.0;
  const double dres = inf_norm(rd) / (1.0 + inf_norm(pr.c));
  out.primal_residual = pres;
  out.dual_residual = dres;
  out.objective = 0.5 * out.x.dot(pr.P * out.x) + pr.c.dot(out.x) + pr.offset;
  if (pres > 1e-8) {
    out.status = QpStatus::Infeasible;
  } else if (dres > 1e-8) {
    out.status = QpStatus::DualInfeasible;
  } else {
    out.status = QpStatus::Optimal;
  }
  return out;
}

QpSolution phase1_check(const QpProblem& pr, QpSolution failed, const QpSettings& settings) {
  // minimize t  s.t.  G x - t <= h,  A x = b,  t >= -1
  const int n = pr.n();
  const int m = pr.m();
  Mat G1 = Mat::Zero(m + 1, n + 1);
  G1.topLeftCorner(m, n) = pr.G;
  G1.block(0, n, m, 1).setConstant(-1.0);
  G1(m, n) = -1.0;
  Vec h1(m + 1);
  h1 << pr.h, 1.0;
  Mat A1;
  if (pr.p() > 0) {
    A1 = Mat::Zero(pr.p(), n + 1);
    A1.leftCols(n) = pr.A_eq;
  }
  Vec c1 = Vec::Zero(n + 1);
  c1(n) = 1.0;
  QpSettings inner = settings;
  inner.phase1_on_failure = false;
  inner.max_iter = std::max(settings.max_iter, 100);
  QpSolution ph = solve_lp(c1, G1, h1, A1, pr.b_eq, inner);
  const double threshold = 1e-6 * (1.0 + inf_norm(pr.h));
  if (ph.status == QpStatus::Infeasible ||
      (ph.status == QpStatus::Optimal && ph.x(n) > threshold)) {
    failed.status = QpStatus::Infeasible;
  }
  return failed;
}

}  // namespace

std::string to_string(QpStatus status) {
  switch (status) {
    case QpStatus::Optimal:
      return "Optimal";
    case QpStatus::Infeasible:
      return "Infeasible";
    case QpStatus::DualInfeasible:
      return "DualInfeasible";
    case QpStatus::MaxIter:
      return "MaxIter";
  }
  return "Unknown";
}

void QpProblem::validate() const {
  const int nv = n();
  auto fail = [](const std::string& what) { throw ConfigError("QpProblem: " + what); };
  if (P.rows() != nv || P.cols() != nv) fail("P must be n x n");
  if (m() > 0 && (G.rows() != m() || G.cols() != nv)) fail("G must be m x n");
  if (m() == 0 && G.size() != 0 && G.cols() != nv) fail("G must be m x n");
  if (p() > 0 && (A_eq.rows() != p() || A_eq.cols() != nv)) fail("A_eq must be p x n");
  if (p() == 0 && A_eq.size() != 0 && A_eq.cols() != nv) fail("A_eq must be p x n");
  if (!P.allFinite() || !c.allFinite() || !h.allFinite() || !b_eq.allFinite() ||
      (G.size() > 0 && !G.allFinite()) || (A_eq.size() > 0 && !A_eq.allFinite())) {
    fail("non-finite data");
  }
  const double scale = std::max(1.0, inf_norm(P));
  if (nv > 0 && (P - P.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) fail("P not symmetric");
  if (nv > 0) {
    Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (P + P.transpose()), Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -1e-9 * scale) fail("P not positive semidefinite");
  }
}

QpSolution solve(const QpProblem& pr, const QpSettings& settings) {
  pr.validate();
  const int n = pr.n();
  const int m = pr.m();
  const int p = pr.p();
  if (m == 0) return solve_equality_only(pr);

  const SpMat G = to_sparse(pr.G, m, n);
  const SpMat A = to_sparse(pr.A_eq, p, n);
  const double h_scale = 1.0 + inf_norm(pr.h);
  const double b_scale = 1.0 + inf_norm(pr.b_eq);
  const double c_scale = 1.0 + inf_norm(pr.c);

  KktSystem kkt(pr.P, G, A);
  QpSolution sol;

  // Initial point: least-squares fit of s = h - Gx with unit scaling, then
  // shift slacks and multipliers into the positive orthant.
  Vec x(n), y(p), s(m), z(m);
  {
    kkt.factor(Vec::Ones(m));
    kkt.solve(-pr.c + G.transpose() * pr.h, pr.b_eq, x, y);
    z = G * x - pr.h;
    s = -z;
    const double ap = -s.minCoeff();
    if (ap >= -1e-8) s.array() += 1.0 + ap;
    const double ad = -z.minCoeff();
    if (ad >= -1e-8) z.array() += 1.0 + ad;
  }

  int stall = 0;
  bool converged = false;
  int iter = 0;
  for (; iter <= settings.max_iter; ++iter) {
    const Vec Px = pr.P * x;
    Vec rd = Px + pr.c + G.transpose() * z;
    if (p > 0) rd += A.transpose() * y;
    const Vec rin = G * x + s - pr.h;
    const Vec req = p > 0 ? Vec(A * x - pr.b_eq) : Vec::Zero(0);
    const double mu = s.dot(z) / m;
    const double pobj = 0.5 * x.dot(Px) + pr.c.dot(x);
    const Vec Gx = G * x;
    const Vec Gz = G.transpose() * z;
    const double pres_in = inf_norm(rin) / std::max({h_scale, inf_norm(Gx), inf_norm(s)});
    const double pres_eq = p > 0 ? inf_norm(req) / std::max(b_scale, inf_norm(Vec(A * x))) : 0.0;
    const double pres = std::max(pres_in, pres_eq);
    const double dres = inf_norm(rd) / std::max({c_scale, inf_norm(Px), inf_norm(Gz)});
    const double gap = s.dot(z) / (1.0 + std::abs(pobj + pr.offset));
    sol.primal_residual = pres;
    sol.dual_residual = dres;
    sol.gap = gap;
    sol.mu_final = mu;
    if (!x.allFinite() || !z.allFinite() || !s.allFinite()) break;
    if (pres <= settings.tol && dres <= settings.tol && gap <= settings.tol) {
      converged = true;
      break;
    }

    // Farkas certificate for the primal: z >= 0, G'z + A'y = 0, h'z + b'y < 0.
    {
      const double t = -(pr.h.dot(z) + (p > 0 ? pr.b_eq.dot(y) : 0.0));
      if (t > 0.0) {
        Vec r = G.transpose() * z;
        if (p > 0) r += A.transpose() * y;
        if (inf_norm(r) <= 1e-9 * t && t > 1e3) {
          sol.status = QpStatus::Infeasible;
          sol.x = x;
          sol.y = y;
          sol.z = z;
          sol.s = s;
          sol.iterations = iter;
          sol.objective = std::numeric_limits<double>::infinity();
          return sol;
        }
      }
    }
    // Recession direction for the primal: Px = 0, Ax = 0, Gx <= 0, c'x < 0.
    {
      const double t = -pr.c.dot(x);
      if (t > 0.0) {
        const Vec Gx = G * x;
        const double ax = p > 0 ? inf_norm(Vec(A * x)) : 0.0;
        if (inf_norm(Px) <= 1e-7 * t && ax <= 1e-7 * t && Gx.maxCoeff() <= 1e-7 * t && t > 1e6 * h_scale) {
          sol.status = QpStatus::DualInfeasible;
          sol.x = x;
          sol.y = y;
          sol.z = z;
          sol.s = s;
          sol.iterations = iter;
          sol.objective = -std::numeric_limits<double>::infinity();
          return sol;
        }
      }
    }
    if (iter == settings.max_iter) break;

    const Vec w = z.cwiseQuotient(s);
    kkt.factor(w);
    auto newton = [&](const Vec& rc, Vec& dx, Vec& dy, Vec& dz, Vec& ds) {
      const Vec v = (-rc + z.cwiseProduct(rin)).cwiseQuotient(s);
      const Vec rx = -rd - G.transpose() * v;
      const Vec ry = p > 0 ? Vec(-req) : Vec::Zero(0);
      kkt.solve(rx, ry, dx, dy);
      const Vec Gdx = G * dx;
      dz = v + w.cwiseProduct(Gdx);
      ds = -rin - Gdx;
    };

    Vec dx, dy, dz, ds;
    const Vec sz = s.cwiseProduct(z);
    newton(sz, dx, dy, dz, ds);
    const double a_aff = std::min(1.0, std::min(max_step(s, ds), max_step(z, dz)));
    const double mu_aff = (s + a_aff * ds).dot(z + a_aff * dz) / m;
    const double sigma = std::pow(std::max(0.0, mu_aff) / mu, 3);
    const Vec rc = sz + ds.cwiseProduct(dz) - Vec::Constant(m, sigma * mu);
    newton(rc, dx, dy, dz, ds);
    const double alpha = std::min(1.0, 0.99 * std::min(max_step(s, ds), max_step(z, dz)));
    x += alpha * dx;
    if (p > 0) y += alpha * dy;
    z += alpha * dz;
    s += alpha * ds;
    stall = alpha < 1e-10 ? stall + 1 : 0;
    if (stall >= 5) break;
  }

  sol.x = x;
  sol.y = y;
  sol.z = z;
  sol.s = s;
  sol.iterations = iter;
  sol.objective = 0.5 * x.dot(pr.P * x) + pr.c.dot(x) + pr.offset;
  if (converged) {
    sol.status = QpStatus::Optimal;
    return sol;
  }
  sol.status = QpStatus::MaxIter;
  if (settings.phase1_on_failure) return phase1_check(pr, sol, settings);
  return sol;
}

QpSolution solve_lp(const Vec& c, const Mat& G, const Vec& h, const Mat& A_eq, const Vec& b_eq,
                    const QpSettings& settings) {
  QpProblem pr;
  const int n = static_cast<int>(c.size());
  pr.P = kLpRegularization * Mat::Identity(n, n);
  pr.c = c;
  pr.G = G;
  pr.h = h;
  pr.A_eq = A_eq;
  pr.b_eq = b_eq;
  QpSolution sol = solve(pr, settings);
  if (sol.status == QpStatus::Optimal || sol.status == QpStatus::MaxIter) {
    const double scale = 1.0 + inf_norm(h) + inf_norm(b_eq);
    if (inf_norm(sol.x) > 1e6 * scale) sol.status = QpStatus::DualInfeasible;
  }
  if (sol.status == QpStatus::Optimal) sol.objective = c.dot(sol.x);
  return sol;
}

double QpGradient::directional(const QpProblem& d) const {
  double out = 0.0;
  if (d.P.size() > 0) out += (dP.array() * d.P.array()).sum();
  if (d.c.size() > 0) out += dc.dot(d.c);
  if (d.A_eq.size() > 0) out += (dA_eq.array() * d.A_eq.array()).sum();
  if (d.b_eq.size() > 0) out += db_eq.dot(d.b_eq);
  if (d.G.size() > 0) out += (dG.array() * d.G.array()).sum();
  if (d.h.size() > 0) out += dh.dot(d.h);
  return out;
}

namespace {

/// Relaxed KKT matrix with inactive constraints condensed and active ones
/// kept explicit:  [H  G_a'  A'; G_a  -S_a/Z_a  0; A  0  0].
struct ActiveKkt {
  std::vector<int> active;
  std::vector<int> inactive;
  Mat M;
};

ActiveKkt build_active_kkt(const QpProblem& pr, const QpSolution& sol) {
  const int n = pr.n();
  const int m = pr.m();
  const int p = pr.p();
  ActiveKkt out;
  for (int i = 0; i < m; ++i) {
    if (sol.z(i) >= sol.s(i)) {
      out.active.push_back(i);
    } else {
      out.inactive.push_back(i);
    }
  }
  const int na = static_cast<int>(out.active.size());
  Mat H = pr.P;
  for (int i : out.inactive) {
    const double w = sol.z(i) / sol.s(i);
    H.noalias() += w * pr.G.row(i).transpose() * pr.G.row(i);
  }
  out.M = Mat::Zero(n + na + p, n + na + p);
  out.M.topLeftCorner(n, n) = H;
  for (int a = 0; a < na; ++a) {
    const int i = out.active[a];
    out.M.block(n + a, 0, 1, n) = pr.G.row(i);
    out.M.block(0, n + a, n, 1) = pr.G.row(i).transpose();
    out.M(n + a, n + a) = -sol.s(i) / sol.z(i);
  }
  if (p > 0) {
    out.M.block(n + na, 0, p, n) = pr.A_eq;
    out.M.block(0, n + na, n, p) = pr.A_eq.transpose();
  }
  return out;
}

void require_optimal(const QpSolution& sol, const char* who) {
  if (!sol.optimal()) {
    throw NumericalError(std::string(who) + ": solution status is " + to_string(sol.status));
  }
}

}  // namespace

double kkt_rcond(const QpProblem& pr, const QpSolution& sol) {
  require_optimal(sol, "kkt_rcond");
  if (pr.m() == 0 && pr.p() == 0) {
    Eigen::PartialPivLU<Mat> lu(pr.P);
    return lu.rcond();
  }
  const ActiveKkt kkt = build_active_kkt(pr, sol);
  // equilibrate rows and columns before estimating the condition number
  Vec d = kkt.M.cwiseAbs().rowwise().maxCoeff();
  for (int i = 0; i < d.size(); ++i) d(i) = d(i) > 0.0 ? 1.0 / std::sqrt(d(i)) : 1.0;
  const Mat scaled = d.asDiagonal() * kkt.M * d.asDiagonal();
  Eigen::PartialPivLU<Mat> lu(scaled);
  return lu.rcond();
}

namespace {
constexpr double kSingularRcond = 1e-14;
}

QpGradient value_gradient(const QpProblem& pr, const QpSolution& sol) {
  require_optimal(sol, "value_gradient");
  const double rc = kkt_rcond(pr, sol);
  if (!(rc > kSingularRcond)) {
    std::ostringstream msg;
    msg << "value_gradient: singular KKT system, rcond estimate " << rc;
    throw NumericalError(msg.str());
  }
  QpGradient g;
  g.dP = 0.5 * sol.x * sol.x.transpose();
  g.dc = sol.x;
  g.dA_eq = pr.p() > 0 ? Mat(sol.y * sol.x.transpose()) : Mat::Zero(0, pr.n());
  g.db_eq = -sol.y;
  g.dG = pr.m() > 0 ? Mat(sol.z * sol.x.transpose()) : Mat::Zero(0, pr.n());
  g.dh = -sol.z;
  return g;
}

QpGradient solution_vjp(const QpProblem& pr, const QpSolution& sol, const Vec& x_bar) {
  require_optimal(sol, "solution_vjp");
  const int n = pr.n();
  const int m = pr.m();
  const int p = pr.p();
  const ActiveKkt kkt = build_active_kkt(pr, sol);
  const int na = static_cast<int>(kkt.active.size());
  Eigen::PartialPivLU<Mat> lu(kkt.M);
  if (!(lu.rcond() > kSingularRcond)) {
    std::ostringstream msg;
    msg << "solution_vjp: singular KKT system, rcond estimate " << lu.rcond();
    throw NumericalError(msg.str());
  }
  Vec rhs = Vec::Zero(n + na + p);
  rhs.head(n) = x_bar;
  const Vec sol_adj = lu.solve(rhs);
  const Vec xi1 = sol_adj.head(n);
  Vec xi2 = Vec::Zero(m);
  for (int a = 0; a < na; ++a) xi2(kkt.active[a]) = sol_adj(n + a);
  for (int i : kkt.inactive) xi2(i) = sol.z(i) / sol.s(i) * pr.G.row(i).dot(xi1);
  const Vec xi4 = sol_adj.tail(p);

  QpGradient g;
  g.dP = -0.5 * (xi1 * sol.x.transpose() + sol.x * xi1.transpose());
  g.dc = -xi1;
  g.dG = m > 0 ? Mat(-(sol.z * xi1.transpose() + xi2 * sol.x.transpose())) : Mat::Zero(0, n);
  g.dh = xi2;
  g.dA_eq = p > 0 ? Mat(-(sol.y * xi1.transpose() + xi4 * sol.x.transpose())) : Mat::Zero(0, n);
  g.db_eq = xi4;
  return g;
}

}  // namespace rcisysid::qp
