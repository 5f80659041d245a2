#include "rcisysid/reduce.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <thread>

#include "rcisysid/conic_qp.hpp"
#include "rcisysid/error.hpp"

namespace rcisysid {

namespace {

constexpr double kMinBias = 1e-6;

double binomial(int n, int k) {
  double c = 1.0;
  for (int i = 1; i <= k; ++i) c = c * (n - k + i) / i;
  return c;
}

// Next k-subset of 0..n-1 in lexicographic order; false after the last one.
bool next_combination(std::vector<int>& idx, int n) {
  const int k = static_cast<int>(idx.size());
  int i = k - 1;
  while (i >= 0 && idx[i] == n - k + i) --i;
  if (i < 0) return false;
  ++idx[i];
  for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
  return true;
}

// Diverging candidates score +inf instead of aborting the search.
double prediction_mse_of(const QlpvModel& m, const Dataset& data) {
  try {
    const Mat e = data.y - simulate(m, data, SimMode::Prediction).y_hat;
    return e.squaredNorm() / data.size();
  } catch (const NumericalError&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace

QlpvModel lump_constant_branches(const QlpvModel& m, double threshold) {
  m.validate();
  const int np = m.np();
  std::vector<int> keep, lump;
  for (int i = 0; i + 1 < np; ++i) (m.net.branches[i].is_constant(threshold) ? lump : keep).push_back(i);
  if (lump.empty()) return m;

  double beta = 1.0;
  Mat A = m.A.back(), B = m.B.back(), K = m.K.back();
  for (int i : lump) {
    const double e = std::exp(m.net.branches[i].b_out);
    beta += e;
    A += e * m.A[i];
    B += e * m.B[i];
    K += e * m.K[i];
  }
  QlpvModel out = m;
  out.A.clear();
  out.B.clear();
  out.K.clear();
  out.net.branches.clear();
  for (int i : keep) {
    out.A.push_back(m.A[i]);
    out.B.push_back(m.B[i]);
    out.K.push_back(m.K[i]);
    BranchNet b = m.net.branches[i];
    b.b_out -= std::log(beta);
    out.net.branches.push_back(b);
  }
  out.A.push_back(A / beta);
  out.B.push_back(B / beta);
  out.K.push_back(K / beta);
  out.net.n_p = static_cast<int>(keep.size()) + 1;
  return out;
}

Mat scheduling_factors(const QlpvModel& m, const Dataset& data) {
  const Trajectory tr = simulate(m, data, SimMode::Prediction);
  const int nb = m.np() - 1;
  Mat f(nb, data.size());
  for (int t = 0; t < data.size(); ++t) {
    const Vec in = m.net.net_input(tr.x.col(t), data.u.col(t));
    for (int i = 0; i < nb; ++i) {
      const BranchNet& b = m.net.branches[i];
      f(i, t) = std::exp(b.eval(in) - b.b_out);
    }
  }
  return f;
}

QlpvModel restrict_model(const QlpvModel& m, const std::vector<int>& retained) {
  QlpvModel out = m;
  out.A.clear();
  out.B.clear();
  out.K.clear();
  out.net.branches.clear();
  for (int i : retained) {
    if (i < 0 || i >= m.np() - 1) throw ConfigError("retained index out of range");
    out.A.push_back(m.A[i]);
    out.B.push_back(m.B[i]);
    out.K.push_back(m.K[i]);
    out.net.branches.push_back(m.net.branches[i]);
  }
  out.A.push_back(m.A.back());
  out.B.push_back(m.B.back());
  out.K.push_back(m.K.back());
  out.net.n_p = static_cast<int>(retained.size()) + 1;
  return out;
}

ReductionPlan select_indices(const QlpvModel& m, const Dataset& data, int np_target) {
  m.validate();
  data.validate();
  const int nb = m.np() - 1;
  if (np_target < 1 || np_target > m.np()) throw ConfigError("target scheduling order must lie in 1..n_p");
  const int k = np_target - 1;
  const double count = binomial(nb, k);
  if (count > 1e6)
    throw ConfigError("too many candidate index sets; lump constant branches or reduce in several steps");

  std::vector<std::vector<int>> sets;
  std::vector<int> idx(k);
  for (int i = 0; i < k; ++i) idx[i] = i;
  do sets.push_back(idx);
  while (k > 0 && next_combination(idx, nb));

  // candidates are independent simulations
  std::vector<double> score(sets.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t s; (s = next++) < sets.size();) score[s] = prediction_mse_of(restrict_model(m, sets[s]), data);
  };
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const size_t n_threads = std::min<size_t>(hw, sets.size());
  std::vector<std::thread> pool;
  for (size_t i = 1; i < n_threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  size_t best = 0;
  for (size_t s = 1; s < sets.size(); ++s)
    if (score[s] < score[best]) best = s;  // strict: earlier sets win ties

  ReductionPlan plan;
  plan.retained = sets[best];
  plan.np_reduced = np_target;
  plan.mse = score[best];
  plan.candidates = static_cast<int>(sets.size());
  plan.factors = scheduling_factors(m, data);
  return plan;
}

ReducedMatrices reduce_matrices(const ReductionPlan& plan, const QlpvModel& m, const TemplatePolytope& tmpl,
                                const Vec& q, const Mat& vertex_inputs, int refine_iters) {
  m.validate();
  const int nx = m.nx(), nu = m.nu(), np = m.np();
  const int nr = plan.np_reduced;
  const int N = static_cast<int>(plan.factors.cols());
  if (plan.factors.rows() != np - 1 || static_cast<int>(plan.retained.size()) != nr - 1)
    throw ConfigError("reduction plan does not match the model");
  const bool with_ci = q.size() > 0;
  if (with_ci && (tmpl.nx() != nx || q.size() != tmpl.nf() || vertex_inputs.rows() != nu ||
                  vertex_inputs.cols() != tmpl.nv()))
    throw ConfigError("template, q or vertex inputs do not match the model");

  const int ns = nx * (nx + nu);  // entries of one [A B], column-major
  const int nvar = (nr - 1) + nr * ns;
  auto s_off = [&](int k) { return (nr - 1) + k * ns; };

  // factors of the reduced branches, terminal fixed at 1
  Mat fr(nr, N);
  for (int k = 0; k + 1 < nr; ++k) fr.row(k) = plan.factors.row(plan.retained[k]);
  fr.row(nr - 1).setOnes();
  Vec bias(np);
  for (int i = 0; i + 1 < np; ++i) bias(i) = std::exp(m.net.branches[i].b_out);
  bias(np - 1) = 1.0;
  MatList S(np);
  for (int i = 0; i < np; ++i) {
    S[i].resize(nx, nx + nu);
    S[i] << m.A[i], m.B[i];
  }

  MatList Mt(N);
  for (int t = 0; t < N; ++t) {
    double den = 0.0;
    Mt[t] = Mat::Zero(nx, nx + nu);
    for (int i = 0; i < np; ++i) {
      const double w = (i + 1 < np ? plan.factors(i, t) : 1.0) * bias(i);
      den += w;
      Mt[t] += w * S[i];
    }
    Mt[t] /= den;
  }

  // F S_k [V_j q; u_j] <= b_k q, and b_k >= kMinBias
  const int nf = with_ci ? tmpl.nf() : 0, nv = with_ci ? tmpl.nv() : 0;
  Mat G = Mat::Zero(nr * nv * nf + (nr - 1), nvar);
  Vec h = Vec::Zero(G.rows());
  int r = 0;
  for (int k = 0; k < nr; ++k)
    for (int j = 0; j < nv; ++j) {
      Vec z(nx + nu);
      z << tmpl.vertex_maps[j] * q, vertex_inputs.col(j);
      for (int f = 0; f < nf; ++f, ++r) {
        for (int b = 0; b < nx + nu; ++b)
          for (int a = 0; a < nx; ++a) G(r, s_off(k) + a + b * nx) = tmpl.F(f, a) * z(b);
        if (k + 1 < nr)
          G(r, k) = -q(f);
        else
          h(r) = q(f);
      }
    }
  for (int k = 0; k + 1 < nr; ++k, ++r) {
    G(r, k) = -1.0;
    h(r) = -kMinBias;
  }

  // residual per t and entry: sum_j f_jt b_j M_t - sum_k f_kt S_k, linear in
  // the variables plus a constant (terminal b = 1); weights wt scale each t
  auto solve_weighted = [&](const Vec& wt) {
    Mat DtD = Mat::Zero(nvar, nvar);
    Vec Dtd = Vec::Zero(nvar);
    double d0sq = 0.0;
    Vec row(nvar);
    for (int t = 0; t < N; ++t) {
      const double sw = std::sqrt(wt(t));
      for (int e = 0; e < ns; ++e) {
        const double me = sw * Mt[t].data()[e];
        row.setZero();
        for (int k = 0; k + 1 < nr; ++k) row(k) = fr(k, t) * me;
        for (int k = 0; k < nr; ++k) row(s_off(k) + e) = -sw * fr(k, t);
        DtD.selfadjointView<Eigen::Lower>().rankUpdate(row);
        Dtd += me * row;
        d0sq += me * me;
      }
    }
    qp::QpProblem p;
    p.P = (2.0 / N) * Mat(DtD.selfadjointView<Eigen::Lower>());
    p.c = (2.0 / N) * Dtd;
    p.offset = d0sq / N;
    p.A_eq = Mat::Zero(0, nvar);
    p.b_eq = Vec::Zero(0);
    p.G = G;
    p.h = h;
    const qp::QpSolution sol = qp::solve(p, qp::QpSettings{1e-9, 200, true});
    if (!sol.optimal()) throw NumericalError("reduction QP: " + qp::to_string(sol.status));
    return sol.x;
  };

  struct Candidate {
    Vec bb;
    MatList Sk;
    double upper = 0.0, frac = 0.0;
    Vec den;
  };
  auto evaluate = [&](const Vec& x) {
    Candidate c;
    c.bb.resize(nr);
    for (int k = 0; k + 1 < nr; ++k) c.bb(k) = std::max(x(k), kMinBias);
    c.bb(nr - 1) = 1.0;
    for (int k = 0; k < nr; ++k) c.Sk.push_back(Eigen::Map<const Mat>(x.data() + s_off(k), nx, nx + nu));
    c.den.resize(N);
    for (int t = 0; t < N; ++t) {
      Mat R = Mat::Zero(nx, nx + nu);
      double den_r = 0.0;
      for (int k = 0; k < nr; ++k) {
        den_r += fr(k, t) * c.bb(k);
        R -= fr(k, t) * c.Sk[k];
      }
      R += den_r * Mt[t];
      c.den(t) = den_r;
      c.upper += R.squaredNorm();
      c.frac += (R / den_r).squaredNorm();
    }
    c.upper /= N;
    c.frac /= N;
    return c;
  };

  Candidate best = evaluate(solve_weighted(Vec::Ones(N)));
  const double bound = best.upper;
  // Reweighting by the previous denominators moves toward the normalized
  // objective; only improving iterates are kept.
  Candidate cur = best;
  for (int it = 0; it < refine_iters; ++it) {
    cur = evaluate(solve_weighted(cur.den.array().square().inverse()));
    if (cur.frac < best.frac) best = cur;
  }

  ReducedMatrices out;
  out.objective = refine_iters > 0 ? best.upper : bound;
  out.fractional = best.frac;
  out.b_L = best.bb.head(nr - 1).array().log();
  for (int k = 0; k < nr; ++k) {
    const Mat rec = best.Sk[k] / best.bb(k);
    out.A.push_back(rec.leftCols(nx));
    out.B.push_back(rec.rightCols(nu));
  }
  return out;
}

QlpvModel apply_reduction(const QlpvModel& m, const ReductionPlan& plan, const ReducedMatrices& red) {
  QlpvModel out = restrict_model(m, plan.retained);
  out.A = red.A;
  out.B = red.B;
  for (int k = 0; k + 1 < plan.np_reduced; ++k) out.net.branches[k].b_out = red.b_L(k);
  return out;
}

OutputRefit refit_output_map(const QlpvModel& m, const Dataset& data, double kappa, const Mat* fixed_C) {
  m.validate();
  data.validate();
  const int nx = m.nx(), ny = m.ny(), N = data.size();
  const Mat X = simulate(m, data, SimMode::Prediction).x.leftCols(N);

  OutputRefit out;
  out.C = fixed_C ? *fixed_C : m.C;
  if (out.C.rows() != ny || out.C.cols() != nx) throw ConfigError("output map has the wrong shape");

  // channels decouple; per channel the variables are [C_i'; c; eps]
  if (!fixed_C) {
    const int n = nx + 2;
    for (int i = 0; i < ny; ++i) {
      Mat G(2 * N, n);
      Vec h(2 * N);
      for (int t = 0; t < N; ++t) {
        // y - C x - c <= eps  and  -(y - C x - c) <= eps
        G.row(2 * t) << -X.col(t).transpose(), -1.0, -1.0;
        h(2 * t) = -data.y(i, t);
        G.row(2 * t + 1) << X.col(t).transpose(), 1.0, -1.0;
        h(2 * t + 1) = data.y(i, t);
      }
      Vec c = Vec::Zero(n);
      c(n - 1) = 1.0;
      const qp::QpSolution sol = qp::solve_lp(c, G, h, Mat(), Vec(), qp::QpSettings{1e-10, 200, true});
      if (!sol.optimal()) throw NumericalError("output-map LP: " + qp::to_string(sol.status));
      out.C.row(i) = sol.x.head(nx).transpose();
    }
  }
  // with C settled, the best (c_w, eps_w) is the midrange and half-range
  const Mat E = data.y - out.C * X;
  out.w = estimate_disturbance(E, kappa).set;
  out.lp_value = out.w.eps_w.sum();
  return out;
}

}  // namespace rcisysid
