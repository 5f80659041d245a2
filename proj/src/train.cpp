#include "rcisysid/train.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "rcisysid/error.hpp"
#include "rcisysid/optim.hpp"

namespace rcisysid {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double smooth_norm(double sq) { return std::sqrt(sq + kGroupDelta * kGroupDelta) - kGroupDelta; }

// Forward pass through one branch keeping pre-activations and layer outputs.
struct BranchCache {
  std::vector<Vec> a;
  std::vector<Vec> h;  // h[0] is the input
};

double branch_forward(const BranchNet& b, const Vec& in, BranchCache& c) {
  c.a.resize(b.hidden.size());
  c.h.resize(b.hidden.size() + 1);
  c.h[0] = in;
  for (size_t l = 0; l < b.hidden.size(); ++l) {
    c.a[l] = b.hidden[l].W * c.h[l] + b.hidden[l].b;
    c.h[l + 1] = c.a[l].unaryExpr([](double v) { return swish(v); });
  }
  return b.w_out.dot(c.h.back()) + b.b_out;
}

void branch_backward(const BranchNet& b, const BranchCache& c, double dout, BranchNet& g, Vec& din) {
  g.w_out += dout * c.h.back();
  g.b_out += dout;
  Vec dh = dout * b.w_out;
  for (int l = static_cast<int>(b.hidden.size()) - 1; l >= 0; --l) {
    const Vec da = dh.cwiseProduct(c.a[l].unaryExpr([](double v) { return swish_grad(v); }));
    g.hidden[l].W += da * c.h[l].transpose();
    g.hidden[l].b += da;
    dh = b.hidden[l].W.transpose() * da;
  }
  din = std::move(dh);
}

// Wraps an objective so that numerical failures mark the point inadmissible.
optim::Objective guarded(std::function<double(const Vec&, Vec*)> f) {
  return [f = std::move(f)](const Vec& x, Vec* g) {
    try {
      const double v = f(x, g);
      if (!std::isfinite(v) || (g && !g->allFinite())) return kInf;
      return v;
    } catch (const NumericalError&) {
      return kInf;
    }
  };
}

double bfr_or_zero(const QlpvModel& m, const Dataset* data, const Vec& x0) {
  if (!data || data->size() == 0) return 0.0;
  try {
    return prediction_bfr(m, *data, x0);
  } catch (const NumericalError&) {
    return 0.0;
  }
}

// Adam followed by L-BFGS, logging every `log_every` accepted iterates.
Vec run_optimizers(const optim::Objective& f, const Vec& x0, const TrainConfig& cfg, bool use_lbfgs,
                   const std::function<TrainLogRow(const Vec&)>& describe, std::vector<TrainLogRow>& log) {
  int offset = 0;
  auto monitor = [&](int it, const Vec& x, double fx) {
    const int iter = offset + it + 1;
    if (cfg.log_every > 0 && iter % cfg.log_every == 0) {
      TrainLogRow row = describe(x);
      row.iter = iter;
      row.loss = fx;
      log.push_back(row);
    }
    return true;
  };
  Vec x = x0;
  {
    TrainLogRow row = describe(x);
    row.iter = 0;
    row.loss = f(x, nullptr);
    log.push_back(row);
  }
  if (cfg.adam_iters > 0) {
    optim::AdamSettings as;
    as.iters = cfg.adam_iters;
    as.lr = cfg.adam_lr;
    x = optim::adam(f, x, as, monitor).x;
    offset += cfg.adam_iters;
  }
  if (use_lbfgs && cfg.lbfgs_iters > 0) {
    optim::LbfgsSettings ls;
    ls.max_iter = cfg.lbfgs_iters;
    x = optim::lbfgs(f, x, ls, monitor).x;
  }
  return x;
}

}  // namespace

void TrainConfig::validate() const {
  if (adam_iters < 0 || lbfgs_iters < 0) throw ConfigError("iteration counts must be >= 0");
  if (!(adam_lr > 0.0)) throw ConfigError("adam_lr must be positive");
  if (!(kappa > 1.0)) throw ConfigError("kappa must be > 1");
  if (!(tau >= 0.0)) throw ConfigError("tau must be >= 0");
  if (!(kappa_x >= 0.0) || !(kappa_p >= 0.0)) throw ConfigError("group lasso weights must be >= 0");
  if (!(rho_ineq >= 0.0)) throw ConfigError("rho_ineq must be >= 0");
  if (!(zero_group_threshold >= 0.0)) throw ConfigError("zero_group_threshold must be >= 0");
}

ParamPacker::ParamPacker(const QlpvModel& shape, ParamMask mask) : mask_(mask) {
  QlpvModel copy = shape;
  visit(copy, [&](double*, Eigen::Index n) { size_ += static_cast<int>(n); });
}

template <class F>
void ParamPacker::visit(QlpvModel& m, F&& f) const {
  if (mask_.A)
    for (auto& a : m.A) f(a.data(), a.size());
  if (mask_.B)
    for (auto& b : m.B) f(b.data(), b.size());
  if (mask_.K)
    for (auto& k : m.K) f(k.data(), k.size());
  if (mask_.C) f(m.C.data(), m.C.size());
  if (mask_.net)
    for (auto& br : m.net.branches) {
      for (auto& l : br.hidden) {
        f(l.W.data(), l.W.size());
        f(l.b.data(), l.b.size());
      }
      f(br.w_out.data(), br.w_out.size());
      f(&br.b_out, 1);
    }
  if (mask_.x0) f(m.x0.data(), m.x0.size());
}

Vec ParamPacker::pack(const QlpvModel& m) const {
  Vec v(size_);
  int o = 0;
  visit(const_cast<QlpvModel&>(m), [&](double* p, Eigen::Index n) {
    std::copy(p, p + n, v.data() + o);
    o += static_cast<int>(n);
  });
  return v;
}

void ParamPacker::unpack(const Vec& v, QlpvModel& m) const {
  if (v.size() != size_) throw ConfigError("parameter vector has the wrong length");
  int o = 0;
  visit(m, [&](double* p, Eigen::Index n) {
    std::copy(v.data() + o, v.data() + o + n, p);
    o += static_cast<int>(n);
  });
}

QlpvModel zeros_like(const QlpvModel& m) {
  QlpvModel g = m;
  for (auto& a : g.A) a.setZero();
  for (auto& b : g.B) b.setZero();
  for (auto& k : g.K) k.setZero();
  g.C.setZero();
  for (auto& br : g.net.branches) {
    for (auto& l : br.hidden) {
      l.W.setZero();
      l.b.setZero();
    }
    br.w_out.setZero();
    br.b_out = 0.0;
  }
  g.x0.setZero();
  return g;
}

void adjoint_gradient(const QlpvModel& m, const Dataset& data, SimMode mode, const Mat& states,
                      const Mat& d_residual, QlpvModel& grad) {
  const int N = data.size(), nx = m.nx(), np = m.np();
  if (states.rows() != nx || states.cols() < N || d_residual.rows() != m.ny() || d_residual.cols() != N)
    throw ConfigError("adjoint_gradient: dimension mismatch");
  const bool obs = mode == SimMode::Observer;
  std::vector<BranchCache> cache(np > 1 ? np - 1 : 0);
  Vec logits(np > 1 ? np - 1 : 0), gp(np), din;
  Vec lam = Vec::Zero(nx);  // adjoint of the state after the current step
  for (int t = N - 1; t >= 0; --t) {
    const auto s = states.col(t);
    const auto u = data.u.col(t);
    const Vec e = data.y.col(t) - m.C * s;
    const auto dr = d_residual.col(t);
    Vec ds = -m.C.transpose() * dr;
    grad.C.noalias() -= dr * s.transpose();

    Vec p = Vec::Ones(1);
    if (np > 1) {
      const Vec in = m.net.net_input(s, u);
      for (int i = 0; i + 1 < np; ++i) logits(i) = branch_forward(m.net.branches[i], in, cache[i]);
      p = softmax_with_zero(logits);
    }
    Vec Kt_lam = Vec::Zero(m.ny());
    for (int i = 0; i < np; ++i) {
      grad.A[i].noalias() += p(i) * lam * s.transpose();
      grad.B[i].noalias() += p(i) * lam * u.transpose();
      const Vec At_lam = m.A[i].transpose() * lam;
      ds += p(i) * At_lam;
      gp(i) = At_lam.dot(s) + lam.dot(m.B[i] * u);
      if (obs) {
        grad.K[i].noalias() += p(i) * lam * e.transpose();
        const Vec kl = m.K[i].transpose() * lam;
        Kt_lam += p(i) * kl;
        gp(i) += kl.dot(e);
      }
    }
    if (obs) {
      ds -= m.C.transpose() * Kt_lam;
      grad.C.noalias() -= Kt_lam * s.transpose();
    }
    if (np > 1) {
      const double mean = p.dot(gp);
      for (int j = 0; j + 1 < np; ++j) {
        const double dl = p(j) * (gp(j) - mean);
        if (dl == 0.0) continue;
        branch_backward(m.net.branches[j], cache[j], dl, grad.net.branches[j], din);
        ds += din.head(nx);
      }
    }
    if (!ds.allFinite()) throw NumericalError("non-finite adjoint at time index " + std::to_string(t));
    lam = std::move(ds);
  }
  if (!obs) grad.x0 += lam;
}

double prediction_mse(const QlpvModel& m, const Dataset& data, QlpvModel* grad, Mat* residuals) {
  const Trajectory tr = simulate(m, data, SimMode::Prediction);
  const Mat E = data.y - tr.y_hat;
  const int N = data.size();
  const double mse = E.squaredNorm() / N;
  if (grad) adjoint_gradient(m, data, SimMode::Prediction, tr.x, (2.0 / N) * E, *grad);
  if (residuals) *residuals = E;
  return mse;
}

Vec lti_group_norms(const Mat& A, const Mat& B, const Mat& C) {
  const int n = static_cast<int>(A.rows());
  Vec out(n);
  for (int i = 0; i < n; ++i) {
    const double sq = A.row(i).squaredNorm() + A.col(i).squaredNorm() - A(i, i) * A(i, i) +
                      B.row(i).squaredNorm() + C.col(i).squaredNorm();
    out(i) = std::sqrt(sq);
  }
  return out;
}

int count_active_branches(const SchedulingNet& net, double threshold) {
  int n = 0;
  for (const auto& b : net.branches) n += b.is_constant(threshold) ? 0 : 1;
  return n;
}

double prediction_bfr(const QlpvModel& m, const Dataset& data, const Vec& x0) {
  QlpvModel c = m;
  c.x0 = x0;
  return bfr(data.y, simulate(c, data, SimMode::Prediction).y_hat);
}

// ---------------------------------------------------------------- LTI stage

namespace {

// Smoothed group lasso over the LTI state groups; adds its gradient.
double lti_lasso(const Mat& A, const Mat& B, const Mat& C, double weight, Mat* gA, Mat* gB, Mat* gC) {
  const int n = static_cast<int>(A.rows());
  const Vec norms = lti_group_norms(A, B, C);
  double val = 0.0;
  Vec coef(n);
  for (int i = 0; i < n; ++i) {
    const double sq = norms(i) * norms(i);
    val += smooth_norm(sq);
    coef(i) = weight / std::sqrt(sq + kGroupDelta * kGroupDelta);
  }
  if (gA) {
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) (*gA)(i, j) += (i == j ? coef(i) : coef(i) + coef(j)) * A(i, j);
    for (int i = 0; i < n; ++i) {
      gB->row(i) += coef(i) * B.row(i);
      gC->col(i) += coef(i) * C.col(i);
    }
  }
  return weight * val;
}

}  // namespace

LtiFit fit_lti(const Dataset& train, int nx_hat, const TrainConfig& cfg, const Dataset* test) {
  cfg.validate();
  train.validate();
  if (nx_hat < 1) throw ConfigError("state order must be >= 1");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal;
  auto gaussian = [&](int r, int c, double s) {
    Mat m(r, c);
    for (int j = 0; j < c; ++j)
      for (int i = 0; i < r; ++i) m(i, j) = s * normal(rng);
    return m;
  };
  const int nu = train.nu(), ny = train.ny();
  Mat A0 = 0.5 * Mat::Identity(nx_hat, nx_hat) + gaussian(nx_hat, nx_hat, 0.05);
  Mat B0 = gaussian(nx_hat, nu, 0.1);
  Mat C0 = gaussian(ny, nx_hat, 0.1);
  QlpvModel m = QlpvModel::lti(A0, B0, C0);
  const ParamPacker packer(m, ParamMask{true, true, false, true, false, false});

  auto f = guarded([&](const Vec& th, Vec* g) {
    QlpvModel mm = m;
    packer.unpack(th, mm);
    QlpvModel gm = zeros_like(mm);
    double v = prediction_mse(mm, train, g ? &gm : nullptr);
    v += lti_lasso(mm.A[0], mm.B[0], mm.C, cfg.kappa_x, g ? &gm.A[0] : nullptr, g ? &gm.B[0] : nullptr,
                   g ? &gm.C : nullptr);
    if (g) *g = packer.pack(gm);
    return v;
  });
  auto describe = [&](const Vec& th) {
    TrainLogRow row;
    QlpvModel mm = m;
    packer.unpack(th, mm);
    try {
      row.mse = prediction_mse(mm, train, nullptr);
      row.reg = lti_lasso(mm.A[0], mm.B[0], mm.C, cfg.kappa_x, nullptr, nullptr, nullptr);
      row.bfr = prediction_bfr(mm, train, mm.x0);
    } catch (const NumericalError&) {
      row.mse = kInf;
    }
    return row;
  };

  LtiFit out;
  const Vec th = run_optimizers(f, packer.pack(m), cfg, true, describe, out.log);
  packer.unpack(th, m);

  out.group_norms = lti_group_norms(m.A[0], m.B[0], m.C);
  std::vector<int> keep;
  for (int i = 0; i < nx_hat; ++i)
    if (out.group_norms(i) >= cfg.zero_group_threshold) keep.push_back(i);
  out.nx = static_cast<int>(keep.size());
  out.A.resize(out.nx, out.nx);
  out.B.resize(out.nx, nu);
  out.C.resize(ny, out.nx);
  for (int a = 0; a < out.nx; ++a) {
    for (int b = 0; b < out.nx; ++b) out.A(a, b) = m.A[0](keep[a], keep[b]);
    out.B.row(a) = m.B[0].row(keep[a]);
    out.C.col(a) = m.C.col(keep[a]);
  }

  out.report.reg_groups = lti_lasso(m.A[0], m.B[0], m.C, cfg.kappa_x, nullptr, nullptr, nullptr);
  if (out.nx == 0) {
    const Mat zero = Mat::Zero(ny, train.size());
    out.report.mse = train.y.squaredNorm() / train.size();
    out.report.bfr_train = bfr(train.y, zero);
    out.report.bfr_test = test ? bfr(test->y, Mat::Zero(ny, test->size())) : 0.0;
  } else {
    const QlpvModel pruned = QlpvModel::lti(out.A, out.B, out.C);
    out.report.mse = prediction_mse(pruned, train, nullptr);
    out.report.bfr_train = prediction_bfr(pruned, train, pruned.x0);
    out.report.bfr_test = bfr_or_zero(pruned, test, pruned.x0);
  }
  out.report.rci_penalty = 0.0;
  out.report.total = out.report.mse + out.report.reg_groups;
  return out;
}

// --------------------------------------------------------------- qLPV stage

namespace {

// Squared violations of the qLPV-stage inequality rows, scaled by rho. When
// gradients are requested, adds rho-scaled gradients to gm (A, B, C), to the
// residual seed dE and to the vertex inputs.
QlpvPenalty penalty_rows(const QlpvModel& m, const Mat& E, const TemplatePolytope& tmpl, const Mat& uk,
                         const DisturbanceSet& w, const ConstraintPolyhedron& U, const ConstraintPolyhedron& Y,
                         double rho, QlpvModel* gm, Mat* dE, Mat* du) {
  QlpvPenalty out;
  auto viol = [&](double v) {
    if (v > out.max_violation) out.max_violation = v;
  };
  for (int t = 0; t < E.cols(); ++t)
    for (int c = 0; c < E.rows(); ++c) {
      const double r = E(c, t) - w.c_w(c);
      const double a = std::max(0.0, r - w.eps_w(c));
      const double b = std::max(0.0, -r - w.eps_w(c));
      viol(std::max(a, b));
      out.residual += rho * (a * a + b * b);
      if (dE) (*dE)(c, t) += 2.0 * rho * (a - b);
    }
  const Vec ones = Vec::Ones(tmpl.nf());
  const Vec kew = w.kappa * w.eps_w;
  for (int k = 0; k < tmpl.nv(); ++k) {
    const Vec xk = tmpl.vertex_maps[k] * ones;
    const auto u = uk.col(k);
    for (int i = 0; i < m.np(); ++i) {
      const Vec g = (tmpl.F * (m.A[i] * xk + m.B[i] * u) - ones).cwiseMax(0.0);
      if (g.size()) viol(g.maxCoeff());
      out.invariance += rho * g.squaredNorm();
      if (gm) {
        const Vec lam = tmpl.F.transpose() * (2.0 * rho * g);
        gm->A[i].noalias() += lam * xk.transpose();
        gm->B[i].noalias() += lam * u.transpose();
        du->col(k) += m.B[i].transpose() * lam;
      }
    }
    const Vec gy = (Y.H * (m.C * xk + w.c_w) + Y.H.cwiseAbs() * kew - Y.h).cwiseMax(0.0);
    if (gy.size()) viol(gy.maxCoeff());
    out.output += rho * gy.squaredNorm();
    if (gm) gm->C.noalias() += Y.H.transpose() * (2.0 * rho * gy) * xk.transpose();
    if (U.H.rows()) {
      const Vec gu = (U.H * u - U.h).cwiseMax(0.0);
      viol(gu.maxCoeff());
      out.input += rho * gu.squaredNorm();
      if (du) du->col(k) += U.H.transpose() * (2.0 * rho * gu);
    }
  }
  return out;
}

double branch_lasso(const SchedulingNet& net, double weight, QlpvModel* gm) {
  double v = 0.0;
  for (size_t i = 0; i < net.branches.size(); ++i) {
    const Vec& wo = net.branches[i].w_out;
    const double sq = wo.squaredNorm();
    v += smooth_norm(sq);
    if (gm) gm->net.branches[i].w_out += weight / std::sqrt(sq + kGroupDelta * kGroupDelta) * wo;
  }
  return weight * v;
}

}  // namespace

QlpvPenalty qlpv_penalty(const QlpvModel& m, const Mat& residuals, const TemplatePolytope& tmpl,
                         const Mat& vertex_inputs, const DisturbanceSet& w_L, const ConstraintPolyhedron& U,
                         const ConstraintPolyhedron& Y) {
  return penalty_rows(m, residuals, tmpl, vertex_inputs, w_L, U, Y, 1.0, nullptr, nullptr, nullptr);
}

QlpvFit fit_qlpv_with_rci(const Dataset& train, const Mat& A_L, const Mat& B_L, const Mat& C_L,
                          const TemplatePolytope& tmpl, const Mat& vertex_inputs, const DisturbanceSet& w_L,
                          const ConstraintPolyhedron& U, const ConstraintPolyhedron& Y, const NetConfig& netcfg,
                          const TrainConfig& cfg, const Dataset* test) {
  cfg.validate();
  train.validate();
  const int nx = static_cast<int>(A_L.rows()), nu = train.nu();
  if (nx < 1) throw ConfigError("qLPV stage needs at least one state");
  if (tmpl.nx() != nx || vertex_inputs.rows() != nu || vertex_inputs.cols() != tmpl.nv())
    throw ConfigError("qLPV stage: template or vertex inputs do not match the LTI model");
  std::mt19937_64 rng(cfg.seed);
  const SchedulingNet net =
      SchedulingNet::random(netcfg.n_p, nx, nu, netcfg.hidden_layers, netcfg.width, netcfg.uses_input, rng);
  QlpvModel m = QlpvModel::from_lti(A_L, B_L, C_L, net);
  const ParamPacker packer(m, ParamMask{true, true, false, true, true, true});
  const int nth = packer.size(), nuk = static_cast<int>(vertex_inputs.size());
  const bool penalized = cfg.rho_ineq > 0.0;

  Vec th0(nth + (penalized ? nuk : 0));
  th0.head(nth) = packer.pack(m);
  if (penalized) th0.tail(nuk) = Eigen::Map<const Vec>(vertex_inputs.data(), nuk);

  auto split = [&](const Vec& th, QlpvModel& mm, Mat& uk) {
    packer.unpack(th.head(nth), mm);
    uk = penalized ? Mat(Eigen::Map<const Mat>(th.data() + nth, nu, tmpl.nv())) : vertex_inputs;
  };

  // Returns (mse, reg, penalty) and fills the gradient when asked.
  auto terms = [&](const Vec& th, Vec* g) {
    QlpvModel mm = m;
    Mat uk;
    split(th, mm, uk);
    const Trajectory tr = simulate(mm, train, SimMode::Prediction);
    const Mat E = train.y - tr.y_hat;
    const int N = train.size();
    const double mse = E.squaredNorm() / N;
    QlpvModel gm = zeros_like(mm);
    Mat dE = (2.0 / N) * E;
    Mat du = Mat::Zero(nu, tmpl.nv());
    const double reg = branch_lasso(mm.net, cfg.kappa_p, g ? &gm : nullptr);
    double pen = 0.0;
    if (penalized) {
      const auto p = penalty_rows(mm, E, tmpl, uk, w_L, U, Y, cfg.rho_ineq, g ? &gm : nullptr,
                                  g ? &dE : nullptr, g ? &du : nullptr);
      pen = p.residual + p.invariance + p.output + p.input;
    }
    if (g) {
      adjoint_gradient(mm, train, SimMode::Prediction, tr.x, dE, gm);
      g->resize(th.size());
      g->head(nth) = packer.pack(gm);
      if (penalized) g->tail(nuk) = Eigen::Map<const Vec>(du.data(), nuk);
    }
    return std::array<double, 3>{mse, reg, pen};
  };
  auto f = guarded([&](const Vec& th, Vec* g) {
    const auto t = terms(th, g);
    return t[0] + t[1] + t[2];
  });
  auto describe = [&](const Vec& th) {
    TrainLogRow row;
    try {
      const auto t = terms(th, nullptr);
      row.mse = t[0];
      row.reg = t[1];
      row.penalty = t[2];
      QlpvModel mm = m;
      Mat uk;
      split(th, mm, uk);
      row.bfr = prediction_bfr(mm, train, mm.x0);
    } catch (const NumericalError&) {
      row.mse = kInf;
    }
    return row;
  };

  QlpvFit out;
  const Vec th = run_optimizers(f, th0, cfg, true, describe, out.log);
  split(th, m, out.vertex_inputs);
  // exact zeros for pruned branches
  for (auto& b : m.net.branches)
    if (b.is_constant(cfg.zero_group_threshold)) b.w_out.setZero();
  Vec th_final = th;
  th_final.head(nth) = packer.pack(m);
  const auto t = terms(th_final, nullptr);
  out.model = m;
  out.report.mse = t[0];
  out.report.reg_groups = t[1];
  out.report.rci_penalty = t[2];
  out.report.total = t[0] + t[1] + t[2];
  out.report.bfr_train = prediction_bfr(m, train, m.x0);
  out.report.bfr_test = bfr_or_zero(m, test, Vec::Zero(nx));
  return out;
}

// --------------------------------------------------------- concurrent stage

DisturbanceEstimate observer_disturbance(const QlpvModel& m, const Dataset& data, double kappa, Mat* states) {
  const Trajectory tr = simulate(m, data, SimMode::Observer);
  if (states) *states = tr.x;
  return estimate_disturbance(data.y - tr.y_hat, kappa);
}

double concurrent_objective(const QlpvModel& m, const Dataset& train, const RciSpec& spec, double tau,
                            double kappa, QlpvModel* grad, double* r_out) {
  const double mse = prediction_mse(m, train, grad);
  if (r_out) *r_out = kInf;
  if (tau == 0.0 && !r_out) return mse;
  Mat Z;
  const auto est = observer_disturbance(m, train, kappa, &Z);
  const RciSolution sol = solve_r(m, est.set, spec);
  if (r_out) *r_out = sol.r_value;
  if (tau == 0.0) return mse;
  if (!sol.feasible()) return kInf;
  if (grad) {
    const RGradient rg = r_gradient(m, est.set, spec, sol);
    for (int i = 0; i < m.np(); ++i) {
      grad->A[i] += tau * rg.dA[i];
      grad->B[i] += tau * rg.dB[i];
      grad->K[i] += tau * rg.dK[i];
    }
    grad->C += tau * rg.dC;
    Mat dres = Mat::Zero(m.ny(), train.size());
    for (int c = 0; c < m.ny(); ++c) {
      dres(c, est.argmax[c]) += 0.5 * tau * (rg.dc_w(c) + rg.deps_w(c));
      dres(c, est.argmin[c]) += 0.5 * tau * (rg.dc_w(c) - rg.deps_w(c));
    }
    adjoint_gradient(m, train, SimMode::Observer, Z, dres, *grad);
  }
  return mse + tau * sol.r_value;
}

ConcurrentFit fit_concurrent(const Dataset& train, const QlpvModel& init, const RciSpec& spec,
                             const TrainConfig& cfg, const Dataset* test) {
  cfg.validate();
  train.validate();
  spec.validate(init);
  QlpvModel m = init;
  double r0 = kInf;
  concurrent_objective(m, train, spec, cfg.tau, cfg.kappa, nullptr, &r0);
  if (!std::isfinite(r0))
    throw InfeasibleError("concurrent stage: size QP infeasible at the initial model");
  const ParamPacker packer(m, ParamMask{true, true, true, true, true, true});

  auto f = guarded([&](const Vec& th, Vec* g) {
    QlpvModel mm = m;
    packer.unpack(th, mm);
    QlpvModel gm = zeros_like(mm);
    const double v = concurrent_objective(mm, train, spec, cfg.tau, cfg.kappa, g ? &gm : nullptr);
    if (g) *g = packer.pack(gm);
    return v;
  });
  auto describe = [&](const Vec& th) {
    TrainLogRow row;
    QlpvModel mm = m;
    packer.unpack(th, mm);
    try {
      row.mse = concurrent_objective(mm, train, spec, 0.0, cfg.kappa, nullptr, &row.r);
      row.bfr = prediction_bfr(mm, train, mm.x0);
    } catch (const NumericalError&) {
      row.mse = kInf;
    }
    return row;
  };

  ConcurrentFit out;
  const Vec th = run_optimizers(f, packer.pack(m), cfg, false, describe, out.log);
  packer.unpack(th, m);
  out.model = m;
  out.w = observer_disturbance(m, train, cfg.kappa).set;
  out.rci = solve_r(m, out.w, spec);
  out.report.mse = prediction_mse(m, train, nullptr);
  out.report.r_value = out.rci.r_value;
  out.report.total = out.report.mse + (cfg.tau > 0.0 ? cfg.tau * out.rci.r_value : 0.0);
  out.report.bfr_train = prediction_bfr(m, train, m.x0);
  out.report.bfr_test = bfr_or_zero(m, test, Vec::Zero(m.nx()));
  return out;
}

}  // namespace rcisysid
