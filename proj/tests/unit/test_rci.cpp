#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rcisysid/error.hpp"
#include "rcisysid/rci.hpp"

using namespace rcisysid;

namespace {

Mat randn(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal;
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = scale * normal(rng);
  return m;
}

Vec v1(double a) { return Vec::Constant(1, a); }

ConstraintPolyhedron unconstrained(int n) {
  ConstraintPolyhedron p;
  p.H.resize(0, n);
  p.h.resize(0);
  return p;
}

// Two-state, two-vertex model near a stable LTI system with a small observer
// gain; the size QP is feasible with a comfortable margin.
struct Instance {
  QlpvModel m;
  DisturbanceSet w;
  RciSpec spec;
};

Instance make_instance(std::uint64_t seed, int M = 6) {
  std::mt19937_64 rng(seed);
  Mat A(2, 2);
  A << 0.7, 0.2, -0.1, 0.6;
  Mat B(2, 1);
  B << 0.5, 1.0;
  Mat C(1, 2);
  C << 1.0, 0.3;
  Instance in;
  in.m = QlpvModel::from_lti(A, B, C, SchedulingNet::random(2, 2, 1, 1, 3, false, rng));
  for (int i = 0; i < 2; ++i) {
    in.m.A[i] += randn(2, 2, rng, 0.05);
    in.m.B[i] += randn(2, 1, rng, 0.05);
    in.m.K[i] = randn(2, 1, rng, 0.2);
  }
  in.w = {v1(0.02), v1(0.05), 1.1};
  in.spec.tmpl = make_box_template(2, Mat::Identity(2, 2) * 1.5);
  in.spec.U = ConstraintPolyhedron::box(v1(-1.0), v1(1.0));
  in.spec.Y = ConstraintPolyhedron::box(v1(-2.0), v1(2.0));
  in.spec.M = M;
  return in;
}

struct Flat {
  static Vec pack(const QlpvModel& m, const DisturbanceSet& w) {
    std::vector<double> v;
    auto push = [&](const Mat& x) { v.insert(v.end(), x.data(), x.data() + x.size()); };
    for (const auto& a : m.A) push(a);
    for (const auto& b : m.B) push(b);
    for (const auto& k : m.K) push(k);
    push(m.C);
    push(w.c_w);
    push(w.eps_w);
    return Eigen::Map<Vec>(v.data(), static_cast<int>(v.size()));
  }
  static void unpack(const Vec& v, QlpvModel& m, DisturbanceSet& w) {
    int o = 0;
    auto pull = [&](Mat& x) {
      x = Eigen::Map<const Mat>(v.data() + o, x.rows(), x.cols());
      o += static_cast<int>(x.size());
    };
    for (auto& a : m.A) pull(a);
    for (auto& b : m.B) pull(b);
    for (auto& k : m.K) pull(k);
    pull(m.C);
    Mat c = w.c_w, e = w.eps_w;
    pull(c);
    pull(e);
    w.c_w = c.col(0);
    w.eps_w = e.col(0);
  }
  static Vec pack(const RGradient& g) {
    std::vector<double> v;
    auto push = [&](const Mat& x) { v.insert(v.end(), x.data(), x.data() + x.size()); };
    for (const auto& a : g.dA) push(a);
    for (const auto& b : g.dB) push(b);
    for (const auto& k : g.dK) push(k);
    push(g.dC);
    push(g.dc_w);
    push(g.deps_w);
    return Eigen::Map<Vec>(v.data(), static_cast<int>(v.size()));
  }
};

qp::QpSettings tight() { return qp::QpSettings{1e-9, 200, true}; }

}  // namespace

TEST(RciResiduals, ZeroModelUnitQ) {
  const auto m = QlpvModel::lti(Mat::Zero(2, 2), Mat::Zero(2, 1), Mat::Zero(1, 2));
  RciSpec spec;
  spec.tmpl = make_box_template(2, Mat::Identity(2, 2));
  spec.U = ConstraintPolyhedron::box(v1(-1), v1(1));
  spec.Y = ConstraintPolyhedron::box(v1(-1), v1(1));
  const DisturbanceSet w{v1(0), v1(0), 1.1};
  const auto r = rci_residuals(m, w, spec, Vec::Ones(4), Mat::Zero(1, 4));
  EXPECT_EQ(r.dynamics.maxCoeff(), -1.0);
  EXPECT_EQ(r.dynamics.minCoeff(), -1.0);
}

TEST(RciResiduals, DisturbanceLinearity) {
  auto in = make_instance(1);
  const Vec q = Vec::Ones(4);
  const Mat u = Mat::Zero(1, 4);
  const auto r1 = rci_residuals(in.m, in.w, in.spec, q, u);
  auto w2 = in.w;
  w2.eps_w *= 2.0;
  const auto r2 = rci_residuals(in.m, w2, in.spec, q, u);
  for (int i = 0; i < 2; ++i) {
    const Vec inc = (in.spec.tmpl.F * in.m.K[i]).cwiseAbs() * (in.w.kappa * in.w.eps_w);
    for (int k = 0; k < 4; ++k) {
      const Vec diff = r2.dynamics.col(i * 4 + k) - r1.dynamics.col(i * 4 + k);
      EXPECT_LE((diff - inc).cwiseAbs().maxCoeff(), 1e-14);
    }
  }
}

TEST(SolveR, SingleOutputVertexAtOrigin) {
  auto in = make_instance(2);
  in.w = {v1(0), v1(0), 1.1};
  for (auto& k : in.m.K) k.setZero();
  ConstraintPolyhedron Y;
  Y.H.resize(2, 1);
  Y.H << 1, -1;
  Y.h = Vec::Constant(2, 0.5);
  Y.vertices = Mat::Zero(1, 1);
  in.spec.Y = Y;
  const auto sol = solve_r(in.m, in.w, in.spec);
  ASSERT_TRUE(sol.feasible()) << qp::to_string(sol.status);
  EXPECT_NEAR(sol.r_value, 0.0, 1e-6);
  EXPECT_LE(sol.x_traj[0].cwiseAbs().maxCoeff(), 1e-4);
}

TEST(SolveR, ScalarReachableVerticesGiveZero) {
  // x+ = u, C = 1, M = 1, Y = [-1, 1], U unconstrained.
  const auto m = QlpvModel::lti(Mat::Zero(1, 1), Mat::Ones(1, 1), Mat::Ones(1, 1));
  RciSpec spec;
  spec.tmpl = make_box_template(1, Mat::Ones(1, 1));
  spec.U = unconstrained(1);
  spec.Y = ConstraintPolyhedron::box(v1(-1), v1(1));
  spec.M = 1;
  const DisturbanceSet w{v1(0), v1(0), 1.1};
  const auto sol = solve_r(m, w, spec);
  ASSERT_TRUE(sol.feasible());
  EXPECT_NEAR(sol.r_value, 0.0, 1e-6);
  for (int j = 0; j < 2; ++j) EXPECT_NEAR(sol.x_traj[j](0, 1), (*spec.Y.vertices)(0, j), 1e-4);
}

TEST(SolveR, ShrinkingInputSetNeverHelps) {
  auto in = make_instance(3, 10);
  double prev = 0.0;
  for (double scale : {1.0, 0.6, 0.3, 0.1}) {
    in.spec.U = ConstraintPolyhedron::box(v1(-scale), v1(scale));
    const auto sol = solve_r(in.m, in.w, in.spec);
    ASSERT_TRUE(sol.feasible());
    EXPECT_GE(sol.r_value, prev - 1e-6);
    prev = sol.r_value;
  }
}

TEST(SolveR, InfeasibleWhenDisturbanceExceedsOutputSet) {
  auto in = make_instance(4);
  in.w.eps_w = v1(5.0);
  const auto sol = solve_r(in.m, in.w, in.spec);
  EXPECT_FALSE(sol.feasible());
  EXPECT_TRUE(std::isinf(sol.r_value));
}

TEST(SolveR, IdempotentRecompute) {
  auto in = make_instance(5);
  const auto a = recompute_q(in.m, in.w, in.spec);
  const auto b = recompute_q(in.m, in.w, in.spec);
  ASSERT_TRUE(a.feasible());
  EXPECT_NEAR(a.r_value, b.r_value, 1e-8 * (1 + a.r_value));
}

// Residual audit and Monte-Carlo one-step invariance on many instances.
TEST(RciProperty, CertifiedAndInvariant) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  int certified = 0;
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const auto in = make_instance(seed, 8);
    const auto sol = solve_r(in.m, in.w, in.spec);
    if (!sol.feasible()) continue;
    ++certified;
    EXPECT_LE(rci_residuals(in.m, in.w, in.spec, sol.q, sol.vertex_inputs).max(), 1e-6);
    const Mat verts = in.spec.tmpl.vertices(sol.q);
    for (int k = 0; k < verts.cols(); ++k)
      for (int i = 0; i < in.m.np(); ++i)
        for (int s = 0; s < 100; ++s) {
          const Vec wv = in.w.c_w + in.w.kappa * in.w.eps_w * uni(rng);
          const Vec xn = in.m.A[i] * verts.col(k) + in.m.B[i] * sol.vertex_inputs.col(k) + in.m.K[i] * wv;
          EXPECT_LE((in.spec.tmpl.F * xn - sol.q).maxCoeff(), 1e-6);
          EXPECT_TRUE(in.spec.Y.contains(in.m.C * verts.col(k) + wv, 1e-6));
        }
  }
  EXPECT_GE(certified, 15);
}

TEST(RciProperty, ShrinkingSetNeverLowersDistance) {
  const auto in = make_instance(7, 10);
  const auto sol = solve_r(in.m, in.w, in.spec);
  ASSERT_TRUE(sol.feasible());
  double prev = tracking_distance(in.m, in.spec, sol.q);
  EXPECT_LE(prev, sol.r_value + 1e-5);
  for (double beta : {0.8, 0.5, 0.2, 0.05}) {
    const double d = tracking_distance(in.m, in.spec, beta * sol.q);
    EXPECT_GE(d, prev - 1e-6) << beta;
    prev = d;
  }
}

TEST(SizeL1, Sum) {
  EXPECT_EQ(size_l1(Vec::Ones(4)), 4.0);
  EXPECT_EQ(size_l1(Vec::Zero(4)), 0.0);
  Vec q(3);
  q << 1, -2, 0.5;
  EXPECT_EQ(size_l1(q), 3.5);
}

TEST(SolveR, L1ModeMinimizesSetSize) {
  auto in = make_instance(8);
  in.spec.mode = SizeMode::L1;
  const auto sol = solve_r(in.m, in.w, in.spec);
  ASSERT_TRUE(sol.feasible());
  EXPECT_NEAR(sol.r_value, size_l1(sol.q), 1e-6);
}

TEST(RGradient, MatchesFiniteDifferences) {
  for (std::uint64_t seed : {11u, 12u}) {
    auto in = make_instance(seed, 6);
    const auto sol = solve_r(in.m, in.w, in.spec, tight());
    ASSERT_TRUE(sol.feasible()) << qp::to_string(sol.status);
    const Vec g = Flat::pack(r_gradient(in.m, in.w, in.spec, sol));
    const Vec theta = Flat::pack(in.m, in.w);
    Vec fd(theta.size());
    const double h = 1e-5;
    for (int k = 0; k < theta.size(); ++k) {
      QlpvModel m = in.m;
      DisturbanceSet w = in.w;
      Vec tp = theta, tm = theta;
      tp(k) += h;
      tm(k) -= h;
      Flat::unpack(tp, m, w);
      const double fp = solve_r(m, w, in.spec, tight()).r_value;
      Flat::unpack(tm, m, w);
      const double fm = solve_r(m, w, in.spec, tight()).r_value;
      fd(k) = (fp - fm) / (2 * h);
    }
    EXPECT_LE((g - fd).norm() / std::max(1e-12, fd.norm()), 1e-3) << "seed " << seed << "\n"
                                                                   << g.transpose() << "\n"
                                                                   << fd.transpose();
  }
}

TEST(RGradient, InactiveDisturbanceHasNoEffect) {
  // With the output rows slack and K = 0, c_w only enters through inactive rows.
  auto in = make_instance(13);
  for (auto& k : in.m.K) k.setZero();
  in.spec.Y = ConstraintPolyhedron::box(v1(-2.0), v1(2.0));
  in.spec.tmpl = make_box_template(2, Mat::Identity(2, 2) * 0.1);
  // tiny template scale keeps the output rows far from active
  const auto sol = solve_r(in.m, in.w, in.spec, tight());
  ASSERT_TRUE(sol.feasible());
  const auto g = r_gradient(in.m, in.w, in.spec, sol);
  const auto res = rci_residuals(in.m, in.w, in.spec, sol.q, sol.vertex_inputs);
  if (res.output.maxCoeff() < -1e-3) {
    EXPECT_LE(g.dc_w.cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LE(g.deps_w.cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(InitialRci, ScalarStableSystem) {
  // x+ = 0.5 x + u, |u| <= 1, |y| <= 1, C = 1, no disturbance.
  const DisturbanceSet w{v1(0), v1(0), 1.1};
  const auto U = ConstraintPolyhedron::box(v1(-1), v1(1));
  const auto Y = ConstraintPolyhedron::box(v1(-1), v1(1));
  InitialRciSettings s;
  s.adam_iters = 200;
  s.lbfgs_iters = 300;
  const auto init = solve_initial_rci(Mat::Constant(1, 1, 0.5), Mat::Ones(1, 1), Mat::Ones(1, 1), w, U, Y, 5, s);
  EXPECT_LE(init.max_violation, 1e-6);
  // X(1) = [-sigma, sigma] fits inside Y and reaches close to its boundary
  EXPECT_LE(std::abs(init.sigma(0, 0)), 1.0 + 1e-6);
  EXPECT_GE(std::abs(init.sigma(0, 0)), 0.9);
  const auto m = QlpvModel::lti(Mat::Constant(1, 1, 0.5), Mat::Ones(1, 1), Mat::Ones(1, 1));
  RciSpec spec;
  spec.tmpl = init.tmpl;
  spec.U = U;
  spec.Y = Y;
  spec.M = 5;
  EXPECT_LE(rci_residuals(m, w, spec, Vec::Ones(2), init.vertex_inputs).max(), 1e-6);
}

TEST(InitialRci, DoubleIntegratorPassesAudit) {
  Mat A(2, 2), B(2, 1), C(1, 2);
  A << 1, 0.1, 0, 1;
  B << 0.005, 0.1;
  C << 1, 0;
  const DisturbanceSet w{v1(0), v1(0), 1.1};
  const auto U = ConstraintPolyhedron::box(v1(-1), v1(1));
  const auto Y = ConstraintPolyhedron::box(v1(-1), v1(1));
  InitialRciSettings s;
  s.adam_iters = 200;
  s.lbfgs_iters = 300;
  const auto init = solve_initial_rci(A, B, C, w, U, Y, 10, s);
  const auto m = QlpvModel::lti(A, B, C);
  RciSpec spec;
  spec.tmpl = init.tmpl;
  spec.U = U;
  spec.Y = Y;
  spec.M = 10;
  EXPECT_LE(rci_residuals(m, w, spec, Vec::Ones(4), init.vertex_inputs).max(), 1e-6);
  EXPECT_TRUE(std::isfinite(init.r_L));
}

TEST(InitialRci, DisturbanceTooLargeIsInfeasible) {
  const DisturbanceSet w{v1(0), v1(2.0), 1.1};
  const auto U = ConstraintPolyhedron::box(v1(-1), v1(1));
  const auto Y = ConstraintPolyhedron::box(v1(-1), v1(1));
  EXPECT_THROW(solve_initial_rci(Mat::Constant(1, 1, 0.5), Mat::Ones(1, 1), Mat::Ones(1, 1), w, U, Y, 5),
               InfeasibleError);
}
