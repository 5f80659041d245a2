#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rcisysid/error.hpp"
#include "rcisysid/reduce.hpp"

using namespace rcisysid;

namespace {

Mat randn(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal;
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = scale * normal(rng);
  return m;
}

QlpvModel random_model(std::mt19937_64& rng, int nx, int nu, int ny, int np, double a_scale = 0.3) {
  QlpvModel m;
  m.net = SchedulingNet::random(np, nx, nu, 1, 4, true, rng);
  std::normal_distribution<double> normal;
  for (auto& b : m.net.branches) {
    b.w_out *= 3.0;
    b.b_out = 0.5 * normal(rng);
  }
  for (int i = 0; i < np; ++i) {
    m.A.push_back(randn(nx, nx, rng, a_scale));
    m.B.push_back(randn(nx, nu, rng, 0.5));
    m.K.push_back(Mat::Zero(nx, ny));
  }
  m.C = randn(ny, nx, rng, 0.7);
  m.x0 = randn(nx, 1, rng, 0.3).col(0);
  return m;
}

Dataset input_data(std::mt19937_64& rng, int nu, int ny, int N) {
  Dataset d;
  d.u = randn(nu, N, rng);
  d.y = Mat::Zero(ny, N);
  return d;
}

// Outputs of the model itself plus a little noise.
Dataset model_data(const QlpvModel& m, std::mt19937_64& rng, int N, double noise) {
  Dataset d = input_data(rng, m.nu(), m.ny(), N);
  d.y = simulate(m, d, SimMode::Prediction).y_hat + randn(m.ny(), N, rng, noise);
  return d;
}

Mat scheduled_A(const QlpvModel& m, const Vec& x, const Vec& u) { return m.A_of(m.net.schedule(x, u)); }

// Independent restricted simulation: explicit exp over the kept logits.
double restricted_mse_oracle(const QlpvModel& m, const Dataset& d, const std::vector<int>& keep) {
  Vec x = m.x0;
  double sse = 0.0;
  for (int t = 0; t < d.size(); ++t) {
    sse += (d.y.col(t) - m.C * x).squaredNorm();
    const Vec in = m.net.net_input(x, d.u.col(t));
    double den = 1.0;
    Mat A = Mat::Zero(m.nx(), m.nx()), B = Mat::Zero(m.nx(), m.nu());
    std::vector<double> w;
    for (int i : keep) w.push_back(std::exp(m.net.branches[i].eval(in)));
    for (double v : w) den += v;
    for (size_t k = 0; k < keep.size(); ++k) {
      A += w[k] / den * m.A[keep[k]];
      B += w[k] / den * m.B[keep[k]];
    }
    A += m.A.back() / den;
    B += m.B.back() / den;
    x = A * x + B * d.u.col(t);
  }
  return sse / d.size();
}

}  // namespace

TEST(Lump, ConstantMiddleBranchAveragesWithTerminal) {
  std::mt19937_64 rng(1);
  QlpvModel m = random_model(rng, 2, 1, 1, 3);
  m.net.branches[1].w_out.setZero();
  m.net.branches[1].b_out = 0.0;
  const QlpvModel l = lump_constant_branches(m);
  ASSERT_EQ(l.np(), 2);
  EXPECT_LE((l.A[1] - 0.5 * (m.A[1] + m.A[2])).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((l.B[1] - 0.5 * (m.B[1] + m.B[2])).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(l.net.branches[0].b_out, m.net.branches[0].b_out - std::log(2.0), 1e-15);
}

TEST(Lump, NoConstantBranchesIsIdentity) {
  std::mt19937_64 rng(2);
  const QlpvModel m = random_model(rng, 2, 1, 1, 3);
  const QlpvModel l = lump_constant_branches(m);
  ASSERT_EQ(l.np(), 3);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(l.A[i], m.A[i]);
  EXPECT_EQ(l.net.branches[0].b_out, m.net.branches[0].b_out);
}

TEST(Lump, InputOutputEquivalent) {
  std::mt19937_64 rng(3);
  QlpvModel m = random_model(rng, 3, 2, 1, 5);
  m.net.branches[1].w_out.setZero();
  m.net.branches[1].b_out = 0.4;
  m.net.branches[3].w_out.setZero();
  m.net.branches[3].b_out = -0.7;
  const QlpvModel l = lump_constant_branches(m);
  ASSERT_EQ(l.np(), 3);
  for (int s = 0; s < 50; ++s) {
    const Vec x = randn(3, 1, rng).col(0), u = randn(2, 1, rng).col(0);
    EXPECT_LE((scheduled_A(m, x, u) - scheduled_A(l, x, u)).cwiseAbs().maxCoeff(), 1e-12);
  }
  const Dataset d = input_data(rng, 2, 1, 50);
  const Trajectory a = simulate(m, d, SimMode::Prediction), b = simulate(l, d, SimMode::Prediction);
  EXPECT_LE((a.x - b.x).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SelectIndices, CandidateCountAndFullOrder) {
  std::mt19937_64 rng(4);
  const QlpvModel m = random_model(rng, 2, 1, 1, 3);
  const Dataset d = model_data(m, rng, 100, 0.05);
  const ReductionPlan p2 = select_indices(m, d, 2);
  EXPECT_EQ(p2.candidates, 2);
  EXPECT_EQ(p2.retained.size(), 1u);

  const ReductionPlan p3 = select_indices(m, d, 3);
  EXPECT_EQ(p3.candidates, 1);
  EXPECT_EQ(p3.retained, (std::vector<int>{0, 1}));
  const Mat e = d.y - simulate(m, d, SimMode::Prediction).y_hat;
  EXPECT_NEAR(p3.mse, e.squaredNorm() / d.size(), 1e-14);
  EXPECT_EQ(p3.factors.rows(), 2);
  EXPECT_EQ(p3.factors.cols(), 100);
}

TEST(SelectIndices, ScoresMatchIndependentSimulator) {
  std::mt19937_64 rng(5);
  const QlpvModel m = random_model(rng, 2, 1, 1, 5);
  const Dataset d = model_data(m, rng, 120, 0.05);
  for (int target = 1; target <= 5; ++target) {
    const ReductionPlan p = select_indices(m, d, target);
    EXPECT_NEAR(p.mse, restricted_mse_oracle(m, d, p.retained), 1e-12);
    // brute force over every set of that size
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> idx(target - 1);
    for (int mask = 0; mask < 16; ++mask) {
      if (__builtin_popcount(mask) != target - 1) continue;
      std::vector<int> keep;
      for (int i = 0; i < 4; ++i)
        if (mask & (1 << i)) keep.push_back(i);
      best = std::min(best, restricted_mse_oracle(m, d, keep));
    }
    EXPECT_NEAR(p.mse, best, 1e-12);
  }
}

TEST(SelectIndices, TiesGoToLexicographicallySmallest) {
  std::mt19937_64 rng(6);
  QlpvModel m = random_model(rng, 2, 1, 1, 4);
  m.net.branches[2] = m.net.branches[1] = m.net.branches[0];
  m.A[2] = m.A[1] = m.A[0];
  m.B[2] = m.B[1] = m.B[0];
  const Dataset d = model_data(m, rng, 60, 0.05);
  EXPECT_EQ(select_indices(m, d, 2).retained, (std::vector<int>{0}));
  EXPECT_EQ(select_indices(m, d, 3).retained, (std::vector<int>{0, 1}));
  EXPECT_THROW(select_indices(m, d, 5), ConfigError);
}

namespace {

// Contractive model with X(1) invariant under zero vertex inputs.
struct CiCase {
  QlpvModel m;
  Dataset d;
  TemplatePolytope tmpl;
  Vec q;
  Mat vin;
};

CiCase ci_case(std::uint64_t seed, int np) {
  std::mt19937_64 rng(seed);
  CiCase c;
  c.m = random_model(rng, 2, 1, 1, np, 0.2);
  c.d = model_data(c.m, rng, 300, 0.02);
  c.tmpl = make_box_template(2, Mat::Identity(2, 2));
  c.q = Vec::Ones(4);
  c.vin = Mat::Zero(1, c.tmpl.nv());
  for (int i = 0; i < np; ++i)
    for (int j = 0; j < c.tmpl.nv(); ++j) {
      const Vec x = c.m.A[i] * c.tmpl.vertex_maps[j] * c.q;
      if ((c.tmpl.F * x - c.q).maxCoeff() > 0) c.m.A[i] *= 0.5;
    }
  return c;
}

double ci_violation(const TemplatePolytope& tmpl, const Vec& q, const Mat& vin, const ReducedMatrices& r) {
  double worst = -1e300;
  for (size_t k = 0; k < r.A.size(); ++k)
    for (int j = 0; j < tmpl.nv(); ++j) {
      const Vec x = r.A[k] * tmpl.vertex_maps[j] * q + r.B[k] * vin.col(j);
      worst = std::max(worst, (tmpl.F * x - q).maxCoeff());
    }
  return worst;
}

}  // namespace

TEST(ReduceMatrices, FullOrderRecoversModel) {
  CiCase c = ci_case(7, 3);
  const ReductionPlan plan = select_indices(c.m, c.d, 3);
  const ReducedMatrices r = reduce_matrices(plan, c.m, c.tmpl, c.q, c.vin);
  EXPECT_NEAR(r.objective, 0.0, 1e-7);
  for (int k = 0; k < 3; ++k) {
    EXPECT_LE((r.A[k] - c.m.A[k]).cwiseAbs().maxCoeff(), 1e-4);
    EXPECT_LE((r.B[k] - c.m.B[k]).cwiseAbs().maxCoeff(), 1e-4);
  }
  for (int k = 0; k < 2; ++k) EXPECT_NEAR(r.b_L(k), c.m.net.branches[k].b_out, 1e-4);
}

TEST(ReduceMatrices, UnitBiasLeavesMatricesUnchanged) {
  CiCase c = ci_case(8, 2);
  c.m.net.branches[0].b_out = 0.0;
  const ReductionPlan plan = select_indices(c.m, c.d, 2);
  const ReducedMatrices r = reduce_matrices(plan, c.m, c.tmpl, c.q, c.vin);
  EXPECT_NEAR(r.b_L(0), 0.0, 1e-4);
  const QlpvModel red = apply_reduction(c.m, plan, r);
  const Trajectory a = simulate(c.m, c.d, SimMode::Prediction), b = simulate(red, c.d, SimMode::Prediction);
  EXPECT_LE((a.x - b.x).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(ReduceMatrices, KeepsInvarianceAndBoundsFractionalObjective) {
  for (std::uint64_t seed : {9, 10, 11}) {
    CiCase c = ci_case(seed, 5);
    for (int target : {1, 2, 3}) {
      const ReductionPlan plan = select_indices(c.m, c.d, target);
      const ReducedMatrices r = reduce_matrices(plan, c.m, c.tmpl, c.q, c.vin);
      ASSERT_EQ(static_cast<int>(r.A.size()), target);
      EXPECT_LE(ci_violation(c.tmpl, c.q, c.vin, r), 1e-6);
      EXPECT_GE(r.objective + 1e-9, r.fractional);
      EXPECT_GE(r.fractional, 0.0);
    }
  }
}

TEST(RefitOutputMap, ResidualFreeData) {
  std::mt19937_64 rng(12);
  QlpvModel m = random_model(rng, 2, 1, 1, 2);
  Dataset d = input_data(rng, 1, 1, 80);
  d.y = simulate(m, d, SimMode::Prediction).y_hat;
  const OutputRefit r = refit_output_map(m, d, 1.1);
  EXPECT_LE(r.lp_value, 1e-6);
  EXPECT_LE((r.C - m.C).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_DOUBLE_EQ(r.w.kappa, 1.1);
}

TEST(RefitOutputMap, SinglePointIsExact) {
  std::mt19937_64 rng(13);
  QlpvModel m = random_model(rng, 2, 1, 1, 2);
  Dataset d = input_data(rng, 1, 1, 1);
  d.y(0, 0) = 3.0;
  const OutputRefit r = refit_output_map(m, d, 1.1);
  EXPECT_EQ(r.w.eps_w(0), 0.0);
}

TEST(RefitOutputMap, FixedCMatchesMidrangeOracle) {
  std::mt19937_64 rng(14);
  QlpvModel m = random_model(rng, 2, 1, 2, 2);
  Dataset d = model_data(m, rng, 200, 0.3);
  const Mat C = randn(2, 2, rng);
  const OutputRefit r = refit_output_map(m, d, 1.1, &C);
  const Mat E = d.y - C * simulate(m, d, SimMode::Prediction).x.leftCols(200);
  double oracle = 0.0;
  for (int i = 0; i < 2; ++i) oracle += 0.5 * (E.row(i).maxCoeff() - E.row(i).minCoeff());
  EXPECT_NEAR(r.lp_value, oracle, 1e-9);
}

TEST(RefitOutputMap, FreeCMatchesScalarGridSearch) {
  std::mt19937_64 rng(15);
  QlpvModel m = random_model(rng, 1, 1, 1, 2);
  Dataset d = model_data(m, rng, 150, 0.3);
  const OutputRefit r = refit_output_map(m, d, 1.1);
  const Vec x = simulate(m, d, SimMode::Prediction).x.row(0).head(150).transpose();
  double best = std::numeric_limits<double>::infinity();
  for (double c = r.C(0, 0) - 0.5; c <= r.C(0, 0) + 0.5; c += 1e-5) {
    const Vec e = d.y.row(0).transpose() - c * x;
    best = std::min(best, 0.5 * (e.maxCoeff() - e.minCoeff()));
  }
  EXPECT_LE(r.lp_value, best + 1e-7);
  EXPECT_GE(r.lp_value, best - 1e-3);
}

TEST(ReduceMatrices, WithoutInvarianceRowsFitsAtLeastAsWell) {
  CiCase c = ci_case(16, 5);
  const ReductionPlan plan = select_indices(c.m, c.d, 2);
  const ReducedMatrices with = reduce_matrices(plan, c.m, c.tmpl, c.q, c.vin);
  const ReducedMatrices free = reduce_matrices(plan, c.m, c.tmpl, Vec(), Mat());
  EXPECT_LE(free.objective, with.objective + 1e-9);
}

TEST(ReduceMatrices, ReweightingNeverWorsensNormalizedObjective) {
  for (std::uint64_t seed : {17, 18}) {
    CiCase c = ci_case(seed, 5);
    const ReductionPlan plan = select_indices(c.m, c.d, 2);
    const ReducedMatrices plain = reduce_matrices(plan, c.m, c.tmpl, c.q, c.vin);
    const ReducedMatrices refined = reduce_matrices(plan, c.m, c.tmpl, c.q, c.vin, 5);
    EXPECT_LE(refined.fractional, plain.fractional + 1e-12);
    EXPECT_LE(ci_violation(c.tmpl, c.q, c.vin, refined), 1e-6);
    EXPECT_GE(refined.objective + 1e-9, refined.fractional);
  }
}
