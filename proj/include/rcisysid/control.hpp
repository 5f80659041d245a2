#pragma once

#include <vector>

#include "rcisysid/geometry.hpp"
#include "rcisysid/model.hpp"
#include "rcisysid/plant.hpp"

namespace rcisysid {

struct DareResult {
  Mat P;
  Mat K;  // optimal input u = -K x
  int iterations = 0;
};

/// Riccati fixed-point iteration P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA
/// from P = Q. Throws NumericalError when it does not settle within
/// max_iter iterations (relative change below tol) or blows up.
DareResult solve_dare(const Mat& A, const Mat& B, const Mat& Q, const Mat& R, double tol = 1e-9,
                      int max_iter = 500);

struct LqrWeights {
  double qx = 1.0;   // state weight, times I
  double qq = 10.0;  // integrator weight, times I
  double r = 1.0;    // input weight, times I
};

/// u = T_x x + T_q qi for the integrator-augmented pair
/// ([A 0; C I], [B; 0]).
struct TrackingGain {
  Mat T_x;
  Mat T_q;
};

TrackingGain lqr_gain(const Mat& A, const Mat& B, const Mat& C, const LqrWeights& w = {});

struct FilterResult {
  Vec u;
  bool active = false;  // u differs from u_des
};

/// Projection of u_des onto {u in U : F x+(u) <= q}, with
/// x+(u) = A(p)x + B(p)u + L(p)(y - Cx) and p = p(x). L defaults to the
/// observer gains K. Needs a scheduling net that ignores the input. Throws
/// InfeasibleError when the set is empty.
FilterResult safety_filter(const QlpvModel& m, const TemplatePolytope& tmpl, const Vec& q,
                           const ConstraintPolyhedron& U, const Vec& x, const Vec& y, const Vec& u_des,
                           const MatList* gains = nullptr);

/// The identified model used as the plant; outputs y = Cx.
class ModelPlant : public Plant {
 public:
  ModelPlant(const QlpvModel& m, const Vec& x0) : m_(m), x_(x0) {}
  Vec output() const override { return m_.C * x_; }
  void apply(const Vec& u) override { x_ = m_.step(x_, u); }
  const Vec& state() const { return x_; }

 private:
  QlpvModel m_;
  Vec x_;
};

struct ClosedLoopConfig {
  LqrWeights weights;
  Vec x0;                           // observer start, model coordinates; zero when empty
  Scaler scaler;                    // physical <-> model units; identity when empty
  bool clamp_integrator = false;
  double integrator_limit = 1e3;
  const MatList* filter_gains = nullptr;
};

/// Per-step record, physical units for y, y_ref, u, u_des.
struct ClosedLoopLog {
  Mat y, y_ref, u, u_des;  // channels x T
  Mat y_model;             // C x_t mapped to physical units
  Mat x;                   // n_x x (T + 1), observer states
  std::vector<bool> filter_active;
  std::vector<bool> lqr_fallback;  // Riccati failed, u_des = 0
  double max_set_violation = 0.0;  // max_t max(F x_t - q)
};

/// Runs T steps of observer + integrator + LQR + safety filter against the
/// plant. `y_ref` holds one physical reference per column (the last column
/// repeats past its end). Throws InfeasibleError with the step index on an
/// invariance breach, NumericalError on a non-finite plant output.
ClosedLoopLog closed_loop(Plant& plant, const QlpvModel& m, const TemplatePolytope& tmpl, const Vec& q,
                          const ConstraintPolyhedron& U, const Mat& y_ref, int T,
                          const ClosedLoopConfig& cfg = {});

}  // namespace rcisysid
