#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "rcisysid/linalg.hpp"

namespace rcisysid {

inline double swish(double a) { return a / (1.0 + std::exp(-a)); }

/// Derivative of a * sigmoid(a).
inline double swish_grad(double a) {
  const double sig = 1.0 / (1.0 + std::exp(-a));
  return sig * (1.0 + a * (1.0 - sig));
}

struct DenseLayer {
  Mat W;
  Vec b;
};

/// Scalar-output feedforward network: swish hidden layers, linear output
/// w_out' h + b_out.
struct BranchNet {
  std::vector<DenseLayer> hidden;
  Vec w_out;
  double b_out = 0.0;

  double eval(const Vec& input) const;
  bool is_constant(double threshold) const { return w_out.norm() < threshold; }
};

/// Softmax scheduling function p(x, u) onto the unit simplex.
///
/// Branches 0..n_p-2 produce logits N_i(x, u); the last component has the
/// fixed logit 0, so p_{n_p} = 1 / (1 + sum_j exp N_j).
struct SchedulingNet {
  int n_p = 1;
  int nx = 0;
  int nu = 0;
  bool uses_input = true;
  std::vector<BranchNet> branches;

  int input_dim() const { return uses_input ? nx + nu : nx; }

  /// Network with `hidden_layers` swish layers of `width` units per branch,
  /// Gaussian weights scaled by 1/sqrt(fan_in) and zero biases.
  static SchedulingNet random(int n_p, int nx, int nu, int hidden_layers, int width, bool uses_input,
                              std::mt19937_64& rng);

  Vec net_input(const Vec& x, const Vec& u) const;
  Vec logits(const Vec& x, const Vec& u) const;
  Vec schedule(const Vec& x, const Vec& u) const;
};

/// Numerically safe softmax over [logits; 0].
Vec softmax_with_zero(const Vec& logits);

/// qLPV model x+ = A(p)x + B(p)u, y = Cx with p from the scheduling net and
/// observer gains K(p).
struct QlpvModel {
  MatList A;
  MatList B;
  MatList K;
  Mat C;
  SchedulingNet net;
  Vec x0;

  int nx() const { return static_cast<int>(C.cols()); }
  int ny() const { return static_cast<int>(C.rows()); }
  int nu() const { return B.empty() ? 0 : static_cast<int>(B.front().cols()); }
  int np() const { return static_cast<int>(A.size()); }

  /// Single-vertex model with zero observer gain and zero initial state.
  static QlpvModel lti(const Mat& A, const Mat& B, const Mat& C);

  /// Replicates (A, B) over n_p vertices with a fresh scheduling net.
  static QlpvModel from_lti(const Mat& A, const Mat& B, const Mat& C, const SchedulingNet& net);

  Mat A_of(const Vec& p) const;
  Mat B_of(const Vec& p) const;
  Mat K_of(const Vec& p) const;
  Mat A_nominal() const;
  Mat B_nominal() const;

  Vec step(const Vec& x, const Vec& u) const;
  Vec step_observer(const Vec& z, const Vec& u, const Vec& y) const;

  /// Throws ConfigError when list lengths or matrix shapes disagree.
  void validate() const;
};

struct DisturbanceSet {
  Vec c_w;
  Vec eps_w;
  double kappa = 1.1;
};

/// Per-channel affine scaling of inputs and outputs.
struct Scaler {
  Vec u_mean;
  Vec u_std;
  Vec y_mean;
  Vec y_std;

  static Scaler identity(int nu, int ny);
};

/// Input/output record. Columns are time samples: u is n_u x N, y is n_y x N.
struct Dataset {
  Mat u;
  Mat y;
  double dt = 1.0;

  int size() const { return static_cast<int>(u.cols()); }
  int nu() const { return static_cast<int>(u.rows()); }
  int ny() const { return static_cast<int>(y.rows()); }

  void validate() const;
  Dataset slice(int begin, int count) const;
};

/// Empirical mean and standard deviation per channel. Throws ConfigError
/// for constant channels.
Scaler fit_scaler(const Dataset& data);
Dataset apply_scaler(const Dataset& data, const Scaler& scaler);
/// Maps scaled outputs (n_y x N) back to physical units.
Mat unscale_outputs(const Mat& y_scaled, const Scaler& scaler);

enum class SimMode { Prediction, Observer };

struct Trajectory {
  Mat x;      // n_x x (N + 1)
  Mat y_hat;  // n_y x N, C x_t
};

/// Prediction mode starts at m.x0; observer mode starts at z_0 = 0 and is
/// driven by the measured outputs.
Trajectory simulate(const QlpvModel& m, const Dataset& data, SimMode mode);

struct DisturbanceEstimate {
  DisturbanceSet set;
  std::vector<int> argmax;  // per channel, lowest index on ties
  std::vector<int> argmin;
};

/// Box covering residual columns: c_w = (max + min) / 2, eps_w = (max - min) / 2.
DisturbanceEstimate estimate_disturbance(const Mat& residuals, double kappa);

/// Best fit ratio in percent, averaged over output channels.
double bfr(const Mat& y, const Mat& y_hat);

/// 1 + max_i alpha_i / eps_i; +inf when some eps_i is zero.
double kappa_lower_bound(const Vec& alpha, const Vec& eps_w);

}  // namespace rcisysid
