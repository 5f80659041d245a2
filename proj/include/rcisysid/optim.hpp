#pragma once

#include <functional>
#include <vector>

#include "rcisysid/linalg.hpp"

namespace rcisysid::optim {

/// Returns f(x) and writes the gradient when `grad` is non-null. Returning
/// +inf marks x as inadmissible; the optimizers then reject the step.
using Objective = std::function<double(const Vec& x, Vec* grad)>;

/// Called after every accepted iterate; returning false stops the run.
using Monitor = std::function<bool(int iter, const Vec& x, double f)>;

struct AdamSettings {
  int iters = 1000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct LbfgsSettings {
  int max_iter = 5000;
  int memory = 10;
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_linesearch = 25;
  /// Stop when |g|_inf <= grad_tol or the relative decrease over one step is
  /// below f_tol.
  double grad_tol = 1e-9;
  double f_tol = 1e-13;
};

struct Result {
  Vec x;
  double f = 0.0;
  int iterations = 0;
  int evaluations = 0;
  int rejected = 0;
  std::vector<double> history;  // f at every accepted iterate
};

/// Adam. A step landing on an inadmissible point is undone and the learning
/// rate halved. Returns the best admissible iterate seen.
Result adam(const Objective& f, const Vec& x0, const AdamSettings& s, const Monitor& monitor = {});

/// L-BFGS with a strong-Wolfe line search. f(x0) must be finite. The
/// objective is non-increasing over accepted steps.
Result lbfgs(const Objective& f, const Vec& x0, const LbfgsSettings& s, const Monitor& monitor = {});

}  // namespace rcisysid::optim
